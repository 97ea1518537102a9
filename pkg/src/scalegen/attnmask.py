"""Block-structured attention masks over the scale-concatenated sequence.

Masks are kept as block structure only; nothing here materializes an N x N
boolean table. The test-oracle materialization lives in the verification
module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .common import InvalidArgument
from .schedule import ScaleSchedule

BLOCK_DIAGONAL = "block-diagonal"
BLOCK_CAUSAL = "block-causal"
DENSE = "dense"
KINDS = (BLOCK_DIAGONAL, BLOCK_CAUSAL, DENSE)


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Which (query, key) pairs a scale-structured sequence may attend over."""

    kind: str
    block_sizes: tuple[int, ...]
    seq_len: int = field(init=False)
    nnz: int = field(init=False)
    block_ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown mask kind {self.kind!r}")
        if not self.block_sizes or any(b < 1 for b in self.block_sizes):
            raise InvalidArgument(f"bad block sizes {self.block_sizes}")
        n = sum(self.block_sizes)
        ids = np.repeat(np.arange(len(self.block_sizes)), self.block_sizes)
        ids.setflags(write=False)
        object.__setattr__(self, "seq_len", n)
        object.__setattr__(self, "nnz", _nnz(self.kind, self.block_sizes))
        object.__setattr__(self, "block_ids", ids)

    def allows(self, query_block: int, key_block: int) -> bool:
        if self.kind == DENSE:
            return True
        if self.kind == BLOCK_CAUSAL:
            return key_block <= query_block
        return key_block == query_block

    def element_mask(self, q_lo: int, q_hi: int, k_lo: int, k_hi: int) -> np.ndarray:
        """Allowed pairs for a query/key range, from block ids (not N x N)."""
        bq = self.block_ids[q_lo:q_hi, None]
        bk = self.block_ids[None, k_lo:k_hi]
        if self.kind == DENSE:
            return np.ones((q_hi - q_lo, k_hi - k_lo), dtype=bool)
        if self.kind == BLOCK_CAUSAL:
            return bk <= bq
        return bk == bq

    def to_bytes(self) -> bytes:
        return json.dumps({"kind": self.kind, "blocks": list(self.block_sizes)}).encode()

    @staticmethod
    def from_bytes(data: bytes) -> "AttentionMask":
        obj = json.loads(data.decode())
        return AttentionMask(obj["kind"], tuple(obj["blocks"]))


def _nnz(kind: str, blocks: tuple[int, ...]) -> int:
    if kind == DENSE:
        return sum(blocks) ** 2
    if kind == BLOCK_DIAGONAL:
        return sum(b * b for b in blocks)
    total, prefix = 0, 0
    for b in blocks:
        prefix += b
        total += b * prefix
    return total


def build_mask(schedule: ScaleSchedule | tuple[int, ...], kind: str) -> AttentionMask:
    """Mask for a schedule: queries in scale k see scales <= k (block-causal)
    or only scale k (block-diagonal)."""
    if isinstance(schedule, ScaleSchedule):
        blocks = schedule.token_counts
    else:
        blocks = tuple(int(b) for b in schedule)
    return AttentionMask(kind, blocks)


def sparsity_report(mask: AttentionMask) -> dict:
    """Density plus work multipliers against dense and block-causal patterns."""
    n2 = mask.seq_len**2
    causal_nnz = _nnz(BLOCK_CAUSAL, mask.block_sizes)
    return {
        "kind": mask.kind,
        "blocks": list(mask.block_sizes),
        "seq_len": mask.seq_len,
        "nnz": mask.nnz,
        "density": mask.nnz / n2,
        "multiplier_vs_dense": n2 / mask.nnz,
        "multiplier_vs_block_causal": causal_nnz / mask.nnz,
    }


def sequence_length(schedule: ScaleSchedule) -> dict:
    """Total token count and its ratio over plain next-token prediction."""
    n = schedule.total_tokens
    finest = schedule.token_counts[-1]
    return {
        "resolutions": list(schedule.resolutions),
        "total_tokens": n,
        "next_token_tokens": finest,
        "ratio_vs_next_token": n / finest,
    }
