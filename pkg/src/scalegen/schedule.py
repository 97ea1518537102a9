"""Coarse-to-fine resolution schedules shared by the quantizer and the model."""

from __future__ import annotations

from dataclasses import dataclass, field

from .common import InvalidArgument

# 10-level schedule used throughout for 16x16 latent grids (256 final tokens).
VAR256_SIDES = (1, 2, 3, 4, 5, 6, 8, 10, 13, 16)


@dataclass(frozen=True)
class ScaleSchedule:
    """Ordered (H_k, W_k) resolutions, coarsest to finest."""

    resolutions: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.resolutions) < 1:
            raise InvalidArgument("schedule needs at least one scale")
        prev = (0, 0)
        for h, w in self.resolutions:
            if h < 1 or w < 1:
                raise InvalidArgument(f"scale sizes must be >= 1, got {(h, w)}")
            if h < prev[0] or w < prev[1]:
                raise InvalidArgument("scale resolutions must be non-decreasing")
            prev = (h, w)

    @property
    def num_scales(self) -> int:
        return len(self.resolutions)

    @property
    def token_counts(self) -> tuple[int, ...]:
        return tuple(h * w for h, w in self.resolutions)

    @property
    def total_tokens(self) -> int:
        return sum(self.token_counts)

    @property
    def final(self) -> tuple[int, int]:
        return self.resolutions[-1]

    def offsets(self) -> tuple[int, ...]:
        """Start offset of each scale's chunk in the concatenated sequence."""
        out, acc = [], 0
        for n in self.token_counts:
            out.append(acc)
            acc += n
        return tuple(out)

    def spec_text(self) -> str:
        return ",".join(f"{h}x{w}" for h, w in self.resolutions)

    @staticmethod
    def parse(text: str) -> "ScaleSchedule":
        """Parse an inline spec like "1x1,2x2,4x4"."""
        res = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            try:
                h, _, w = part.partition("x")
                res.append((int(h), int(w)))
            except ValueError as e:
                raise InvalidArgument(f"bad schedule entry {part!r}") from e
        return ScaleSchedule(tuple(res))

    @staticmethod
    def square(sides) -> "ScaleSchedule":
        return ScaleSchedule(tuple((s, s) for s in sides))

    @staticmethod
    def pow2(final_side: int) -> "ScaleSchedule":
        """1x1, 2x2, 4x4, ... up to final_side (which must be a power of two)."""
        if final_side < 1 or final_side & (final_side - 1):
            raise InvalidArgument(f"pow2 schedule needs a power-of-two side, got {final_side}")
        sides, s = [], 1
        while s <= final_side:
            sides.append(s)
            s *= 2
        return ScaleSchedule.square(sides)

    @staticmethod
    def preset(name: str, grid: int | None = None) -> "ScaleSchedule":
        if name == "toy4":
            return ScaleSchedule.square((1, 2, 3, 4))
        if name == "var256":
            return ScaleSchedule.square(VAR256_SIDES)
        if name == "pow2":
            if grid is None:
                raise InvalidArgument("pow2 preset needs the final grid side")
            return ScaleSchedule.pow2(grid)
        if "x" in name:
            return ScaleSchedule.parse(name)
        raise InvalidArgument(f"unknown schedule preset {name!r}")
