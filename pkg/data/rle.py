"""Run-length masks: row-major, alternating runs starting with the zero-run."""

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class RLE(BaseModel):
    model_config = ConfigDict(extra="forbid")

    size: tuple[int, int]
    counts: list[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_counts(self) -> "RLE":
        h, w = self.size
        if h < 0 or w < 0:
            raise ValueError(f"negative mask size {self.size}")
        if any(c < 0 for c in self.counts):
            raise ValueError("run lengths must be non-negative")
        total = sum(self.counts)
        if total != h * w:
            raise ValueError(f"RLE counts sum to {total}, expected {h * w}")
        return self

    def area(self) -> int:
        return sum(self.counts[1::2])


def rle_encode(mask: np.ndarray) -> RLE:
    mask = np.asarray(mask)
    h, w = mask.shape
    pixels = (mask.reshape(-1) > 0).astype(np.int8)
    if pixels.size == 0:
        return RLE(size=(h, w), counts=[])
    # run boundaries where the value flips, starting from an implicit leading zero
    padded = np.concatenate([[0], pixels, [1 - pixels[-1]]])
    flips = np.flatnonzero(padded[1:] != padded[:-1])
    counts = np.diff(np.concatenate([[0], flips]))
    return RLE(size=(h, w), counts=[int(c) for c in counts])


def rle_decode(rle: RLE) -> np.ndarray:
    h, w = rle.size
    values = np.zeros(len(rle.counts), dtype=np.uint8)
    values[1::2] = 1
    flat = np.repeat(values, rle.counts)
    return flat.reshape(h, w)
