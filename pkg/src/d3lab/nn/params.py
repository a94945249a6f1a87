"""Flat parameter storage with named segments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Segment:
    layer: int
    role: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass
class ParamVector:
    """One contiguous float64 vector; ``layout`` maps (layer, role) to a slice.

    Views returned by :meth:`view` alias the underlying storage, so in-place
    optimizer updates on ``params`` are immediately visible to the model.
    """

    params: np.ndarray
    layout: list[Segment] = field(default_factory=list)

    @classmethod
    def allocate(cls, shapes: list[tuple[int, str, tuple]]) -> "ParamVector":
        layout = []
        offset = 0
        for layer, role, shape in shapes:
            seg = Segment(layer, role, offset, tuple(shape))
            layout.append(seg)
            offset += seg.size
        return cls(np.zeros(offset, dtype=np.float64), layout)

    def __len__(self) -> int:
        return self.params.size

    def view(self, seg: Segment, arr: np.ndarray | None = None) -> np.ndarray:
        base = self.params if arr is None else arr
        return base[seg.offset : seg.offset + seg.size].reshape(seg.shape)

    def segment(self, layer: int, role: str) -> Segment:
        for seg in self.layout:
            if seg.layer == layer and seg.role == role:
                return seg
        raise KeyError((layer, role))

    def check_layout(self) -> None:
        pos = 0
        for seg in sorted(self.layout, key=lambda s: s.offset):
            if seg.offset != pos:
                raise ValueError(f"layout gap/overlap at offset {seg.offset}")
            pos += seg.size
        if pos != self.params.size:
            raise ValueError("layout does not cover the parameter vector")

    def copy(self) -> "ParamVector":
        return ParamVector(self.params.copy(), list(self.layout))
