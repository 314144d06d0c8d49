"""Activation tape with byte accounting.

A tape holds the intermediate values one forward pass needs for its backward.
Every save is charged to a :class:`TapeMeter`, which tracks live and peak bytes
so the constant-activation-memory property can be measured directly.
"""

from __future__ import annotations

import numpy as np


class TapeMeter:
    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def free(self, nbytes: int) -> None:
        self.live -= nbytes

    def reset_peak(self) -> None:
        self.peak = self.live


class Tape:
    """Named saved tensors for exactly one forward pass.

    ``enabled=False`` makes ``save`` a no-op; the forward-only pass of chunked
    training uses that to discard activations as it goes.
    """

    def __init__(self, meter: TapeMeter | None = None, enabled: bool = True) -> None:
        self.meter = meter if meter is not None else TapeMeter()
        self.enabled = enabled
        self._saved: dict[str, np.ndarray] = {}

    def save(self, key: str, value: np.ndarray) -> None:
        if not self.enabled:
            return
        if key in self._saved:
            self.meter.free(self._saved[key].nbytes)
        # copy so the tape never aliases storage owned by someone else (e.g. cache pages)
        arr = np.array(value, copy=True)
        self._saved[key] = arr
        self.meter.alloc(arr.nbytes)

    def __getitem__(self, key: str) -> np.ndarray:
        return self._saved[key]

    def __contains__(self, key: str) -> bool:
        return key in self._saved

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self._saved.values())

    def release(self) -> None:
        for arr in self._saved.values():
            self.meter.free(arr.nbytes)
        self._saved.clear()
