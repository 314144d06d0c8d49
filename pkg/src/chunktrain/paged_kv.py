"""Paged storage for the KV cache and its gradients.

Pages are fixed-size blocks of ``page_size`` token slots, each its own array in
an arena that only grows by whole pages. Layers map logical page indices to
arena slots through a page table, so appending never moves existing data.
Gradient pages mirror key/value pages and are allocated on first scatter.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from chunktrain.errors import ResidencyError, ShapeError
from chunktrain.model import ModelConfig

DEVICE = "device"
HOST = "host"


class PagedCache:
    def __init__(self, config: ModelConfig, default_tier: str = DEVICE) -> None:
        self.config = config
        self.n_layers = config.n_layers
        self.page_size = config.page_size
        self.n_kv_heads = config.n_kv_heads
        self.head_dim = config.head_dim
        self.dtype = config.dtype
        self.default_tier = default_tier

        self.page_table: list[list[int]] = [[] for _ in range(self.n_layers)]
        self.filled = [0] * self.n_layers
        # arena, indexed by slot id
        self._k: list[np.ndarray] = []
        self._v: list[np.ndarray] = []
        self._kavg: list[np.ndarray] = []
        self._free: list[int] = []
        self._grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._grad_free: list[tuple[np.ndarray, np.ndarray]] = []
        self.tier: dict[int, str] = {}
        # pages whose grad page was written since they became resident
        self.dirty: set[int] = set()
        self.reallocs = 0
        self.copied_bytes = 0

    # -- geometry -----------------------------------------------------------

    @property
    def page_shape(self) -> tuple[int, int, int]:
        return (self.page_size, self.n_kv_heads, self.head_dim)

    @property
    def width(self) -> int:
        return np.dtype(self.dtype).itemsize

    @property
    def kv_page_bytes(self) -> int:
        """Bytes of one page's keys plus values."""
        return 2 * self.page_size * self.n_kv_heads * self.head_dim * self.width

    @property
    def grad_page_bytes(self) -> int:
        return self.kv_page_bytes

    def n_pages(self, layer: int) -> int:
        return len(self.page_table[layer])

    def slot(self, layer: int, page: int) -> int:
        self._check_layer(layer)
        table = self.page_table[layer]
        if not 0 <= page < len(table):
            raise IndexError(f"layer {layer} has no page {page} ({len(table)} pages)")
        return table[page]

    def valid_slots(self, layer: int, page: int) -> int:
        """Number of filled token slots in a page."""
        return min(self.page_size, self.filled[layer] - page * self.page_size)

    def page_address(self, layer: int, page: int) -> int:
        """Data pointer of a key page (used to show pages never move)."""
        return self._k[self.slot(layer, page)].ctypes.data

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range [0, {self.n_layers})")

    # -- allocation ---------------------------------------------------------

    def _alloc_page(self) -> int:
        if self._free:
            s = self._free.pop()
            self._k[s].fill(0)
            self._v[s].fill(0)
            self._kavg[s].fill(0)
        else:
            s = len(self._k)
            self._k.append(np.zeros(self.page_shape, dtype=self.dtype))
            self._v.append(np.zeros(self.page_shape, dtype=self.dtype))
            self._kavg.append(np.zeros(self.page_shape[1:], dtype=self.dtype))
        self.tier[s] = self.default_tier
        return s

    def reset(self) -> None:
        """Return every page and gradient page to the free lists."""
        for table in self.page_table:
            for s in table:
                self._free.append(s)
                self.tier.pop(s, None)
            table.clear()
        self.zero_grads()
        self.filled = [0] * self.n_layers
        self.dirty.clear()

    def zero_grads(self) -> None:
        for pair in self._grads.values():
            self._grad_free.append(pair)
        self._grads.clear()

    # -- writes -------------------------------------------------------------

    def append_chunk(self, layer: int, K: np.ndarray, V: np.ndarray) -> tuple[int, int]:
        """Write K, V ([t, kv_heads, head_dim]) after the last filled slot.

        Returns the global slot interval ``[start, end)``. Appends are
        write-through: they do not require the tail page to be device-resident.
        """
        self._check_layer(layer)
        if K.shape != V.shape or K.shape[1:] != self.page_shape[1:]:
            raise ShapeError(f"append_chunk: K {K.shape}, V {V.shape}, page rows {self.page_shape[1:]}")
        start = self.filled[layer]
        pos = start
        end = start + K.shape[0]
        table = self.page_table[layer]
        P = self.page_size
        while pos < end:
            page, off = divmod(pos, P)
            if page == len(table):
                table.append(self._alloc_page())
            s = table[page]
            n = min(P - off, end - pos)
            src = slice(pos - start, pos - start + n)
            self._k[s][off : off + n] = K[src]
            self._v[s][off : off + n] = V[src]
            valid = off + n
            self._kavg[s] = self._k[s][:valid].mean(axis=0)
            pos += n
        self.filled[layer] = end
        return start, end

    # -- residency ----------------------------------------------------------

    def is_resident(self, layer: int, page: int) -> bool:
        return self.tier[self.slot(layer, page)] == DEVICE

    def set_tier(self, layer: int, page: int, tier: str) -> None:
        s = self.slot(layer, page)
        self.tier[s] = tier
        if tier == HOST:
            self.dirty.discard(s)

    def _require_resident(self, layer: int, pages: Iterable[int], what: str) -> None:
        for p in pages:
            if self.tier[self.slot(layer, p)] != DEVICE:
                raise ResidencyError(f"{what}: layer {layer} page {p} is not device-resident")

    # -- reads --------------------------------------------------------------

    def _mask(self, layer: int, page_ids: Sequence[int]) -> np.ndarray:
        P = self.page_size
        mask = np.zeros(len(page_ids) * P, dtype=bool)
        for i, p in enumerate(page_ids):
            mask[i * P : i * P + self.valid_slots(layer, p)] = True
        return mask

    def gather_pages(self, layer: int, page_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Contiguous copies of the given pages, in the given order, plus a validity mask."""
        self._check_layer(layer)
        page_ids = list(page_ids)
        if not page_ids:
            empty = np.zeros((0,) + self.page_shape[1:], dtype=self.dtype)
            return empty, empty.copy(), np.zeros(0, dtype=bool)
        self._require_resident(layer, page_ids, "gather_pages")
        slots = [self.slot(layer, p) for p in page_ids]
        K = np.concatenate([self._k[s] for s in slots], axis=0)
        V = np.concatenate([self._v[s] for s in slots], axis=0)
        return K, V, self._mask(layer, page_ids)

    def page_mean_keys(self, layer: int, page_ids: Sequence[int] | None = None) -> np.ndarray:
        """Per-page mean key over valid slots, ``[n, kv_heads, head_dim]``.

        These representatives are pinned metadata maintained at append time,
        so reading them needs no residency.
        """
        self._check_layer(layer)
        if page_ids is None:
            page_ids = range(self.n_pages(layer))
        page_ids = list(page_ids)
        if not page_ids:
            return np.zeros((0,) + self.page_shape[1:], dtype=self.dtype)
        return np.stack([self._kavg[self.slot(layer, p)] for p in page_ids])

    # -- gradients ----------------------------------------------------------

    def has_grad(self, layer: int, page: int) -> bool:
        return self.slot(layer, page) in self._grads

    def _grad_pair(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        pair = self._grads.get(s)
        if pair is None:
            if self._grad_free:
                pair = self._grad_free.pop()
                pair[0].fill(0)
                pair[1].fill(0)
            else:
                pair = (np.zeros(self.page_shape, dtype=self.dtype), np.zeros(self.page_shape, dtype=self.dtype))
            self._grads[s] = pair
        return pair

    def scatter_add_grads(self, layer: int, page_ids: Sequence[int], dK: np.ndarray, dV: np.ndarray) -> None:
        """Accumulate gradients for the given pages in place; masked slots are ignored."""
        self._check_layer(layer)
        page_ids = list(page_ids)
        P = self.page_size
        expect = (len(page_ids) * P,) + self.page_shape[1:]
        if dK.shape != expect or dV.shape != expect:
            raise ShapeError(f"scatter_add_grads: expected {expect}, got {dK.shape} / {dV.shape}")
        self._require_resident(layer, page_ids, "scatter_add_grads")
        for i, p in enumerate(page_ids):
            s = self.slot(layer, p)
            n = self.valid_slots(layer, p)
            gk, gv = self._grad_pair(s)
            gk[:n] += dK[i * P : i * P + n]
            gv[:n] += dV[i * P : i * P + n]
            self.dirty.add(s)

    def read_grads(self, layer: int, page_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Accumulated gradients for pages, zeros where no grad page exists."""
        self._check_layer(layer)
        page_ids = list(page_ids)
        P = self.page_size
        dK = np.zeros((len(page_ids) * P,) + self.page_shape[1:], dtype=self.dtype)
        dV = np.zeros_like(dK)
        touched = [p for p in page_ids if self.has_grad(layer, p)]
        self._require_resident(layer, touched, "read_grads")
        for i, p in enumerate(page_ids):
            pair = self._grads.get(self.slot(layer, p))
            if pair is not None:
                dK[i * P : (i + 1) * P] = pair[0]
                dV[i * P : (i + 1) * P] = pair[1]
        return dK, dV

    # -- accounting ---------------------------------------------------------

    def memory_report(self) -> dict:
        pb = self.kv_page_bytes
        live = [s for table in self.page_table for s in table]
        on_device = sum(1 for s in live if self.tier[s] == DEVICE)
        return {
            "device_bytes": on_device * pb,
            "host_bytes": (len(live) - on_device) * pb,
            "grad_bytes": len(self._grads) * self.grad_page_bytes,
            "pages": len(live),
            "reallocs": self.reallocs,
            "copied_bytes": self.copied_bytes,
        }


def new_cache(config: ModelConfig, default_tier: str = DEVICE) -> PagedCache:
    return PagedCache(config, default_tier)


def pages_for(tokens: int, page_size: int) -> int:
    return math.ceil(tokens / page_size)


def contiguous_append_baseline(
    append_tokens: Sequence[int], bytes_per_token: int, policy: str = "exact"
) -> dict:
    """Simulate a KV cache kept as one contiguous buffer grown by concatenation.

    Each growth allocates a new buffer and copies the old contents while the old
    buffer and the incoming chunk are still live, so the transient peak of a
    growth is ``old_capacity + chunk + new_capacity``. ``policy`` is ``"exact"``
    (grow to exactly the needed size on every append) or ``"double"``
    (geometric capacity doubling). Returns totals plus a per-append trace.
    """
    if policy not in ("exact", "double"):
        raise ValueError(f"unknown growth policy {policy!r}")
    size = cap = 0
    peak = copied = reallocs = 0
    trace = []
    for n in append_tokens:
        chunk = n * bytes_per_token
        need = size + chunk
        step_peak = cap + chunk
        realloc = need > cap
        if realloc:
            new_cap = need if policy == "exact" else max(need, 2 * cap)
            step_peak = cap + chunk + new_cap
            copied += size
            reallocs += 1
            cap = new_cap
        size = need
        peak = max(peak, step_peak)
        trace.append({"bytes": size, "capacity": cap, "step_peak": step_peak, "realloc": realloc})
    return {"peak_bytes": peak, "copied_bytes": copied, "reallocs": reallocs, "final_bytes": size, "trace": trace}
