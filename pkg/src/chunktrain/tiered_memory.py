"""Simulated device/host page residency with asynchronous prefetch.

Nothing here moves tensor values: the cache keeps every page in host memory
and this module only decides *when* a page counts as device-resident, on a
simulated clock. Compute time comes from an affine cost model and transfers
from a single link of fixed bandwidth, so stalls and overlap are exact,
deterministic quantities.

Pass structure used by :class:`OffloadPlanner`:

* forward / recompute passes walk layers 0..L-1; backward walks L-1..0
* when a layer's page list is known at pass start, it is prefetched while the
  previous layer computes (the first layer is fetched eagerly, overlapping the
  embedding or loss-head compute)
* when it is only known after the query projection (Top-K forward), the fetch
  is issued right then and overlaps the key/value projections
* after a layer finishes its pages become evictable; LRU eviction makes room,
  and all pages are flushed back to host at the end of each chunk
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from chunktrain.errors import ConfigError, StateError
from chunktrain.paged_kv import DEVICE, HOST, PagedCache

FORWARD, RECOMPUTE, BACKWARD = "forward", "recompute", "backward"


@dataclass
class TierConfig:
    """Device capacity, link bandwidth and per-layer compute costs (seconds)."""

    device_capacity_pages: int = 1 << 20
    bandwidth_bytes_per_s: float = 16e9
    embed_s: float = 20e-6
    head_s: float = 40e-6
    q_proj_s: float = 20e-6
    kv_proj_s: float = 40e-6
    attn_base_s: float = 10e-6
    attn_per_token_s: float = 50e-9
    mlp_s: float = 50e-6
    backward_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.bandwidth_bytes_per_s <= 0:
            raise ConfigError("bandwidth must be positive")
        if self.device_capacity_pages < 0:
            raise ConfigError("device capacity must be >= 0")

    def factor(self, phase: str) -> float:
        return self.backward_factor if phase == BACKWARD else 1.0

    def layer_compute_s(self, attended_tokens: int, phase: str = FORWARD) -> float:
        """Whole-layer compute time, affine in the number of attended tokens."""
        base = self.q_proj_s + self.kv_proj_s + self.attn_base_s + self.mlp_s
        return (base + self.attn_per_token_s * attended_tokens) * self.factor(phase)


@dataclass
class Event:
    kind: str
    t: float
    layer: int | None = None
    page: int | None = None
    chunk: int | None = None
    phase: str | None = None
    handle: int | None = None
    bytes: int = 0
    start: float | None = None
    reason: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class ScheduleLog:
    meta: dict = field(default_factory=dict)
    events: list[Event] = field(default_factory=list)

    def add(self, kind: str, t: float, **kw) -> Event:
        ev = Event(kind, t, **kw)
        self.events.append(ev)
        return ev

    def of(self, *kinds: str) -> list[Event]:
        return [e for e in self.events if e.kind in kinds]

    def extend(self, other: "ScheduleLog") -> None:
        if not self.meta:
            self.meta = dict(other.meta)
        self.events.extend(other.events)

    def to_jsonl(self, path: str | Path | None = None) -> str:
        lines = [json.dumps({"meta": self.meta}, sort_keys=True)]
        lines += [json.dumps(e.to_dict(), sort_keys=True) for e in self.events]
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_jsonl(cls, text: str) -> "ScheduleLog":
        log = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if "meta" in obj:
                log.meta = obj["meta"]
            else:
                log.events.append(Event(**obj))
        return log


@dataclass
class TransferHandle:
    id: int
    layer: int
    pages: list[int]
    issued: bool = False
    issue_t: float | None = None
    done_t: float | None = None
    bytes: int = 0


class TieredMemory:
    """Residency bookkeeping plus the simulated compute clock and transfer link.

    When bound to a :class:`PagedCache`, page tier tags on the cache follow the
    simulation, so cache reads of a page that has not arrived fail loudly.
    """

    def __init__(self, tier: TierConfig, kv_page_bytes: int, cache: PagedCache | None = None) -> None:
        self.tier = tier
        self.kv_page_bytes = kv_page_bytes
        self.cache = cache
        self.now = 0.0
        self.link_free = 0.0
        # key -> simulated arrival time; insertion order is LRU order
        self.resident: OrderedDict[tuple[int, int], float] = OrderedDict()
        self.in_use: dict[tuple[int, int], int] = {}
        self.pending: list[TransferHandle] = []
        self.chunk: int | None = None
        self.phase: str | None = None
        self._next_handle = 0
        self.log = self._new_log()
        self.transfer_bytes = 0
        self.writeback_bytes = 0
        self.stall_seconds = 0.0
        self.lru_evictions = 0

    def _new_log(self) -> ScheduleLog:
        return ScheduleLog(
            meta={
                "bandwidth_bytes_per_s": self.tier.bandwidth_bytes_per_s,
                "kv_page_bytes": self.kv_page_bytes,
                "device_capacity_pages": self.tier.device_capacity_pages,
            }
        )

    def take_log(self) -> ScheduleLog:
        log, self.log = self.log, self._new_log()
        return log

    def _ctx(self) -> dict:
        return {"chunk": self.chunk, "phase": self.phase}

    # -- bytes ----------------------------------------------------------------

    def page_bytes(self, layer: int, page: int) -> int:
        """KV bytes, plus the gradient page when one exists during backward work."""
        n = self.kv_page_bytes
        if self.cache is not None and self.phase in (RECOMPUTE, BACKWARD) and self.cache.has_grad(layer, page):
            n += self.cache.grad_page_bytes
        return n

    # -- residency ----------------------------------------------------------

    @property
    def occupancy(self) -> int:
        return len(self.resident)

    def _set_tier(self, key: tuple[int, int], tier: str) -> None:
        if self.cache is not None:
            self.cache.set_tier(key[0], key[1], tier)

    def _evict(self, key: tuple[int, int], reason: str) -> None:
        del self.resident[key]
        wb = 0
        if self.cache is not None:
            s = self.cache.slot(*key)
            if s in self.cache.dirty:
                wb = self.cache.grad_page_bytes
        self.writeback_bytes += wb
        self.log.add("evict", self.now, layer=key[0], page=key[1], bytes=wb, reason=reason, **self._ctx())
        self._set_tier(key, HOST)

    def evict_policy(self, need: int) -> list[tuple[int, int]]:
        """Evict least-recently-used, not-in-use pages until ``need`` more fit.

        Returns the evicted keys, or raises :class:`ConfigError` if the pages
        pinned by in-flight or running layers leave no room.
        """
        cap = self.tier.device_capacity_pages
        evicted = []
        if self.occupancy + need <= cap:
            return evicted
        for key in list(self.resident):
            if self.occupancy + need <= cap:
                break
            if key in self.in_use:
                continue
            self._evict(key, "lru")
            self.lru_evictions += 1
            evicted.append(key)
        if self.occupancy + need > cap:
            raise ConfigError(
                f"device capacity {cap} pages cannot hold {need} more with {self.occupancy} pinned"
            )
        return evicted

    def _room_for(self, need: int) -> bool:
        free = self.tier.device_capacity_pages - self.occupancy
        evictable = sum(1 for k in self.resident if k not in self.in_use)
        return need <= free + evictable

    def fetch_pages(self, layer: int, page_ids: Sequence[int]) -> TransferHandle:
        """Request pages for ``layer``; they stay pinned until :meth:`release`.

        Already-resident pages cost nothing. If the device is full of pinned
        pages the request is deferred and issued as soon as room frees up.
        """
        h = TransferHandle(self._next_handle, layer, list(page_ids))
        self._next_handle += 1
        for p in h.pages:
            key = (layer, p)
            self.in_use[key] = self.in_use.get(key, 0) + 1
        if self.pending or not self._room_for(self._missing(h)):
            if self._missing(h) > self.tier.device_capacity_pages:
                raise ConfigError(
                    f"layer {layer} needs {self._missing(h)} pages, device holds {self.tier.device_capacity_pages}"
                )
            self.pending.append(h)
            self.log.add("fetch_deferred", self.now, layer=layer, handle=h.id, **self._ctx())
        else:
            self._issue(h)
        return h

    def _missing(self, h: TransferHandle) -> int:
        return sum(1 for p in h.pages if (h.layer, p) not in self.resident)

    def _issue(self, h: TransferHandle) -> None:
        missing = [p for p in h.pages if (h.layer, p) not in self.resident]
        self.evict_policy(len(missing))
        bw = self.tier.bandwidth_bytes_per_s
        done = self.now
        for p in missing:
            nbytes = self.page_bytes(h.layer, p)
            start = max(self.now, self.link_free)
            done = start + nbytes / bw
            self.link_free = done
            self.log.add("fetch_issued", self.now, layer=h.layer, page=p, handle=h.id, bytes=nbytes, **self._ctx())
            self.log.add("fetch_done", done, layer=h.layer, page=p, handle=h.id, bytes=nbytes, start=start, **self._ctx())
            self.resident[(h.layer, p)] = done
            h.bytes += nbytes
        self.transfer_bytes += h.bytes
        h.issued = True
        h.issue_t = self.now
        h.done_t = max([self.now] + [self.resident[(h.layer, p)] for p in h.pages])

    def _drain_pending(self) -> None:
        while self.pending and self._room_for(self._missing(self.pending[0])):
            self._issue(self.pending.pop(0))

    def wait(self, h: TransferHandle) -> float:
        """Block the compute clock until ``h`` completes; returns the stall."""
        if not h.issued:
            self._drain_pending()
        if not h.issued:
            raise StateError(f"wait on transfer {h.id} before it was issued")
        stall = max(0.0, h.done_t - self.now)
        self.log.add("wait", self.now, layer=h.layer, handle=h.id, **self._ctx())
        self.now += stall
        self.stall_seconds += stall
        self.log.add("wait_end", self.now, layer=h.layer, handle=h.id, **self._ctx())
        for p in h.pages:
            self._set_tier((h.layer, p), DEVICE)
        return stall

    def access(self, layer: int, page_ids: Sequence[int]) -> None:
        for p in page_ids:
            key = (layer, p)
            if key in self.resident:
                self.resident.move_to_end(key)
            self.log.add("access", self.now, layer=layer, page=p, **self._ctx())

    def release(self, layer: int, page_ids: Sequence[int]) -> None:
        for p in page_ids:
            key = (layer, p)
            left = self.in_use.get(key, 0) - 1
            if left > 0:
                self.in_use[key] = left
            else:
                self.in_use.pop(key, None)
        self._drain_pending()

    def flush(self) -> None:
        """Offload every unpinned resident page back to host."""
        for key in list(self.resident):
            if key not in self.in_use:
                self._evict(key, "flush")

    def writeback(self, layer: int, page_ids: Sequence[int]) -> None:
        """Newly appended pages are written through to host on a separate direction of the link."""
        for p in page_ids:
            self.writeback_bytes += self.kv_page_bytes
            self.log.add("writeback", self.now, layer=layer, page=p, bytes=self.kv_page_bytes, **self._ctx())

    # -- compute clock --------------------------------------------------------

    def compute(self, seconds: float) -> None:
        self.now += seconds

    def mark(self, kind: str, layer: int | None = None) -> None:
        self.log.add(kind, self.now, layer=layer, **self._ctx())


class OffloadPlanner:
    """Drives a :class:`TieredMemory` through the prefetch schedule of one pass.

    The trainer calls the hooks in program order; the static plan functions
    below replay the same hooks from a :class:`ChunkSchedule`.
    """

    def __init__(self, mem: TieredMemory, n_layers: int) -> None:
        self.mem = mem
        self.n_layers = n_layers
        self.handles: dict[int, TransferHandle] = {}
        self.pages: dict[int, list[int] | None] = {}
        self.order: list[int] = []
        self.phase = FORWARD

    @property
    def tier(self) -> TierConfig:
        return self.mem.tier

    def _fetch(self, layer: int) -> None:
        pages = self.pages.get(layer)
        if pages is not None and layer not in self.handles:
            self.handles[layer] = self.mem.fetch_pages(layer, pages)

    def begin_pass(self, chunk: int, phase: str, pages: dict[int, list[int] | None]) -> None:
        """``pages[l]`` is layer l's working set, or None if it is only known after q-projection."""
        self.mem.chunk = chunk
        self.mem.phase = phase
        self.phase = phase
        self.pages = dict(pages)
        self.handles = {}
        self.order = list(range(self.n_layers))
        if phase == BACKWARD:
            self.order.reverse()
        self.mem.mark("pass_begin")
        self._fetch(self.order[0])
        self.mem.compute((self.tier.head_s if phase == BACKWARD else self.tier.embed_s) * self.tier.factor(phase))

    def layer_begin(self, layer: int) -> None:
        self.mem.mark("compute_begin", layer)
        k = self.order.index(layer)
        if k + 1 < len(self.order):
            self._fetch(self.order[k + 1])
        self.mem.compute(self.tier.q_proj_s * self.tier.factor(self.phase))

    def pages_ready(self, layer: int, pages: list[int]) -> None:
        """Late page list (Top-K forward): issue the fetch now, overlapping k/v projections."""
        self.pages[layer] = list(pages)
        self._fetch(layer)

    def appended(self, layer: int, pages: list[int]) -> None:
        self.mem.writeback(layer, pages)

    def before_attention(self, layer: int) -> None:
        self.mem.compute(self.tier.kv_proj_s * self.tier.factor(self.phase))
        self._fetch(layer)
        h = self.handles[layer]
        self.mem.wait(h)
        self.mem.access(layer, h.pages)

    def layer_end(self, layer: int, attended_tokens: int) -> None:
        f = self.tier.factor(self.phase)
        self.mem.compute((self.tier.attn_base_s + self.tier.attn_per_token_s * attended_tokens + self.tier.mlp_s) * f)
        self.mem.mark("compute_end", layer)
        self.mem.release(layer, self.handles[layer].pages)

    def end_pass(self, flush: bool = False) -> None:
        self.mem.mark("pass_end")
        if flush:
            self.mem.flush()


# -- static plans -------------------------------------------------------------


@dataclass
class ChunkSchedule:
    """What one pass over one chunk needs: per-layer page lists and attended token counts."""

    chunk: int
    phase: str
    layer_pages: list[list[int]]
    attended_tokens: list[int]
    late: list[bool] | None = None


def run_schedule(
    schedule: ChunkSchedule, tier: TierConfig, kv_page_bytes: int, mem: TieredMemory | None = None
) -> ScheduleLog:
    if mem is None:
        mem = TieredMemory(tier, kv_page_bytes)
    L = len(schedule.layer_pages)
    late = schedule.late or [False] * L
    planner = OffloadPlanner(mem, L)
    planner.begin_pass(
        schedule.chunk, schedule.phase, {l: (None if late[l] else schedule.layer_pages[l]) for l in range(L)}
    )
    for l in planner.order:
        planner.layer_begin(l)
        if late[l]:
            planner.pages_ready(l, schedule.layer_pages[l])
        planner.before_attention(l)
        planner.layer_end(l, schedule.attended_tokens[l])
    planner.end_pass(flush=True)
    return mem.take_log()


def prefetch_plan_dense(schedule: ChunkSchedule, tier: TierConfig, kv_page_bytes: int) -> ScheduleLog:
    """Layer-ahead prefetch for every layer (dense/local attention, any backward pass)."""
    s = ChunkSchedule(schedule.chunk, schedule.phase, schedule.layer_pages, schedule.attended_tokens, None)
    return run_schedule(s, tier, kv_page_bytes)


def prefetch_plan_sparse(schedule: ChunkSchedule, tier: TierConfig, kv_page_bytes: int) -> ScheduleLog:
    """Forward: fetch right after q-projection; backward: same as dense with the cached ids."""
    late = [schedule.phase == FORWARD] * len(schedule.layer_pages)
    s = ChunkSchedule(schedule.chunk, schedule.phase, schedule.layer_pages, schedule.attended_tokens, late)
    return run_schedule(s, tier, kv_page_bytes)


# -- validation ---------------------------------------------------------------

_LINK_KINDS = {"fetch_done"}


def validate_schedule(log: ScheduleLog) -> dict:
    """Check residency-before-use and clock monotonicity; measure stall, bytes and overlap.

    Violations are reported in the result, never raised.
    """
    violations: list[str] = []
    last_t = {"compute": float("-inf"), "link": float("-inf")}
    for e in log.events:
        stream = "link" if e.kind in _LINK_KINDS else "compute"
        if e.t < last_t[stream] - 1e-15:
            violations.append(f"{stream} clock went backwards at {e.kind} t={e.t}")
        last_t[stream] = max(last_t[stream], e.t)

    # residency: order events by time; arrivals before accesses before evictions at equal t
    rank = {"fetch_done": 0, "access": 1, "evict": 2}
    timeline = sorted(
        (e for e in log.events if e.kind in rank), key=lambda e: (e.t, rank[e.kind])
    )
    resident: set[tuple[int, int]] = set()
    for e in timeline:
        key = (e.layer, e.page)
        if e.kind == "fetch_done":
            resident.add(key)
        elif e.kind == "evict":
            resident.discard(key)
        elif key not in resident:
            violations.append(f"access to layer {e.layer} page {e.page} at t={e.t} before it was resident")

    stalls = []
    open_wait = None
    for e in log.events:
        if e.kind == "wait":
            open_wait = e.t
        elif e.kind == "wait_end" and open_wait is not None:
            if e.t > open_wait:
                stalls.append((open_wait, e.t))
            open_wait = None
    stall_seconds = sum(b - a for a, b in stalls)

    done = log.of("fetch_done")
    transfer_bytes = sum(e.bytes for e in done)
    busy = sum(e.t - e.start for e in done)
    exposed = 0.0
    for e in done:
        for a, b in stalls:
            exposed += max(0.0, min(b, e.t) - max(a, e.start))
    overlap = 1.0 if busy <= 0 else (busy - exposed) / busy
    return {
        "violations": violations,
        "stall_seconds": stall_seconds,
        "transfer_bytes": transfer_bytes,
        "overlap_fraction": overlap,
    }


def replay_stall(log: ScheduleLog) -> float:
    """Recompute total stall from a log's compute gaps, fetch sizes and the link bandwidth.

    A second, independent model of the schedule: compute work between events is
    taken from the log, but transfer completion and stalls are re-derived.
    """
    bw = log.meta["bandwidth_bytes_per_s"]
    clock = None
    link = float("-inf")
    prev = None
    finish: dict[int, float] = {}
    stall = 0.0
    for e in log.events:
        if e.kind in _LINK_KINDS:
            continue
        if clock is None:
            clock = e.t
        elif prev.kind != "wait":
            clock += e.t - prev.t
        if e.kind == "fetch_issued":
            start = max(clock, link)
            link = start + e.bytes / bw
            finish[e.handle] = link
        elif e.kind == "wait":
            target = finish.get(e.handle, clock)
            if target > clock:
                stall += target - clock
                clock = target
        prev = e
    return stall


def schedule_summary(log: ScheduleLog) -> dict:
    report = validate_schedule(log)
    evicts = log.of("evict")
    return {
        "violations": len(report["violations"]),
        "stall_seconds": report["stall_seconds"],
        "transfer_bytes": report["transfer_bytes"],
        "overlap_fraction": report["overlap_fraction"],
        "writeback_bytes": sum(e.bytes for e in log.of("writeback", "evict")),
        "lru_evictions": sum(1 for e in evicts if e.reason == "lru"),
        "fetches": len(log.of("fetch_issued")),
    }
