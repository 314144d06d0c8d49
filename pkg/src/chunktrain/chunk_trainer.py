"""Chunk-recurrent training.

A sequence of T tokens is cut into S chunks of C tokens. The forward runs the
chunks in order; each appends its keys/values to the paged cache, attends to
earlier chunks through it, and drops its activations when done. The backward
runs the chunks in reverse: it recomputes one chunk's forward from the token
ids and the cached page selections, seeds the backward with the loss gradient
plus whatever gradient later chunks deposited into this chunk's own cache
pages, and deposits gradients for earlier chunks' pages in turn.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from chunktrain import tensor_ops as ops
from chunktrain.attention import AttnSaved, attn_backward, attn_forward, select_pages
from chunktrain.errors import StateError
from chunktrain.model import AdamState, ModelConfig, Params, adam_step, zeros_like
from chunktrain.paged_kv import DEVICE, HOST, PagedCache
from chunktrain.tape import Tape, TapeMeter
from chunktrain.tiered_memory import (
    BACKWARD,
    FORWARD,
    RECOMPUTE,
    OffloadPlanner,
    ScheduleLog,
    TierConfig,
    TieredMemory,
)

IGNORE = -1


@dataclass
class ChunkState:
    """Everything needed to replay one chunk; activations are deliberately absent."""

    index: int
    tokens: np.ndarray
    targets: np.ndarray
    offset: int
    seed: int = 0
    selected: list[list[list[int]]] = field(default_factory=list)  # [layer][query page] -> past page ids
    slots: tuple[int, int] | None = None

    @property
    def positions(self) -> np.ndarray:
        return self.offset + np.arange(len(self.tokens))


def split_chunks(tokens: np.ndarray, chunk_size: int, seed: int = 0) -> tuple[list[ChunkState], int]:
    """Cut tokens into chunks with next-token targets carried across chunk borders.

    A ragged tail is padded with token 0 and ignored targets. Returns the chunk
    states and the number of scored predictions (T - 1).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    T = len(tokens)
    if T == 0:
        raise ValueError("empty token sequence")
    S = -(-T // chunk_size)
    padded = np.zeros(S * chunk_size, dtype=np.int64)
    padded[:T] = tokens
    targets = np.full(S * chunk_size, IGNORE, dtype=np.int64)
    targets[: T - 1] = tokens[1:]
    states = [
        ChunkState(
            index=i,
            tokens=padded[i * chunk_size : (i + 1) * chunk_size],
            targets=targets[i * chunk_size : (i + 1) * chunk_size],
            offset=i * chunk_size,
            seed=seed + i,
        )
        for i in range(S)
    ]
    return states, T - 1


def union_pages(selected: list[list[int]]) -> list[int]:
    return sorted(set().union(*selected)) if selected else []


class ChunkTrainer:
    """Holds the cache and instrumentation for chunked forward/backward passes over one model."""

    def __init__(
        self,
        config: ModelConfig,
        params: Params,
        tier: TierConfig | None = None,
        meter: TapeMeter | None = None,
    ) -> None:
        self.config = config
        self.params = params
        self.meter = meter if meter is not None else TapeMeter()
        self.cache = PagedCache(config, default_tier=HOST if tier is not None else DEVICE)
        self.mem: TieredMemory | None = None
        self.planner: OffloadPlanner | None = None
        if tier is not None:
            self.mem = TieredMemory(tier, self.cache.kv_page_bytes, self.cache)
            self.planner = OffloadPlanner(self.mem, config.n_layers)
        # ablation: drop gradient pages after each backward chunk, cutting the cross-chunk path
        self.zero_grad_pages_between_chunks = False
        self.scale = 1.0 / np.sqrt(config.head_dim)
        self.score_scale = self.scale if config.score_scale else None
        self._denom = 1
        self._next_forward = 0
        self._next_backward: int | None = None
        self.states: list[ChunkState] = []
        self.last_report: dict = {}
        self.schedule = ScheduleLog()

    # -- helpers --------------------------------------------------------------

    def _p(self, layer: int, name: str) -> np.ndarray:
        return self.params[f"layers.{layer}.{name}"]

    def own_pages(self, st: ChunkState) -> list[int]:
        P = self.config.page_size
        return list(range(st.offset // P, (st.offset + len(st.tokens)) // P))

    def _layer_pages(self, st: ChunkState, layer: int, phase: str) -> list[int]:
        pages = union_pages(st.selected[layer])
        if phase == BACKWARD:
            pages += [p for p in self.own_pages(st) if self.cache.has_grad(layer, p)]
        return pages

    def _attended(self, st: ChunkState, layer: int) -> int:
        return len(union_pages(st.selected[layer])) * self.config.page_size + len(st.tokens)

    # -- forward --------------------------------------------------------------

    def _forward(self, st: ChunkState, tape: Tape, phase: str) -> float:
        c = self.config
        C = len(st.tokens)
        qh, kvh, d = c.n_q_heads, c.n_kv_heads, c.head_dim
        pos = st.positions
        eps = c.norm_eps
        planner = self.planner
        first = phase == FORWARD
        if first:
            st.selected = [[] for _ in range(c.n_layers)]
        n_past = st.offset // c.page_size
        if planner is not None:
            known = {}
            for l in range(c.n_layers):
                late = first and c.attention_mode[l] == "topk"
                known[l] = None if late else (self._past_known(st, l, n_past) if first else self._layer_pages(st, l, phase))
            planner.begin_pass(st.index, phase, known)

        x = self.params["emb"][st.tokens]
        for l in range(c.n_layers):
            if planner is not None:
                planner.layer_begin(l)
            tape.save(f"{l}.x", x)
            h = ops.rmsnorm(x, self._p(l, "g_attn"), eps)
            tape.save(f"{l}.h", h)
            q = ops.rope(ops.linear(h, self._p(l, "Wq")).reshape(C, qh, d), pos, c.rope_base)
            if first:
                sel = select_pages(
                    c.attention_mode[l], q, self.cache, l, n_past, c.budget_pages, c.local_window, self.score_scale
                )
                st.selected[l] = sel
                if planner is not None and c.attention_mode[l] == "topk":
                    planner.pages_ready(l, union_pages(sel))
            sel = st.selected[l]
            k = ops.rope(ops.linear(h, self._p(l, "Wk")).reshape(C, kvh, d), pos, c.rope_base)
            v = ops.linear(h, self._p(l, "Wv")).reshape(C, kvh, d)
            if first:
                st.slots = self.cache.append_chunk(l, k, v)
                if planner is not None:
                    planner.appended(l, self.own_pages(st))
            if planner is not None:
                planner.before_attention(l)
            o, saved = attn_forward(q, k, v, self.cache, l, sel, self.scale)
            tape.save(f"{l}.q", q)
            tape.save(f"{l}.k", k)
            tape.save(f"{l}.v", v)
            tape.save(f"{l}.o", o)
            tape.save(f"{l}.lse", saved.L)
            x2 = x + ops.linear(o.reshape(C, qh * d), self._p(l, "Wo"))
            tape.save(f"{l}.x2", x2)
            h2 = ops.rmsnorm(x2, self._p(l, "g_mlp"), eps)
            tape.save(f"{l}.h2", h2)
            u = ops.linear(h2, self._p(l, "Wup"))
            tape.save(f"{l}.u", u)
            x = x2 + ops.linear(ops.silu(u), self._p(l, "Wdown"))
            if planner is not None:
                planner.layer_end(l, self._attended(st, l))
        tape.save("xf", x)
        hf = ops.rmsnorm(x, self.params["g_final"], eps)
        tape.save("hf", hf)
        logits = ops.linear(hf, self.params["unemb"])
        loss, dlogits = ops.cross_entropy(logits, st.targets, IGNORE, self._denom)
        tape.save("dlogits", dlogits)
        if planner is not None:
            planner.end_pass(flush=first)
        return loss

    def _past_known(self, st: ChunkState, layer: int, n_past: int) -> list[int]:
        mode = self.config.attention_mode[layer]
        if mode == "local":
            return list(range(max(0, n_past - self.config.local_window), n_past))
        return list(range(n_past))

    def forward_chunk(self, st: ChunkState) -> float:
        """Run chunk ``st.index`` forward, appending its KV; activations are discarded."""
        if st.index != self._next_forward or any(f != st.offset for f in self.cache.filled):
            raise StateError(
                f"chunk {st.index} out of order: expected chunk {self._next_forward}, cache holds {self.cache.filled[0]} tokens"
            )
        tape = Tape(self.meter)
        try:
            loss = self._forward(st, tape, FORWARD)
        finally:
            tape.release()
        self._next_forward += 1
        return loss

    # -- backward -------------------------------------------------------------

    def backward_chunk(self, st: ChunkState, grads: Params) -> None:
        """Recompute chunk ``st.index`` and backpropagate, accumulating into ``grads``
        and into the gradient pages of earlier chunks."""
        if self._next_backward is None:
            self._next_backward = self._next_forward - 1
        if st.index != self._next_backward:
            raise StateError(f"backward for chunk {st.index} out of order, expected {self._next_backward}")
        tape = Tape(self.meter)
        try:
            self._forward(st, tape, RECOMPUTE)
            self._backward(st, tape, grads)
        finally:
            tape.release()
        self._next_backward -= 1
        if self.zero_grad_pages_between_chunks:
            self.cache.zero_grads()

    def _backward(self, st: ChunkState, tape: Tape, grads: Params) -> None:
        c = self.config
        C = len(st.tokens)
        qh, kvh, d = c.n_q_heads, c.n_kv_heads, c.head_dim
        pos = st.positions
        eps = c.norm_eps
        planner = self.planner
        if planner is not None:
            planner.begin_pass(st.index, BACKWARD, {l: self._layer_pages(st, l, BACKWARD) for l in range(c.n_layers)})

        dlogits = tape["dlogits"]
        grads["unemb"] += tape["hf"].T @ dlogits
        dhf = dlogits @ self.params["unemb"].T
        dx, dg = ops.rmsnorm_backward(tape["xf"], self.params["g_final"], dhf, eps)
        grads["g_final"] += dg
        own = self.own_pages(st)
        for l in reversed(range(c.n_layers)):
            pre = f"layers.{l}."
            if planner is not None:
                planner.layer_begin(l)
            # mlp
            u, h2 = tape[f"{l}.u"], tape[f"{l}.h2"]
            s = ops.silu(u)
            ds, dW = ops.linear_backward(s, self._p(l, "Wdown"), dx)
            grads[pre + "Wdown"] += dW
            du = ops.silu_backward(u, ds)
            dh2, dW = ops.linear_backward(h2, self._p(l, "Wup"), du)
            grads[pre + "Wup"] += dW
            dx2, dg = ops.rmsnorm_backward(tape[f"{l}.x2"], self._p(l, "g_mlp"), dh2, eps)
            grads[pre + "g_mlp"] += dg
            dx2 += dx
            # attention
            o = tape[f"{l}.o"]
            do, dW = ops.linear_backward(o.reshape(C, qh * d), self._p(l, "Wo"), dx2)
            grads[pre + "Wo"] += dW
            if planner is not None:
                planner.before_attention(l)
            q, k, v = tape[f"{l}.q"], tape[f"{l}.k"], tape[f"{l}.v"]
            saved = AttnSaved(O=o, L=tape[f"{l}.lse"], selected=st.selected[l])
            dq, dk, dv = attn_backward(do.reshape(C, qh, d), q, k, v, self.cache, l, saved, self.scale)
            gk, gv = self.cache.read_grads(l, own)
            dk += gk
            dv += gv
            if planner is not None:
                planner.layer_end(l, self._attended(st, l))
            dq = ops.rope_backward(dq, pos, c.rope_base).reshape(C, qh * d)
            dk = ops.rope_backward(dk, pos, c.rope_base).reshape(C, kvh * d)
            dv = dv.reshape(C, kvh * d)
            h = tape[f"{l}.h"]
            dh = np.zeros_like(h)
            for name, dy in (("Wq", dq), ("Wk", dk), ("Wv", dv)):
                dpart, dW = ops.linear_backward(h, self._p(l, name), dy)
                grads[pre + name] += dW
                dh += dpart
            dxa, dg = ops.rmsnorm_backward(tape[f"{l}.x"], self._p(l, "g_attn"), dh, eps)
            grads[pre + "g_attn"] += dg
            dx = dx2 + dxa
        np.add.at(grads["emb"], st.tokens, dx)
        if planner is not None:
            planner.end_pass(flush=True)

    # -- full step ------------------------------------------------------------

    def begin_step(self, tokens: np.ndarray) -> list[ChunkState]:
        self.cache.reset()
        if self.mem is not None:
            self.mem.resident.clear()
            self.mem.in_use.clear()
            self.mem.pending.clear()
        self.states, self._denom = split_chunks(tokens, self.config.chunk_size, self.config.seed)
        self._denom = max(self._denom, 1)
        self._next_forward = 0
        self._next_backward = None
        self.meter.reset_peak()
        return self.states

    def train_step(self, tokens: np.ndarray) -> tuple[float, Params]:
        """S chunk forwards then S chunk backwards in reverse. Returns (mean loss, grads)."""
        states = self.begin_step(tokens)
        grads = zeros_like(self.params)
        stall0 = self.mem.stall_seconds if self.mem else 0.0
        bytes0 = self.mem.transfer_bytes if self.mem else 0
        loss = 0.0
        for st in states:
            loss += self.forward_chunk(st)
        for st in reversed(states):
            self.backward_chunk(st, grads)
        rep = self.cache.memory_report()
        self.last_report = {
            "tape_peak_bytes": self.meter.peak,
            "kv_bytes": rep["device_bytes"] + rep["host_bytes"],
            "grad_page_bytes": rep["grad_bytes"],
            "transfer_bytes": (self.mem.transfer_bytes - bytes0) if self.mem else 0,
            "stall_ms": ((self.mem.stall_seconds - stall0) * 1e3) if self.mem else 0.0,
        }
        if self.mem is not None:
            self.schedule = self.mem.take_log()
        return loss, grads

    def loss_only(self, tokens: np.ndarray) -> float:
        states = self.begin_step(tokens)
        return sum(self.forward_chunk(st) for st in states)

    def retrieval_rows(self) -> Iterator[tuple[int, int, int, list[int]]]:
        """(layer, chunk, query page, selected past pages) for the last step."""
        P = self.config.page_size
        for st in self.states:
            for l, per_page in enumerate(st.selected):
                for i, ids in enumerate(per_page):
                    yield l, st.index, st.offset // P + i, ids


def train_step(config: ModelConfig, params: Params, tokens: np.ndarray, tier: TierConfig | None = None) -> tuple[float, Params]:
    return ChunkTrainer(config, params, tier).train_step(tokens)


def fit(
    trainer: ChunkTrainer,
    corpus: np.ndarray,
    steps: int,
    seq_len: int,
    lr: float = 5e-5,
    betas: tuple[float, float] = (0.9, 0.98),
    state: AdamState | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Train for ``steps`` Adam steps on consecutive ``seq_len`` windows of ``corpus`` (cycled)."""
    corpus = np.asarray(corpus)
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    seq_len = min(seq_len, len(corpus))
    n_windows = max(1, len(corpus) // seq_len)
    if state is None:
        state = AdamState.for_params(trainer.params)
    history = []
    for step in range(steps):
        w = step % n_windows
        tokens = corpus[w * seq_len : (w + 1) * seq_len]
        t0 = time.perf_counter()
        loss, grads = trainer.train_step(tokens)
        adam_step(trainer.params, grads, state, lr=lr, beta1=betas[0], beta2=betas[1])
        rec = {"step": step, "loss": loss, **trainer.last_report}
        rec["_seconds"] = time.perf_counter() - t0
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    return history
