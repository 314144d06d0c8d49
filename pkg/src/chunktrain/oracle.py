"""Full-sequence reference model and gradient comparison reports.

The reference processes the whole sequence in one pass with a monolithic
causal softmax attention (materialized probability matrix, no cache, no
chunking). It reuses the dense kernels from :mod:`chunktrain.tensor_ops`, so
the only thing that differs from the chunked path is the chunking, paging and
streaming logic under test.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from chunktrain import tensor_ops as ops
from chunktrain.errors import ShapeError
from chunktrain.model import ModelConfig, Params, zeros_like
from chunktrain.tape import Tape, TapeMeter


def _attention(q, k, v, scale):
    """Causal GQA attention over the full sequence; returns (out, probs)."""
    T, qh, d = q.shape
    group = qh // k.shape[1]
    kh = np.repeat(k, group, axis=1)
    vh = np.repeat(v, group, axis=1)
    s = np.einsum("tqd,sqd->qts", q, kh) * scale
    s = np.where(np.tril(np.ones((T, T), dtype=bool))[None], s, -np.inf)
    probs = ops.softmax_rows(s)
    return np.einsum("qts,sqd->tqd", probs, vh), probs


def _attention_backward(dout, q, k, v, probs, scale):
    T, qh, d = q.shape
    kvh = k.shape[1]
    group = qh // kvh
    kh = np.repeat(k, group, axis=1)
    vh = np.repeat(v, group, axis=1)
    dvh = np.einsum("qts,tqd->sqd", probs, dout)
    dprobs = np.einsum("tqd,sqd->qts", dout, vh)
    ds = ops.softmax_rows_backward(probs, dprobs) * scale
    dq = np.einsum("qts,sqd->tqd", ds, kh)
    dkh = np.einsum("qts,tqd->sqd", ds, q)
    return dq, dkh.reshape(T, kvh, group, d).sum(axis=2), dvh.reshape(T, kvh, group, d).sum(axis=2)


def naive_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    """Triple-loop causal attention, used only to double-check the vectorized paths."""
    T, qh, d = q.shape
    group = qh // k.shape[1]
    out = np.zeros((T, qh, d), dtype=np.float64)
    for h in range(qh):
        g = h // group
        for t in range(T):
            logits = [float(np.dot(q[t, h], k[s, g])) * scale for s in range(t + 1)]
            mx = max(logits)
            w = [math.exp(z - mx) for z in logits]
            tot = sum(w)
            for s in range(t + 1):
                out[t, h] += (w[s] / tot) * v[s, g]
    return out


def full_forward_backward(
    config: ModelConfig,
    params: Params,
    tokens: np.ndarray,
    meter: TapeMeter | None = None,
    need_grads: bool = True,
) -> tuple[float, Params | None]:
    """Loss over all T-1 next-token predictions and its exact parameter gradients."""
    c = config
    tokens = np.asarray(tokens, dtype=np.int64)
    T = len(tokens)
    if T < 2:
        raise ValueError("need at least two tokens")
    qh, kvh, d, eps = c.n_q_heads, c.n_kv_heads, c.head_dim, c.norm_eps
    scale = 1.0 / math.sqrt(d)
    pos = np.arange(T)
    targets = np.concatenate([tokens[1:], [-1]])
    tape = Tape(meter)
    P = lambda l, n: params[f"layers.{l}.{n}"]  # noqa: E731

    x = params["emb"][tokens]
    for l in range(c.n_layers):
        tape.save(f"{l}.x", x)
        h = ops.rmsnorm(x, P(l, "g_attn"), eps)
        tape.save(f"{l}.h", h)
        q = ops.rope((h @ P(l, "Wq")).reshape(T, qh, d), pos, c.rope_base)
        k = ops.rope((h @ P(l, "Wk")).reshape(T, kvh, d), pos, c.rope_base)
        v = (h @ P(l, "Wv")).reshape(T, kvh, d)
        o, probs = _attention(q, k, v, scale)
        for name, val in (("q", q), ("k", k), ("v", v), ("o", o), ("probs", probs)):
            tape.save(f"{l}.{name}", val)
        x2 = x + o.reshape(T, qh * d) @ P(l, "Wo")
        tape.save(f"{l}.x2", x2)
        h2 = ops.rmsnorm(x2, P(l, "g_mlp"), eps)
        tape.save(f"{l}.h2", h2)
        u = h2 @ P(l, "Wup")
        tape.save(f"{l}.u", u)
        x = x2 + ops.silu(u) @ P(l, "Wdown")
    tape.save("xf", x)
    hf = ops.rmsnorm(x, params["g_final"], eps)
    tape.save("hf", hf)
    loss, dlogits = ops.cross_entropy(hf @ params["unemb"], targets, -1, T - 1)
    if not need_grads:
        tape.release()
        return loss, None

    g = zeros_like(params)
    g["unemb"] += hf.T @ dlogits
    dx, dg = ops.rmsnorm_backward(tape["xf"], params["g_final"], dlogits @ params["unemb"].T, eps)
    g["g_final"] += dg
    for l in reversed(range(c.n_layers)):
        pre = f"layers.{l}."
        u = tape[f"{l}.u"]
        s = ops.silu(u)
        g[pre + "Wdown"] += s.T @ dx
        du = ops.silu_backward(u, dx @ P(l, "Wdown").T)
        g[pre + "Wup"] += tape[f"{l}.h2"].T @ du
        dx2, dg = ops.rmsnorm_backward(tape[f"{l}.x2"], P(l, "g_mlp"), du @ P(l, "Wup").T, eps)
        g[pre + "g_mlp"] += dg
        dx2 += dx
        o = tape[f"{l}.o"]
        g[pre + "Wo"] += o.reshape(T, qh * d).T @ dx2
        do = (dx2 @ P(l, "Wo").T).reshape(T, qh, d)
        dq, dk, dv = _attention_backward(do, tape[f"{l}.q"], tape[f"{l}.k"], tape[f"{l}.v"], tape[f"{l}.probs"], scale)
        dq = ops.rope_backward(dq, pos, c.rope_base).reshape(T, qh * d)
        dk = ops.rope_backward(dk, pos, c.rope_base).reshape(T, kvh * d)
        dv = dv.reshape(T, kvh * d)
        h = tape[f"{l}.h"]
        g[pre + "Wq"] += h.T @ dq
        g[pre + "Wk"] += h.T @ dk
        g[pre + "Wv"] += h.T @ dv
        dh = dq @ P(l, "Wq").T + dk @ P(l, "Wk").T + dv @ P(l, "Wv").T
        dxa, dg = ops.rmsnorm_backward(tape[f"{l}.x"], P(l, "g_attn"), dh, eps)
        g[pre + "g_attn"] += dg
        dx = dx2 + dxa
    np.add.at(g["emb"], tokens, dx)
    tape.release()
    return loss, g


# -- gradient reports ---------------------------------------------------------


@dataclass
class GradEntry:
    layer: int | None
    matrix: str
    l2: float
    rel: float


@dataclass
class GradReport:
    entries: list[GradEntry] = field(default_factory=list)
    max_rel: float = 0.0

    def l2(self, matrix: str, layer: int | None = None) -> float:
        for e in self.entries:
            if e.matrix == matrix and e.layer == layer:
                return e.l2
        raise KeyError((matrix, layer))

    def mean_l2(self) -> float:
        return float(np.mean([e.l2 for e in self.entries])) if self.entries else 0.0

    def to_dict(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries], "max_rel": self.max_rel}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _split_name(name: str) -> tuple[int | None, str]:
    if name.startswith("layers."):
        _, l, m = name.split(".", 2)
        return int(l), m
    return None, name


def compare_grads(test: Params, reference: Params) -> GradReport:
    """Per-tensor L2 norm of (test - reference) and norm-relative error ||test-ref|| / ||ref||."""
    if set(test) != set(reference):
        raise ShapeError(f"gradient sets differ: {sorted(set(test) ^ set(reference))}")
    report = GradReport()
    for name in reference:
        a = np.asarray(test[name], dtype=np.float64)
        b = np.asarray(reference[name], dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError(f"{name}: {a.shape} vs {b.shape}")
        diff = float(np.linalg.norm(a - b))
        ref = float(np.linalg.norm(b))
        rel = 0.0 if diff == 0.0 else (diff / ref if ref > 0 else math.inf)
        layer, matrix = _split_name(name)
        report.entries.append(GradEntry(layer, matrix, diff, rel))
        report.max_rel = max(report.max_rel, rel)
    return report


def activation_peak_probe(run: Callable[[TapeMeter], object]) -> int:
    """Run ``run(meter)`` with a fresh meter and return the peak live tape bytes."""
    meter = TapeMeter()
    run(meter)
    return meter.peak
