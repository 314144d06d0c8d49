"""Chunked causal attention over the paged cache.

Each query page of the current chunk attends to a list of past pages (all of
them, a Top-K retrieved subset, or the most recent window) followed by the
current chunk's own keys under a causal mask. The forward streams key blocks
one page at a time with running (max, sum) accumulators and keeps only the
per-row logsumexp; the backward recomputes probabilities from it and
scatter-adds past-page gradients straight into the cache's gradient pages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from chunktrain.paged_kv import PagedCache
from chunktrain.tensor_ops import softmax_rows


@dataclass
class AttnSaved:
    """State kept from the forward: output, logsumexp ``[C, qh]``, selected pages."""

    O: np.ndarray
    L: np.ndarray
    selected: list[list[int]] = field(default_factory=list)


# -- retrieval --------------------------------------------------------------


def page_mean_keys(cache: PagedCache, layer: int, page_ids: Sequence[int] | None = None) -> np.ndarray:
    return cache.page_mean_keys(layer, page_ids)


def score_pages(q: np.ndarray, k_avg: np.ndarray, page_size: int, scale: float | None = None) -> np.ndarray:
    """Vote for past pages: ``[m*P, qh, d]`` queries against ``[n, kvh, d]`` page means -> ``[m, n]``.

    For every query token and head, raw dot products with the head's kv-group
    representatives are softmax-normalized over pages, then summed over the
    tokens and heads of each query page.
    """
    rows, qh, d = q.shape
    n, kvh, _ = k_avg.shape
    m = rows // page_size
    if n == 0:
        return np.zeros((m, 0), dtype=q.dtype)
    kh = np.repeat(k_avg, qh // kvh, axis=1)
    raw = np.einsum("tqd,nqd->tqn", q, kh)
    if scale is not None:
        raw = raw * scale
    probs = softmax_rows(raw.reshape(-1, n)).reshape(rows, qh, n)
    return probs.reshape(m, page_size, qh, n).sum(axis=(1, 2))


def select_topk(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores, ties toward the lower index, returned ascending."""
    n = len(scores)
    if k >= n:
        return list(range(n))
    if k <= 0:
        return []
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return sorted(int(i) for i in order[:k])


def select_recent(n_pages: int, window: int) -> list[int]:
    return list(range(max(0, n_pages - window), n_pages))


def select_pages(
    mode: str,
    q: np.ndarray,
    cache: PagedCache,
    layer: int,
    n_past: int,
    budget_pages: int,
    window: int,
    scale: float | None = None,
) -> list[list[int]]:
    """Per query page, the past pages it will attend to."""
    P = cache.page_size
    m = q.shape[0] // P
    if mode == "dense":
        return [list(range(n_past)) for _ in range(m)]
    if mode == "local":
        return [select_recent(n_past, window) for _ in range(m)]
    if mode == "topk":
        if budget_pages >= n_past:
            return [list(range(n_past)) for _ in range(m)]
        scores = score_pages(q, cache.page_mean_keys(layer, range(n_past)), P, scale)
        return [select_topk(row, budget_pages) for row in scores]
    raise ValueError(f"unknown attention mode {mode!r}")


# -- attention --------------------------------------------------------------


def _key_blocks(cache, layer, past, k_cur, v_cur, i, P):
    """Yield (K, V, mask[Pq, Pk] or None, page id or None) for query page i."""
    for pid in past:
        K, V, valid = cache.gather_pages(layer, [pid])
        yield K, V, (None if valid.all() else np.broadcast_to(valid, (P, len(valid)))), pid
    for j in range(i + 1):
        rows = slice(j * P, (j + 1) * P)
        mask = np.tril(np.ones((P, P), dtype=bool)) if j == i else None
        yield k_cur[rows], v_cur[rows], mask, None


def attn_forward(
    q: np.ndarray,
    k_cur: np.ndarray,
    v_cur: np.ndarray,
    cache: PagedCache,
    layer: int,
    selected: list[list[int]],
    scale: float,
) -> tuple[np.ndarray, AttnSaved]:
    """Causal attention of chunk queries ``[C, qh, d]`` over selected past pages plus the chunk itself.

    ``k_cur``/``v_cur`` are the chunk's own keys/values ``[C, kvh, d]``;
    ``selected[i]`` lists the past pages visible to query page ``i``.
    """
    C, qh, d = q.shape
    kvh = k_cur.shape[1]
    group = qh // kvh
    P = cache.page_size
    m = C // P
    if len(selected) != m:
        raise ValueError(f"{len(selected)} page selections for {m} query pages")
    O = np.empty_like(q)
    L = np.empty((C, qh), dtype=q.dtype)
    for i in range(m):
        qi = q[i * P : (i + 1) * P]
        run_max = np.full((qh, P), -np.inf, dtype=q.dtype)
        run_sum = np.zeros((qh, P), dtype=q.dtype)
        acc = np.zeros((qh, P, d), dtype=q.dtype)
        for K, V, mask, _ in _key_blocks(cache, layer, selected[i], k_cur, v_cur, i, P):
            Kh = np.repeat(K, group, axis=1)
            Vh = np.repeat(V, group, axis=1)
            s = np.einsum("tqd,sqd->qts", qi, Kh) * scale
            if mask is not None:
                s = np.where(mask[None], s, -np.inf)
            blk_max = s.max(axis=-1)
            new_max = np.maximum(run_max, blk_max)
            # rows with nothing visible yet keep -inf; guard the exp against inf - inf
            safe = np.where(np.isfinite(new_max), new_max, 0.0)
            alpha = np.exp(run_max - safe)
            p = np.exp(s - safe[..., None])
            run_sum = alpha * run_sum + p.sum(axis=-1)
            acc = alpha[..., None] * acc + np.einsum("qts,sqd->qtd", p, Vh)
            run_max = new_max
        O[i * P : (i + 1) * P] = (acc / run_sum[..., None]).transpose(1, 0, 2)
        L[i * P : (i + 1) * P] = (run_max + np.log(run_sum)).T
    return O, AttnSaved(O=O, L=L, selected=[list(s) for s in selected])


def attn_backward(
    dO: np.ndarray,
    q: np.ndarray,
    k_cur: np.ndarray,
    v_cur: np.ndarray,
    cache: PagedCache,
    layer: int,
    saved: AttnSaved,
    scale: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of :func:`attn_forward`.

    Returns ``(dq, dk_cur, dv_cur)``; gradients w.r.t. past pages are
    accumulated into the cache's gradient pages, never returned.
    """
    C, qh, d = q.shape
    kvh = k_cur.shape[1]
    group = qh // kvh
    P = cache.page_size
    m = C // P
    dq = np.zeros_like(q)
    dk_cur = np.zeros_like(k_cur)
    dv_cur = np.zeros_like(v_cur)
    for i in range(m):
        rows = slice(i * P, (i + 1) * P)
        qi = q[rows]
        dOi = dO[rows]
        Li = saved.L[rows].T
        Di = (dOi * saved.O[rows]).sum(axis=-1).T
        dqi = np.zeros_like(qi)
        for j, (K, V, mask, pid) in enumerate(_key_blocks(cache, layer, saved.selected[i], k_cur, v_cur, i, P)):
            Kh = np.repeat(K, group, axis=1)
            Vh = np.repeat(V, group, axis=1)
            s = np.einsum("tqd,sqd->qts", qi, Kh) * scale
            if mask is not None:
                s = np.where(mask[None], s, -np.inf)
            p = np.exp(s - Li[..., None])
            dVh = np.einsum("qts,tqd->sqd", p, dOi)
            dp = np.einsum("tqd,sqd->qts", dOi, Vh)
            ds = p * (dp - Di[..., None])
            dqi += np.einsum("qts,sqd->tqd", ds, Kh) * scale
            dKh = np.einsum("qts,tqd->sqd", ds, qi) * scale
            dK = dKh.reshape(P, kvh, group, d).sum(axis=2)
            dV = dVh.reshape(P, kvh, group, d).sum(axis=2)
            if pid is not None:
                cache.scatter_add_grads(layer, [pid], dK, dV)
            else:
                blk = j - len(saved.selected[i])
                dk_cur[blk * P : (blk + 1) * P] += dK
                dv_cur[blk * P : (blk + 1) * P] += dV
        dq[rows] = dqi
    return dq, dk_cur, dv_cur


def dense_attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float, q_offset: int = 0) -> np.ndarray:
    """Monolithic causal softmax attention; query row r sits at key position ``q_offset + r``."""
    group = q.shape[1] // k.shape[1]
    kh = np.repeat(k, group, axis=1)
    vh = np.repeat(v, group, axis=1)
    s = np.einsum("tqd,sqd->qts", q, kh) * scale
    rows = np.arange(q.shape[0])[:, None] + q_offset
    s = np.where(np.arange(k.shape[0])[None, :] <= rows, s, -np.inf)
    p = softmax_rows(s)
    return np.einsum("qts,sqd->tqd", p, vh)
