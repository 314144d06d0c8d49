"""Command-line entry point: train, gradcheck, membench, schedule-report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from chunktrain.chunk_trainer import ChunkTrainer, fit
from chunktrain.errors import ConfigError
from chunktrain.model import ModelConfig, desk_config, init_params, load_config, save_checkpoint
from chunktrain.oracle import compare_grads, full_forward_backward
from chunktrain.paged_kv import PagedCache, contiguous_append_baseline
from chunktrain.tiered_memory import TierConfig, replay_stall, schedule_summary, validate_schedule

log = logging.getLogger("chunktrain")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VIOLATION = 0, 1, 2, 3
METRIC_FIELDS = ("step", "loss", "tape_peak_bytes", "kv_bytes", "grad_page_bytes", "transfer_bytes", "stall_ms")
MODE_ALIASES = {"dense": "dense", "topk": "topk", "local": "local"}


# -- inputs -------------------------------------------------------------------


def synthetic_corpus(kind: str, n_tokens: int, vocab: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if kind == "random":
        return rng.integers(0, vocab, n_tokens)
    if kind == "periodic":
        pattern = rng.integers(0, vocab, 16)
        return np.resize(pattern, n_tokens)
    if kind == "needle":
        # random haystack; a (key, value) pair planted early is repeated at the end
        toks = rng.integers(2, vocab, n_tokens)
        key, val = rng.integers(2, vocab, 2)
        toks[n_tokens // 8] = key
        toks[n_tokens // 8 + 1] = val
        toks[-2] = key
        toks[-1] = val
        return toks
    raise ConfigError(f"unknown synthetic corpus {kind!r} (random, periodic, needle)")


def read_corpus(path: str | Path, vocab: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<u4").astype(np.int64)
    if data.size == 0:
        raise ConfigError(f"{path}: empty corpus")
    if data.max() >= vocab:
        raise ConfigError(f"{path}: token id {int(data.max())} outside vocab of {vocab}")
    return data


def write_corpus(path: str | Path, tokens: np.ndarray) -> None:
    np.asarray(tokens, dtype="<u4").tofile(path)


def scaled_budget_grid(chunk_size: int, page_size: int) -> list[int]:
    """Budgets at C/8, C/2, 2C and 8C tokens, rounded up to whole pages."""
    out = []
    for frac in (1 / 8, 1 / 2, 2, 8):
        b = max(page_size, int(np.ceil(chunk_size * frac / page_size)) * page_size)
        out.append(b)
    return out


# -- argument parsing ---------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value model config file")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--corpus", help="u32 little-endian token id file")
    src.add_argument("--synthetic", choices=("random", "periodic", "needle"), default=None)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--seq-len", type=int, default=None, help="tokens per training sequence (default 4 chunks)")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--page-size", type=int)
    p.add_argument("--budget", type=int, help="retrieval budget in tokens")
    p.add_argument("--mode", choices=tuple(MODE_ALIASES))
    p.add_argument("--offload", choices=("on", "off"), default="off")
    p.add_argument("--device-capacity", type=int, help="device tier capacity in pages")
    p.add_argument("--bandwidth", type=float, help="simulated link bandwidth, bytes/s")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--out", default="out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunktrain", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="fit the model and stream per-step metrics")
    _common(p)
    p.add_argument("--sweep-chunk-sizes", help="comma-separated chunk sizes; writes chunk_sweep.csv")
    p = sub.add_parser("gradcheck", help="chunked and sparse gradients against the full-sequence oracle")
    _common(p)
    p.add_argument("--seeds", type=int, default=1)
    p = sub.add_parser("membench", help="paged vs contiguous KV memory as the sequence grows")
    _common(p)
    p.add_argument("--max-tokens", type=int, default=2048)
    p = sub.add_parser("schedule-report", help="one offloaded train step and its schedule summary")
    _common(p)
    return parser


def model_config(args) -> ModelConfig:
    overrides = {}
    for flag, key in (("chunk_size", "chunk_size"), ("page_size", "page_size"), ("budget", "retrieval_budget"), ("precision", "precision")):
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = val
    overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["attention_mode"] = MODE_ALIASES[args.mode]
    if args.config:
        values = load_config(args.config)
        base = {f: getattr(values, f) for f in ModelConfig.__dataclass_fields__}
        base.update(overrides)
        if isinstance(base.get("attention_mode"), str):
            base["attention_mode"] = [base["attention_mode"]] * base["n_layers"]
        return ModelConfig(**base)
    if "attention_mode" in overrides:
        overrides["attention_mode"] = [overrides["attention_mode"]] * ModelConfig.n_layers
    return desk_config(**overrides)


def tier_config(args) -> TierConfig | None:
    if args.offload != "on" and args.command != "schedule-report":
        return None
    kw = {}
    if args.device_capacity is not None:
        kw["device_capacity_pages"] = args.device_capacity
    if args.bandwidth is not None:
        kw["bandwidth_bytes_per_s"] = args.bandwidth
    return TierConfig(**kw)


def corpus_for(args, config: ModelConfig, seq_len: int) -> np.ndarray:
    if args.corpus:
        return read_corpus(args.corpus, config.vocab_size)
    kind = args.synthetic or "random"
    return synthetic_corpus(kind, seq_len * 4, config.vocab_size, args.seed)


def _seq_len(args, config: ModelConfig, default_chunks: int = 4) -> int:
    n = args.seq_len if args.seq_len is not None else default_chunks * config.chunk_size
    if n < 2:
        raise ConfigError("--seq-len must be at least 2")
    return n


# -- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    config = model_config(args)
    tier = tier_config(args)
    if args.steps < 0:
        raise ConfigError("--steps must be >= 0")
    seq_len = _seq_len(args, config)
    corpus = corpus_for(args, config, seq_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.sweep_chunk_sizes:
        return _chunk_sweep(args, config, corpus, seq_len, out)

    trainer = ChunkTrainer(config, init_params(config, args.seed), tier)
    sched_path = out / "schedule.jsonl"
    with open(out / "metrics.jsonl", "w") as metrics:

        def emit(rec):
            metrics.write(json.dumps({k: rec[k] for k in METRIC_FIELDS}) + "\n")
            log.info("step %d loss %.4f", rec["step"], rec["loss"])

        fit(trainer, corpus, args.steps, seq_len, lr=args.lr, on_step=emit)
    if args.steps > 0:
        with open(out / "retrieval.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "chunk", "query_page", "selected"])
            for layer, chunk, qp, ids in trainer.retrieval_rows():
                w.writerow([layer, chunk, qp, " ".join(map(str, ids))])
        if tier is not None:
            trainer.schedule.to_jsonl(sched_path)
    save_checkpoint(out / "checkpoint.bin", trainer.params)
    return EXIT_OK


def _chunk_sweep(args, config, corpus, seq_len, out: Path) -> int:
    sizes = [int(s) for s in args.sweep_chunk_sizes.split(",") if s.strip()]
    tokens = corpus[:seq_len]
    rows = []
    for C in sizes:
        cfg = config.replace(chunk_size=C)
        trainer = ChunkTrainer(cfg, init_params(cfg, args.seed), tier_config(args))
        steps = max(args.steps, 1)
        t0 = time.perf_counter()
        for _ in range(steps):
            trainer.train_step(tokens)
        dt = time.perf_counter() - t0
        rows.append(
            {
                "chunk_size": C,
                "tokens_per_s": steps * len(tokens) / dt,
                "tape_peak_bytes": trainer.last_report["tape_peak_bytes"],
                "kv_bytes": trainer.last_report["kv_bytes"],
            }
        )
        log.info("chunk %d: %.0f tok/s", C, rows[-1]["tokens_per_s"])
    with open(out / "chunk_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["chunk_size"])
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = model_config(args).replace(attention_mode="dense")
    seq_len = _seq_len(args, config, default_chunks=8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    budgets = scaled_budget_grid(config.chunk_size, config.page_size)
    corpus = corpus_for(args, config, seq_len)
    csv_rows = []
    worst_dense = 0.0
    for s in range(args.seeds):
        seed = args.seed + s
        params = init_params(config, seed)
        tokens = corpus[:seq_len] if s == 0 else synthetic_corpus("random", seq_len, config.vocab_size, seed)
        _, oracle = full_forward_backward(config, params, tokens)
        _, dense = ChunkTrainer(config, params).train_step(tokens)
        rep = compare_grads(dense, oracle)
        worst_dense = max(worst_dense, rep.max_rel)
        (out / f"gradreport_dense_seed{seed}.json").write_text(rep.to_json())
        for b in budgets:
            cfg = config.replace(attention_mode="topk", retrieval_budget=b)
            _, sparse = ChunkTrainer(cfg, params).train_step(tokens)
            rep = compare_grads(sparse, dense)
            (out / f"gradreport_budget{b}_seed{seed}.json").write_text(rep.to_json())
            for e in rep.entries:
                csv_rows.append([seed, b, seq_len, "" if e.layer is None else e.layer, e.matrix, repr(e.l2)])
    with open(out / "grad_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "budget", "context", "layer", "matrix", "l2"])
        w.writerows(csv_rows)
    print(f"dense chunked vs oracle: max rel err {worst_dense:.3e}")
    return EXIT_OK


def membench_rows(config: ModelConfig, max_tokens: int) -> list[dict]:
    """Paged vs contiguous KV bytes after each chunk append, summed over layers."""
    cache = PagedCache(config)
    L, C = config.n_layers, config.chunk_size
    per_token = 2 * config.n_kv_heads * config.head_dim * np.dtype(config.dtype).itemsize
    rng = np.random.default_rng(config.seed)
    n_chunks = max(1, max_tokens // C)
    exact = contiguous_append_baseline([C] * n_chunks, per_token, "exact")["trace"]
    double = contiguous_append_baseline([C] * n_chunks, per_token, "double")["trace"]
    rows = []
    paged_peak = 0
    for i in range(n_chunks):
        for l in range(L):
            kv = rng.standard_normal((C, config.n_kv_heads, config.head_dim)).astype(config.dtype)
            cache.append_chunk(l, kv, kv)
        rep = cache.memory_report()
        paged_peak = max(paged_peak, rep["device_bytes"] + rep["host_bytes"])
        T = (i + 1) * C
        theoretical = T * per_token * L
        rows.append(
            {
                "T": T,
                "paged_peak": paged_peak,
                "contiguous_peak": exact[i]["step_peak"] * L,
                "contiguous_double_peak": double[i]["step_peak"] * L,
                "theoretical": theoretical,
                "paged_copied_bytes": rep["copied_bytes"],
                "realloc": int(exact[i]["realloc"]),
            }
        )
    return rows


def cmd_membench(args) -> int:
    config = model_config(args)
    rows = membench_rows(config, args.max_tokens)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "membench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    last = rows[-1]
    print(
        f"T={last['T']}: paged/theoretical {last['paged_peak'] / last['theoretical']:.2f}, "
        f"contiguous/theoretical {last['contiguous_peak'] / last['theoretical']:.2f}"
    )
    return EXIT_OK


def cmd_schedule_report(args) -> int:
    config = model_config(args)
    tier = tier_config(args)
    seq_len = _seq_len(args, config)
    tokens = corpus_for(args, config, seq_len)[:seq_len]
    trainer = ChunkTrainer(config, init_params(config, args.seed), tier)
    trainer.train_step(tokens)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer.schedule.to_jsonl(out / "schedule.jsonl")
    summary = schedule_summary(trainer.schedule)
    summary["replay_stall_seconds"] = replay_stall(trainer.schedule)
    (out / "schedule_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"{'violations':<22}{summary['violations']}")
    print(f"{'stall_ms':<22}{summary['stall_seconds'] * 1e3:.6f}")
    print(f"{'replay_stall_ms':<22}{summary['replay_stall_seconds'] * 1e3:.6f}")
    print(f"{'overlap_fraction':<22}{summary['overlap_fraction']:.4f}")
    print(f"{'transfer_bytes':<22}{summary['transfer_bytes']}")
    print(f"{'writeback_bytes':<22}{summary['writeback_bytes']}")
    print(f"{'lru_evictions':<22}{summary['lru_evictions']}")
    if summary["violations"]:
        for v in validate_schedule(trainer.schedule)["violations"][:20]:
            print("violation:", v, file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "membench": cmd_membench,
    "schedule-report": cmd_schedule_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
