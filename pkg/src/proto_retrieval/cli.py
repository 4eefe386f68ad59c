"""Command-line entry point: ``proto-retrieval <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .config import ConfigError, HyperParams
from .data import CORPUS_FILENAME, SyntheticSpec, generate_synthetic_corpus, load_corpus, load_synthetic_spec, save_corpus
from .evaluation import (
    RECALL_KS,
    attention_similarity_correlation,
    evaluate,
    frame_attention,
    matching_frequency,
    moment_ratio_breakdown,
    moment_ratios,
)
from .index import build_index, load_index, matching_flops, memory_footprint, rank_scores, save_index, score_pooled
from .model import BRANCHES
from .trainer import load_checkpoint, save_checkpoint, train, write_history_csv

PROG = "proto-retrieval"
SEED_ENV = "PROTO_RETRIEVAL_SEED"
CHECKPOINT_FILENAME = "checkpoint.prck"
INDEX_FILENAME = "index.ppvr"

log = logging.getLogger(PROG)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{PROG}:error:UsageError: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field (repeatable)")
    common.add_argument("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV})")
    common.add_argument("--threads", type=int, help="torch intra-op threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog=PROG, description="Prototype-based partially relevant video retrieval.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", parents=[common], help="write a synthetic corpus with planted moments")
    p.add_argument("--spec", help="synthetic corpus spec (key = value)")
    p.add_argument("--videos", type=int, help="number of videos (overrides the --spec file)")

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="corpus file or directory")
    p.add_argument("--preset", choices=("desk", "default"), default="desk")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--patience", type=int, default=0, help="early-stop patience in steps (0 = off)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("index", parents=[common], help="build a prototype index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("query", parents=[common], help="rank indexed videos for text features")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text-features", required=True, help=".npy (L, D) / (Q, L, D) or .npz of (L, D) arrays")
    p.add_argument("--topk", type=int, default=10)

    p = sub.add_parser("evaluate", parents=[common], help="recall metrics over a corpus' queries")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("analyze", parents=[common], help="attention, matching-frequency and moment-ratio tables")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--plots", action="store_true", help="also render PNG figures (needs matplotlib)")
    p.add_argument("--ratio-edges", default="0.05,0.1,0.2,0.4,1.0")

    p = sub.add_parser("bench", parents=[common], help="memory / FLOPs accounting and scoring time")
    p.add_argument("--videos", type=int, default=1000)
    p.add_argument("--protos", type=int, default=30)
    p.add_argument("--dim", type=int, default=384)
    p.add_argument("--branches", type=int, default=2)
    p.add_argument("--index", help="measure wall-clock scoring against this index")
    p.add_argument("--queries", type=int, default=100, help="synthetic queries for timing")
    p.add_argument("--repeats", type=int, default=5)
    return parser


# ── Helpers ─────────────────────────────────────────────────

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _corpus_file(path) -> Path:
    path = Path(path)
    return path / CORPUS_FILENAME if path.is_dir() else path


def resolve_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}") from None


def resolve_config(args, base: HyperParams) -> HyperParams:
    cfg = cfgmod.load(args.config, base) if args.config else base
    cfg = cfgmod.apply_overrides(cfg, args.set)
    seed = resolve_seed(args)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfgmod.validate(cfg)


def out_dir(args, required: bool = True) -> Path | None:
    if args.out is None:
        if required:
            raise UsageError("--out is required for this command")
        return None
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, args, argv, config: HyperParams | None, inputs: dict, outputs: list[str]):
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": config.to_dict() if config else None,
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in sorted(inputs.items())},
        "outputs": sorted(outputs),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if config is not None:
        cfgmod.save(config, out / "config.txt")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _load_model(path):
    state = load_checkpoint(path)
    state.model.eval()
    return state


def _checked_index(index_path, model):
    index = load_index(index_path)
    if index.fingerprint and index.fingerprint != model.fingerprint():
        raise ValueError(f"index {index_path} was built from a different checkpoint")
    return index


# ── Subcommands ─────────────────────────────────────────────

def cmd_generate_data(args, argv):
    out = out_dir(args)
    spec = load_synthetic_spec(args.spec) if args.spec else SyntheticSpec()
    overrides = {}
    if args.videos is not None:
        overrides["n_videos"] = args.videos
    seed = resolve_seed(args)
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        spec = SyntheticSpec(**{**spec.__dict__, **overrides})
    videos, queries = generate_synthetic_corpus(spec)
    path = save_corpus(videos, queries, out)
    spec_lines = [f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}" for k, v in spec.__dict__.items()]
    (out / "synthetic_spec.txt").write_text("\n".join(spec_lines) + "\n")
    write_manifest(out, args, argv, None, {"spec": args.spec} if args.spec else {},
                   [path.name, "synthetic_spec.txt"])
    print(f"wrote {len(videos)} videos and {len(queries)} queries to {path}")


def cmd_train(args, argv):
    out = out_dir(args)
    videos, queries = load_corpus(args.data)
    inputs = {"data": _corpus_file(args.data)}
    if args.resume:
        state = load_checkpoint(args.resume)
        inputs["resume"] = Path(args.resume)
        if args.config or args.set:
            raise UsageError("--config/--set cannot change a resumed run's configuration")
        cfg = state.config
    else:
        base = cfgmod.desk_config() if args.preset == "desk" else cfgmod.default_config()
        cfg = resolve_config(args, base)
        state = None
    if args.steps < 0:
        raise UsageError("--steps must be ≥ 0")
    state = train(videos, queries, cfg, args.steps, state=state, patience=args.patience,
                  dump_dir=out, log_every=args.log_every)
    save_checkpoint(state, out / CHECKPOINT_FILENAME)
    write_history_csv(state.history, out / "history.csv")
    write_manifest(out, args, argv, cfg, inputs, [CHECKPOINT_FILENAME, "history.csv"])
    last = state.history[-1]["total"] if state.history else float("nan")
    print(f"trained {len(state.history)} steps (now at step {state.step}); final total loss {last:.6f}")


def cmd_index(args, argv):
    out = out_dir(args)
    state = _load_model(args.checkpoint)
    videos, _ = load_corpus(args.data)
    index = build_index(state.model, videos)
    save_index(index, out / INDEX_FILENAME)
    write_manifest(out, args, argv, state.config,
                   {"checkpoint": Path(args.checkpoint), "data": _corpus_file(args.data)}, [INDEX_FILENAME])
    print(f"indexed {len(index)} videos, {index.payload_bytes} payload bytes "
          f"({memory_footprint(index.n_prototypes, index.dim, digits=None):.4f} MB per video)")


def load_text_features(path) -> list[tuple[str, np.ndarray]]:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as data:
            items = [(k, np.asarray(data[k], dtype=np.float32)) for k in sorted(data.files)]
    elif path.suffix == ".npy":
        arr = np.asarray(np.load(path), dtype=np.float32)
        if arr.ndim == 2:
            items = [("q0", arr)]
        elif arr.ndim == 3:
            items = [(f"q{i}", a) for i, a in enumerate(arr)]
        else:
            raise ValueError(f"{path}: expected a (L, D) or (Q, L, D) array, got shape {arr.shape}")
    else:
        raise UsageError(f"--text-features must be .npy or .npz, got {path.name}")
    for name, a in items:
        if a.ndim != 2 or a.shape[0] == 0:
            raise ValueError(f"query {name!r} must be a non-empty (L, D) array, got shape {a.shape}")
    return items


def cmd_query(args, argv):
    out = out_dir(args, required=False)
    if args.topk < 1:
        raise UsageError("--topk must be ≥ 1")
    state = _load_model(args.checkpoint)
    index = _checked_index(args.index, state.model)
    items = load_text_features(args.text_features)
    pooled = state.model.query_tokens([a for _, a in items])
    scores = score_pooled(index, pooled["clip"], pooled["frame"])
    rows = []
    for qi, (name, _) in enumerate(items):
        order = rank_scores(scores[qi], index.video_ids)[: args.topk]
        rows += [(name, r + 1, index.video_ids[j], _fmt(scores[qi, j])) for r, j in enumerate(order)]
    header = ("query_id", "rank", "video_id", "score")
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    if out:
        write_csv(out / "ranking.csv", header, rows)
        write_manifest(out, args, argv, state.config,
                       {"index": Path(args.index), "checkpoint": Path(args.checkpoint),
                        "text_features": Path(args.text_features)}, ["ranking.csv"])


def cmd_evaluate(args, argv):
    out = out_dir(args)
    state = _load_model(args.checkpoint)
    index = _checked_index(args.index, state.model)
    _, queries = load_corpus(args.data)
    report = evaluate(index, queries, state.model)
    keys = [f"R@{k}" for k in RECALL_KS] + ["SumR"]
    row = report.recall_row()
    write_csv(out / "metrics.csv", keys + ["memory_mb_per_video", "matching_gflops"],
              [[f"{row[k]:.2f}" for k in keys] + [f"{report.memory_mb:.2f}", f"{report.matching_gflops:.2f}"]])
    write_csv(out / "ranks.csv", ("query_id", "target_video_id", "rank"),
              [(q.query_id, q.target_video_id, int(r)) for q, r in zip(queries, report.ranks)])
    (out / "timing.json").write_text(json.dumps({
        "score_ms_per_query": report.ms_per_query,
        "encode_ms_per_query": report.encode_ms_per_query,
    }, indent=2) + "\n")
    write_manifest(out, args, argv, state.config,
                   {"index": Path(args.index), "checkpoint": Path(args.checkpoint), "data": _corpus_file(args.data)},
                   ["metrics.csv", "ranks.csv", "timing.json"])
    print("  ".join(f"{k} {row[k]:.2f}" for k in keys))


def cmd_analyze(args, argv):
    out = out_dir(args)
    state = _load_model(args.checkpoint)
    model = state.model
    index = _checked_index(args.index, model)
    videos, queries = load_corpus(args.data)
    try:
        edges = tuple(float(x) for x in args.ratio_edges.split(","))
    except ValueError:
        raise UsageError(f"bad --ratio-edges {args.ratio_edges!r}") from None
    report = evaluate(index, queries, model)
    outputs = []

    annotated = [q for q in queries if _moment(videos, q) is not None]
    if annotated:
        pos = {q.query_id: i for i, q in enumerate(queries)}
        ranks = report.ranks[[pos[q.query_id] for q in annotated]]
        rows = moment_ratio_breakdown(ranks, moment_ratios(videos, annotated), edges)
        keys = [f"R@{k}" for k in RECALL_KS] + ["SumR"]
        write_csv(out / "moment_ratio.csv", ["ratio_lo", "ratio_hi", "count"] + keys,
                  [[r["lo"], r["hi"], r["count"]] + [f"{r[k]:.2f}" for k in keys] for r in rows])
        outputs.append("moment_ratio.csv")

    pooled = model.query_tokens([q.tokens for q in queries])
    freq = matching_frequency(index, pooled, [q.target_video_id for q in queries])
    write_csv(out / "matching_frequency.csv", ["slot"] + list(BRANCHES),
              [[p] + [int(freq[b][p]) for b in BRANCHES] for p in range(index.n_prototypes)])
    outputs.append("matching_frequency.csv")

    mass_rows, profile = attention_by_rank(model, videos, annotated, pooled, queries)
    if mass_rows:
        write_csv(out / "attention_mass.csv",
                  ("query_id", "branch", "similarity_rank", "similarity", "moment_mass"), mass_rows)
        corr = attention_similarity_correlation(model, videos, annotated)
        write_csv(out / "attention_correlation.csv", ("branch", "mean_spearman", "n_queries"),
                  [(b, _fmt(corr["mean"][b]), len(corr["per_query"][b])) for b in BRANCHES]
                  + [("mean", _fmt(corr["mean"]["mean"]), sum(len(v) for v in corr["per_query"].values()))])
        outputs += ["attention_mass.csv", "attention_correlation.csv"]

    if args.plots:
        outputs += render_plots(out, freq, profile, rows if annotated else [])
    write_manifest(out, args, argv, state.config,
                   {"index": Path(args.index), "checkpoint": Path(args.checkpoint), "data": _corpus_file(args.data)},
                   outputs)
    print(f"wrote {', '.join(outputs)} to {out}")


def _moment(videos, q):
    for v in videos:
        if v.video_id == q.target_video_id:
            return v.moment_for(q.query_id)
    return None


def attention_by_rank(model, videos, annotated, pooled, queries):
    """Rows of in-moment mass per prototype ordered by query similarity, plus the per-rank mean."""
    from .evaluation import attention_moment_mass, branch_similarities

    by_id = {v.video_id: v for v in videos}
    pos = {q.query_id: i for i, q in enumerate(queries)}
    rows, profile, cache = [], {b: [] for b in BRANCHES}, {}
    for q in annotated:
        video = by_id[q.target_video_id]
        if video.video_id not in cache:
            cache[video.video_id] = frame_attention(model, video.frames)
        span = video.moment_for(q.query_id)
        for b in BRANCHES:
            attn, protos = cache[video.video_id][b]
            sims = branch_similarities(protos[None], pooled[b][pos[q.query_id]][None])[0, 0]
            mass = attention_moment_mass(attn, span, video.length)
            order = np.argsort(-sims, kind="stable")
            profile[b].append(mass[order])
            rows += [(q.query_id, b, r + 1, _fmt(sims[p]), _fmt(mass[p])) for r, p in enumerate(order)]
    return rows, {b: np.mean(v, axis=0) for b, v in profile.items() if v}


def render_plots(out: Path, freq, profile, ratio_rows) -> list[str]:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("--plots needs matplotlib (pip install matplotlib)") from exc
    written = []
    fig, ax = plt.subplots(figsize=(5, 3))
    width = 0.4
    for k, b in enumerate(BRANCHES):
        ax.bar(np.arange(len(freq[b])) + k * width, freq[b], width, label=b)
    ax.set_xlabel("prototype slot")
    ax.set_ylabel("queries matched")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "matching_frequency.png")
    plt.close(fig)
    written.append("matching_frequency.png")
    if profile:
        fig, ax = plt.subplots(figsize=(5, 3))
        for b, curve in profile.items():
            ax.plot(np.arange(1, len(curve) + 1), curve, marker="o", label=b)
        ax.set_xlabel("similarity rank")
        ax.set_ylabel("attention mass in moment")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "attention_mass.png")
        plt.close(fig)
        written.append("attention_mass.png")
    if ratio_rows:
        fig, ax = plt.subplots(figsize=(5, 3))
        labels = [f"({r['lo']}, {r['hi']}]" for r in ratio_rows]
        ax.bar(labels, [r["SumR"] for r in ratio_rows])
        ax.set_xlabel("moment / video length")
        ax.set_ylabel("SumR")
        fig.tight_layout()
        fig.savefig(out / "moment_ratio.png")
        plt.close(fig)
        written.append("moment_ratio.png")
    return written


def cmd_bench(args, argv):
    out = out_dir(args, required=False)
    mb = memory_footprint(args.protos, args.dim, args.branches)
    gf = matching_flops(args.videos, args.protos, args.dim, args.branches)
    print(f"memory per video {mb:.2f} MB")
    print(f"matching FLOPs {gf:.2f} G")
    timing = None
    if args.index:
        index = load_index(args.index)
        rng = np.random.default_rng(resolve_seed(args) or 0)
        clip_q = rng.standard_normal((args.queries, index.dim))
        frame_q = rng.standard_normal((args.queries, index.dim))
        per_query = []
        for _ in range(args.repeats):
            for i in range(args.queries):
                t0 = time.perf_counter()
                score_pooled(index, clip_q[i], frame_q[i])
                per_query.append(1e3 * (time.perf_counter() - t0))
        timing = {"videos": len(index), "queries": args.queries, "repeats": args.repeats,
                  "mean_ms": float(np.mean(per_query)), "p95_ms": float(np.percentile(per_query, 95))}
        print(f"scoring {timing['mean_ms']:.3f} ms/query mean, {timing['p95_ms']:.3f} ms p95 "
              f"over {len(index)} videos")
    if out:
        write_csv(out / "bench.csv", ("videos", "protos", "dim", "branches", "memory_mb_per_video", "matching_gflops"),
                  [(args.videos, args.protos, args.dim, args.branches, f"{mb:.2f}", f"{gf:.2f}")])
        outputs = ["bench.csv"]
        if timing:
            (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
            outputs.append("timing.json")
        write_manifest(out, args, argv, None, {"index": Path(args.index)} if args.index else {}, outputs)


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "index": cmd_index,
    "query": cmd_query,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print(f"{PROG}:error:UsageError: --threads must be ≥ 1", file=sys.stderr)
            return 2
        torch.set_num_threads(args.threads)
    try:
        COMMANDS[args.command](args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"{PROG}:error:{type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        log.debug("failure", exc_info=True)
        print(f"{PROG}:error:{type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
