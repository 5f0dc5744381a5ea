"""``pivotseg`` command line: gen-data, train, decode, eval, bench, ablate.

Every command writes its outputs under ``--out`` with fixed names plus a
``manifest.json`` recording the resolved configuration, input/output content
hashes and wall time.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .checkpoint import CheckpointError
from .data import DataError, SyntheticConfig, generate_synthetic, load_dataset, runs, save_dataset
from .decoding import DecodeError, parse_terminals
from .metrics import evaluate, group_proposals, pr_curve, write_report
from .model import PivotConfig, attention_cost, block_shape, optimal_N
from .nn import ConfigError
from .optim import TrainingError

log = logging.getLogger("pivotseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TRAIN_KEYS = {"epochs": int, "lr": float, "weight_decay": float}
TRAIN_DEFAULTS = {"epochs": 20, "lr": 3e-4, "weight_decay": 5e-5}
BENCH_LENGTHS = (64, 128, 256, 512, 1024, 2048)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifest helpers


def blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_paths(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name != "manifest.json" and f.exists():
                out[str(f)] = blob_hash(f.read_bytes())
    return out


def write_manifest(out_dir: Path, command: str, argv, config: dict, seed, inputs, outputs,
                   started: float) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": _hash_paths(inputs),
        "outputs": _hash_paths(outputs),
        "timing_s": round(time.perf_counter() - started, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# configuration resolution: flags > config file > defaults

MODEL_FLAGS = {
    "d": "d", "heads": "heads", "B": "B", "layers_per_stage": "layers_per_stage", "N": "N",
    "dropout": "dropout", "shift_enabled": "shift_enabled", "pivot_enabled": "pivot_enabled",
    "backbone": "backbone", "boundary_head": "boundary_head", "lam": "lam",
    "modalities": "modalities", "seed": "seed",
}


def resolve_config(args, info: dict | None = None) -> tuple[PivotConfig, dict]:
    file_values = checkpoint.read_config(args.config) if getattr(args, "config", None) else {}
    model_keys = {f.name for f in fields(PivotConfig)}
    unknown = set(file_values) - model_keys - set(TRAIN_KEYS)
    if unknown:
        raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
    model_raw = {k: v for k, v in file_values.items() if k in model_keys}
    try:
        base = PivotConfig.from_strings(model_raw) if model_raw else PivotConfig()
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config file value: {exc}") from None
    values = asdict(base)
    for dest, key in MODEL_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
    if info is not None:
        values["semantic_dim"] = info["semantic_dim"]
        values["n_mels"] = info["n_mels"]
        values["n_speakers"] = max(values["n_speakers"], info["n_speakers"])
    try:
        cfg = PivotConfig(**values)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    train_cfg = dict(TRAIN_DEFAULTS)
    for k, conv in TRAIN_KEYS.items():
        if k in file_values:
            train_cfg[k] = conv(file_values[k])
        if getattr(args, k, None) is not None:
            train_cfg[k] = getattr(args, k)
    if train_cfg["epochs"] < 1:
        raise UsageError("--epochs must be >= 1")
    return cfg, train_cfg


def _config_lines(cfg: PivotConfig, train_cfg: dict) -> dict:
    return {**cfg.to_dict(), **train_cfg}


def _load_run(model_dir: Path):
    from .model import HighlightModel

    values = checkpoint.read_config(model_dir / "config.txt")
    model_values = {k: v for k, v in values.items() if k not in TRAIN_KEYS}
    cfg = PivotConfig.from_strings(model_values)
    model = HighlightModel(cfg)
    checkpoint.load_into(model, model_dir / "model.apvt")
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    if args.records < 1:
        raise UsageError("--records must be >= 1")
    if args.scale <= 0:
        raise UsageError("--scale must be positive")
    syn = SyntheticConfig(
        n_records=args.records, scale=args.scale, signal_strength=args.signal,
        n_speakers=args.speakers, semantic_dim=args.semantic_dim, n_mels=args.n_mels,
        latent_dim=args.latent_dim, seed=args.seed,
    )
    try:
        ds = generate_synthetic(syn)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    try:
        splits = save_dataset(ds, out, split_seed=args.seed, fractions=args.split)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    sizes = {k: len(v) for k, v in splits.items()}
    print(f"wrote {len(ds.annotations)} records to {out} "
          f"(train {sizes['train']}, val {sizes['val']}, test {sizes['test']})")
    write_manifest(out, "gen-data", args.argv, {**asdict(syn), "split": list(args.split)},
                   args.seed, [], [out], started)
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import HighlightModel
    from .plotting import training_curve
    from .training import train

    started = time.perf_counter()
    groups, info = load_dataset(args.data)
    cfg, train_cfg = resolve_config(args, info)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = HighlightModel(cfg)
    log.info("model has %d parameters", model.num_parameters())
    report, blob = train(
        model, groups["train"], groups["val"], epochs=train_cfg["epochs"],
        base_lr=train_cfg["lr"], weight_decay=train_cfg["weight_decay"], seed=cfg.seed,
    )
    (out / "model.apvt").write_bytes(blob)
    checkpoint.write_config(_config_lines(cfg, train_cfg), out / "config.txt")
    (out / "train_report.jsonl").write_text(report.jsonl(), encoding="utf-8")
    training_curve(report.epochs, out / "training_curve.png")
    print(f"selected epoch {report.best_epoch} (validation AP@0.5 {report.best_metric:.4f})")
    write_manifest(out, "train", args.argv, _config_lines(cfg, train_cfg), cfg.seed,
                   [args.data] + ([args.config] if args.config else []), [out], started)
    return EXIT_OK


def cmd_decode(args) -> int:
    from .plotting import score_plot
    from .training import predict, score_record

    started = time.perf_counter()
    try:
        terminals = parse_terminals(args.terminal_states)
    except DecodeError as exc:
        raise UsageError(str(exc)) from None
    model_dir = Path(args.model)
    model, cfg = _load_run(model_dir)
    if args.strategy == "greedy" and cfg.boundary_head != "three_class":
        raise UsageError("--strategy greedy needs a checkpoint trained with --boundary-head three_class")
    groups, _ = load_dataset(args.data)
    records = _split(groups, args.split)
    preds = predict(model, records, args.strategy, terminals=terminals, t_b=args.t_b, t_h=args.t_h)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [p for rec in records for p in preds[rec.record_id]]
    _dump_json(rows, out / "proposals.json")
    with open(out / "scores.jsonl", "w", encoding="utf-8") as fh:
        for i, rec in enumerate(records):
            seq, _ = score_record(model, rec)
            fh.write(json.dumps(seq.to_json(), sort_keys=True) + "\n")
            if i < args.plots:
                norm = seq.normalize()
                spans = [(p["start_idx"], p["end_idx"]) for p in preds[rec.record_id]]
                score_plot(norm.h, norm.b, spans, runs(rec.labels.h_bar),
                           out / f"scores_{rec.record_id}.png", title=rec.record_id)
    print(f"{len(rows)} proposals over {len(records)} records -> {out / 'proposals.json'}")
    config = {**cfg.to_dict(), "strategy": args.strategy, "terminal_states": args.terminal_states,
              "t_b": args.t_b, "t_h": args.t_h, "split": args.split}
    write_manifest(out, "decode", args.argv, config, cfg.seed, [args.data, model_dir], [out], started)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .plotting import pr_plot
    from .training import ground_truth

    started = time.perf_counter()
    src = Path(args.proposals)
    if src.is_dir():
        src = src / "proposals.json"
    rows = json.loads(src.read_text(encoding="utf-8"))
    if not isinstance(rows, list):
        raise DataError(f"{src}: expected a JSON list of proposals")
    groups, _ = load_dataset(args.data)
    records = _split(groups, args.split)
    gts = ground_truth(records)
    preds = {rid: [] for rid in gts}
    for rid, items in group_proposals(rows).items():
        if rid not in gts:
            raise DataError(f"{src}: proposal for record {rid!r} outside split {args.split!r}")
        preds[rid] = items
    report = evaluate(preds, gts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json", out / "report.txt", label=args.label)
    pr_plot({t: pr_curve(preds, gts, t) for t in report.ap}, out / "pr_curve.png")
    print(report.table(args.label), end="")
    write_manifest(out, "eval", args.argv, {"split": args.split, "label": args.label}, None,
                   [args.data, src], [out], started)
    return EXIT_OK


def bench_rows(lengths, d: int, count: bool = True, use_optimal: bool = False, seed: int = 0):
    """One row per L: analytic MACs for both encoders and, optionally, counted ones."""
    from . import autograd as ag
    from .model import PivotEncoder
    from .nn import DropoutRNG, MultiHeadAttention, count_macs

    rng = np.random.default_rng(seed)
    rows = []
    for L in lengths:
        N_req = optimal_N(L) if use_optimal else max(1, int(np.floor(np.sqrt(L) + 0.5)))
        cost = attention_cost(L, N_req, d)
        row = {
            "L": L, "N": cost.N, "M": cost.M, "d": d,
            "exact_division": int(cost.N * cost.M == L),
            "pivot_macs": cost.pivot_macs,
            "pivot_macs_with_token": cost.pivot_macs_with_token,
            "vanilla_macs": cost.vanilla_macs,
            "ratio": cost.ratio,
            "optimal_N": optimal_N(L),
            "L_two_thirds": L ** (2.0 / 3.0),
        }
        if count:
            heads = 4 if d % 4 == 0 else 1
            cfg = PivotConfig(d=d, heads=heads, B=1, layers_per_stage=1, dropout=0.0,
                              shift_enabled=False, semantic_dim=d, n_mels=1)
            enc = PivotEncoder(cfg, rng, DropoutRNG(seed))
            N, M = block_shape(L, N_req)
            blocks = ag.Tensor(rng.normal(size=(N, M, d)))
            mask = (np.arange(N * M) < L).reshape(N, M)
            pivots = ag.Tensor(rng.normal(size=(N, d)))
            with ag.no_grad(), count_macs() as pc:
                t_tilde, _ = enc.block_attention(enc.loops[0], pivots, blocks, mask)
                enc.pivot_attention(enc.loops[0], pivots, t_tilde)
            mha = MultiHeadAttention(d, heads, rng)
            with ag.no_grad(), count_macs() as vc:
                mha(ag.Tensor(rng.normal(size=(1, L, d))))
            row["counted_macs"] = pc.score_macs
            row["counted_vanilla_macs"] = vc.score_macs
            row["counted_over_analytic"] = pc.score_macs / cost.pivot_macs_with_token
        rows.append(row)
    return rows


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def cmd_bench(args) -> int:
    from .plotting import complexity_plot

    started = time.perf_counter()
    lengths = args.lengths
    if any(L < 1 for L in lengths):
        raise UsageError("--lengths must be positive")
    rows = bench_rows(lengths, args.d, count=not args.no_count, use_optimal=args.optimal_N,
                      seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    complexity_plot(rows, out / "bench.png")
    if len(rows) >= 2:
        Ls = [r["L"] for r in rows]
        print(f"log-log slope: vanilla {loglog_slope(Ls, [r['vanilla_macs'] for r in rows]):.3f}, "
              f"pivot {loglog_slope(Ls, [r['pivot_macs'] for r in rows]):.3f}")
    if args.optimal_N:
        for r in rows:
            print(f"L={r['L']}: argmin N = {r['optimal_N']} (L^(2/3) = {r['L_two_thirds']:.1f})")
    config = {"lengths": list(lengths), "d": args.d, "optimal_N": args.optimal_N,
              "count": not args.no_count}
    write_manifest(out, "bench", args.argv, config, args.seed, [], [out], started)
    return EXIT_OK


ABLATIONS = {
    "modalities": [("S", {"modalities": "S"}), ("S+P", {"modalities": "S+P"}),
                   ("S+K", {"modalities": "S+K"}), ("S+K+P", {"modalities": "S+K+P"})],
    "backbone": [("GRU", {"backbone": "gru"}), ("Trm.", {"backbone": "vanilla6"}),
                 ("Pvt.", {"backbone": "pivot"})],
    "structure": [("full", {}), ("- shift", {"shift_enabled": False}),
                  ("- pivot", {"pivot_enabled": False})],
    "strategy": [("Simple", {}), ("Greedy", {"boundary_head": "three_class"}), ("DP", {})],
}


def cmd_ablate(args) -> int:
    """Train one model per ablation row and evaluate each on the chosen split."""
    from .model import HighlightModel
    from .training import evaluate_model, train

    started = time.perf_counter()
    groups, info = load_dataset(args.data)
    cfg0, train_cfg = resolve_config(args, info)
    records = _split(groups, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, trained = [], {}
    for label, override in ABLATIONS[args.grid]:
        key = tuple(sorted(override.items()))
        if key not in trained:
            cfg = PivotConfig(**{**cfg0.to_dict(), **override})
            trained[key] = HighlightModel(cfg)
            train(trained[key], groups["train"], groups["val"], epochs=train_cfg["epochs"],
                  base_lr=train_cfg["lr"], weight_decay=train_cfg["weight_decay"], seed=cfg.seed)
        model = trained[key]
        strategy = {"Simple": "simple", "Greedy": "greedy"}.get(label, "dp")
        report, _ = evaluate_model(model, records, strategy)
        row = {"row": label, **{f"ap@{t:.1f}": v for t, v in report.ap.items()},
               "f1_start": report.f1_start, "f1_end": report.f1_end}
        results.append(row)
        print(report.table(label).splitlines()[-2])
    _dump_json(results, out / "report.json")
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(results[0]))
        writer.writeheader()
        writer.writerows(results)
    write_manifest(out, "ablate", args.argv,
                   {"grid": args.grid, "split": args.split, **_config_lines(cfg0, train_cfg)},
                   cfg0.seed, [args.data], [out], started)
    return EXIT_OK


def _split(groups: dict, name: str):
    if name not in groups:
        raise UsageError(f"unknown split {name!r}; choose from {sorted(groups)}")
    if not groups[name]:
        raise DataError(f"split {name!r} is empty")
    return groups[name]


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split {text!r}") from None
    if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise argparse.ArgumentTypeError("--split needs three non-negative numbers")
    return parts


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model (flags override --config, which overrides defaults)")
    g.add_argument("--config", help="key = value file with model/training settings")
    g.add_argument("--d", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--B", type=int, help="pivot update loops")
    g.add_argument("--layers-per-stage", type=int, dest="layers_per_stage")
    g.add_argument("--N", type=int, help="blocks per sequence (default round(sqrt(L)))")
    g.add_argument("--dropout", type=float)
    g.add_argument("--no-shift", dest="shift_enabled", action="store_const", const=False)
    g.add_argument("--no-pivot", dest="pivot_enabled", action="store_const", const=False)
    g.add_argument("--backbone", choices=("pivot", "vanilla6", "gru"))
    g.add_argument("--boundary-head", dest="boundary_head", choices=("binary", "three_class"))
    g.add_argument("--lambda", dest="lam", type=float, help="highlight-loss weight")
    g.add_argument("--modalities", choices=("S", "S+P", "S+K", "S+K+P"))
    g.add_argument("--seed", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pivotseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    p.add_argument("--records", type=int, default=40)
    p.add_argument("--scale", type=float, default=0.1)
    p.add_argument("--signal", type=float, default=2.0, help="signal strength")
    p.add_argument("--speakers", type=int, default=8)
    p.add_argument("--semantic-dim", type=int, default=768)
    p.add_argument("--n-mels", type=int, default=128)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--split", type=_fractions, default=(3055.0, 100.0, 500.0),
                   help="train,val,test proportions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and keep the best validation epoch")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="turn model scores into proposals")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="directory written by train")
    p.add_argument("--split", default="test")
    p.add_argument("--strategy", choices=("dp", "simple", "greedy"), default="dp")
    p.add_argument("--terminal-states", default="end,out")
    p.add_argument("--t-b", type=float, default=0.25)
    p.add_argument("--t-h", type=float, default=0.7)
    p.add_argument("--plots", type=int, default=3, help="score figures to draw")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="AP@tIoU and boundary F1 of a proposal file")
    p.add_argument("--data", required=True)
    p.add_argument("--proposals", required=True, help="proposals.json or a decode directory")
    p.add_argument("--split", default="test")
    p.add_argument("--label", default="model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="attention MAC counts against sequence length")
    p.add_argument("--lengths", type=_int_list, default=BENCH_LENGTHS)
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--optimal-N", dest="optimal_N", action="store_true",
                   help="use the brute-force cost minimiser for N")
    p.add_argument("--no-count", action="store_true", help="analytic counts only")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train and evaluate one row per ablation setting")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", choices=sorted(ABLATIONS), required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    _model_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pivotseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, DecodeError, OSError, json.JSONDecodeError) as exc:
        print(f"pivotseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        print(f"pivotseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
