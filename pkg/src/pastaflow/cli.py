"""Command-line entry point for the full pipeline.

Subcommands: synth, moran, train, eval, predict, attention. Exit codes: 0
success, 1 usage error, 2 data/checkpoint error, 3 runtime error (including
training divergence). Every failure prints one machine-parseable line of
the form ``error[<kind>]: message`` to stderr. All file outputs are written
atomically, and identical flags plus seeds reproduce identical bytes.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError, PastaError
from .evaluate import (
    DEFAULT_MAPE_THRESHOLD,
    baseline_predict,
    metric_report,
    predict_raw,
    run_ablation,
    segment_metrics,
)
from .grid_data import (
    FlowSequence,
    FragmentSpec,
    Scaler,
    build_input,
    build_samples,
    generate_synthetic,
    load_flow_sequence,
    load_holidays,
    save_flow_sequence,
    write_text_atomic,
)
from .model import PastaModel, config_for_data
from .spatial_stats import local_morans_i, quadrants
from .train import TrainConfig, chronological_split, stack_samples, train


class UsageError(PastaError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep argparse from exiting on its own
        raise UsageError(message)


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("PASTA_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"PASTA_SEED must be an integer, got {env!r}") from exc
    return 0


def _parse_hotspots(text: str) -> tuple[tuple[int, int], ...]:
    if not text:
        return ()
    spots = []
    for chunk in text.split(";"):
        parts = chunk.split(",")
        if len(parts) != 2:
            raise UsageError(f"hotspot {chunk!r} is not of the form i,j")
        try:
            spots.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise UsageError(f"hotspot {chunk!r} is not of the form i,j") from exc
    return tuple(spots)


def _parse_seeds(text: str, fallback: int) -> tuple[int, ...]:
    if not text:
        return (fallback,)
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError as exc:
        raise UsageError(f"seeds must be comma-separated integers, got {text!r}") from exc


def _holidays(path: str | None):
    return load_holidays(path) if path else frozenset()


def _load_model_for(seq: FlowSequence, checkpoint: str) -> PastaModel:
    model = PastaModel.load(checkpoint)
    cfg = model.cfg
    if (cfg.n, cfg.m) != (seq.n, seq.m) or cfg.interval_minutes != seq.interval_minutes:
        raise CheckpointError(
            f"checkpoint was trained on {cfg.n}x{cfg.m} grids at "
            f"{cfg.interval_minutes}-minute intervals, data is {seq.n}x{seq.m} "
            f"at {seq.interval_minutes}"
        )
    return model


def _fragments_of(model: PastaModel, seq: FlowSequence) -> FragmentSpec:
    return FragmentSpec.for_interval(
        seq.interval_minutes, model.cfg.t_closeness, model.cfg.t_periodic, model.cfg.t_trend
    )


def _train_cutoff(seq: FlowSequence, test_days: int) -> int:
    cutoff = len(seq) - test_days * seq.frames_per_day() if test_days > 0 else len(seq)
    if cutoff < 2:
        raise DataError(
            f"a {test_days}-day test window leaves {max(cutoff, 0)} training frames"
        )
    return cutoff


def _floats_csv(rows) -> str:
    return "\n".join(",".join(repr(float(v)) for v in row) for row in rows) + "\n"


def cmd_synth(args) -> int:
    if args.n < 1 or args.m < 1:
        raise UsageError("grid extents must be at least 1")
    if args.days < 1:
        raise UsageError("days must be at least 1")
    if args.noise < 0:
        raise UsageError("noise must be non-negative")
    seq = generate_synthetic(
        n=args.n,
        m=args.m,
        days=args.days,
        interval_minutes=args.interval,
        hotspots=_parse_hotspots(args.hotspots),
        noise=args.noise,
        seed=_resolve_seed(args.seed),
    )
    save_flow_sequence(seq, args.out)
    print(f"wrote {len(seq)} frames of {seq.n}x{seq.m} to {args.out}")
    return 0


def cmd_moran(args) -> int:
    seq = load_flow_sequence(args.data)
    if not 0 <= args.t < len(seq):
        raise DataError(f"frame index {args.t} outside 0..{len(seq) - 1}")
    frame = seq.frames[args.t]
    field = local_morans_i(frame)
    quad = quadrants(frame)
    lines = [f"# morans_i t={args.t}"]
    lines += [",".join(repr(float(v)) for v in row) for row in field.stats]
    lines.append(f"# quadrants t={args.t}")
    lines += [",".join(row) for row in quad.labels]
    write_text_atomic(args.out, "\n".join(lines) + "\n")
    counts = {label: int(np.sum(quad.labels == label)) for label in ("HH", "HL", "LH", "LL")}
    print(f"wrote {args.out} (hl={counts['HL']} lh={counts['LH']})")
    return 0


def cmd_train(args) -> int:
    seq = load_flow_sequence(args.data)
    holidays = _holidays(args.holidays)
    cutoff = _train_cutoff(seq, args.test_days)
    scaler = Scaler.fit(seq.frames[:cutoff])
    spec = FragmentSpec.for_interval(seq.interval_minutes, args.tc, args.tp, args.tt)
    samples = build_samples(seq, spec, scaler, holidays, last_target=cutoff - 1)
    train_s, val_s = chronological_split(samples, args.val_fraction)
    model_cfg = config_for_data(seq, spec, demb=args.demb)
    tcfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        huber_delta=args.huber_delta,
        seed=_resolve_seed(args.seed),
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, history = train(
        train_s,
        val_s,
        model_cfg,
        tcfg,
        scaler,
        checkpoint_path=out_dir / "checkpoint.json",
        best_path=out_dir / "best.json",
        history_path=out_dir / "history.csv",
    )
    last = history.records[-1]
    print(
        f"trained {len(train_s)} samples for {tcfg.epochs} epochs: "
        f"loss {last.train_loss:.6f}, val rmse {last.val_rmse:.6f}"
    )
    print(f"wrote {out_dir / 'checkpoint.json'}, {out_dir / 'best.json'}, {out_dir / 'history.csv'}")
    return 0


def _metric_rows_csv(rows) -> str:
    lines = ["model,segment,rmse,mape,count"]
    for name, rep in rows:
        lines.append(f"{name},{rep.segment},{rep.rmse!r},{rep.mape!r},{rep.count}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    seq = load_flow_sequence(args.data)
    holidays = _holidays(args.holidays)
    seed = _resolve_seed(args.seed)
    if args.ablation:
        cutoff = _train_cutoff(seq, args.test_days)
        scaler = Scaler.fit(seq.frames[:cutoff])
        spec = FragmentSpec.for_interval(seq.interval_minutes, args.tc, args.tp, args.tt)
        samples = build_samples(seq, spec, scaler, holidays, last_target=cutoff - 1)
        train_s, val_s = chronological_split(samples, args.val_fraction)
        test_s = build_samples(seq, spec, scaler, holidays, first_target=cutoff)
        model_cfg = config_for_data(seq, spec, demb=args.demb)
        tcfg = TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.lr,
            huber_delta=args.huber_delta,
            seed=seed,
        )
        report = run_ablation(
            train_s,
            val_s,
            test_s,
            model_cfg,
            tcfg,
            scaler,
            seeds=_parse_seeds(args.seeds, seed),
            mape_threshold=args.mape_threshold,
        )
        if args.out:
            report.save(args.out)
            print(f"wrote {args.out}")
        print(report.pretty())
        return 0

    if not args.checkpoint:
        raise UsageError("--checkpoint is required unless --ablation is given")
    model = _load_model_for(seq, args.checkpoint)
    spec = _fragments_of(model, seq)
    cutoff = _train_cutoff(seq, args.test_days)
    test_s = build_samples(seq, spec, model.scaler, holidays, first_target=cutoff)
    batch = stack_samples(test_s)
    raw = predict_raw(model, batch)

    def report_for(preds):
        if args.segment == "ALL":
            return metric_report(preds, batch.target_raw, "ALL", args.mape_threshold)
        return segment_metrics(
            list(preds), list(batch.target_raw), args.segment, args.mape_threshold
        )

    rows = [("pasta", report_for(raw))]
    if args.baseline:
        preds = np.stack(
            baseline_predict(args.baseline, seq, batch.indices, train_frames=cutoff)
        )
        rows.append((args.baseline, report_for(preds)))
    if args.out:
        write_text_atomic(args.out, _metric_rows_csv(rows))
        print(f"wrote {args.out}")
    for name, rep in rows:
        print(
            f"{name:>20} segment={rep.segment} rmse={rep.rmse:.4f} "
            f"mape={rep.mape:.2f}% cells={rep.count}"
        )
    return 0


def cmd_predict(args) -> int:
    seq = load_flow_sequence(args.data)
    model = _load_model_for(seq, args.checkpoint)
    spec = _fragments_of(model, seq)
    inp, ext = build_input(seq, spec, model.scaler, args.target_index, _holidays(args.holidays))
    pred, _ = model.predict(inp[None], ext[None])
    raw = np.maximum(model.scaler.invert(pred[0]), 0.0)  # flows are counts
    write_text_atomic(args.out, _floats_csv(raw))
    print(f"wrote {args.out} for target index {args.target_index}")
    return 0


def cmd_attention(args) -> int:
    seq = load_flow_sequence(args.data)
    model = _load_model_for(seq, args.checkpoint)
    spec = _fragments_of(model, seq)
    samples = build_samples(seq, spec, model.scaler, _holidays(args.holidays))
    batch = stack_samples(samples)
    _, attn = model.predict(batch.x, batch.ext, moran=batch.moran)
    labels = spec.channel_labels(seq.interval_minutes)
    lines = ["target_index," + ",".join(labels)]
    for idx, row in zip(batch.indices, attn):
        lines.append(f"{idx}," + ",".join(repr(float(v)) for v in row))
    lines.append("mean," + ",".join(repr(float(v)) for v in attn.mean(axis=0)))
    write_text_atomic(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out} ({len(batch.indices)} samples, {len(labels)} channels)")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pasta", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic flow-sequence file")
    p.add_argument("--out", required=True, help="output flow-sequence path")
    p.add_argument("--n", type=int, default=16, help="grid rows")
    p.add_argument("--m", type=int, default=16, help="grid columns")
    p.add_argument("--days", type=int, default=35, help="days of data")
    p.add_argument("--interval", type=int, default=60, help="minutes per frame")
    p.add_argument("--hotspots", default="", help="semicolon-separated i,j cells that spike at peak hours")
    p.add_argument("--noise", type=float, default=0.05, help="relative noise level")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default: $PASTA_SEED or 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("moran", help="dump local Moran's I and LISA labels for one frame")
    p.add_argument("--data", required=True, help="flow-sequence path")
    p.add_argument("--t", type=int, required=True, help="frame index")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_moran)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True, help="directory for checkpoint.json, best.json, history.csv")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--huber-delta", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tc", type=int, default=5, help="hourly lag channels")
    p.add_argument("--tp", type=int, default=6, help="daily lag channels")
    p.add_argument("--tt", type=int, default=4, help="weekly lag channels")
    p.add_argument("--demb", type=int, default=10, help="external embedding width")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--test-days", type=int, default=7, help="final days held out entirely")
    p.add_argument("--holidays", default=None, help="holiday calendar file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or run the ablation harness)")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None, help="output CSV path")
    p.add_argument("--segment", choices=("ALL", "HL", "LH"), default="ALL")
    p.add_argument("--baseline", choices=("persistence", "historical_average"), default=None)
    p.add_argument("--test-days", type=int, default=7)
    p.add_argument("--mape-threshold", type=float, default=DEFAULT_MAPE_THRESHOLD)
    p.add_argument("--holidays", default=None)
    p.add_argument("--ablation", action="store_true", help="retrain block-bypass variants and tabulate")
    p.add_argument("--seeds", default="", help="comma-separated seeds for --ablation")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--huber-delta", type=float, default=1.0)
    p.add_argument("--tc", type=int, default=5)
    p.add_argument("--tp", type=int, default=6)
    p.add_argument("--tt", type=int, default=4)
    p.add_argument("--demb", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write one denormalized prediction grid")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target-index", type=int, required=True, help="frame to predict (may be one past the file end)")
    p.add_argument("--out", required=True)
    p.add_argument("--holidays", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attention", help="dump per-sample and mean temporal attention weights")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holidays", default=None)
    p.set_defaults(func=cmd_attention)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required (see --help)")
        return args.func(args)
    except UsageError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return 2
    except PastaError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
