"""Raw-scale metrics, irregular-region evaluation, baselines, and ablations.

RMSE and MAPE are computed on denormalized values (inverse of the min-max
scaler); MAPE skips cells whose true value sits below a mask threshold so
near-empty cells cannot blow up the percentage. Segmented reports restrict
both metrics to cells labeled HL or LH by the true grid of each timestamp.

The ablation harness retrains the model with blocks bypassed by their
neutral elements (gate of ones, attention of ones, single conv scale) and
tabulates raw-scale test metrics per variant, optionally as a median over
seeds.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import EmptySegmentError, HistoryError, ShapeError
from .grid_data import FlowSequence, Sample, Scaler, write_text_atomic
from .model import FULL, ModelConfig, PastaModel, Variant
from .spatial_stats import quadrants
from .train import SampleBatch, TrainConfig, stack_samples, train

DEFAULT_MAPE_THRESHOLD = 10.0


@dataclass(frozen=True)
class MetricReport:
    """Raw-scale metrics over one cell population."""

    segment: str  # ALL, HL, or LH
    rmse: float
    mape: float
    count: int  # cells the RMSE ran over; MAPE additionally masks low cells


def _paired(preds, trues) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(trues, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if p.size == 0:
        raise EmptySegmentError("no cells to evaluate")
    return p, t


def rmse(preds, trues) -> float:
    p, t = _paired(preds, trues)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mape(preds, trues, threshold: float = DEFAULT_MAPE_THRESHOLD) -> float:
    """Mean absolute percentage error over cells with true value >= threshold."""
    p, t = _paired(preds, trues)
    mask = t >= threshold
    if not np.any(mask):
        raise EmptySegmentError(f"every cell is below the MAPE threshold {threshold}")
    return float(np.mean(np.abs(p[mask] - t[mask]) / t[mask]) * 100.0)


def metric_report(
    preds, trues, segment: str = "ALL", mape_threshold: float = DEFAULT_MAPE_THRESHOLD
) -> MetricReport:
    p, t = _paired(preds, trues)
    return MetricReport(segment, rmse(p, t), mape(p, t, mape_threshold), int(p.size))


def segment_metrics(
    preds: Sequence[np.ndarray],
    trues: Sequence[np.ndarray],
    segment: str,
    mape_threshold: float = DEFAULT_MAPE_THRESHOLD,
) -> MetricReport:
    """Metrics restricted to cells whose true-grid LISA label matches.

    Labels are recomputed per timestamp from the true grids, so a cell can
    be irregular at peak hours and unremarkable otherwise.
    """
    if segment not in ("HL", "LH"):
        raise EmptySegmentError(f"segment must be HL or LH, got {segment!r}")
    picked_p: list[np.ndarray] = []
    picked_t: list[np.ndarray] = []
    for p, t in zip(preds, trues):
        mask = quadrants(t).labels == segment
        if np.any(mask):
            picked_p.append(np.asarray(p, dtype=np.float64)[mask])
            picked_t.append(np.asarray(t, dtype=np.float64)[mask])
    if not picked_p:
        raise EmptySegmentError(f"no {segment} cells in the evaluation period")
    pv = np.concatenate(picked_p)
    tv = np.concatenate(picked_t)
    return MetricReport(segment, rmse(pv, tv), mape(pv, tv, mape_threshold), int(pv.size))


def baseline_predict(
    kind: str,
    seq: FlowSequence,
    target_indices: Sequence[int],
    train_frames: int | None = None,
) -> list[np.ndarray]:
    """Naive reference forecasts for the given target frames.

    persistence repeats the previous frame; historical_average averages the
    training frames sharing the target's time-of-week.
    """
    if kind == "persistence":
        preds = []
        for target in target_indices:
            if target < 1 or target >= len(seq):
                raise HistoryError(f"persistence needs frame {target - 1}")
            preds.append(np.array(seq.frames[target - 1]))
        return preds
    if kind == "historical_average":
        if train_frames is None or train_frames < 1 or train_frames > len(seq):
            raise HistoryError("historical_average needs a training frame count")
        groups: dict[tuple[int, int], list[np.ndarray]] = {}
        for i in range(train_frames):
            ts = seq.timestamp(i)
            groups.setdefault((ts.weekday(), ts.hour * 60 + ts.minute), []).append(seq.frames[i])
        means = {key: np.mean(np.stack(frames), axis=0) for key, frames in groups.items()}
        preds = []
        for target in target_indices:
            if target >= len(seq):
                raise HistoryError(f"target frame {target} outside the sequence")
            ts = seq.timestamp(target)
            key = (ts.weekday(), ts.hour * 60 + ts.minute)
            if key not in means:
                raise HistoryError(f"no training frame shares time-of-week {key}")
            preds.append(np.array(means[key]))
        return preds
    raise HistoryError(f"unknown baseline kind {kind!r}")


def predict_raw(model: PastaModel, batch: SampleBatch, variant: Variant = FULL) -> np.ndarray:
    """Denormalized model predictions for a stacked sample batch."""
    pred, _ = model.predict(batch.x, batch.ext, moran=batch.moran, variant=variant)
    return model.scaler.invert(pred)


# Ablation rows in the conventional table order: single blocks, pairs, full.
TABLE_VARIANTS: tuple[Variant, ...] = (
    Variant(sag=False, tag=True, msr=False),
    Variant(sag=False, tag=False, msr=True),
    Variant(sag=False, tag=True, msr=True),
    Variant(sag=True, tag=True, msr=False),
    Variant(sag=True, tag=False, msr=True),
    Variant(sag=True, tag=True, msr=True),
)


@dataclass(frozen=True)
class AblationRow:
    sag: bool
    tag: bool
    msr: bool
    rmse: float
    mape: float


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def full_row(self) -> AblationRow:
        for row in self.rows:
            if row.sag and row.tag and row.msr:
                return row
        raise EmptySegmentError("ablation report has no full-model row")

    def to_csv(self) -> str:
        lines = ["sag,tag,msr,rmse,mape"]
        for r in self.rows:
            lines.append(f"{int(r.sag)},{int(r.tag)},{int(r.msr)},{r.rmse!r},{r.mape!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        write_text_atomic(path, self.to_csv())

    def pretty(self) -> str:
        out = [f"{'sag':>4} {'tag':>4} {'msr':>4} {'rmse':>10} {'mape':>8}"]
        for r in self.rows:
            flags = ["x" if f else " " for f in (r.sag, r.tag, r.msr)]
            out.append(f"{flags[0]:>4} {flags[1]:>4} {flags[2]:>4} {r.rmse:>10.4f} {r.mape:>8.2f}")
        return "\n".join(out)


def run_ablation(
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    test_samples: Sequence[Sample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    scaler: Scaler,
    variants: Sequence[Variant] = TABLE_VARIANTS,
    seeds: Sequence[int] | None = None,
    mape_threshold: float = DEFAULT_MAPE_THRESHOLD,
) -> AblationReport:
    """Train every variant under identical configs and tabulate test metrics.

    With several seeds each row reports the per-variant median. A variant
    list of just the full model reproduces a standalone training run
    bit-exactly, since nothing but the block bypass flags changes.
    """
    seeds = (train_cfg.seed,) if seeds is None else tuple(seeds)
    test = stack_samples(test_samples)
    rows = []
    for variant in variants:
        rmses, mapes = [], []
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            model, _ = train(
                train_samples, val_samples, model_cfg, cfg, scaler, variant=variant
            )
            raw = predict_raw(model, test, variant=variant)
            rmses.append(rmse(raw, test.target_raw))
            mapes.append(mape(raw, test.target_raw, mape_threshold))
        rows.append(
            AblationRow(
                variant.sag,
                variant.tag,
                variant.msr,
                statistics.median(rmses),
                statistics.median(mapes),
            )
        )
    return AblationReport(rows)
