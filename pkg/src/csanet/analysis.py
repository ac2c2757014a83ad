"""Class-averaged per-stage descriptor extraction.

For every stage's final conv output (before the gate) this computes, per
channel and per test sample: the pooled context x, its standardized form z,
the local autocorrelation, the standardized descriptor q, and the attention
value p actually applied by the model (1.0 for the baseline). Per-sample
vectors are averaged within each class and then across classes, so every
class contributes equally. The averaged q is re-standardized so the
reported column keeps zero mean and unit population std; its pre-
standardization magnitude is kept as ``mean_abs_q_raw`` for the cross-stage
trend summary. Channels are sorted by ascending q. Descriptor computation
involves no learned parameters, so it applies to all variants alike.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import spatial_stats
from .data import Dataset
from .models import ForwardTrace, Model
from .tensor_ops import Array

CSV_COLUMNS = ("channel", "x", "z", "i_local", "q", "p")


@dataclass(frozen=True)
class StageDescriptors:
    """Sorted, class-averaged descriptor columns for one stage."""

    stage: int
    channel_order: np.ndarray  # original channel index per row
    x: Array
    z: Array
    i_local: Array
    q: Array
    p: Array
    mean_abs_q_raw: float  # before re-standardization; feeds the trend summary


def ema_smooth(values: Array, factor: float) -> Array:
    """Exponential moving average along the channel axis: y_t = f*v_t + (1-f)*y_{t-1}."""
    out = np.empty_like(values)
    acc = values[0]
    out[0] = acc
    for i in range(1, len(values)):
        acc = factor * values[i] + (1.0 - factor) * acc
        out[i] = acc
    return out


def analyze_descriptors(
    model: Model,
    dataset: Dataset,
    ema: float | None = None,
    max_samples: int | None = None,
) -> list[StageDescriptors]:
    """Per-stage class-averaged (x, z, local, q, p), sorted by ascending q."""
    images = dataset.test_images
    labels = dataset.test_labels
    if max_samples is not None:
        images = images[:max_samples]
        labels = labels[:max_samples]
    n_stages = len(model.spec.stage_channels)

    sums: list[dict[int, dict[str, Array]]] = [dict() for _ in range(n_stages)]
    counts: list[dict[int, int]] = [dict() for _ in range(n_stages)]
    for image, label in zip(images, labels):
        trace = ForwardTrace()
        with ad.no_grad():
            model.forward(image, trace=trace)
        for s in range(n_stages):
            feat = trace.stage_features[s]
            _, result, x, z = spatial_stats.moran_profile(feat)
            acc = sums[s].setdefault(
                int(label),
                {k: np.zeros(feat.shape[0]) for k in ("x", "z", "i_local", "q", "p")},
            )
            acc["x"] += x
            acc["z"] += z
            acc["i_local"] += result.local
            acc["q"] += result.descriptor
            acc["p"] += trace.attention[s]
            counts[s][int(label)] = counts[s].get(int(label), 0) + 1

    stages = []
    for s in range(n_stages):
        class_means = {
            label: {k: v / counts[s][label] for k, v in acc.items()}
            for label, acc in sums[s].items()
        }
        keys = sorted(class_means)
        averaged = {
            k: np.mean([class_means[label][k] for label in keys], axis=0)
            for k in ("x", "z", "i_local", "q", "p")
        }
        q_raw = averaged["q"]
        q_col, _ = spatial_stats.standardize(q_raw)
        order = np.argsort(q_col, kind="stable")
        columns = {
            "x": averaged["x"][order],
            "z": averaged["z"][order],
            "i_local": averaged["i_local"][order],
            "q": q_col[order],
            "p": averaged["p"][order],
        }
        if ema is not None:
            columns = {k: ema_smooth(v, ema) for k, v in columns.items()}
        stages.append(
            StageDescriptors(
                stage=s,
                channel_order=order,
                mean_abs_q_raw=float(np.abs(q_raw).mean()),
                **columns,
            )
        )
    return stages


def write_descriptor_csvs(stages: list[StageDescriptors], out_dir) -> list[Path]:
    """One descriptors_stage<k>.csv per stage; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for stage in stages:
        path = out_dir / f"descriptors_stage{stage.stage}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row_idx in range(len(stage.channel_order)):
                writer.writerow(
                    [
                        int(stage.channel_order[row_idx]),
                        repr(float(stage.x[row_idx])),
                        repr(float(stage.z[row_idx])),
                        repr(float(stage.i_local[row_idx])),
                        repr(float(stage.q[row_idx])),
                        repr(float(stage.p[row_idx])),
                    ]
                )
        paths.append(path)
    return paths


def descriptor_trend_summary(stages: list[StageDescriptors]) -> dict:
    """Cross-stage |q| trend; informational only, never a pass/fail gate."""
    magnitudes = [stage.mean_abs_q_raw for stage in stages]
    return {
        "mean_abs_q_per_stage": magnitudes,
        "last_stage_is_lowest": bool(
            len(magnitudes) >= 2 and magnitudes[-1] == min(magnitudes)
        ),
    }
