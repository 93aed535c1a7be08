"""Loss, RMSE in original units, attention-map export and fusion-weight profiling."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .acfm import AcfmTrace
from .data import Dataset, Sample, make_batch
from .spn import SpnParams, Variant, forward
from .tensor import Tensor


def euclidean_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over every batch element and map entry."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = T.sub(pred, target)
    return T.mean(T.mul(diff, diff))


def predict_normalized(params: SpnParams, variant: Variant, dataset: Dataset, samples: Sequence[Sample], batch_size: int = 64):
    """Tape-free forward over ``samples``; returns ``(predictions (N, 2, h, w), fusion weights or None)``."""
    preds, rs = [], []
    for start in range(0, len(samples), batch_size):
        out, trace = forward(make_batch(dataset, samples[start:start + batch_size]), variant, params)
        preds.append(out.data)
        if trace.r is not None:
            rs.append(trace.r)
    return np.concatenate(preds), (np.concatenate(rs) if rs else None)


def mean_loss(params: SpnParams, variant: Variant, dataset: Dataset, samples: Sequence[Sample], batch_size: int = 64) -> float:
    pred, _ = predict_normalized(params, variant, dataset, samples, batch_size)
    return float(np.mean((pred - make_batch(dataset, samples).target) ** 2))


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2)))


def evaluate_rmse(
    params: SpnParams,
    variant: Variant,
    samples: Sequence[Sample],
    dataset: Dataset,
    clamp: bool = False,
    batch_size: int = 64,
) -> float:
    """RMSE between denormalized predictions and raw ground truth, over all maps and cells.

    ``clamp`` floors denormalized predictions at zero before scoring.
    """
    if not samples:
        raise ValueError("cannot evaluate on an empty sample set")
    sq, count = 0.0, 0
    for start in range(0, len(samples), batch_size):
        batch = make_batch(dataset, samples[start:start + batch_size])
        out, _ = forward(batch, variant, params)
        err = dataset.denormalize(out.data, clamp=clamp) - batch.target_raw
        sq += float(np.sum(err * err))
        count += err.size
    return float(np.sqrt(sq / count))


# ---------------------------------------------------------------------------
# attention maps


def to_gray(v: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to 0..255 with round-half-up."""
    return np.clip(np.floor(np.asarray(v, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.int64)


def write_pgm(path, values: np.ndarray) -> Path:
    """ASCII (P2) graymap, maxval 255, of a 2-D array in [0, 1]."""
    pix = to_gray(values)
    h, w = pix.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(p) for p in row) for row in pix]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path} is not an ASCII graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"unexpected maxval {maxval}")
    return np.array(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w)


def _write_grid_csv(path, values: np.ndarray) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in values])
    return path


def export_attention(
    trace: AcfmTrace,
    out_dir,
    sample: int = 0,
    prefix: str = "attention",
    inputs: np.ndarray | None = None,
    target: np.ndarray | None = None,
) -> list[Path]:
    """Write one graymap and one CSV per ACFM step.

    With raw ``inputs`` (steps, 2, h, w) and ``target`` (2, h, w), also writes
    ``|input - target|`` residual maps (channel mean, scaled by its max) so
    attention and change can be compared side by side.
    """
    if not len(trace):
        raise ValueError("empty attention trace")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, w in enumerate(trace.attention):
        grid = w.data[sample, 0] if w.ndim == 4 else w.data[0]
        written.append(write_pgm(out_dir / f"{prefix}_step{i:02d}.pgm", grid))
        written.append(_write_grid_csv(out_dir / f"{prefix}_step{i:02d}.csv", grid))
    if inputs is not None and target is not None:
        residual = np.abs(np.asarray(inputs) - np.asarray(target)[None]).mean(axis=1)
        top = residual.max()
        scaled = residual / top if top > 0 else residual
        for i, grid in enumerate(scaled):
            written.append(write_pgm(out_dir / f"{prefix}_residual{i:02d}.pgm", grid))
            written.append(_write_grid_csv(out_dir / f"{prefix}_residual{i:02d}.csv", residual[i]))
    return written


# ---------------------------------------------------------------------------
# fusion weights


def fusion_profile(
    params: SpnParams,
    samples: Sequence[Sample],
    dataset: Dataset,
    variant: Variant = Variant.SPN,
    out_path=None,
    batch_size: int = 64,
) -> list[tuple[int, float, int]]:
    """Mean fusion weight ``r`` per time-of-day slot: rows ``(interval, mean_r, count)``."""
    if Variant(variant) is not Variant.SPN:
        raise ValueError(f"fusion weights exist only for SPN, not {Variant(variant).value}")
    if not samples:
        raise ValueError("no samples to profile")
    _, r = predict_normalized(params, Variant.SPN, dataset, samples, batch_size)
    slots = np.array([s.interval for s in samples])
    rows = [(int(k), float(r[slots == k].mean()), int((slots == k).sum())) for k in np.unique(slots)]
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["interval", "mean_r", "count"])
            writer.writerows([(k, repr(v), c) for k, v, c in rows])
    return rows
