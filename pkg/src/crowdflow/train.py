"""Minibatch Adam training on the Euclidean loss, plus checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, Sample, build_samples, make_batch, split_samples
from .evaluation import euclidean_loss, evaluate_rmse, mean_loss
from .spn import SpnConfig, SpnParams, Variant, forward, init_params
from .tensor import Tensor

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    lr_scale: list[float] | None = None  # optional per-tensor multiplier on lr

    @classmethod
    def create(cls, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], lr, beta1, beta2, eps)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``param.data``."""
    if len(params) != len(state.m):
        raise RuntimeError(f"optimizer tracks {len(state.m)} tensors, got {len(params)}")
    for p in params:
        if p.grad is None:
            raise RuntimeError(f"parameter {p.name or p.shape} has no gradient; run backward first")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    scales = state.lr_scale or [1.0] * len(params)
    for p, m, v, k in zip(params, state.m, state.v, scales):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= k * state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    n: int = 3
    m: int = 2
    n_units: int = 12
    epochs: int = 270
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1
    fusion_lr_scale: float = 1.0  # lr multiplier for the fusion FC layers only

    def model_config(self, dataset: Dataset) -> SpnConfig:
        mf = dataset.manifest
        return SpnConfig(mf.h, mf.w, self.n, self.m, self.n_units, mf.intervals_per_day, mf.ext_length)


@dataclass
class TrainReport:
    variant: str
    seed: int
    config: dict
    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def train(
    dataset: Dataset,
    config: TrainConfig,
    variant: Variant,
    seed: int,
    out_dir=None,
    train_samples: Sequence[Sample] | None = None,
    val_samples: Sequence[Sample] | None = None,
) -> tuple[SpnParams, TrainReport]:
    """Fit ``variant`` from Xavier initialization with minibatch Adam.

    Samples come from :func:`build_samples` and :func:`split_samples` unless
    given explicitly. The validation RMSE (original scale) picks the best
    checkpoint; with ``out_dir`` set, ``final/`` and ``best/`` are written there.
    """
    variant = Variant(variant)
    model_cfg = config.model_config(dataset)
    if train_samples is None:
        train_samples, val_default, _ = split_samples(build_samples(dataset, model_cfg), dataset.manifest, config.val_fraction)
        val_samples = val_default if val_samples is None else val_samples
    train_samples = list(train_samples)
    val_samples = list(val_samples or [])
    if not train_samples:
        raise ValueError("no training samples")

    start = time.perf_counter()
    params = init_params(model_cfg, variant, seed)
    tensors = params.tensors()
    adam = AdamState.create(tensors, config.lr, config.beta1, config.beta2, config.eps)
    if config.fusion_lr_scale != 1.0:
        adam.lr_scale = [config.fusion_lr_scale if n.startswith("fusion.") else 1.0 for n, _ in params.named()]
    shuffle = np.random.default_rng([seed, 0x5EED])
    report = TrainReport(
        variant.value, seed, {**asdict(config), "model": asdict(model_cfg)},
        initial_loss=mean_loss(params, variant, dataset, train_samples, config.batch_size),
    )
    best_rmse, best_data = np.inf, None

    for epoch in range(config.epochs):
        order = shuffle.permutation(len(train_samples))
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = make_batch(dataset, [train_samples[i] for i in order[lo:lo + config.batch_size]])
            with T.Tape() as tape:
                pred, _ = forward(batch, variant, params)
                loss = euclidean_loss(pred, batch.target)
            T.zero_grad(tensors)
            T.backward(loss, tape)
            adam_step(tensors, adam)
            total += loss.item() * len(batch)
        report.epoch_losses.append(total / len(train_samples))
        if val_samples:
            rmse = evaluate_rmse(params, variant, val_samples, dataset, batch_size=config.batch_size)
            report.val_rmse.append(rmse)
            if rmse < best_rmse:
                best_rmse, best_data, report.best_epoch = rmse, [t.data.copy() for t in tensors], epoch
        logger.info(
            "%s seed=%d epoch %d/%d loss %.6f%s", variant.value, seed, epoch + 1, config.epochs,
            report.epoch_losses[-1], f" val_rmse {report.val_rmse[-1]:.4f}" if val_samples else "",
        )

    report.wall_time = time.perf_counter() - start
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(params, out_dir / "final", variant, model_cfg)
        if best_data is not None:
            best = init_params(model_cfg, variant, seed)
            for t, d in zip(best.tensors(), best_data):
                t.data[...] = d
            save_checkpoint(best, out_dir / "best", variant, model_cfg)
        (out_dir / "report.json").write_text(report.to_json() + "\n")
    return params, report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: SpnParams, path, variant: Variant, config: SpnConfig) -> Path:
    """``checkpoint.json`` (names, shapes, offsets, sha256) + ``params.bin`` (little-endian float64)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records, chunks, offset = [], [], 0
    for name, t in params.named():
        records.append({"name": name, "shape": list(t.shape), "offset": offset, "count": int(t.data.size)})
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        offset += t.data.size
    raw = b"".join(chunks)
    (path / "params.bin").write_bytes(raw)
    meta = {
        "variant": Variant(variant).value,
        "config": asdict(config),
        "tensors": records,
        "sha256": hashlib.sha256(raw).hexdigest(),
    }
    (path / "checkpoint.json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_checkpoint(path) -> tuple[SpnParams, Variant, SpnConfig]:
    path = Path(path)
    meta = json.loads((path / "checkpoint.json").read_text())
    raw = (path / "params.bin").read_bytes()
    if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
        raise ValueError(f"checkpoint {path} fails its checksum")
    variant = Variant(meta["variant"])
    config = SpnConfig(**meta["config"])
    params = init_params(config, variant, 0)
    flat = np.frombuffer(raw, dtype="<f8")
    named = params.named()
    if [n for n, _ in named] != [r["name"] for r in meta["tensors"]]:
        raise ValueError(f"checkpoint {path} tensor list does not match a {variant.value} model")
    for (_, t), rec in zip(named, meta["tensors"]):
        if list(t.shape) != rec["shape"]:
            raise ValueError(f"{rec['name']}: checkpoint shape {rec['shape']} != model {list(t.shape)}")
        t.data[...] = flat[rec["offset"]:rec["offset"] + rec["count"]].reshape(t.shape)
    return params, variant, config
