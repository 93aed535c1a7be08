"""Compare tape gradients with central finite differences for a whole model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import WEATHER_CATEGORIES, Batch
from .evaluation import euclidean_loss
from .spn import SpnConfig, SpnParams, Variant, forward, init_params


@dataclass
class TensorCheck:
    name: str
    shape: tuple[int, ...]
    checked: int
    max_abs_error: float
    scale: float

    @property
    def rel_error(self) -> float:
        return self.max_abs_error / max(self.scale, 1e-300)


@dataclass
class GradcheckReport:
    variant: str
    tolerance: float
    entries: list[TensorCheck] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def format(self) -> str:
        lines = [f"gradcheck {self.variant}: {len(self.entries)} tensors"]
        for e in self.entries:
            lines.append(f"  {e.name:<40s} {str(e.shape):<22s} n={e.checked:<4d} rel_err={e.rel_error:.3e}")
        lines.append(f"max relative error {self.max_error:.3e} (tolerance {self.tolerance:g}) -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def random_batch(config: SpnConfig, batch_size: int, rng: np.random.Generator) -> Batch:
    """Synthetic normalized inputs with valid one-hot external blocks."""
    n, m, h, w, L = config.n, config.m, config.h, config.w, config.ext_length

    def ext(shape):
        e = np.zeros(shape + (L,))
        if L > WEATHER_CATEGORIES + 2:
            k = L - WEATHER_CATEGORIES - 2
            idx = np.indices(shape)
            e[(*idx, rng.integers(0, WEATHER_CATEGORIES, shape))] = 1.0
            e[..., WEATHER_CATEGORIES:WEATHER_CATEGORIES + 2] = rng.uniform(0, 1, shape + (2,))
            e[(*idx, WEATHER_CATEGORIES + 2 + rng.integers(0, k, shape))] = 1.0
        else:
            e[...] = rng.uniform(0, 1, e.shape)
        return e

    seq_ext, per_ext = ext((batch_size, n)), ext((batch_size, m))
    target = rng.uniform(-0.9, 0.9, (batch_size, 2, h, w))
    return Batch(
        seq_maps=rng.uniform(-1, 1, (batch_size, n, 2, h, w)),
        seq_ext=seq_ext,
        per_maps=rng.uniform(-1, 1, (batch_size, m, 2, h, w)),
        per_ext=per_ext,
        e_sum=seq_ext.sum(axis=1) + per_ext.sum(axis=1),
        target=target,
        target_raw=target,
        intervals=np.zeros(batch_size, dtype=np.int64),
        targets=np.arange(batch_size),
    )


def check_params(
    params: SpnParams,
    variant: Variant,
    batch: Batch,
    rng: np.random.Generator,
    coords_per_tensor: int = 8,
    step: float = 1e-5,
    tolerance: float = 1e-5,
) -> GradcheckReport:
    """Check every tensor of ``params`` on ``batch``.

    Tensors with at most ``coords_per_tensor`` entries are checked fully;
    larger ones on random entries plus their largest-gradient entry. The
    per-tensor error is the worst absolute deviation over the largest
    gradient magnitude in that tensor.
    """
    variant = Variant(variant)
    named = params.named()
    tensors = [t for _, t in named]
    with T.Tape() as tape:
        pred, _ = forward(batch, variant, params)
        loss = euclidean_loss(pred, batch.target)
    T.zero_grad(tensors)
    T.backward(loss, tape)

    coords = []
    for t in tensors:
        size = t.data.size
        if size <= coords_per_tensor:
            coords.append(np.arange(size))
        else:
            picks = rng.choice(size, coords_per_tensor - 1, replace=False)
            coords.append(np.unique(np.append(picks, np.argmax(np.abs(t.grad)))))

    def f() -> float:
        out, _ = forward(batch, variant, params)
        return float(np.mean((out.data - batch.target) ** 2))

    numeric = T.finite_difference_gradient(f, tensors, step, coords)
    report = GradcheckReport(variant.value, tolerance)
    for (name, t), idx, num in zip(named, coords, numeric):
        a = t.grad.reshape(-1)[idx]
        nv = num.reshape(-1)[idx]
        scale = max(float(np.abs(t.grad).max()), float(np.abs(nv).max()))
        report.entries.append(TensorCheck(name, t.shape, len(idx), float(np.abs(a - nv).max()), scale))
    return report


def relu_margin(params: SpnParams, variant: Variant, batch: Batch) -> float:
    """Smallest |input| over every ReLU evaluated for ``batch``.

    Central differences are only meaningful when no perturbation can push a
    ReLU input across zero.
    """
    with T.Tape() as tape:
        forward(batch, variant, params)
    margins = [float(np.abs(r.inputs[0].data).min()) for r in tape.records if r.kind == "relu"]
    return min(margins, default=np.inf)


def gradcheck(
    config: SpnConfig,
    variant: Variant,
    seed: int,
    coords_per_tensor: int = 8,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    batch_size: int = 2,
    margin: float = 1e-4,
    max_draws: int = 200,
) -> GradcheckReport:
    """Random parameters (Xavier weights, small random biases) and a random batch.

    Input batches are redrawn until every ReLU input sits at least ``margin``
    away from its kink.
    """
    variant = Variant(variant)
    rng = np.random.default_rng(seed)
    params = init_params(config, variant, rng)
    for name, t in params.named():
        if t.ndim == 1:
            t.data[...] = rng.normal(0.0, 0.1, t.shape)
    for _ in range(max_draws):
        batch = random_batch(config, batch_size, rng)
        if relu_margin(params, variant, batch) >= margin:
            break
    else:
        raise RuntimeError(f"no input draw kept ReLU inputs {margin:g} away from zero in {max_draws} tries")
    return check_params(params, variant, batch, rng, coords_per_tensor, step, tolerance)
