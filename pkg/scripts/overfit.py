"""Fit SPN to a handful of synthetic samples and report normalized training RMSE."""

import argparse
import logging
import time

import numpy as np

from crowdflow import data
from crowdflow.evaluation import predict_normalized
from crowdflow.spn import Variant
from crowdflow.train import TrainConfig, train


def run(samples: int = 32, epochs: int = 500, lr: float = 1e-3, seed: int = 0, n_units: int = 2):
    ds = data.synthesize(data.SynthConfig(days=8, h=8, w=8, test_days=2), seed)
    cfg = TrainConfig(n=3, m=2, n_units=n_units, epochs=epochs, batch_size=64, lr=lr)
    pool, _, _ = data.split_samples(data.build_samples(ds, cfg.model_config(ds)), ds.manifest)
    chosen = pool[:samples]
    params, report = train(ds, cfg, Variant.SPN, seed, train_samples=chosen, val_samples=[])
    pred, _ = predict_normalized(params, Variant.SPN, ds, chosen)
    target = data.make_batch(ds, chosen).target
    return float(np.sqrt(np.mean((pred - target) ** 2))), report


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    t0 = time.perf_counter()
    rmse, report = run(args.samples, args.epochs, args.lr, args.seed)
    print(f"normalized training RMSE {rmse:.5f} after {args.epochs} epochs ({time.perf_counter() - t0:.1f}s)")
    print("loss every 50 epochs:", [round(x, 5) for x in report.epoch_losses[::50]])
