"""Train several variants over several seeds and tabulate test RMSE."""

from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .data import Dataset, build_samples, split_samples
from .evaluation import evaluate_rmse
from .spn import Variant
from .train import TrainConfig, train

logger = logging.getLogger(__name__)

# Test RMSE of each variant on TaxiBJ as published; reference constants only.
PUBLISHED_TAXIBJ_RMSE = {
    Variant.PCNN: 33.44,
    Variant.PRNN_NO_ATTN: 32.97,
    Variant.PRNN: 32.52,
    Variant.SCNN: 17.48,
    Variant.SRNN_NO_ATTN: 16.62,
    Variant.SRNN: 16.11,
    Variant.SPN_NO_FUSION: 16.01,
    Variant.SPN: 15.40,
}


@dataclass
class AblationRow:
    variant: Variant
    seed: int
    test_rmse: float
    final_loss: float


@dataclass
class AblationResult:
    rows: list[AblationRow]

    def median(self, variant: Variant) -> float:
        return statistics.median(r.test_rmse for r in self.rows if r.variant is Variant(variant))

    def variants(self) -> list[Variant]:
        return list(dict.fromkeys(r.variant for r in self.rows))

    def table(self) -> list[tuple[str, float, float | None]]:
        """``(variant, median test RMSE, published TaxiBJ RMSE)`` per variant."""
        return [(v.value, self.median(v), PUBLISHED_TAXIBJ_RMSE.get(v)) for v in self.variants()]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "seed", "test_rmse", "final_train_loss"])
            for r in self.rows:
                writer.writerow([r.variant.value, r.seed, repr(r.test_rmse), repr(r.final_loss)])
            writer.writerow([])
            writer.writerow(["variant", "median_test_rmse", "published_taxibj_rmse"])
            for name, med, pub in self.table():
                writer.writerow([name, repr(med), "" if pub is None else pub])
        return path


def run_ablation(
    dataset: Dataset,
    config: TrainConfig,
    variants: Sequence[Variant],
    seeds: Sequence[int],
    out_dir=None,
) -> AblationResult:
    """Train every (variant, seed) pair and score its final parameters on the test split."""
    test = split_samples(build_samples(dataset, config.model_config(dataset)), dataset.manifest, config.val_fraction)[2]
    if not test:
        raise ValueError("dataset has no test samples")
    rows = []
    for seed in seeds:
        for variant in variants:
            variant = Variant(variant)
            run_dir = None if out_dir is None else Path(out_dir) / f"{variant.value}_seed{seed}"
            params, report = train(dataset, config, variant, seed, out_dir=run_dir)
            rmse = evaluate_rmse(params, variant, test, dataset, batch_size=config.batch_size)
            logger.info("%s seed %d: test RMSE %.4f (%.0fs)", variant.value, seed, rmse, report.wall_time)
            rows.append(AblationRow(variant, seed, rmse, report.epoch_losses[-1] if report.epoch_losses else float("nan")))
    result = AblationResult(rows)
    if out_dir is not None:
        result.write_csv(Path(out_dir) / "ablation.csv")
    return result
