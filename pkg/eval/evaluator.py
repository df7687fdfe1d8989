"""
Experiment harnesses for TERMCast.

Runs the ablation variants (full, V1, V2, V3) and the fusion configurations
(C0-C5) over several seeds on one shared dataset split, and writes the CSV
reports with per-label means. The historical-average baseline is printed
with the summary and written to its own JSON file.
"""

import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from tqdm import tqdm

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from termcast.components import PreparedDataset, prepare_dataset
from termcast.config import (
    DEFAULT_SEEDS,
    EARLY_STOP_PATIENCE,
    MAX_EPOCHS,
    OUT_DIR,
    WORKERS,
    FusionMode,
    ModelConfig,
    TrainConfig,
    Variant,
)
from termcast.training import EvalReport, fit_and_evaluate, ha_baseline, synth_generate

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["experiment", "variant_or_mode", "seed", "rmse", "mae", "epochs_ran"]
MEAN_SEED = "_mean"
BASELINE_LABEL = "HA"
BASELINE_FILE = "ha_baseline.json"
ABLATION_VARIANTS = [Variant.FULL, Variant.V1, Variant.V2, Variant.V3]
FUSION_MODES = list(FusionMode)


# ============= Desk Scale =============

def desk_dataset(seed: int = 0) -> PreparedDataset:
    """Synthetic 8x8 grid, hourly, 6 weeks, with the default persistent noise."""
    return prepare_dataset(synth_generate(seed=seed, height=8, width=8, weeks=6))


def desk_model_config() -> ModelConfig:
    return ModelConfig(d_relation=64, heads=4, conv_filters=16, conv_layers=3, transformer_depth=1,
                       mlp_extra_hidden=64)


def desk_train_config() -> TrainConfig:
    return TrainConfig(epochs=MAX_EPOCHS, early_stop_patience=EARLY_STOP_PATIENCE)


@dataclass
class RunRecord:
    label: str
    seed: int
    report: EvalReport


@dataclass
class ExperimentTable:
    """Per-(label, seed) reports in fixed order. The HA baseline is kept apart from the CSV rows."""

    experiment: str
    labels: List[str]
    records: List[RunRecord] = field(default_factory=list)
    baseline: Optional[EvalReport] = None

    def __len__(self) -> int:
        return len(self.records)

    def reports(self, label: str) -> List[EvalReport]:
        return [r.report for r in self.records if r.label == label]

    def mean(self, label: str) -> Tuple[float, float]:
        """(mean RMSE, mean MAE) over the seeds of ``label``."""
        reports = self.reports(label)
        if not reports:
            raise KeyError(f"no runs for {label!r} in {self.experiment}")
        return (sum(r.rmse for r in reports) / len(reports), sum(r.mae for r in reports) / len(reports))

    def worst_label(self) -> str:
        return max(self.labels, key=lambda label: self.mean(label)[0])

    def rows(self) -> List[Dict[str, Union[str, int, float]]]:
        rows = []
        for label in self.labels:
            reports = self.reports(label)
            for report in reports:
                rows.append({"experiment": self.experiment, "variant_or_mode": label, "seed": report.seed,
                             "rmse": report.rmse, "mae": report.mae, "epochs_ran": report.epochs_ran})
            mean_rmse, mean_mae = self.mean(label)
            rows.append({"experiment": self.experiment, "variant_or_mode": label, "seed": MEAN_SEED,
                         "rmse": mean_rmse, "mae": mean_mae,
                         "epochs_ran": sum(r.epochs_ran for r in reports) / len(reports)})
        return rows

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows(), columns=CSV_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)


# ============= Harnesses =============

def run_experiment(
    experiment: str,
    dataset: PreparedDataset,
    configs: Dict[str, ModelConfig],
    train_config: TrainConfig,
    seeds: Sequence[int],
    workers: int = WORKERS,
    show_progress: bool = False,
) -> ExperimentTable:
    """
    Train every (label, seed) pair on the shared split and score on the test set.

    Runs fan out to ``workers`` threads; results are collected in
    (label, seed) order regardless of completion order.
    """
    jobs = [(label, seed) for label in configs for seed in seeds]

    def run(job):
        label, seed = job
        _, report = fit_and_evaluate(dataset, configs[label], train_config, seed)
        return RunRecord(label, seed, report)

    progress = tqdm(total=len(jobs), desc=experiment, disable=not show_progress)
    records = []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for record in pool.map(run, jobs):
                records.append(record)
                progress.update(1)
    else:
        for job in jobs:
            records.append(run(job))
            progress.update(1)
    progress.close()

    baseline = ha_baseline(dataset.train_series, dataset.test_instances, dataset.norm)
    return ExperimentTable(experiment, list(configs), records, baseline)


def run_ablation(
    dataset: PreparedDataset,
    base_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    workers: int = WORKERS,
    show_progress: bool = False,
) -> ExperimentTable:
    """Variants full, V1, V2, V3 under ``base_config``'s fusion mode."""
    configs = {v.value: base_config.with_options(variant=v) for v in ABLATION_VARIANTS}
    return run_experiment("ablation", dataset, configs, train_config, seeds, workers, show_progress)


def run_fusion_sweep(
    dataset: PreparedDataset,
    base_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    workers: int = WORKERS,
    show_progress: bool = False,
) -> ExperimentTable:
    """Fusion modes C0-C5 with the full variant."""
    configs = {m.value: base_config.with_options(fusion=m, variant=Variant.FULL) for m in FUSION_MODES}
    return run_experiment("fusion", dataset, configs, train_config, seeds, workers, show_progress)


def print_table(table: ExperimentTable) -> None:
    print("\n" + "=" * 60)
    print(f"{table.experiment.upper()} SUMMARY ({len(table)} runs)")
    print("=" * 60)
    for label in table.labels:
        mean_rmse, mean_mae = table.mean(label)
        print(f"  {label:<6} RMSE {mean_rmse:10.4f}   MAE {mean_mae:10.4f}")
    if table.baseline is not None:
        print(f"  {BASELINE_LABEL:<6} RMSE {table.baseline.rmse:10.4f}   MAE {table.baseline.mae:10.4f}")


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    out_dir = Path(OUT_DIR)
    out_dir.mkdir(parents=True, exist_ok=True)

    dataset, base, train_config = desk_dataset(), desk_model_config(), desk_train_config()

    for harness, name in ((run_ablation, "ablation.csv"), (run_fusion_sweep, "fusion.csv")):
        table = harness(dataset, base, train_config, show_progress=True)
        print_table(table)
        table.to_csv(out_dir / name)
        print(f"\nResults saved to {out_dir / name}")
    (out_dir / BASELINE_FILE).write_text(table.baseline.model_dump_json(indent=2))
