"""Fixed experiment setups shared by scripts/ and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dataset import generate_dataset, reorganize
from .model import VARIANTS, ModelConfig, variant_config
from .training import TrainConfig, initial_samples, predict, run_ablation_matrix, train


@dataclass(frozen=True)
class OverfitConfig:
    trajectories: int = 8
    seed: int = 3
    model: ModelConfig = field(default_factory=lambda: ModelConfig(grid_cells=50))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000, batch_size=8, stop_loss=0.05,
                                                                   log_every=50))
    variant: str = "complete"


@dataclass
class OverfitResult:
    final_loss: float
    steps: int
    seconds: float
    max_point_error: float  # metres, worst Euclidean error over all decoded points
    lengths_match: bool
    bin_width: float


def run_overfit(cfg: OverfitConfig = OverfitConfig(), log: Callable[[str], None] | None = None) -> OverfitResult:
    """Memorise the t0 sample of a handful of trajectories, then decode them greedily."""
    model_cfg = variant_config(cfg.model, cfg.variant)
    recs = generate_dataset(cfg.trajectories, cfg.seed, grid=model_cfg.grid)
    samples = initial_samples(reorganize(recs, model_cfg.horizon, model_cfg.grid, cfg.train.gt_sigma))
    res = train(samples, model_cfg, cfg.train, log=log)
    preds = predict(res.model, samples, cfg.train.batch_size)
    match = all(len(p) == len(s.future) for p, s in zip(preds, samples))
    err = max(float(np.hypot(*(p - s.future).T).max()) if len(p) == len(s.future) else np.inf
              for p, s in zip(preds, samples))
    return OverfitResult(res.history[-1][1].total, res.step, res.elapsed, err, match,
                         model_cfg.tokenizer.bin_width("x"))


@dataclass(frozen=True)
class BenchmarkConfig:
    train_trajectories: int = 500
    test_trajectories: int = 50
    seed: int = 2024
    model: ModelConfig = field(default_factory=lambda: ModelConfig(grid_cells=50))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000, batch_size=16, log_every=100,
                                                                   time_limit=1100.0))
    variants: tuple[str, ...] = tuple(VARIANTS)


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), out_csv=None, out_dir=None,
                  log: Callable[[str], None] | None = None) -> list[dict]:
    """Train every variant on the same split and schedule; held-out metrics on t0 samples."""
    grid = cfg.model.grid
    recs = generate_dataset(cfg.train_trajectories + cfg.test_trajectories, cfg.seed, grid=grid)
    q, sigma = cfg.model.horizon, cfg.train.gt_sigma
    train_s = reorganize(recs[: cfg.train_trajectories], q, grid, sigma)
    test_s = initial_samples(reorganize(recs[cfg.train_trajectories :], q, grid, sigma))
    t0 = time.perf_counter()
    rows = run_ablation_matrix(train_s, test_s, cfg.model, cfg.train, cfg.variants, out_csv, out_dir, log)
    if log:
        log(f"benchmark finished in {time.perf_counter() - t0:.0f} s")
    return rows


# (better, worse) pairs in held-out L2; the dual-decoder claim compares the two
# variants that differ only in the decoder layout
ORDERING = (
    ("complete", "Decoder-Gaussian-Dual"),
    ("Decoder-Gaussian-Refinement", "Decoder-Gaussian"),
    ("Decoder-Gaussian", "Decoder-Binary"),
    ("Decoder-Binary", "interleaved"),
)


def ordering_checks(rows: list[dict], tie: float = 0.05) -> list[tuple[str, bool, float, float]]:
    """``(claim, holds, better_l2, worse_l2)``; a claim holds when better <= worse * (1 + tie)."""
    l2 = {r["variant"]: r["l2_m"] for r in rows}
    out = []
    for better, worse in ORDERING:
        if better in l2 and worse in l2:
            out.append((f"{better} <= {worse}", l2[better] <= l2[worse] * (1 + tie), l2[better], l2[worse]))
    return out


def quick(cfg: BenchmarkConfig, steps: int, trajectories: int = 20) -> BenchmarkConfig:
    """A scaled-down copy for smoke runs."""
    return replace(cfg, train_trajectories=trajectories, test_trajectories=max(2, trajectories // 10),
                   train=replace(cfg.train, steps=steps))
