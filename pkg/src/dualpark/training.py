"""Objective, optimisation loop, held-out evaluation and the ablation matrix."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import xlogy

from .autodiff import Adam, Tensor, cosine_lr, load_checkpoint, ops, save_checkpoint
from .dataset import Sample
from .metrics import MetricReport, evaluate, mean_report
from .model import VARIANTS, ModelConfig, ParkingModel, StepOutput, variant_config
from .tokenizer import TokenizerConfig, serialize

METRIC_COLUMNS = ("step", "L_x", "L_y", "L_m", "total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    min_lr: float = 0.0
    warmup: int = 0
    lambda_m: float = 1.0
    gt_sigma: float = 2.0  # cells
    seed: int = 0
    log_every: int = 10
    val_every: int = 200
    val_fraction: float = 0.1
    stop_loss: float | None = None  # stop once a training batch total drops below this
    time_limit: float | None = None  # seconds


@dataclass(frozen=True)
class LossBreakdown:
    L_x: float
    L_y: float
    L_m: float
    total: float

    def row(self, step: int) -> list:
        return [step, self.L_x, self.L_y, self.L_m, self.total]


@dataclass
class Batch:
    sensor: np.ndarray
    slots: np.ndarray  # (B, 2)
    tokens_x: np.ndarray  # (B, Q + 2) [BOS, p1..pQ, EOS], PAD at padded steps
    tokens_y: np.ndarray
    maps: np.ndarray  # (B, Q, H, W)
    pad: np.ndarray  # (B, Q)

    @property
    def joint(self) -> np.ndarray:
        """(B, 2Q + 2) interleaved stream [BOS, x1, y1, ..., xQ, yQ, EOS]."""
        b, n = self.tokens_x.shape
        body = np.stack([self.tokens_x[:, 1:-1], self.tokens_y[:, 1:-1]], axis=2).reshape(b, -1)
        return np.concatenate([self.tokens_x[:, :1], body, self.tokens_x[:, -1:]], axis=1)


def make_batch(samples: Sequence[Sample], tok: TokenizerConfig, with_maps: bool = True) -> Batch:
    b, q = len(samples), tok.horizon
    tx = np.full((b, q + 2), tok.pad, dtype=np.int64)
    ty = tx.copy()
    pad = np.zeros((b, q), dtype=bool)
    for i, s in enumerate(samples):
        if len(s.future) != q:
            raise ValueError(f"sample {s.record_id}:{s.index} has {len(s.future)} steps, expected {q}")
        tx[i, 0] = ty[i, 0] = tok.bos
        tx[i, 1 : q + 1] = serialize(s.future[:, 0], tok.range_x, tok.n_tokens)
        ty[i, 1 : q + 1] = serialize(s.future[:, 1], tok.range_y, tok.n_tokens)
        tx[i, q + 1] = ty[i, q + 1] = tok.eos
        pad[i] = s.pad
        tx[i, 1 : q + 1][s.pad] = tok.pad
        ty[i, 1 : q + 1][s.pad] = tok.pad
    maps = np.stack([s.maps for s in samples]) if with_maps else np.zeros((b, q, 0, 0))
    return Batch(np.stack([s.sensor for s in samples]), np.stack([s.slot for s in samples]), tx, ty, maps, pad)


def map_divergence(log_pred: Tensor, gt: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean over valid (b, step) of KL(gt || pred); maps are (B, Q, H, W)."""
    count = int(valid.sum())
    if count == 0:
        return Tensor(np.asarray(0.0))
    ent = xlogy(gt, gt).sum(axis=(-1, -2))  # (B, Q)
    cross = (log_pred * gt).sum(axis=(-1, -2))
    kl = (cross * -1.0 + ent) * valid.astype(np.float64)
    return kl.sum() * (1.0 / count)


def compute_loss(outputs, batch: Batch, tok: TokenizerConfig, lambda_m: float = 1.0) -> tuple[LossBreakdown, Tensor]:
    """Token cross-entropies per axis plus the map divergence; PAD targets are ignored."""
    q = tok.horizon
    if isinstance(outputs, StepOutput):
        if outputs.x_logits.shape[:2] != (batch.tokens_x.shape[0], q + 1):
            raise ValueError(f"logits {outputs.x_logits.shape} do not cover {q + 1} target steps")
        lx = ops.cross_entropy(outputs.x_logits, batch.tokens_x[:, 1:], ignore_index=tok.pad)
        ly = ops.cross_entropy(outputs.y_logits, batch.tokens_y[:, 1:], ignore_index=tok.pad)
        if outputs.log_map is not None:
            if batch.maps.shape[2:] != outputs.log_map.shape[2:]:
                raise ValueError(f"ground-truth maps {batch.maps.shape} do not match predictions "
                                 f"{outputs.log_map.shape}")
            lm = map_divergence(outputs.log_map[:, :q], batch.maps, ~batch.pad)
        else:
            lm = None
    else:
        target = batch.joint[:, 1:]
        if outputs.shape[:2] != target.shape:
            raise ValueError(f"logits {outputs.shape} do not match targets {target.shape}")
        lx = ops.cross_entropy(outputs[:, 0::2], target[:, 0::2], ignore_index=tok.pad)
        ly = ops.cross_entropy(outputs[:, 1::2], target[:, 1::2], ignore_index=tok.pad)
        lm = None
    total = lx + ly
    if lm is not None and lambda_m != 0:
        total = total + lm * lambda_m
    lm_val = lm.item() if lm is not None else 0.0
    return LossBreakdown(lx.item(), ly.item(), lm_val, total.item()), total


def forward_batch(model: ParkingModel, batch: Batch):
    enc = model.encode(batch.sensor, batch.slots)
    if model.dual:
        return model.forward(enc, batch.tokens_x[:, :-1], batch.tokens_y[:, :-1])
    return model.forward(enc, batch.joint[:, :-1])


def batch_loss(model: ParkingModel, samples: Sequence[Sample], lambda_m: float = 1.0) -> tuple[LossBreakdown, Tensor]:
    tok = model.cfg.tokenizer
    batch = make_batch(samples, tok, with_maps=model.dual and model.cfg.decoder.refinement)
    return compute_loss(forward_batch(model, batch), batch, tok, lambda_m)


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: ParkingModel
    history: list[tuple[int, LossBreakdown]]
    step: int
    best: float
    elapsed: float
    stopped: str = "steps"


def _batch_indices(n: int, batch: int, step: int, seed: int) -> np.ndarray:
    """Deterministic in (n, batch, step, seed): epoch permutations from the seed."""
    per_epoch = max(1, math.ceil(n / batch))
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[k * batch : (k + 1) * batch]


def save_training_state(path, model: ParkingModel, opt: Adam, step: int, best: float, train_cfg: TrainConfig) -> None:
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    arrays.update({f"adam/{k}": v for k, v in opt.state().items()})
    meta = {"model": model.cfg.to_dict(), "train": asdict(train_cfg), "step": step, "best": best}
    save_checkpoint(path, arrays, meta)


def load_model(path, rig=None) -> tuple[ParkingModel, dict]:
    arrays, meta = load_checkpoint(path)
    model = ParkingModel(ModelConfig.from_dict(meta["model"]), rig)
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
    return model, meta


def validation_loss(model: ParkingModel, samples: Sequence[Sample], batch_size: int, lambda_m: float) -> LossBreakdown:
    parts = []
    for k in range(0, len(samples), batch_size):
        chunk = samples[k : k + batch_size]
        lb, _ = batch_loss(model, chunk, lambda_m)
        parts.append((len(chunk), lb))
    n = sum(c for c, _ in parts)
    return LossBreakdown(*(sum(c * getattr(lb, f) for c, lb in parts) / n for f in ("L_x", "L_y", "L_m", "total")))


def train(samples: Sequence[Sample], model_cfg: ModelConfig, train_cfg: TrainConfig = TrainConfig(),
          val_samples: Sequence[Sample] = (), out_dir=None, resume=None, rig=None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Adam with cosine decay. Writes ``metrics.csv``, ``best.ckpt`` and ``last.ckpt`` under ``out_dir``."""
    if not samples:
        raise ValueError("training set is empty")
    model = ParkingModel(model_cfg, rig)
    opt = Adam(model.parameters(), lr=train_cfg.lr)
    start, best = 0, math.inf
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
        opt.load_state({k[5:]: v for k, v in arrays.items() if k.startswith("adam/")})
        start, best = int(meta["step"]), float(meta["best"])
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fresh = resume is None or not (out / "metrics.csv").exists()
        fh = open(out / "metrics.csv", "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRIC_COLUMNS)
    history: list[tuple[int, LossBreakdown]] = []
    t0 = time.perf_counter()
    stopped = "steps"
    step = start
    try:
        while step < train_cfg.steps:
            idx = _batch_indices(len(samples), train_cfg.batch_size, step, train_cfg.seed)
            opt.zero_grad()
            lb, total = batch_loss(model, [samples[i] for i in idx], train_cfg.lambda_m)
            if not all(math.isfinite(v) for v in asdict(lb).values()):
                raise TrainingDiverged(f"non-finite loss at step {step}: {lb}")
            total.backward()
            opt.step(cosine_lr(step, train_cfg.steps, train_cfg.lr, train_cfg.warmup, train_cfg.min_lr))
            step += 1
            history.append((step, lb))
            if writer is not None and (step % train_cfg.log_every == 0 or step == train_cfg.steps):
                writer.writerow(lb.row(step))
            if log and step % train_cfg.log_every == 0:
                log(f"step {step}: L_x={lb.L_x:.4f} L_y={lb.L_y:.4f} L_m={lb.L_m:.4f} total={lb.total:.4f}")
            track = None
            if val_samples and (step % train_cfg.val_every == 0 or step == train_cfg.steps):
                track = validation_loss(model, val_samples, train_cfg.batch_size, train_cfg.lambda_m).total
            elif not val_samples:
                track = lb.total
            if track is not None and track < best:
                best = track
                if out is not None and (val_samples or step % train_cfg.log_every == 0):
                    save_training_state(out / "best.ckpt", model, opt, step, best, train_cfg)
            if train_cfg.stop_loss is not None and lb.total < train_cfg.stop_loss:
                stopped = "stop_loss"
                break
            if train_cfg.time_limit is not None and time.perf_counter() - t0 > train_cfg.time_limit:
                stopped = "time_limit"
                break
    finally:
        if writer is not None:
            fh.close()
    if out is not None:
        save_training_state(out / "last.ckpt", model, opt, step, best, train_cfg)
        if not (out / "best.ckpt").exists():
            save_training_state(out / "best.ckpt", model, opt, step, best, train_cfg)
    return TrainResult(model, history, step, best, time.perf_counter() - t0, stopped)


# -- evaluation --------------------------------------------------------------------

def predict(model: ParkingModel, samples: Sequence[Sample], batch_size: int = 16) -> list[np.ndarray]:
    preds = []
    for k in range(0, len(samples), batch_size):
        chunk = samples[k : k + batch_size]
        gens = model.generate(np.stack([s.sensor for s in chunk]), np.stack([s.slot for s in chunk]))
        preds.extend(g.points for g in gens)
    return preds


def evaluate_model(model: ParkingModel, samples: Sequence[Sample], batch_size: int = 16) -> list[MetricReport]:
    """Metrics of greedy predictions against each sample's target window.

    A prediction that stops before its first point counts as staying at the
    current pose (the origin of the sample's frame).
    """
    if not samples:
        raise ValueError("evaluation split is empty")
    reports = []
    for s, pts in zip(samples, predict(model, samples, batch_size)):
        pts = pts if len(pts) else np.zeros((1, 2))
        reports.append(evaluate(pts, s.future[~s.pad]))
    return reports


def initial_samples(samples: Sequence[Sample]) -> list[Sample]:
    """The t0 sample of each trajectory: the prediction the controller executes."""
    return [s for s in samples if s.index == 0]


ABLATION_COLUMNS = ("variant", "hausdorff_m", "l2_m", "fourier_diff")


def run_ablation_matrix(train_samples: Sequence[Sample], test_samples: Sequence[Sample], base: ModelConfig,
                        train_cfg: TrainConfig, variants: Sequence[str] = tuple(VARIANTS), out_csv=None,
                        out_dir=None, log: Callable[[str], None] | None = None) -> list[dict]:
    """Train and evaluate each variant with the same seed, data and schedule."""
    rows = []
    for name in variants:
        cfg = variant_config(base, name)
        vdir = Path(out_dir) / name if out_dir is not None else None
        res = train(train_samples, cfg, train_cfg, out_dir=vdir, log=log)
        rep = mean_report(evaluate_model(res.model, test_samples, train_cfg.batch_size))
        row = {"variant": name, "hausdorff_m": rep.hausdorff, "l2_m": rep.l2, "fourier_diff": rep.fourier_diff,
               "final_loss": res.history[-1][1].total, "steps": res.step, "seconds": res.elapsed}
        rows.append(row)
        if log:
            log(json.dumps(row))
    if out_csv is not None:
        write_results_csv(out_csv, rows)
    return rows


def write_results_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r["variant"]] + [f"{r[c]:.9g}" for c in ABLATION_COLUMNS[1:]])
