"""Training and evaluation loops with CSV metrics and binary checkpoints."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..cnn import CnnNet
from ..tensor import Tape, backward, cross_entropy
from ..vit import VitNet
from .checkpoint import assign_arrays, load_checkpoint, model_arrays, save_checkpoint
from .config import RunConfig
from .data import Split, load_dataset

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "split", "loss", "top1", "wall_seconds", "seed")
EVAL_BATCH = 512


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, step: int, last_finite: float | None):
        super().__init__(f"non-finite loss at epoch {epoch} step {step}; last finite loss {last_finite}")
        self.epoch, self.step, self.last_finite = epoch, step, last_finite


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    top1: float
    wall_seconds: float
    seed: int

    def as_strings(self) -> list[str]:
        return [str(self.epoch), self.split, repr(float(self.loss)), repr(float(self.top1)),
                f"{self.wall_seconds:.3f}", str(self.seed)]


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    run_dir: Path | None
    model: object

    def final(self, split: str = "train") -> MetricsRow:
        return [r for r in self.rows if r.split == split][-1]


def _float_dtype(cfg: RunConfig):
    return np.float64 if cfg.dtype == 64 else np.float32


def build_model(cfg: RunConfig, input_shape, classes: int):
    ab, m = cfg.ablations, cfg.model
    if cfg.backbone == "cnn":
        model = CnnNet(input_shape, classes, width=m.width, latent_n=cfg.latent_n, blocks=m.blocks,
                       aggregation=cfg.aggregation, grid=m.grid, mid=m.mid or None,
                       trainable_h=ab.trainable_h, selective=ab.selective,
                       pool_delta=ab.cnn_pool_delta, seed=cfg.seed)
    else:
        model = VitNet(input_shape, classes, width=m.width, latent_n=cfg.latent_n, depth=m.depth,
                       aggregation=cfg.aggregation, patch=m.patch, trainable_h=ab.trainable_h,
                       selective=ab.selective, combine=ab.vit_combine, seed=cfg.seed)
    return model.astype(_float_dtype(cfg))


def predict_logits(model, x: np.ndarray) -> np.ndarray:
    return np.concatenate([model(x[i:i + EVAL_BATCH]).data for i in range(0, len(x), EVAL_BATCH)])


def score(model, split: Split) -> tuple[float, float]:
    """(mean cross-entropy, top-1 accuracy); argmax ties go to the lowest class index."""
    if len(split) == 0:
        return float("nan"), float("nan")
    logits = predict_logits(model, split.x)
    loss = cross_entropy(logits, split.y).item()
    top1 = float(np.mean(np.argmax(logits, axis=1) == split.y))
    return loss, top1


class SgdMomentum:
    """p <- p - lr * v, v <- momentum * v + (g + weight_decay * p)."""

    def __init__(self, params, lr: float, momentum: float, weight_decay: float):
        self.params = [p for p in params if p.trainable]
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


def _lr_at(cfg: RunConfig, epoch: int) -> float:
    drops = sum(1 for e in cfg.optimizer.lr_drops if epoch >= e)
    return cfg.optimizer.lr * 0.1 ** drops


def _write_rows(path: Path, rows, header: bool) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow(r.as_strings())


def train(cfg: RunConfig, out_dir: str | Path | None = None, figures: bool = True) -> TrainResult:
    """Train per ``cfg``; with ``out_dir`` writes metrics.csv, config.txt,
    checkpoint.bin and curves.png into ``out_dir/<config-hash>-s<seed>/``."""
    cfg.validate()
    dtype = _float_dtype(cfg)
    train_set, test_set = load_dataset(cfg.dataset, cfg.seed)
    train_set = Split(train_set.x.astype(dtype), train_set.y)
    test_set = Split(test_set.x.astype(dtype), test_set.y)
    classes = max(cfg.dataset.classes, int(train_set.y.max(initial=0)) + 1)
    model = build_model(cfg, train_set.x.shape[1:], classes)
    opt = SgdMomentum(model.parameters(), cfg.optimizer.lr, cfg.optimizer.momentum,
                      cfg.optimizer.weight_decay)

    run_dir = metrics_path = None
    if out_dir is not None:
        run_dir = Path(out_dir) / cfg.run_name()
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(cfg.to_text())
        metrics_path = run_dir / "metrics.csv"
        metrics_path.unlink(missing_ok=True)
        _write_rows(metrics_path, [], header=True)

    rng = np.random.default_rng([cfg.seed, 3])
    batch = cfg.optimizer.batch
    rows: list[MetricsRow] = []
    last_finite = None
    start = time.perf_counter()
    for epoch in range(1, cfg.optimizer.epochs + 1):
        lr = _lr_at(cfg, epoch - 1)
        order = rng.permutation(len(train_set))
        for step, i in enumerate(range(0, len(order), batch)):
            idx = order[i:i + batch]
            opt.zero_grad()
            with Tape():
                try:
                    loss = cross_entropy(model(train_set.x[idx], training=True), train_set.y[idx])
                except ValueError:
                    # parameters gone non-finite trip the model's own argument checks
                    if all(np.isfinite(p.data).all() for p in opt.params):
                        raise
                    raise NonFiniteLossError(epoch, step, last_finite) from None
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteLossError(epoch, step, last_finite)
                last_finite = value
                backward(loss)
            opt.step(lr)
        wall = time.perf_counter() - start if cfg.metrics.wall_clock else 0.0
        new = []
        for name, split in (("train", train_set), ("test", test_set)):
            l, acc = score(model, split)
            new.append(MetricsRow(epoch, name, l, acc, wall, cfg.seed))
        rows += new
        if metrics_path is not None:
            _write_rows(metrics_path, new, header=False)
        log.info("epoch %d train loss %.4f top1 %.4f", epoch, new[0].loss, new[0].top1)

    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoint.bin", model_arrays(model), cfg.to_text())
        if figures and rows:
            from .plotting import plot_training_curves
            plot_training_curves(rows, run_dir / "curves.png", title=cfg.run_name())
    return TrainResult(rows, run_dir, model)


def load_model(checkpoint_path: str | Path, cfg: RunConfig | None = None):
    """Rebuild the model recorded in a checkpoint (optionally under another config)."""
    ckpt = load_checkpoint(checkpoint_path)
    if cfg is None:
        cfg = RunConfig.from_text(ckpt.config_text)
    cfg.validate()
    train_set, _ = load_dataset(cfg.dataset, cfg.seed)
    classes = max(cfg.dataset.classes, int(train_set.y.max(initial=0)) + 1)
    model = build_model(cfg, train_set.x.shape[1:], classes)
    assign_arrays(model, ckpt.arrays)
    return model, cfg


def evaluate(checkpoint_path: str | Path, cfg: RunConfig | None = None, split: str = "test") -> MetricsRow:
    model, cfg = load_model(checkpoint_path, cfg)
    train_set, test_set = load_dataset(cfg.dataset, cfg.seed)
    data = train_set if split == "train" else test_set
    dtype = _float_dtype(cfg)
    loss, top1 = score(model, Split(data.x.astype(dtype), data.y))
    return MetricsRow(cfg.optimizer.epochs, split, loss, top1, 0.0, cfg.seed)


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        conv = (int, str, float, float, float, int)
        return [MetricsRow(*(c(v) for c, v in zip(conv, row))) for row in reader]
