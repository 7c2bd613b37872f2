"""Losses, SGD with momentum, the step schedule, training and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .data import AugmentSpec, Dataset, transform_batch
from .models import Model, class_mask
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "lr", "train_loss", "train_acc", "eval_err", "seconds")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr0: float = 0.1
    decay_every: int = 3
    decay_rate: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    recon_lambda: float = 1.0
    ablation_constant_routing: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.decay_every < 1:
            raise ValueError("epochs must be >= 0 and decay_every >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    eval_err: float
    seconds: float

    def row(self) -> list[str]:
        return [str(self.epoch), repr(self.lr), repr(self.train_loss), repr(self.train_acc),
                repr(self.eval_err), f"{self.seconds:.3f}"]


# -- losses ----------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"invalid labels for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    return Tensor._record(np.array(loss), (logits,), backward)


def mse(a: Tensor, b) -> Tensor:
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean()


# -- optimisation ----------------------------------------------------------------


def sgd_step(params: dict[str, Tensor], lr: float, momentum: float,
             velocity: dict[str, np.ndarray]) -> None:
    """``v <- momentum * v + g``; ``p <- p - lr * v`` for every parameter."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        v = velocity.get(name)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        velocity[name] = v
        p.data = p.data - lr * v


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay_rate ** (epoch // cfg.decay_every)


# -- batches ---------------------------------------------------------------------


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def _batch(ds: Dataset, idx, aug: AugmentSpec | None, train_mode: bool, seed: int, epoch: int):
    imgs = ds.images[idx]
    if aug is not None:
        imgs = transform_batch(imgs, idx, aug, train_mode, seed, epoch)
    return imgs


def model_loss(model: Model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig):
    """Training objective for one batch; returns ``(loss, logits)``."""
    caps = model.capsules(images)
    logits = model.logits(caps)
    loss = cross_entropy(logits, labels)
    spec = model.spec
    if spec.decoder == "conv":
        recon = model.decode_conv(caps)
        target = images[:, 0] if recon.ndim == 3 else images.transpose(0, 2, 3, 1)
        loss = loss + mse(recon, target) * cfg.recon_lambda
    elif spec.decoder == "fc":
        b, _, _, c, d = caps.shape
        masked = caps.reshape(b, c, d) * class_mask(labels, c, d)
        recon = model.decode_fc(masked)
        loss = loss + mse(recon, images[:, 0]) * cfg.recon_lambda
    return loss, logits


def evaluate(model: Model, ds: Dataset, aug: AugmentSpec | None = None, batch_size: int = 256) -> float:
    """Fraction of ``ds`` misclassified under the eval-time transform."""
    wrong = 0
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            logits = model.classify(_batch(ds, idx, aug, False, 0, 0))
            wrong += int((logits.data.argmax(axis=1) != ds.labels[idx]).sum())
    return wrong / len(ds) if len(ds) else 0.0


def predict(model: Model, ds: Dataset, aug: AugmentSpec | None = None, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            out.append(model.classify(_batch(ds, idx, aug, False, 0, 0)).data)
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes))


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    metrics: list[EpochMetrics] = field(default_factory=list)
    best_path: Path | None = None
    last_path: Path | None = None


def _write_metrics_row(path: Path, m: EpochMetrics) -> None:
    """Append one row by rewriting the file atomically."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if path.exists():
        buf.write(path.read_text())
    else:
        w.writerow(METRICS_HEADER)
    w.writerow(m.row())
    atomic_write(path, buf.getvalue().encode())


def train(model: Model, train_set: Dataset, eval_set: Dataset | None, cfg: TrainConfig,
          out_dir=None, aug: AugmentSpec | None = None, resume=None,
          on_epoch=None) -> TrainResult:
    """Train ``model`` in place with SGD and a step learning-rate schedule.

    With ``out_dir`` the metrics are appended to ``metrics.csv`` and
    checkpoints are written to ``best.ccap`` (lowest eval error) and
    ``last.ccap``.  ``resume`` names a checkpoint to continue from; the epoch
    count, optimiser velocity and best error are restored from it.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    velocity: dict[str, np.ndarray] = {}
    start_epoch, best_err = 0, math.inf
    result = TrainResult(model)
    if resume is not None:
        loaded, velocity, meta = load_checkpoint(resume)
        for name, p in loaded.params.items():
            model.params[name].data = p.data
        start_epoch = int(meta.get("epoch", 0))
        best_err = float(meta.get("best_err", math.inf))
    elif out is not None and (out / "metrics.csv").exists():
        (out / "metrics.csv").unlink()

    eval_aug = aug
    n = len(train_set)
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        order = epoch_order(n, cfg.seed, epoch)
        tot_loss, correct = 0.0, 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            images = _batch(train_set, idx, aug, True, cfg.seed, epoch)
            labels = train_set.labels[idx]
            for p in model.params.values():
                p.grad = None
            try:
                loss, logits = model_loss(model, images, labels, cfg)
            except T.DomainError as e:
                # agreement logs are positive for finite weights; NaN got in
                log.error("non-finite activations at epoch %d batch %d", epoch, bi)
                raise TrainingDiverged(f"non-finite activations at epoch {epoch}, batch {bi}") from e
            value = loss.item()
            if not math.isfinite(value):
                log.error("non-finite loss at epoch %d batch %d", epoch, bi)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            sgd_step(model.params, lr, cfg.momentum, velocity)
            if not all(np.isfinite(p.data).all() for p in model.params.values()):
                log.error("non-finite parameters after epoch %d batch %d", epoch, bi)
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}, batch {bi}")
            tot_loss += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        try:
            eval_err = evaluate(model, eval_set, eval_aug) if eval_set is not None else math.nan
        except T.DomainError as e:
            raise TrainingDiverged(f"non-finite activations evaluating epoch {epoch + 1}") from e
        m = EpochMetrics(epoch + 1, lr, tot_loss / n, correct / n, eval_err, time.perf_counter() - t0)
        result.metrics.append(m)
        log.info("epoch %d lr %.4g loss %.4f acc %.4f eval_err %.4f (%.1fs)",
                 m.epoch, lr, m.train_loss, m.train_acc, eval_err, m.seconds)
        if out is not None:
            _write_metrics_row(out / "metrics.csv", m)
            meta = {"epoch": epoch + 1, "train": asdict(cfg), "eval_err": eval_err}
            if eval_err < best_err:
                best_err = eval_err
                meta["best_err"] = best_err
                save_checkpoint(out / "best.ccap", model, velocity, meta)
                result.best_path = out / "best.ccap"
            meta["best_err"] = best_err
            save_checkpoint(out / "last.ccap", model, velocity, meta)
            result.last_path = out / "last.ccap"
        if on_epoch is not None:
            on_epoch(model, m)
    if out is not None and cfg.epochs <= start_epoch:
        meta = {"epoch": start_epoch, "train": asdict(cfg), "best_err": best_err}
        save_checkpoint(out / "last.ccap", model, velocity, meta)
        result.last_path = out / "last.ccap"
    return result


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
