"""Cross-entropy training of the head with Adam.

Only the head's parameters are registered with the optimizer; feature
extractors are frozen functions upstream and never seen here.
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureSet
from .model import ModelConfig, ModelState, ShapeMismatch, backward, forward_batch, init_model, predict_proba, save_checkpoint

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingError(Exception):
    pass


class DivergenceError(TrainingError):
    pass


class ClassImbalanceError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 160
    max_epochs: int = 30
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle: bool = True
    early_stop_patience: int = 10

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < b < 1.0:
                raise ValueError("Adam betas must be in (0, 1)")
        return self

    def to_json(self) -> dict:
        return asdict(self)


def compute_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean of ``-log p[label]`` with ``p`` floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[1] != 2 or labels.shape != (probs.shape[0],):
        raise ShapeMismatch(f"probs {probs.shape} / labels {labels.shape} do not line up")
    p = probs[np.arange(len(labels)), labels.astype(int)]
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))


def adam_step(params: dict, grads: dict, moments: dict, t: int, cfg: TrainConfig) -> tuple[dict, dict]:
    """One bias-corrected Adam update, in place; returns ``(params, moments)``.

    ``moments`` is ``{"m": {name: array}, "v": {name: array}}`` and gains
    zero entries for names it has not seen.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2, lr, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate, cfg.adam_eps
    m_all, v_all = moments.setdefault("m", {}), moments.setdefault("v", {})
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = m_all.setdefault(name, np.zeros_like(p))
        v = v_all.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return params, moments


class Adam:
    def __init__(self, param_names, cfg: TrainConfig):
        self.registry = tuple(param_names)
        self.cfg = cfg
        self.moments: dict = {"m": {}, "v": {}}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        unknown = set(grads) - set(self.registry)
        if unknown:
            raise KeyError(f"gradients for unregistered parameters: {sorted(unknown)}")
        self.t += 1
        adam_step({k: params[k] for k in self.registry}, grads, self.moments, self.t, self.cfg)


def loss_and_grads(state: ModelState, X: np.ndarray, y: np.ndarray, training: bool = True,
                   rng: np.random.Generator | None = None) -> tuple[float, dict, np.ndarray]:
    probs, cache = forward_batch(state, X, training, rng)
    loss = compute_loss(probs, y)
    dlogits = probs.copy()
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits /= len(y)
    return loss, backward(state, cache, dlogits.astype(state.dtype)), probs


def train_step(state: ModelState, opt: Adam, X: np.ndarray, y: np.ndarray, training: bool = True) -> float:
    loss, grads, _ = loss_and_grads(state, X, y, training)
    if not math.isfinite(loss):
        raise DivergenceError(f"loss became {loss} at optimizer step {opt.t + 1}")
    opt.step(state.params, grads)
    return loss


def fit_normalization(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and inverse std over all windows and timesteps."""
    flat = X.reshape(-1, X.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    scale = np.where(std > 1e-6, 1.0 / np.maximum(std, 1e-6), 1.0)
    return mean, scale


def accuracy(state: ModelState, data: FeatureSet) -> float:
    if len(data) == 0:
        return float("nan")
    pred = (predict_proba(state, data.X) >= 0.5).astype(int)
    return float(np.mean(pred == data.y))


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float | None


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float | None = None
    best_checkpoint: str | None = None
    stopped_early: bool = False
    wall_time_s: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("epochs")
        d["n_epochs"] = len(self.epochs)
        d["final_train_loss"] = self.epochs[-1].train_loss if self.epochs else None
        return d


def check_classes(y: np.ndarray) -> None:
    counts = np.bincount(np.asarray(y, dtype=int), minlength=2)
    if counts.min() == 0:
        missing = "slip" if counts[1] == 0 else "stable"
        raise ClassImbalanceError(f"training set has no {missing} samples")
    ratio = counts.max() / counts.sum()
    if ratio > 0.6:
        warnings.warn(f"class ratio {counts[0]}:{counts[1]} (stable:slip) is beyond 60/40", stacklevel=3)


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_set: FeatureSet,
    val_set: FeatureSet | None = None,
    out_dir: str | Path | None = None,
) -> tuple[ModelState, TrainReport]:
    """Train a fresh head; return the best-validation state and the epoch log.

    Without a validation set the last epoch's state is returned and no early
    stopping happens. With ``out_dir`` the best state goes to ``best.ckpt``,
    one JSON record per epoch to ``train_log.jsonl`` and the summary to
    ``train_summary.json``.
    """
    cfg = train_config.validate()
    model_config.validate()
    if train_set.X.shape[1:] != (model_config.seq_len, model_config.input_dim):
        raise ShapeMismatch(
            f"training windows are {train_set.X.shape[1:]}, model expects "
            f"({model_config.seq_len}, {model_config.input_dim})"
        )
    check_classes(train_set.y)
    t0 = time.perf_counter()

    state = init_model(model_config, cfg.seed)
    state.set_normalization(*fit_normalization(train_set.X))
    state.training_mode = True
    opt = Adam(state.parameter_names(), cfg)
    order_rng = np.random.default_rng([cfg.seed, 2])

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")
    report = TrainReport()
    best_state, best_score, stale = state.copy(), -np.inf, 0
    X, y = train_set.X, train_set.y
    n = len(y)

    for epoch in range(1, cfg.max_epochs + 1):
        idx = order_rng.permutation(n) if cfg.shuffle else np.arange(n)
        total, steps = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            b = idx[start:start + cfg.batch_size]
            total += train_step(state, opt, X[b], y[b]) * len(b)
            steps += 1
        state.training_mode = False
        rec = EpochRecord(
            epoch=epoch,
            steps=opt.t,
            train_loss=total / n,
            train_accuracy=accuracy(state, train_set),
            val_accuracy=accuracy(state, val_set) if val_set is not None and len(val_set) else None,
        )
        state.training_mode = True
        report.epochs.append(rec)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %s", epoch, rec.train_loss, rec.train_accuracy,
                 "n/a" if rec.val_accuracy is None else f"{rec.val_accuracy:.4f}")
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")

        score = rec.val_accuracy if rec.val_accuracy is not None else None
        if score is None:
            best_state, report.best_epoch = state.copy(), epoch
            continue
        if score > best_score:
            best_score, best_state, report.best_epoch, stale = score, state.copy(), epoch, 0
            report.best_val_accuracy = score
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                report.stopped_early = True
                break

    best_state.training_mode = False
    if out is not None:
        report.best_checkpoint = str(save_checkpoint(best_state, out / "best.ckpt"))
    report.wall_time_s = time.perf_counter() - t0
    if out is not None:
        (out / "train_summary.json").write_text(json.dumps(report.summary(), indent=2) + "\n")
    return best_state, report
