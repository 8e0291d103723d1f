"""Adam optimizer and the MSE training loop for the metric network."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .model_io import save_model
from .network import Network

__all__ = ["Adam", "TrainConfig", "TrainingLog", "train"]


class Adam:
    """Adam with bias correction; moments are stored per parameter name."""

    def __init__(self, net: Network, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(g) for name, g in net.named_grads()}
        self.v = {name: np.zeros_like(g) for name, g in net.named_grads()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        params = dict(self.net.named_params())
        for name, g in self.net.named_grads():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-5
    batch_size: int = 8
    seed: int = 0
    val_fraction: float = 0.1
    checkpoint_dir: str | None = None

    @staticmethod
    def from_json_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)

    def append(self, **kw):
        self.epochs.append(dict(kw))

    @property
    def initial_val_mse(self) -> float:
        return self.epochs[0]["val_mse_before"]

    @property
    def final_val_mse(self) -> float:
        return self.epochs[-1]["val_mse"]

    def to_json_dict(self) -> dict:
        return {"epochs": self.epochs}


def _mse(net: Network, inputs: np.ndarray, labels: np.ndarray, batch_size: int) -> float:
    total = 0.0
    n = len(labels)
    for start in range(0, n, batch_size):
        xb = inputs[start : start + batch_size]
        pred = net.run(xb, training=False)
        diff = pred.astype(np.float64) - labels[start : start + batch_size].astype(np.float64)
        total += float(np.sum(diff * diff))
    return total / n


def train(
    net: Network,
    inputs: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
) -> TrainingLog:
    """Train the network with Adam on mean squared error.

    Parameters
    ----------
    inputs : (N, 2, D, H, W) float32, intensities already in [0, 1]
    labels : (N,) TRE labels in mm
    cfg : TrainConfig
        ``val_fraction`` of the samples (chosen by a seeded permutation,
        fixed for the whole run) are held out for the epoch-level MSE log.

    Returns
    -------
    TrainingLog with per-epoch train/validation MSE. A checkpoint is
    written after every epoch when cfg.checkpoint_dir is set.

    Raises
    ------
    RuntimeError on a non-finite loss, with the failing epoch/step.
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.float32)
    n = len(labels)
    if n == 0 or len(inputs) != n:
        raise ValueError(f"dataset empty or mismatched: {len(inputs)} inputs, {n} labels")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = int(round(n * cfg.val_fraction))
    val_idx = perm[n - n_val :] if n_val else perm[:0]
    train_idx = perm[: n - n_val] if n_val else perm
    if len(train_idx) == 0:
        raise ValueError("validation fraction leaves no training samples")

    opt = Adam(net, lr=cfg.lr)
    log = TrainingLog()
    val_in, val_lab = inputs[val_idx], labels[val_idx]
    val_before = _mse(net, val_in, val_lab, cfg.batch_size) if n_val else float("nan")

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        run_loss = 0.0
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = inputs[idx]
            yb = labels[idx].astype(np.float64)
            net.zero_grads()
            pred = net.run(xb, training=True)
            diff = pred.astype(np.float64) - yb
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, step {start // cfg.batch_size}: "
                    f"loss={loss}, lr={cfg.lr}"
                )
            grad = (2.0 / len(idx)) * diff
            net.backward(grad[None, :].astype(np.float32))
            opt.step()
            run_loss += loss * len(idx)
            seen += len(idx)
        val_mse = _mse(net, val_in, val_lab, cfg.batch_size) if n_val else float("nan")
        log.append(
            epoch=epoch,
            train_mse=run_loss / seen,
            val_mse=val_mse,
            val_mse_before=val_before,
            seconds=time.perf_counter() - t0,
        )
        if cfg.checkpoint_dir:
            os.makedirs(cfg.checkpoint_dir, exist_ok=True)
            save_model(net, os.path.join(cfg.checkpoint_dir, f"checkpoint_epoch{epoch:03d}.rfnn"))
    return log
