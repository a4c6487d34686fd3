"""
Full-batch training over a directory of clouds, Adam by default.

Each epoch sums per-sample gradients in sample order and divides by the sample
count, logs the mean loss breakdown, keeps the best-total checkpoint, then
steps. The log is flushed after every epoch so an abort leaves it readable.
"""

from __future__ import annotations

import logging
import sys
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

from tcatseg import diffcore as dc
from tcatseg.data import LabeledCloud, read_cloud, resample
from tcatseg.errors import NumericalAbort, ValidationError
from tcatseg.losses import LossBreakdown, loss_offset, loss_seg, loss_tcp, loss_total
from tcatseg.network import (
    ModelConfig,
    ModelOutput,
    ModelParams,
    Prepared,
    Targets,
    forward,
    make_targets,
    prepare,
    save_model,
)

log = logging.getLogger(__name__)

LOG_HEADER = "# epoch seg tcp offset total lr"
MODEL_FILE = "model.tcat"
BEST_FILE = "best.tcat"
OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-3
    momentum: float = 0.9
    lr_decay: float = 1.0
    optimizer: str = "adam"  # momentum doubles as beta1 for adam

    def validate(self) -> TrainConfig:
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.lr_decay <= 1:
            raise ValidationError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(
                f"optimizer must be one of {', '.join(OPTIMIZERS)}, got {self.optimizer!r}"
            )
        return self


@dataclass
class Sample:
    name: str
    raw: LabeledCloud
    cloud: LabeledCloud  # resampled to n_input
    prepared: Prepared
    targets: Targets


def load_sample(path: Path, config: ModelConfig) -> Sample:
    raw = read_cloud(path)
    cloud = raw if raw.n == config.n_input else resample(raw, config.n_input, seed=config.seed)
    prepared = prepare(cloud, config)
    return Sample(path.stem, raw, cloud, prepared, make_targets(cloud, prepared.frame))


def load_samples(paths: Sequence[Path], config: ModelConfig) -> list[Sample]:
    if not paths:
        raise ValidationError("no cloud files to load")
    return [load_sample(p, config) for p in paths]


def sample_loss(
    sample: Sample, config: ModelConfig, params: ModelParams
) -> tuple[dc.Tensor, LossBreakdown, ModelOutput]:
    out = forward(sample.cloud, config, params, sample.prepared)
    seg = loss_seg(out.logits, sample.targets.labels)
    tcp, _ = loss_tcp(out.tcp_positions, sample.targets.centroids, config.tcp_loss_levels)
    offset = loss_offset(out.offsets, sample.targets.offsets) if config.use_offset_loss else None
    total, breakdown = loss_total(seg, tcp, offset)
    return total, breakdown, out


class MomentumSGD:
    """v <- momentum * v + g;  p <- p - lr * v."""

    def __init__(self, params: dict[str, dc.Tensor], lr: float, momentum: float) -> None:
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros(p.shape) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, grad_scale: float = 1.0) -> None:
        for name, p in self.params.items():
            g = np.zeros(p.shape) if p.grad is None else p.grad * grad_scale
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            p.data = p.data - self.lr * v


class Adam:
    """Bias-corrected first and second moment estimates; each entry moves about lr per step."""

    def __init__(
        self,
        params: dict[str, dc.Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in params.items()}
        self.v = {name: np.zeros(p.shape) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, grad_scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = np.zeros(p.shape) if p.grad is None else p.grad * grad_scale
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(params: dict[str, dc.Tensor], config: TrainConfig) -> MomentumSGD | Adam:
    if config.optimizer == "sgd":
        return MomentumSGD(params, config.learning_rate, config.momentum)
    return Adam(params, config.learning_rate, beta1=config.momentum)


def mean_breakdown(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    n = len(parts)
    return LossBreakdown(
        seg=sum(b.seg for b in parts) / n,
        tcp=sum(b.tcp for b in parts) / n,
        offset=sum(b.offset for b in parts) / n,
        total=sum(b.total for b in parts) / n,
    )


def format_log_row(epoch: int, b: LossBreakdown, lr: float) -> str:
    return f"{epoch} {b.seg:.12g} {b.tcp:.12g} {b.offset:.12g} {b.total:.12g} {lr:.12g}"


def train(
    samples: Sequence[Sample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: ModelParams,
    out_dir: Path,
    progress: bool = True,
) -> list[LossBreakdown]:
    """Runs the loop, writing ``loss.log``, ``model.tcat`` and ``best.tcat`` into ``out_dir``."""
    train_config.validate()
    out_dir.mkdir(parents=True, exist_ok=True)
    log.info("optimizer %s, lr %g", train_config.optimizer, train_config.learning_rate)
    named = params.named()
    opt = make_optimizer(named, train_config)
    history: list[LossBreakdown] = []
    best = float("inf")
    lr = train_config.learning_rate

    with (out_dir / "loss.log").open("w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        fh.flush()
        epochs = tqdm(
            range(1, train_config.epochs + 1),
            desc="train",
            file=sys.stderr,
            disable=not progress,
        )
        for epoch in epochs:
            opt.zero_grad()
            parts = []
            for sample in samples:
                total, breakdown, _ = sample_loss(sample, model_config, params)
                if not breakdown.is_finite():
                    log.error("epoch %d: non-finite loss on %s: %s", epoch, sample.name, breakdown)
                    raise NumericalAbort(f"non-finite loss at epoch {epoch} on {sample.name}")
                dc.backward(total)
                parts.append(breakdown)
            mean = mean_breakdown(parts)
            history.append(mean)
            fh.write(format_log_row(epoch, mean, lr) + "\n")
            fh.flush()
            epochs.set_postfix(total=f"{mean.total:.4f}")

            if mean.total < best:
                best = mean.total
                save_model(out_dir / BEST_FILE, params)
            opt.lr = lr
            opt.step(1.0 / len(samples))
            lr *= train_config.lr_decay
            log.debug("epoch %d: %s", epoch, mean)

    save_model(out_dir / MODEL_FILE, params)
    if not history:
        save_model(out_dir / BEST_FILE, params)
    log.info("training done: %d epochs, best total %.6g", len(history), best)
    return history
