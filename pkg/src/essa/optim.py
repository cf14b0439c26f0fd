"""AdamW with decoupled weight decay and a per-epoch warm-up/cosine schedule.

Only parameters selected by the trainability mask are touched.  A mask entry
is either a bool (whole tensor) or a sorted integer array of trainable column
indices; in the column case moments are kept for the selected columns only
and the remaining columns are never written.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from essa.errors import ConfigError, ContractError
from essa.tensor import Tensor


@dataclass
class LRSchedule:
    base_lr: float
    warmup_epochs: int
    total_epochs: int

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"warmup_epochs must lie in [0, {self.total_epochs}), got {self.warmup_epochs}"
            )

    def lr(self, epoch: int) -> float:
        if epoch < self.warmup_epochs:
            return self.base_lr * (epoch + 1) / self.warmup_epochs
        span = self.total_epochs - self.warmup_epochs
        progress = (epoch - self.warmup_epochs) / span
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    schedule: LRSchedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.04
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def scalars(self) -> dict:
        return {
            "base_lr": self.schedule.base_lr,
            "warmup_epochs": self.schedule.warmup_epochs,
            "total_epochs": self.schedule.total_epochs,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step,
        }

    @classmethod
    def from_scalars(cls, d: Mapping) -> OptimizerState:
        sched = LRSchedule(d["base_lr"], int(d["warmup_epochs"]), int(d["total_epochs"]))
        return cls(
            sched,
            beta1=d["beta1"],
            beta2=d["beta2"],
            eps=d["eps"],
            weight_decay=d["weight_decay"],
            step=int(d["step"]),
        )


def is_decayed(name: str, shape: tuple[int, ...]) -> bool:
    """Weight decay applies to weight matrices only (incl. low-rank factors)."""
    if len(shape) != 2:
        return False
    return name.endswith(".weight") or name.endswith(".lora_A") or name.endswith(".lora_B")


def is_trainable(entry) -> bool:
    if isinstance(entry, (bool, np.bool_)):
        return bool(entry)
    return len(entry) > 0


def grads_of(params: Mapping[str, Tensor]) -> dict[str, np.ndarray | None]:
    return {name: p.grad for name, p in params.items()}


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    mask: Mapping[str, object],
    state: OptimizerState,
    epoch: int,
) -> float:
    """Apply one AdamW update in place; returns the learning rate used."""
    for name in params:
        if name not in mask:
            raise ContractError(f"trainability mask has no entry for {name!r}")
    lr = state.schedule.lr(epoch)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        entry = mask[name]
        if not is_trainable(entry):
            continue
        g = grads.get(name)
        if g is None:
            raise ContractError(f"no gradient for trainable parameter {name!r}")
        cols = None if isinstance(entry, (bool, np.bool_)) else np.asarray(entry, dtype=np.int64)
        if cols is None:
            value, g_sel = p.data, g
        else:
            value, g_sel = p.data[:, cols], g[:, cols]
        m = state.exp_avg.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        else:
            v = state.exp_avg_sq[name]
        m = b1 * m + (1.0 - b1) * g_sel
        v = b2 * v + (1.0 - b2) * (g_sel * g_sel)
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        denom = np.sqrt(v / bc2) + state.eps
        if state.weight_decay and is_decayed(name, p.shape):
            value = value * (1.0 - lr * state.weight_decay)
        value = value - lr * (m / bc1) / denom
        if cols is None:
            p.data = value
        else:
            updated = p.data.copy()
            updated[:, cols] = value
            p.data = updated
    return lr
