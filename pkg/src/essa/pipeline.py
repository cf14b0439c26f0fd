"""Stage orchestration: self-supervised adaptation, supervised adaptation, test-time training.

Every stage works on a ``RunState`` that holds everything needed to resume
bit-exactly: model, masks, optimizer moments, teacher/center, rng streams,
the completed-epoch counter and the per-epoch metric log.  At every epoch
boundary all floating state is rounded to float32-representable values so a
float32 checkpoint written there restores the exact same trajectory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from essa.errors import ConfigError, ContractError, DataError
from essa.model import ModelState, copy_tree
from essa.optim import LRSchedule, OptimizerState, adamw_step, grads_of
from essa.peft import (
    AdapterSpec,
    Full,
    apply_grad_mask,
    backbone_mask,
    set_requires_grad,
    spec_label,
    trainable_count,
)
from essa.ssl import (
    AugConfig,
    SSLConfig,
    TeacherState,
    augment,
    init_dino_head,
    ssl_step,
)
from essa.tensor import Tape, Tensor, backward, cross_entropy, linear, no_grad, softmax_array, trunc_normal
from essa.vit import ViTConfig, init_backbone

STAGES = ("essa", "sa", "ttt")
RNG_STREAMS = ("init", "data", "aug")

STAGE_DEFAULTS = {
    "essa": {"epochs": 100, "base_lr": 5e-4, "warmup_epochs": 10},
    "sa": {"epochs": 30, "base_lr": 1e-3, "warmup_epochs": 3},
    "ttt": {"epochs": 10, "base_lr": 5e-4, "warmup_epochs": 1},
}


@dataclass
class StageConfig:
    stage: str
    epochs: int
    base_lr: float
    warmup_epochs: int
    batch_size: int = 64
    seed: int = 0
    sa_mode: str = "full"
    weight_decay: float = 0.04
    ssl: SSLConfig = field(default_factory=SSLConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    sa_augment: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.sa_mode not in ("full", "peft"):
            raise ConfigError(f"sa_mode must be 'full' or 'peft', got {self.sa_mode!r}")

    @classmethod
    def defaults(cls, stage: str, preset: str = "tiny", **overrides) -> StageConfig:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
        values = {"stage": stage, **STAGE_DEFAULTS[stage], "ssl": SSLConfig.for_preset(preset)}
        values.update(overrides)
        return cls(**values)

    def schedule(self) -> LRSchedule:
        return LRSchedule(self.base_lr, self.warmup_epochs, self.epochs)

    def with_(self, **changes) -> StageConfig:
        return replace(self, **changes)


class RngStreams:
    """Independently seeded generators for initialisation, data order and augmentation."""

    def __init__(self, seed: int):
        self.seed = seed
        self.gens = {name: np.random.default_rng([seed, i]) for i, name in enumerate(RNG_STREAMS)}

    def __getitem__(self, name: str) -> np.random.Generator:
        return self.gens[name]

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in self.gens.items()}

    def restore(self, states: Mapping) -> None:
        for name, st in states.items():
            self.gens[name].bit_generator.state = st


@dataclass
class RunState:
    stage: str
    config: StageConfig
    spec: AdapterSpec
    model: ModelState
    mask: dict
    optimizer: OptimizerState
    rngs: RngStreams
    dino_head: dict | None = None
    teacher: TeacherState | None = None
    head: dict | None = None
    epoch: int = 0
    log: list = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.epoch >= self.config.epochs

    def trainable(self) -> tuple[int, float]:
        backbone_only = {n: e for n, e in self.mask.items() if n in self.model.backbone or n in self.model.injected}
        return trainable_count(backbone_only, self.model.backbone, self.model.injected)


# ---------------------------------------------------------------------------
# helpers


def foundation_model(config: ViTConfig, seed: int) -> ModelState:
    return ModelState(config, init_backbone(config, seed))


def _round32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def canonicalize(state: RunState) -> None:
    """Round all floating state to float32-representable values, in place."""
    trees = [state.model.backbone, state.model.injected]
    if state.dino_head is not None:
        trees.append(state.dino_head)
    if state.teacher is not None:
        trees += [state.teacher.model.backbone, state.teacher.model.injected, state.teacher.head]
        state.teacher.center = _round32(state.teacher.center)
    if state.head is not None:
        trees.append(state.head)
    for tree in trees:
        for p in tree.values():
            p.data = _round32(p.data)
    opt = state.optimizer
    for buf in (opt.exp_avg, opt.exp_avg_sq):
        for name in buf:
            buf[name] = _round32(buf[name])


def stage_mask(model: ModelState, spec: AdapterSpec, rng) -> dict:
    """Mask over backbone + injected parameters; attaches ``spec``'s injected tensors."""
    mask = backbone_mask(spec, model.backbone)
    active = set(model.attach(spec, rng))
    for name in model.injected:
        mask[name] = name in active
    return mask


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _record(state: RunState, loss: float, lr: float, steps: int, seconds: float) -> dict:
    count, fraction = state.trainable()
    return {
        "stage": state.stage,
        "epoch": state.epoch,
        "loss": loss,
        "lr": lr,
        "steps_per_sec": steps / seconds if seconds > 0 else 0.0,
        "trainable_fraction": fraction,
        "adapter": spec_label(state.spec),
        "trainable_count": count,
        "optimizer_state_bytes": count * 16,
    }


def _check_images(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise DataError(f"expected a non-empty image batch [n, C, H, W], got shape {images.shape}")
    return images


# ---------------------------------------------------------------------------
# self-supervised stages


def start_ssl(stage: str, model: ModelState, spec: AdapterSpec, config: StageConfig, head=None) -> RunState:
    model = model.copy()
    rngs = RngStreams(config.seed)
    mask = stage_mask(model, spec, rngs["init"])
    dino = init_dino_head(model.config.embed_dim, config.ssl, rngs["init"])
    for name in dino:
        mask[name] = True
    teacher = TeacherState.from_student(model, dino, config.ssl)
    opt = OptimizerState(config.schedule(), weight_decay=config.weight_decay)
    return RunState(stage, config, spec, model, mask, opt, rngs, dino, teacher,
                    copy_tree(head) if head is not None else None)


def train_ssl(state: RunState, images, stop_at_epoch: int | None = None, on_epoch: Callable | None = None) -> RunState:
    images = _check_images(images)
    cfg = state.config
    while not state.done and (stop_at_epoch is None or state.epoch < stop_at_epoch):
        losses = []
        lr = cfg.schedule().lr(state.epoch)
        start = time.perf_counter()
        for idx in _batches(len(images), cfg.batch_size, state.rngs["data"]):
            losses.append(ssl_step(images[idx], state.model, state.dino_head, state.teacher,
                                   state.mask, state.optimizer, state.epoch, state.rngs["aug"], cfg.aug))
        elapsed = time.perf_counter() - start
        state.epoch += 1
        canonicalize(state)
        rec = _record(state, float(np.mean(losses)), lr, len(losses), elapsed)
        state.log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return state


def run_essa(model: ModelState, spec: AdapterSpec, images, config: StageConfig, state: RunState | None = None,
             stop_at_epoch: int | None = None, on_epoch: Callable | None = None) -> RunState:
    """Self-supervised adaptation of ``model`` on unlabeled images; ``state.model`` is the result."""
    images = _check_images(images)
    if state is None:
        state = start_ssl("essa", model, spec, config)
    return train_ssl(state, images, stop_at_epoch, on_epoch)


def run_ttt(model: ModelState, head: Mapping[str, Tensor] | None, images, spec: AdapterSpec, config: StageConfig,
            state: RunState | None = None, stop_at_epoch: int | None = None,
            on_epoch: Callable | None = None) -> RunState:
    """Self-supervised pass over unlabeled test images; the prediction head stays bit-frozen."""
    images = _check_images(images)
    if state is None:
        if not head:
            raise ContractError("test-time training needs a trained prediction head")
        state = start_ssl("ttt", model, spec, config, head=dict(head))
    return train_ssl(state, images, stop_at_epoch, on_epoch)


# ---------------------------------------------------------------------------
# supervised stage


def init_head(embed_dim: int, num_classes: int, rng) -> dict[str, Tensor]:
    w = trunc_normal(rng, (num_classes, embed_dim), std=0.02)
    return {
        "head.weight": Tensor(_round32(w)),
        "head.bias": Tensor(np.zeros(num_classes)),
    }


def head_logits(features: Tensor, head: Mapping[str, Tensor]) -> Tensor:
    return linear(features, head["head.weight"], head["head.bias"])


def sa_step(images, labels, model: ModelState, head: dict, mask: Mapping, opt: OptimizerState, epoch: int) -> float:
    params = {**model.parameters(), **head}
    set_requires_grad(params, mask)
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = cross_entropy(head_logits(model.features(images), head), labels)
    backward(loss, tape)
    adamw_step(params, apply_grad_mask(grads_of(params), mask), mask, opt, epoch)
    return loss.item()


def start_sa(model: ModelState, config: StageConfig, num_classes: int, spec: AdapterSpec | None = None) -> RunState:
    model = model.copy()
    rngs = RngStreams(config.seed)
    if config.sa_mode == "full":
        spec = Full()
        mask = {name: True for name in model.parameters()}
    else:
        if spec is None:
            raise ConfigError("sa_mode 'peft' needs an adapter spec")
        mask = stage_mask(model, spec, rngs["init"])
    head = init_head(model.config.embed_dim, num_classes, rngs["init"])
    for name in head:
        mask[name] = True
    opt = OptimizerState(config.schedule(), weight_decay=config.weight_decay)
    return RunState("sa", config, spec, model, mask, opt, rngs, head=head)


def run_sa(model: ModelState, images, labels, config: StageConfig, spec: AdapterSpec | None = None,
           num_classes: int | None = None, state: RunState | None = None, stop_at_epoch: int | None = None,
           on_epoch: Callable | None = None) -> RunState:
    """Supervised adaptation with a fresh linear head; ``state.model`` and ``state.head`` are the result."""
    images = _check_images(images)
    if labels is None:
        raise DataError("labels required")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (images.shape[0],):
        raise DataError(f"{images.shape[0]} images but labels of shape {labels.shape}")
    if state is None:
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        state = start_sa(model, config, num_classes, spec)
    num_classes = state.head["head.bias"].shape[0]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(f"labels must lie in [0, {num_classes}), found [{labels.min()}, {labels.max()}]")
    cfg = state.config
    while not state.done and (stop_at_epoch is None or state.epoch < stop_at_epoch):
        losses = []
        lr = cfg.schedule().lr(state.epoch)
        start = time.perf_counter()
        for idx in _batches(len(images), cfg.batch_size, state.rngs["data"]):
            batch = images[idx]
            if cfg.sa_augment:
                batch = augment(batch, state.rngs["aug"], cfg.aug)
            losses.append(sa_step(batch, labels[idx], state.model, state.head, state.mask,
                                  state.optimizer, state.epoch))
        elapsed = time.perf_counter() - start
        state.epoch += 1
        canonicalize(state)
        rec = _record(state, float(np.mean(losses)), lr, len(losses), elapsed)
        state.log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return state


def predict(model: ModelState, head: Mapping[str, Tensor], images, batch_size: int = 256):
    """(predicted labels, class probabilities) from the prediction head; ties to the smallest class."""
    images = _check_images(images)
    if not head:
        raise ContractError("head protocol needs a trained prediction head")
    feats = model.embed(images, batch_size)
    with no_grad():
        logits = head_logits(Tensor(feats), head).data
    probs = softmax_array(logits, axis=-1)
    return np.argmax(logits, axis=1), probs


# ---------------------------------------------------------------------------
# resource accounting


def account_resources(spec: AdapterSpec, model: ModelState, config: StageConfig | None = None,
                      measure_steps: int = 50, warmup_steps: int = 10, batch_size: int = 8) -> dict:
    """Exact parameter/memory accounting plus measured SSL steps per second."""
    config = config or StageConfig.defaults("essa", "small" if model.config.embed_dim >= 64 else "tiny")
    state = start_ssl("essa", model, spec, config)
    count, fraction = state.trainable()
    report = {
        "adapter": spec_label(spec),
        "trainable_count": count,
        "trainable_fraction": fraction,
        "optimizer_state_bytes": count * 2 * 8,
        "grads_bytes": count * 8,
        "measured_steps_per_sec": float("nan"),
    }
    if measure_steps <= 0:
        return report
    rng = np.random.default_rng([config.seed, 99])
    c = model.config
    images = rng.uniform(0.0, 1.0, (batch_size, c.channels, c.image_size, c.image_size))

    def step():
        ssl_step(images, state.model, state.dino_head, state.teacher, state.mask,
                 state.optimizer, 0, state.rngs["aug"], config.aug)

    for _ in range(warmup_steps):
        step()
    start = time.perf_counter()
    for _ in range(measure_steps):
        step()
    report["measured_steps_per_sec"] = measure_steps / (time.perf_counter() - start)
    return report
