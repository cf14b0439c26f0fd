"""Self-distillation with an EMA teacher, centering and temperature sharpening.

Two globally augmented views of every image pass through the student and
the (gradient-free) teacher; the student is trained to match the teacher's
sharpened, centred prototype distribution of the *other* view.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from essa.errors import ConfigError, ContractError, DomainError
from essa.model import ModelState, copy_tree
from essa.optim import OptimizerState, adamw_step, grads_of
from essa.peft import apply_grad_mask, set_requires_grad
from essa.tensor import (
    Tape,
    Tensor,
    backward,
    gelu,
    l2_normalize,
    linear,
    log_softmax,
    mul,
    no_grad,
    reshape,
    softmax_array,
    sum_,
    trunc_normal,
)


@dataclass
class SSLConfig:
    prototypes: int = 256
    hidden_ratio: int = 4
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    teacher_momentum: float = 0.996
    center_momentum: float = 0.9

    def __post_init__(self):
        if self.prototypes < 1 or self.hidden_ratio < 1:
            raise ConfigError("prototypes and hidden_ratio must be >= 1")
        if not 0.0 < self.teacher_temp <= self.student_temp:
            raise ConfigError(
                f"need 0 < teacher_temp <= student_temp, got {self.teacher_temp} / {self.student_temp}"
            )
        for name in ("teacher_momentum", "center_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @classmethod
    def for_preset(cls, name: str, **overrides) -> SSLConfig:
        return cls(**{"prototypes": 64 if name == "tiny" else 256, **overrides})


@dataclass
class AugConfig:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    noise_std: float = 0.02

    @classmethod
    def off(cls) -> AugConfig:
        return cls((1.0, 1.0), (1.0, 1.0), 0.0, 0.0, 0.0, 0.0)


@dataclass
class ViewPair:
    first: np.ndarray
    second: np.ndarray


# ---------------------------------------------------------------------------
# augmentation


def _interp_matrix(start: np.ndarray, length: np.ndarray, size: int) -> np.ndarray:
    """Per-sample [size, size] bilinear resampling matrices for a 1-D crop."""
    b = start.shape[0]
    i = np.arange(size)
    coord = start[:, None] + (i[None, :] + 0.5) * (length[:, None] / size) - 0.5
    coord = np.clip(coord, 0.0, size - 1)
    lo = np.floor(coord).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = coord - lo
    mat = np.zeros((b, size, size))
    bi = np.repeat(np.arange(b), size)
    ii = np.tile(i, b)
    np.add.at(mat, (bi, ii, lo.ravel()), (1.0 - frac).ravel())
    np.add.at(mat, (bi, ii, hi.ravel()), frac.ravel())
    return mat


def augment(images: np.ndarray, rng: np.random.Generator, aug: AugConfig) -> np.ndarray:
    b, _, h, w = images.shape
    scale = rng.uniform(aug.crop_scale[0], aug.crop_scale[1], b)
    ratio = np.exp(rng.uniform(math.log(aug.crop_ratio[0]), math.log(aug.crop_ratio[1]), b))
    cw = np.clip(np.sqrt(scale * ratio) * w, 1.0, w)
    ch = np.clip(np.sqrt(scale / ratio) * h, 1.0, h)
    x0 = rng.uniform(0.0, 1.0, b) * (w - cw)
    y0 = rng.uniform(0.0, 1.0, b) * (h - ch)
    rows = _interp_matrix(y0, ch, h)
    cols = _interp_matrix(x0, cw, w)
    out = rows[:, None] @ images @ np.swapaxes(cols, 1, 2)[:, None]
    flip = rng.random(b) < aug.flip_prob
    if flip.any():
        out[flip] = out[flip][..., ::-1]
    if aug.brightness > 0:
        out = out + rng.uniform(-aug.brightness, aug.brightness, b)[:, None, None, None]
    if aug.contrast > 0:
        factor = rng.uniform(1.0 - aug.contrast, 1.0 + aug.contrast, b)[:, None, None, None]
        mu = out.mean(axis=(1, 2, 3), keepdims=True)
        out = (out - mu) * factor + mu
    if aug.noise_std > 0:
        out = out + rng.standard_normal(out.shape) * aug.noise_std
    return np.clip(out, 0.0, 1.0)


def make_views(images: np.ndarray, rng: np.random.Generator, aug: AugConfig | None = None) -> ViewPair:
    """Two independently augmented renderings of each image ([C,H,W] or [B,C,H,W])."""
    aug = aug or AugConfig()
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    first, second = augment(arr, rng, aug), augment(arr, rng, aug)
    if single:
        first, second = first[0], second[0]
    return ViewPair(first, second)


# ---------------------------------------------------------------------------
# head, loss, teacher


def init_dino_head(embed_dim: int, cfg: SSLConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    hidden = cfg.hidden_ratio * embed_dim
    shapes = {
        "dino.fc1.weight": (hidden, embed_dim),
        "dino.fc1.bias": (hidden,),
        "dino.fc2.weight": (embed_dim, hidden),
        "dino.fc2.bias": (embed_dim,),
        "dino.prototypes.weight": (cfg.prototypes, embed_dim),
    }
    head = {}
    for name, shape in shapes.items():
        value = np.zeros(shape) if name.endswith(".bias") else trunc_normal(rng, shape, std=0.02)
        head[name] = Tensor(value.astype(np.float32).astype(np.float64))
    return head


def dino_head_forward(x: Tensor, head: Mapping[str, Tensor]) -> Tensor:
    """MLP to the bottleneck, L2-normalise, then cosine logits against unit-norm prototypes."""
    h = gelu(linear(x, head["dino.fc1.weight"], head["dino.fc1.bias"]))
    h = l2_normalize(linear(h, head["dino.fc2.weight"], head["dino.fc2.bias"]), axis=-1)
    protos = l2_normalize(head["dino.prototypes.weight"], axis=-1)
    return linear(h, protos)


def dino_loss(student_logits, teacher_logits, center, student_temp: float, teacher_temp: float) -> Tensor:
    """Cross-view distillation loss averaged over the two (teacher v, student w != v) pairs.

    ``student_logits`` is a Tensor [2, K] or [2, B, K]; ``teacher_logits`` has
    the same shape and is treated as a constant.
    """
    if not student_temp > 0 or not teacher_temp > 0:
        raise DomainError(f"temperatures must be positive, got {student_temp} / {teacher_temp}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, np.float64)
    if t.shape != student_logits.shape or t.shape[0] != 2:
        raise ContractError(f"expected matching [2, ..., K] logits, got {student_logits.shape} / {t.shape}")
    batch = 1 if t.ndim == 2 else t.shape[1]
    targets = softmax_array(t - np.asarray(center), axis=-1, temperature=teacher_temp)[::-1].copy()
    log_probs = log_softmax(student_logits, axis=-1, temperature=student_temp)
    return mul(sum_(mul(log_probs, targets)), -1.0 / (2 * batch))


@dataclass
class TeacherState:
    model: ModelState
    head: dict[str, Tensor]
    center: np.ndarray
    momentum: float = 0.996
    center_momentum: float = 0.9
    student_temp: float = 0.1
    teacher_temp: float = 0.04

    def __post_init__(self):
        if not 0.0 < self.teacher_temp <= self.student_temp:
            raise ConfigError("teacher temperature must be positive and <= student temperature")

    @classmethod
    def from_student(cls, student: ModelState, head: Mapping[str, Tensor], cfg: SSLConfig) -> TeacherState:
        return cls(
            student.copy(),
            copy_tree(dict(head)),
            np.zeros(head["dino.prototypes.weight"].shape[0]),
            cfg.teacher_momentum,
            cfg.center_momentum,
            cfg.student_temp,
            cfg.teacher_temp,
        )

    def tree(self) -> dict[str, Tensor]:
        return {**self.model.parameters(), **self.head}

    def scalars(self) -> dict:
        return {
            "momentum": self.momentum,
            "center_momentum": self.center_momentum,
            "student_temp": self.student_temp,
            "teacher_temp": self.teacher_temp,
        }


def update_teacher(teacher: Mapping[str, Tensor], student: Mapping[str, Tensor], momentum: float) -> None:
    """In-place EMA ``t <- m t + (1 - m) s``, clipped into [min(t, s), max(t, s)]."""
    if set(teacher) != set(student):
        raise ContractError(f"teacher/student trees differ: {sorted(set(teacher) ^ set(student))}")
    for name, t in teacher.items():
        s = student[name].data
        if s.shape != t.shape:
            raise ContractError(f"shape mismatch for {name}: teacher {t.shape}, student {s.shape}")
        mixed = momentum * t.data + (1.0 - momentum) * s
        t.data = np.clip(mixed, np.minimum(t.data, s), np.maximum(t.data, s))


def update_center(center: np.ndarray, teacher_logits, momentum: float) -> np.ndarray:
    """Running mean of raw teacher logits over batch (and view) axes."""
    logits = np.asarray(teacher_logits, dtype=np.float64)
    k = logits.shape[-1]
    return momentum * np.asarray(center) + (1.0 - momentum) * logits.reshape(-1, k).mean(axis=0)


# ---------------------------------------------------------------------------
# one optimisation step


def ssl_step(
    images: np.ndarray,
    student: ModelState,
    head: dict[str, Tensor],
    teacher: TeacherState,
    mask: Mapping[str, object],
    opt: OptimizerState,
    epoch: int,
    rng: np.random.Generator,
    aug: AugConfig | None = None,
) -> float:
    """views -> loss -> backward -> mask -> AdamW -> EMA teacher -> center; returns the loss."""
    views = make_views(images, rng, aug)
    batch = views.first.shape[0]
    x = np.concatenate([views.first, views.second], axis=0)
    with no_grad():
        t_cls = teacher.model.features(x)
        t_logits = dino_head_forward(t_cls, teacher.head).data
    t_logits = t_logits.reshape(2, batch, -1)
    params = {**student.parameters(), **head}
    set_requires_grad(params, mask)
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        s_logits = dino_head_forward(student.features(x), head)
        loss = dino_loss(reshape(s_logits, (2, batch, -1)), t_logits, teacher.center,
                         teacher.student_temp, teacher.teacher_temp)
    if loss.requires_grad:
        backward(loss, tape)
    adamw_step(params, apply_grad_mask(grads_of(params), mask), mask, opt, epoch)
    update_teacher(teacher.tree(), params, teacher.momentum)
    teacher.center = update_center(teacher.center, t_logits, teacher.center_momentum)
    return loss.item()


def ssl_config_dict(cfg: SSLConfig) -> dict:
    return asdict(cfg)
