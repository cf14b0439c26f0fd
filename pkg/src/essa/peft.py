"""Parameter-efficient fine-tuning regimes.

Each regime decides which backbone tensors are tunable and which new
parameters get injected:

* ``Full``   every backbone tensor trains.
* ``LoRA``   backbone frozen; low-rank factors ``A`` [r, d_in] and ``B``
  [d_out, r] are added to the chosen attention projections.
* ``VPT``    backbone frozen; learnable prompt tokens are inserted after the
  class token (shallow) or re-inserted before every block (deep).
* ``BitFit`` only ``*.bias`` tensors train (LayerNorm gains stay frozen).
* ``APLA``   only a seeded random subset of the columns of each block's
  attention output projection trains.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import asdict, dataclass, field
from typing import ClassVar, Mapping, Union

import numpy as np

from essa.errors import ConfigError, ContractError, ShapeError
from essa.tensor import Tensor, broadcast_to, concat, getitem, linear, trunc_normal

LORA_TARGETS = ("q", "k", "v", "o")
PROMPT_STD = 0.02

_BACKBONE_PATH = re.compile(
    r"^(patch_embed\.(weight|bias)|cls_token|pos_embed|registers|norm\.(weight|bias)"
    r"|block\.\d+\.(norm1|norm2)\.(weight|bias)"
    r"|block\.\d+\.attn\.(q|k|v|proj)\.(weight|bias)"
    r"|block\.\d+\.mlp\.(fc1|fc2)\.(weight|bias))$"
)


@dataclass(frozen=True)
class Full:
    kind: ClassVar[str] = "full"


@dataclass(frozen=True)
class LoRA:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("q", "v")
    kind: ClassVar[str] = "lora"

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if not self.targets:
            raise ConfigError("LoRA needs at least one target matrix")
        bad = [t for t in self.targets if t not in LORA_TARGETS]
        if bad:
            raise ConfigError(f"unknown LoRA targets {bad}; choose from {LORA_TARGETS}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass(frozen=True)
class VPT:
    prompts: int = 8
    mode: str = "shallow"
    kind: ClassVar[str] = "vpt"

    def __post_init__(self):
        if self.prompts < 1:
            raise ConfigError(f"VPT needs at least one prompt, got {self.prompts}")
        if self.mode not in ("shallow", "deep"):
            raise ConfigError(f"VPT mode must be 'shallow' or 'deep', got {self.mode!r}")


@dataclass(frozen=True)
class BitFit:
    kind: ClassVar[str] = "bitfit"


@dataclass(frozen=True)
class APLA:
    fraction: float = 0.1
    seed: int = 0
    kind: ClassVar[str] = "apla"

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"APLA fraction must lie in (0, 1], got {self.fraction}")


AdapterSpec = Union[Full, LoRA, VPT, BitFit, APLA]
SPEC_TYPES = {cls.kind: cls for cls in (Full, LoRA, VPT, BitFit, APLA)}


def spec_to_dict(spec: AdapterSpec) -> dict:
    d = asdict(spec)
    if "targets" in d:
        d["targets"] = list(d["targets"])
    return {"kind": spec.kind, **d}


def spec_from_dict(d: Mapping) -> AdapterSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in SPEC_TYPES:
        raise ConfigError(f"unknown adapter kind {kind!r}; choose from {sorted(SPEC_TYPES)}")
    try:
        return SPEC_TYPES[kind](**d)
    except TypeError as exc:
        raise ConfigError(f"bad fields for adapter {kind!r}: {exc}") from exc


def spec_label(spec: AdapterSpec) -> str:
    return spec.kind


# ---------------------------------------------------------------------------
# masks and injection


def block_indices(backbone: Mapping[str, Tensor]) -> list[int]:
    return sorted({int(name.split(".")[1]) for name in backbone if name.startswith("block.")})


def apla_columns(path: str, width: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted column subset of size ceil(fraction * width), fixed per (seed, path)."""
    count = math.ceil(fraction * width)
    rng = np.random.default_rng([seed, zlib.crc32(path.encode())])
    return np.sort(rng.choice(width, size=count, replace=False)).astype(np.int64)


def lora_names(block: int, target: str) -> tuple[str, str]:
    base = f"adapter.block.{block}.attn.{target}"
    return f"{base}.lora_A", f"{base}.lora_B"


def prompt_name(layer: int | None) -> str:
    return "adapter.prompts" if layer is None else f"adapter.block.{layer}.prompts"


def _target_weight(target: str, block: int) -> str:
    return f"block.{block}.attn.{'proj' if target == 'o' else target}.weight"


def inject(spec: AdapterSpec, backbone: Mapping[str, Tensor], rng=None) -> dict[str, Tensor]:
    """Freshly initialised parameters that ``spec`` adds to ``backbone``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    blocks = block_indices(backbone)
    out: dict[str, Tensor] = {}
    if isinstance(spec, LoRA):
        for i in blocks:
            for t in spec.targets:
                d_out, d_in = backbone[_target_weight(t, i)].shape
                if spec.rank > min(d_out, d_in):
                    raise ConfigError(f"LoRA rank {spec.rank} exceeds min({d_out}, {d_in})")
                a_name, b_name = lora_names(i, t)
                a = trunc_normal(rng, (spec.rank, d_in), std=1.0 / math.sqrt(d_in))
                out[a_name] = Tensor(a.astype(np.float32).astype(np.float64))
                out[b_name] = Tensor(np.zeros((d_out, spec.rank)))
    elif isinstance(spec, VPT):
        d = backbone["cls_token"].shape[-1]
        layers = [None] if spec.mode == "shallow" else blocks
        for layer in layers:
            p = trunc_normal(rng, (spec.prompts, d), std=PROMPT_STD)
            out[prompt_name(layer)] = Tensor(p.astype(np.float32).astype(np.float64))
    return out


def backbone_mask(spec: AdapterSpec, backbone: Mapping[str, Tensor]) -> dict[str, object]:
    """Trainability of the existing backbone tensors under ``spec``."""
    mask: dict[str, object] = {}
    for name, p in backbone.items():
        if not _BACKBONE_PATH.match(name):
            raise ContractError(f"unknown parameter path {name!r}")
        if isinstance(spec, Full):
            mask[name] = True
        elif isinstance(spec, BitFit):
            mask[name] = name.endswith(".bias")
        elif isinstance(spec, APLA) and name.endswith(".attn.proj.weight"):
            mask[name] = apla_columns(name, p.shape[1], spec.fraction, spec.seed)
        else:
            mask[name] = False
    return mask


def build_mask(
    spec: AdapterSpec, backbone: Mapping[str, Tensor], rng=None
) -> tuple[dict[str, object], dict[str, Tensor]]:
    """Trainability mask over backbone + injected parameters, and the injected parameters."""
    mask = backbone_mask(spec, backbone)
    injected = inject(spec, backbone, rng)
    for name in injected:
        mask[name] = True
    return mask, injected


def apply_grad_mask(grads: Mapping[str, np.ndarray | None], mask: Mapping[str, object]) -> dict:
    out = {}
    for name, g in grads.items():
        entry = mask.get(name, False)
        if g is None:
            out[name] = None
        elif isinstance(entry, (bool, np.bool_)):
            out[name] = g if entry else np.zeros_like(g)
        else:
            kept = np.zeros_like(g)
            kept[:, entry] = g[:, entry]
            out[name] = kept
    return out


def trainable_count(
    mask: Mapping[str, object], backbone: Mapping[str, Tensor], injected: Mapping[str, Tensor] = None
) -> tuple[int, float]:
    """(number of tunable values, that number over the backbone size)."""
    params = dict(backbone)
    params.update(injected or {})
    count = 0
    for name, entry in mask.items():
        shape = params[name].shape
        if isinstance(entry, (bool, np.bool_)):
            count += int(np.prod(shape)) if entry else 0
        else:
            count += len(entry) * shape[0]
    total = sum(p.size for p in backbone.values())
    return count, count / total


def set_requires_grad(params: Mapping[str, Tensor], mask: Mapping[str, object]) -> None:
    for name, p in params.items():
        if name not in mask:
            raise ContractError(f"no mask entry for parameter {name!r}")
        entry = mask[name]
        p.requires_grad = bool(entry) if isinstance(entry, (bool, np.bool_)) else len(entry) > 0


# ---------------------------------------------------------------------------
# forward-time composition


def lora_forward(W: Tensor, x: Tensor, A: Tensor, B: Tensor, alpha: float, r: int, bias: Tensor = None) -> Tensor:
    """``W x + (alpha / r) B (A x)`` for row-vector inputs ``x`` [..., d_in]."""
    d_out, d_in = W.shape
    if r > min(d_out, d_in):
        raise ConfigError(f"LoRA rank {r} exceeds min({d_out}, {d_in})")
    if A.shape != (r, d_in) or B.shape != (d_out, r):
        raise ShapeError(f"LoRA factors {A.shape}/{B.shape} do not fit weight {W.shape} at rank {r}")
    return linear(x, W, bias) + linear(linear(x, A), B) * (alpha / r)


def prepend_prompts(tokens: Tensor, prompts: Tensor | None, layer_index: int, mode: str) -> Tensor:
    """Insert (layer 0) or replace (deep, later layers) prompt tokens after the class token."""
    if mode not in ("shallow", "deep"):
        raise ContractError(f"unknown prompt mode {mode!r}")
    if layer_index < 0:
        raise ContractError(f"layer index must be >= 0, got {layer_index}")
    if mode == "shallow" and layer_index > 0:
        return tokens
    if prompts is None:
        raise ContractError(f"{mode} prompting at layer {layer_index} needs prompts")
    single = tokens.ndim == 2
    if single:
        tokens = getitem(tokens, (None,))
    b, t, d = tokens.shape
    p = prompts.shape[0]
    if prompts.shape[1] != d:
        raise ShapeError(f"prompt width {prompts.shape[1]} does not match token width {d}")
    batch_prompts = broadcast_to(getitem(prompts, (None,)), (b, p, d))
    cls = getitem(tokens, (slice(None), slice(0, 1)))
    if layer_index == 0:
        rest = getitem(tokens, (slice(None), slice(1, None)))
    else:
        if t < 1 + p:
            raise ContractError(f"deep prompting at layer {layer_index}: only {t} tokens for {p} prompts")
        rest = getitem(tokens, (slice(None), slice(1 + p, None)))
    out = concat([cls, batch_prompts, rest], axis=1)
    return getitem(out, 0) if single else out


@dataclass
class AdapterContext:
    """What ``forward_features`` needs to apply injected parameters."""

    injected: Mapping[str, Tensor] = field(default_factory=dict)
    lora: LoRA | None = None
    vpt: VPT | None = None

    @classmethod
    def from_specs(cls, specs, injected: Mapping[str, Tensor]) -> AdapterContext:
        ctx = cls(injected=injected)
        for spec in specs:
            if isinstance(spec, LoRA):
                ctx.lora = spec
            elif isinstance(spec, VPT):
                ctx.vpt = spec
        return ctx

    def lora_factors(self, block: int, target: str):
        if self.lora is None or target not in self.lora.targets:
            return None
        a_name, b_name = lora_names(block, target)
        return self.injected[a_name], self.injected[b_name], self.lora.alpha, self.lora.rank

    def prompts_for(self, layer: int) -> Tensor | None:
        if self.vpt is None:
            return None
        if self.vpt.mode == "shallow":
            return self.injected[prompt_name(None)] if layer == 0 else None
        return self.injected[prompt_name(layer)]
