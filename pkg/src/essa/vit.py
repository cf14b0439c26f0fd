"""A small pre-norm Vision Transformer built on :mod:`essa.tensor`.

Parameters live in a flat ``dict`` keyed by stable dotted paths
(``block.1.attn.proj.weight``); weights are stored [out, in].
Token layout is ``[cls, prompts..., registers..., patches...]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from essa.errors import ConfigError, ShapeError
from essa.peft import AdapterContext, lora_forward, prepend_prompts
from essa.tensor import (
    Tensor,
    broadcast_to,
    concat,
    gelu,
    getitem,
    layer_norm,
    linear,
    matmul,
    reshape,
    softmax,
    transpose,
    trunc_normal,
)

LN_EPS = 1e-6


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 32
    depth: int = 2
    num_heads: int = 2
    mlp_ratio: int = 2
    num_registers: int = 0
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "embed_dim", "depth", "num_heads", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_registers < 0:
            raise ConfigError(f"num_registers must be >= 0, got {self.num_registers}")
        if self.pixel_std <= 0:
            raise ConfigError(f"pixel_std must be positive, got {self.pixel_std}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "tiny": ViTConfig(image_size=16, patch_size=4, embed_dim=32, depth=2, num_heads=2, mlp_ratio=2),
    "small": ViTConfig(image_size=32, patch_size=4, embed_dim=64, depth=4, num_heads=4, mlp_ratio=2),
}


def preset(name: str) -> ViTConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, h = config.embed_dim, config.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, config.patch_dim),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (1 + config.num_patches, d),
    }
    if config.num_registers:
        shapes["registers"] = (config.num_registers, d)
    for i in range(config.depth):
        p = f"block.{i}"
        shapes[f"{p}.norm1.weight"] = (d,)
        shapes[f"{p}.norm1.bias"] = (d,)
        for m in ("q", "k", "v", "proj"):
            shapes[f"{p}.attn.{m}.weight"] = (d, d)
            shapes[f"{p}.attn.{m}.bias"] = (d,)
        shapes[f"{p}.norm2.weight"] = (d,)
        shapes[f"{p}.norm2.bias"] = (d,)
        shapes[f"{p}.mlp.fc1.weight"] = (h, d)
        shapes[f"{p}.mlp.fc1.bias"] = (h,)
        shapes[f"{p}.mlp.fc2.weight"] = (d, h)
        shapes[f"{p}.mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


def init_backbone(config: ViTConfig, seed: int) -> dict[str, Tensor]:
    """Truncated-normal (std 0.02) weights and embeddings, zero biases, unit LN gains.

    Values are rounded to float32 precision so a freshly initialised model
    survives a checkpoint round trip unchanged.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            value = np.zeros(shape)
        elif ".norm" in name or name.startswith("norm."):
            value = np.ones(shape)
        else:
            value = trunc_normal(rng, shape, std=0.02)
        params[name] = Tensor(value.astype(np.float32).astype(np.float64))
    return params


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N, C*patch*patch], patches in row-major grid order."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)


def _as_batch(images, config: ViTConfig) -> tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    expected = (config.channels, config.image_size, config.image_size)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ShapeError(f"image shape {arr.shape[-3:] if arr.ndim >= 3 else arr.shape} does not match {expected}")
    return arr, single


def patch_embed(images, params: Mapping[str, Tensor], config: ViTConfig) -> Tensor:
    """Tokens [B, 1 + registers + N, d] (or [T, d] for a single [C, H, W] image)."""
    arr, single = _as_batch(images, config)
    b = arr.shape[0]
    d = config.embed_dim
    x = linear(Tensor(patchify(arr, config.patch_size)), params["patch_embed.weight"], params["patch_embed.bias"])
    cls = broadcast_to(getitem(params["cls_token"], (None,)), (b, 1, d))
    x = concat([cls, x], axis=1) + params["pos_embed"]
    if config.num_registers:
        regs = broadcast_to(getitem(params["registers"], (None,)), (b, config.num_registers, d))
        head = getitem(x, (slice(None), slice(0, 1)))
        tail = getitem(x, (slice(None), slice(1, None)))
        x = concat([head, regs, tail], axis=1)
    return getitem(x, 0) if single else x


def block_params(params: Mapping[str, Tensor], index: int) -> dict[str, Tensor]:
    prefix = f"block.{index}."
    return {name[len(prefix):]: p for name, p in params.items() if name.startswith(prefix)}


def attention_block(
    tokens: Tensor,
    block: Mapping[str, Tensor],
    num_heads: int,
    lora=None,
    return_attention: bool = False,
):
    """One pre-norm transformer block.

    ``lora`` maps a target in {q, k, v, o} to ``(A, B, alpha, rank)``.
    """
    lora = lora or {}
    single = tokens.ndim == 2
    x = getitem(tokens, (None,)) if single else tokens
    b, t, d = x.shape
    hd = d // num_heads

    def project(inp, target, name):
        w, bias = block[f"attn.{name}.weight"], block[f"attn.{name}.bias"]
        if target in lora:
            a, bb, alpha, r = lora[target]
            return lora_forward(w, inp, a, bb, alpha, r, bias)
        return linear(inp, w, bias)

    def heads(z):
        return transpose(reshape(z, (b, t, num_heads, hd)), (0, 2, 1, 3))

    h = layer_norm(x, block["norm1.weight"], block["norm1.bias"], LN_EPS)
    q = heads(project(h, "q", "q"))
    k = heads(project(h, "k", "k"))
    v = heads(project(h, "v", "v"))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    attn = softmax(scores, axis=-1)
    mixed = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    x = x + project(mixed, "o", "proj")
    h = layer_norm(x, block["norm2.weight"], block["norm2.bias"], LN_EPS)
    x = x + linear(gelu(linear(h, block["mlp.fc1.weight"], block["mlp.fc1.bias"])),
                   block["mlp.fc2.weight"], block["mlp.fc2.bias"])
    out = getitem(x, 0) if single else x
    if return_attention:
        return out, (attn.data[0] if single else attn.data)
    return out


def forward_features(
    images, params: Mapping[str, Tensor], config: ViTConfig, adapter: AdapterContext | None = None
) -> tuple[Tensor, Tensor]:
    """(class-token embedding [B, d], all tokens [B, T, d]) after the final norm.

    Pixels in [0, 1] are standardised with the fixed ``pixel_mean``/``pixel_std``
    before patch embedding.
    """
    adapter = adapter or AdapterContext()
    arr, single = _as_batch(images, config)
    x = patch_embed((arr - config.pixel_mean) / config.pixel_std, params, config)
    for i in range(config.depth):
        prompts = adapter.prompts_for(i)
        if adapter.vpt is not None and (i == 0 or adapter.vpt.mode == "deep"):
            x = prepend_prompts(x, prompts, i, adapter.vpt.mode)
        lora = {}
        for target in ("q", "k", "v", "o"):
            factors = adapter.lora_factors(i, target)
            if factors is not None:
                lora[target] = factors
        x = attention_block(x, block_params(params, i), config.num_heads, lora)
    x = layer_norm(x, params["norm.weight"], params["norm.bias"], LN_EPS)
    cls = getitem(x, (slice(None), 0))
    if single:
        return getitem(cls, 0), getitem(x, 0)
    return cls, x
