"""The adaptable feature extractor: backbone plus any injected adapter parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from essa.errors import ConfigError
from essa.peft import AdapterContext, AdapterSpec, LoRA, VPT, inject
from essa.tensor import Tensor, no_grad
from essa.vit import ViTConfig, forward_features


def copy_tree(tree: dict[str, Tensor]) -> dict[str, Tensor]:
    return {name: Tensor(p.data.copy()) for name, p in tree.items()}


@dataclass
class ModelState:
    config: ViTConfig
    backbone: dict[str, Tensor]
    injected: dict[str, Tensor] = field(default_factory=dict)
    adapters: list = field(default_factory=list)

    def context(self) -> AdapterContext:
        return AdapterContext.from_specs(self.adapters, self.injected)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.backbone, **self.injected}

    def copy(self) -> ModelState:
        return ModelState(self.config, copy_tree(self.backbone), copy_tree(self.injected), list(self.adapters))

    def features(self, images):
        """Differentiable class-token embeddings."""
        cls, _ = forward_features(images, self.backbone, self.config, self.context())
        return cls

    def embed(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Class-token embeddings [n, d] without recording gradients."""
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.features(images[start:start + batch_size]).data)
        return np.concatenate(out, axis=0)

    def attach(self, spec: AdapterSpec, rng=None) -> list[str]:
        """Make sure ``spec``'s injected parameters exist; returns their names.

        Parameters already injected by an identical spec are kept, so a later
        stage keeps tuning the same low-rank factors or prompts.
        """
        if not isinstance(spec, (LoRA, VPT)):
            return []
        fresh = inject(spec, self.backbone, rng)
        same_kind = [s for s in self.adapters if type(s) is type(spec)]
        if same_kind:
            if same_kind[0] != spec:
                raise ConfigError(f"model already carries {same_kind[0]}; cannot attach {spec}")
            return list(fresh)
        self.injected.update(fresh)
        self.adapters.append(spec)
        return list(fresh)
