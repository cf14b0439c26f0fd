"""Sectioned ``key = value`` run configuration with line-numbered diagnostics.

Example::

    [model]
    preset = tiny
    seed = 0

    [adapter.essa]
    kind = apla
    fraction = 0.1

    [adapter.sa]
    kind = full

    [essa]
    epochs = 100

    [data]
    essa = data/synth.train.target.esds

Relative paths in ``[data]`` resolve against the config file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from essa.errors import ConfigError
from essa.peft import SPEC_TYPES, AdapterSpec, Full, spec_from_dict
from essa.pipeline import STAGES, StageConfig
from essa.ssl import AugConfig, SSLConfig
from essa.evaluation import METRICS
from essa.vit import PRESETS, ViTConfig, preset

DATA_KEYS = ("essa", "sa", "ttt", "eval_gallery", "eval_query")
_STAGE_KEYS = {"epochs": int, "batch_size": int, "base_lr": float, "warmup_epochs": int, "seed": int,
               "weight_decay": float, "sa_mode": str, "sa_augment": bool}
_SSL_KEYS = {f.name: (int if f.type in ("int", int) else float) for f in fields(SSLConfig)}
_AUG_KEYS = {"crop_scale": "pair", "crop_ratio": "pair", "flip_prob": float, "brightness": float,
             "contrast": float, "noise_std": float}
_ADAPTER_KEYS = {"kind": str, "rank": int, "alpha": float, "targets": "list", "prompts": int, "mode": str,
                 "fraction": float, "seed": int}
_MODEL_KEYS = {"preset": str, "seed": int}
_EVAL_KEYS = {"k": int, "tau": float, "metric": str}


@dataclass
class EvalConfig:
    k: int = 20
    tau: float = 0.07
    metric: str = "accuracy"


@dataclass
class RunConfig:
    preset: str = "tiny"
    seed: int = 0
    adapters: dict[str, AdapterSpec] = field(default_factory=dict)
    stages: dict[str, StageConfig] = field(default_factory=dict)
    data: dict[str, Path] = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)
    path: Path | None = None

    @property
    def vit(self) -> ViTConfig:
        return preset(self.preset)

    def adapter(self, stage: str) -> AdapterSpec:
        return self.adapters.get(stage) or self.adapters.get("essa") or Full()

    def stage(self, name: str) -> StageConfig:
        return self.stages.get(name) or StageConfig.defaults(name, self.preset, seed=self.seed)

    def data_path(self, key: str) -> Path:
        if key not in self.data:
            where = f" in {self.path}" if self.path else ""
            raise ConfigError(f"[data] {key} is not set{where}")
        return self.data[key]


def _convert(kind, raw: str, where: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "pair":
            parts = [float(p) for p in raw.split(",")]
            if len(parts) != 2:
                raise ValueError(raw)
            return tuple(parts)
        if kind == "list":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        name = kind if isinstance(kind, str) else kind.__name__
        raise ConfigError(f"{where}: cannot read {raw!r} as {name}") from None


def _parse_sections(text: str, source: str) -> dict[str, dict[str, tuple[str, int]]]:
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}"
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {stripped!r}")
            current = stripped[1:-1].strip()
            if current in sections:
                raise ConfigError(f"{where}: duplicate section [{current}]")
            sections[current] = {}
            continue
        if current is None:
            raise ConfigError(f"{where}: key outside of any section")
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key in sections[current]:
            raise ConfigError(f"{where}: duplicate key {key!r} in [{current}]")
        sections[current][key] = (value, lineno)
    return sections


def _typed(entries, allowed: dict, section: str, source: str) -> dict:
    out = {}
    for key, (raw, lineno) in entries.items():
        where = f"{source}:{lineno}"
        if key not in allowed:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        out[key] = (_convert(allowed[key], raw, where), lineno)
    return out


def _adapter(entries, section: str, source: str) -> AdapterSpec:
    typed = _typed(entries, _ADAPTER_KEYS, section, source)
    if "kind" not in typed:
        raise ConfigError(f"{source}: [{section}] needs a 'kind' ({', '.join(sorted(SPEC_TYPES))})")
    kind, lineno = typed["kind"]
    allowed = {f.name for f in fields(SPEC_TYPES[kind])} if kind in SPEC_TYPES else set()
    values = {}
    for key, (value, ln) in typed.items():
        if key == "kind":
            continue
        if key not in allowed:
            raise ConfigError(f"{source}:{ln}: key {key!r} does not apply to adapter kind {kind!r}")
        values[key] = value
    try:
        return spec_from_dict({"kind": kind, **values})
    except ConfigError as exc:
        raise ConfigError(f"{source}:{lineno}: {exc}") from None


def _stage(entries, name: str, preset_name: str, seed: int, source: str) -> StageConfig:
    typed = _typed(entries, {**_STAGE_KEYS, **_SSL_KEYS, **_AUG_KEYS}, name, source)
    stage_kw = {k: v for k, (v, _) in typed.items() if k in _STAGE_KEYS}
    ssl_kw = {k: v for k, (v, _) in typed.items() if k in _SSL_KEYS}
    aug_kw = {k: v for k, (v, _) in typed.items() if k in _AUG_KEYS}
    if "epochs" in stage_kw and "warmup_epochs" not in stage_kw:
        stage_kw["warmup_epochs"] = stage_kw["epochs"] // 10
    stage_kw.setdefault("seed", seed)
    first = min((ln for _, ln in typed.values()), default=0)
    try:
        ssl = SSLConfig.for_preset(preset_name, **ssl_kw)
        return StageConfig.defaults(name, preset_name, ssl=ssl, aug=AugConfig(**aug_kw), **stage_kw)
    except ConfigError as exc:
        raise ConfigError(f"{source}:{first}: [{name}] {exc}") from None


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    sections = _parse_sections(text, source)
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    known = {"model", "data", "eval", *STAGES, *(f"adapter.{s}" for s in STAGES)}
    for name in sections:
        if name not in known:
            raise ConfigError(f"{source}: unknown section [{name}]; expected one of {sorted(known)}")
    model = {k: v for k, (v, _) in _typed(sections.get("model", {}), _MODEL_KEYS, "model", source).items()}
    cfg = RunConfig(preset=model.get("preset", "tiny"), seed=model.get("seed", 0))
    if cfg.preset not in PRESETS:
        line = sections["model"]["preset"][1]
        raise ConfigError(f"{source}:{line}: unknown preset {cfg.preset!r}; choose from {sorted(PRESETS)}")
    for stage in STAGES:
        if f"adapter.{stage}" in sections:
            cfg.adapters[stage] = _adapter(sections[f"adapter.{stage}"], f"adapter.{stage}", source)
        if stage in sections:
            cfg.stages[stage] = _stage(sections[stage], stage, cfg.preset, cfg.seed, source)
    for key, (raw, _) in _typed(sections.get("data", {}), dict.fromkeys(DATA_KEYS, str), "data", source).items():
        cfg.data[key] = (base_dir / raw).resolve()
    ev = _typed(sections.get("eval", {}), _EVAL_KEYS, "eval", source)
    cfg.eval = EvalConfig(**{k: v for k, (v, _) in ev.items()})
    if cfg.eval.metric not in METRICS:
        raise ConfigError(f"{source}:{ev['metric'][1]}: unknown metric {cfg.eval.metric!r}; choose from {METRICS}")
    if cfg.eval.k < 1 or cfg.eval.tau <= 0:
        raise ConfigError(f"{source}: [eval] needs k >= 1 and tau > 0")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, str(path), path.parent)
    cfg.path = path
    return cfg
