"""Flat key=value run configuration.

The format is a plain text file of `key = value` lines with `#` comments,
parseable from any language. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .core import HyperParams
from .errors import ConfigError
from .inference import PredictSettings
from .synth import SynthSpec

MODES = ("mcp", "mcp++")

# config keys that differ from the dataclass field name
ALIASES = {"lambda": "lam"}


@dataclass
class RunConfig:
    """One run = hyperparameters + mode + structural toggles + seed."""

    mode: str = "mcp"
    tau: float = 0.01
    alpha: float = 1.0
    beta: float = 5.5
    w: float = 0.8
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    lam: float = 0.5
    gamma: float = 0.2
    rho_delta: float = 0.1
    eps: float = 1e-6
    lr: float = 1e-4
    h_low_frac: float = 0.2
    h_high_frac: float = 0.5
    e_gate_frac: float = 0.1
    p_mask: float = 0.03
    m_entropy: int = 10
    m_align: int = 10
    m_negative: int = 3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    norm_variant: str = "standardize"
    use_entropy_cache: bool = True
    use_align_cache: bool = True
    use_negative_cache: bool = True
    use_text_term: bool = True
    use_visual_term: bool = True
    use_cache_term: bool = True
    use_align_loss: bool = True
    use_contrast_loss: bool = True
    persist_residuals: bool = False
    view_average: bool = False
    emit_terms: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        try:
            self.to_hyperparams()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_hyperparams(self) -> HyperParams:
        names = {f.name for f in dataclasses.fields(HyperParams)}
        return HyperParams(
            **{k: v for k, v in dataclasses.asdict(self).items() if k in names}
        )

    def to_settings(self) -> PredictSettings:
        return PredictSettings(
            mode=self.mode,
            use_text_term=self.use_text_term,
            use_visual_term=self.use_visual_term,
            use_cache_term=self.use_cache_term,
            use_align_loss=self.use_align_loss,
            use_contrast_loss=self.use_contrast_loss,
            persist_residuals=self.persist_residuals,
            view_average=self.view_average,
        )

    def cache_flags(self) -> dict[str, bool]:
        return {
            "entropy": self.use_entropy_cache,
            "align": self.use_align_cache,
            "negative": self.use_negative_cache,
        }


def _parse_value(raw: str, target_type, key: str):
    raw = raw.strip()
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as a boolean")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r}") from e
    return raw


def parse_kv_file(path: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = stripped.split("=", 1)
            key = key.strip()
            if key in pairs:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            pairs[key] = value.strip()
    return pairs


def _from_pairs(cls, pairs: dict[str, str], overrides: dict | None = None):
    field_types = {f.name: f.type for f in dataclasses.fields(cls)}
    # dataclass field annotations are strings under `from __future__ import
    # annotations`; resolve the primitive ones we use
    resolved = {}
    for name, tp in field_types.items():
        if isinstance(tp, str):
            tp = {"int": int, "float": float, "bool": bool, "str": str}.get(tp, str)
        resolved[name] = tp
    kwargs = {}
    for key, raw in pairs.items():
        name = ALIASES.get(key, key)
        if name not in resolved:
            raise ConfigError(f"unknown configuration key {key!r}")
        kwargs[name] = _parse_value(raw, resolved[name], key)
    if overrides:
        kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_run_config(path: str, overrides: dict | None = None) -> RunConfig:
    return _from_pairs(RunConfig, parse_kv_file(path), overrides)


def load_synth_spec(path: str, overrides: dict | None = None) -> SynthSpec:
    return _from_pairs(SynthSpec, parse_kv_file(path), overrides)
