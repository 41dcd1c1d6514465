"""Experiment configuration and its flat ``key = value`` file format.

Blank lines and ``#`` comments are ignored. List values are comma
separated. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 0

    # demonstrations
    n_demos: int = 40
    demo_seed: int = 10_000

    # base policy
    policy_epochs: int = 400
    policy_lr: float = 1e-3
    policy_batch: int = 128
    collect_fractions: list[float] = field(default_factory=lambda: [0.2, 0.3, 0.4, 0.5, 0.6])
    eval_fractions: list[float] = field(default_factory=lambda: [0.9, 1.0])

    # rollouts
    rollout_episodes: int = 100
    rollout_seed: int = 100_000

    # MIL
    mil_epochs: int = 40
    mil_lr: float = 1e-3

    # pseudo labels
    tau: float = 2.0
    threshold_space: str = "zscore"

    # guide classifier
    guide_epochs: int = 50
    guide_lr: float = 1e-3
    guide_batch: int = 128
    guide_noise_sigma: float = 0.0

    # guidance
    w_fr: float = 0.15
    sr_ratio: float = 0.1
    schedule: str = "alternating"
    parity: str = "even"
    convention: str = "steer"
    scale_by_sigma: bool = False

    # evaluation and sweeps
    eval_episodes: int = 200
    eval_seed: int = 0
    strength_values: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.15, 0.2, 0.3, 0.5])
    zscore_values: list[float] = field(default_factory=lambda: [1.5, 1.75, 2.0, 2.25])
    zscore_strengths: list[float] = field(default_factory=lambda: [0.2])

    # heterogeneous deployment: a longer-trained policy outside the collection set
    hetero_epochs: int = 600
    hetero_seed_offset: int = 0

    @property
    def w_sr(self) -> float:
        return self.sr_ratio * self.w_fr

    def collect_epochs(self) -> list[int]:
        return [int(round(f * self.policy_epochs)) for f in self.collect_fractions]

    def eval_epochs(self) -> list[int]:
        return [int(round(f * self.policy_epochs)) for f in self.eval_fractions]

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ == list[float]:
            return [float(x) for x in raw.split(",") if x.strip()]
        if typ == list[int]:
            return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key!r}")


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    hints = get_type_hints(PipelineConfig)
    known = {f.name for f in fields(PipelineConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw, hints[key])
    return dataclasses.replace(base or PipelineConfig(), **values)


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
