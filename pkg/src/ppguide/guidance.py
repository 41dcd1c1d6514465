"""Classifier guidance inside the reverse diffusion loop.

The modified noise estimate combines the denoiser output with the gradients
of the guide's SR and FR log-probabilities. Two sign conventions exist:

``"steer"`` (default)
    eps_hat = eps - c * (w_sr * g_sr - w_fr * g_fr). With an epsilon
    parameterized DDPM update, subtracting from the noise estimate moves the
    sample along the gradient, so this attracts SR and repels FR.
``"literal"``
    eps_hat = eps + c * (w_sr * g_sr - w_fr * g_fr), the combination with
    the opposite sign. Under the same update it attracts FR; kept for
    comparison runs.

``c`` is 1, or sqrt(1 - abar_k) when ``scale_by_sigma`` is set.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .guide import GuideModel, grad_pair_normalized
from .policy import Normalizer

SCHEDULES = ("none", "constant", "alternating")
PARITIES = ("even", "odd")
CONVENTIONS = ("steer", "literal")


class GuidanceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    w_sr: float = 0.0
    w_fr: float = 0.0
    schedule: str = "alternating"
    parity: str = "even"
    tau: float = 2.0
    convention: str = "steer"
    scale_by_sigma: bool = False

    def __post_init__(self):
        if self.w_sr < 0 or self.w_fr < 0:
            raise ValueError("guidance weights must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.parity not in PARITIES:
            raise ValueError(f"parity must be one of {PARITIES}")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")
        if self.w_sr > 0 and self.w_sr >= self.w_fr:
            warnings.warn(
                f"w_sr={self.w_sr} is not below w_fr={self.w_fr}; success attraction is "
                "usually kept much weaker than failure repulsion",
                GuidanceWarning,
                stacklevel=3,
            )

    @classmethod
    def from_strength(cls, w_fr: float, ratio: float = 0.1, **kw) -> "GuidanceConfig":
        return cls(w_sr=ratio * w_fr, w_fr=w_fr, **kw)


def guided_noise_estimate(eps, g_sr, g_fr, cfg: GuidanceConfig, scale: float = 1.0) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    g_sr = np.asarray(g_sr, dtype=np.float64)
    g_fr = np.asarray(g_fr, dtype=np.float64)
    if not (eps.shape == g_sr.shape == g_fr.shape):
        raise ValueError("noise estimate and gradients must have the same shape")
    sign = 1.0 if cfg.convention == "literal" else -1.0
    return eps + sign * scale * (cfg.w_sr * g_sr - cfg.w_fr * g_fr)


def should_guide(k: int, cfg: GuidanceConfig) -> bool:
    if cfg.schedule == "none":
        return False
    if cfg.schedule == "constant":
        return True
    return (k % 2 == 0) if cfg.parity == "even" else (k % 2 == 1)


def guided_step_count(K: int, cfg: GuidanceConfig) -> int:
    return sum(should_guide(k, cfg) for k in range(1, K + 1))


class GuidanceHook:
    """Per-episode guidance state for the sampler.

    Holds one counter slot per episode row: classifier calls (one fused
    forward/backward yields both gradients), guided steps, and steps whose
    gradients came back non-finite and were skipped. Never draws randomness.
    """

    def __init__(
        self,
        guide: Optional[GuideModel],
        cfg: GuidanceConfig,
        n_rows: int = 1,
        alpha_bars=None,
        policy_normalizer: Optional[Normalizer] = None,
    ):
        if guide is None and cfg.schedule != "none":
            raise ValueError("a guide model is required unless schedule is 'none'")
        self.guide = guide
        self.cfg = cfg
        self.alpha_bars = alpha_bars
        # only needed when the guide was fit under different normalization stats
        self.policy_normalizer = None
        if guide is not None and policy_normalizer is not None and not policy_normalizer.same_as(guide.normalizer):
            self.policy_normalizer = policy_normalizer
        self.calls = np.zeros(n_rows, dtype=np.int64)
        self.guided_steps = np.zeros(n_rows, dtype=np.int64)
        self.skipped = np.zeros(n_rows, dtype=np.int64)

    def _grow(self, n):
        if n > len(self.calls):
            pad = n - len(self.calls)
            self.calls = np.pad(self.calls, (0, pad))
            self.guided_steps = np.pad(self.guided_steps, (0, pad))
            self.skipped = np.pad(self.skipped, (0, pad))

    def reset_counters(self):
        self.calls[:] = 0
        self.guided_steps[:] = 0
        self.skipped[:] = 0

    def __call__(self, eps, obs_n, x, k, rows=None):
        return apply_guidance(self, eps, obs_n, x, k, rows)


def apply_guidance(hook: GuidanceHook, eps, obs_n, noised_action, k: int, rows=None) -> np.ndarray:
    """Guided noise estimate for a batch at denoising step ``k``.

    Inputs live in the policy's normalized space; ``rows`` maps batch rows to
    counter slots (defaults to 0..n-1).
    """
    if not should_guide(k, hook.cfg):
        return eps
    eps = np.atleast_2d(eps)
    n = len(eps)
    rows = np.arange(n) if rows is None else np.asarray(rows)
    hook._grow(int(rows.max()) + 1)
    pn = hook.policy_normalizer
    if pn is None:
        g_sr, g_fr = grad_pair_normalized(hook.guide, obs_n, noised_action)
    else:
        gn = hook.guide.normalizer
        obs_g = gn.obs(obs_n * pn.obs_std + pn.obs_mean)
        act_g = gn.act(pn.unact(noised_action))
        g_sr, g_fr = grad_pair_normalized(hook.guide, obs_g, act_g)
        ratio = pn.act_scale() / gn.act_scale()
        g_sr, g_fr = g_sr * ratio, g_fr * ratio
    hook.calls[rows] += 1
    hook.guided_steps[rows] += 1
    scale = 1.0
    if hook.cfg.scale_by_sigma:
        if hook.alpha_bars is None:
            raise ValueError("scale_by_sigma needs the schedule's alpha_bars")
        scale = float(np.sqrt(1.0 - hook.alpha_bars[k]))
    out = guided_noise_estimate(eps, g_sr, g_fr, hook.cfg, scale)
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        out[bad] = eps[bad]
        hook.skipped[rows[bad]] += 1
    return out
