"""DDPM action-chunk policy: training, sampling and receding-horizon rollout."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import env as E
from .nn import DenseNet, OptimizerState, adam_step, backward, dumps, forward, init_dense, loads
from .trajectory import ACT_CHUNK_DIM, OBS_CHUNK_DIM, Trajectory

log = logging.getLogger(__name__)

OBS_HORIZON = 2  # T_o
PRED_HORIZON = 8  # T_p
ACTION_HORIZON = 4  # T_a
N_DIFFUSION_STEPS = 50
EMB_DIM = 16
HIDDEN = (128, 128, 128)
SAMPLER_STREAM = 1


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # betas[k-1] is beta_k, k = 1..K

    @classmethod
    def linear(cls, K: int = N_DIFFUSION_STEPS, beta_start: float = 1e-4, beta_end: float = 0.2):
        return cls(np.linspace(beta_start, beta_end, K))

    @property
    def K(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """Cumulative products with a leading 1 so ``alpha_bars[k]`` is abar_k."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def posterior_std(self, k: int) -> float:
        ab = self.alpha_bars
        return float(np.sqrt((1.0 - ab[k - 1]) / (1.0 - ab[k]) * self.betas[k - 1]))


def step_embedding(k, dim: int = EMB_DIM) -> np.ndarray:
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class Normalizer:
    obs_mean: np.ndarray  # (8,)
    obs_std: np.ndarray
    act_mean: np.ndarray  # (2,) per action component, shared across the chunk
    act_std: np.ndarray

    @classmethod
    def fit(cls, obs_chunks: np.ndarray, actions: np.ndarray) -> "Normalizer":
        return cls(
            obs_chunks.mean(axis=0), np.maximum(obs_chunks.std(axis=0), 1e-6),
            actions.mean(axis=0), np.maximum(actions.std(axis=0), 1e-6),
        )

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls(np.zeros(OBS_CHUNK_DIM), np.ones(OBS_CHUNK_DIM), np.zeros(2), np.ones(2))

    def _chunk(self, v):
        return np.tile(v, PRED_HORIZON)

    def obs(self, o):
        return (np.asarray(o) - self.obs_mean) / self.obs_std

    def act(self, a):
        return (np.asarray(a) - self._chunk(self.act_mean)) / self._chunk(self.act_std)

    def unact(self, a):
        return np.asarray(a) * self._chunk(self.act_std) + self._chunk(self.act_mean)

    def instances(self, inst):
        inst = np.asarray(inst)
        return np.concatenate([self.obs(inst[..., :OBS_CHUNK_DIM]), self.act(inst[..., OBS_CHUNK_DIM:])], axis=-1)

    def act_scale(self) -> np.ndarray:
        return self._chunk(self.act_std)

    def same_as(self, other: "Normalizer") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("obs_mean", "obs_std", "act_mean", "act_std"))

    def to_arrays(self, prefix: str = "norm.") -> dict:
        return {prefix + k: getattr(self, k) for k in ("obs_mean", "obs_std", "act_mean", "act_std")}

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str = "norm.") -> "Normalizer":
        return cls(*(arrays[prefix + k] for k in ("obs_mean", "obs_std", "act_mean", "act_std")))


@dataclass
class PolicyCheckpoint:
    net: DenseNet
    epoch: int
    schedule: NoiseSchedule
    normalizer: Normalizer
    obs_horizon: int = OBS_HORIZON
    pred_horizon: int = PRED_HORIZON
    action_horizon: int = ACTION_HORIZON
    losses: list = field(default_factory=list)
    name: str = ""

    def to_bytes(self) -> bytes:
        meta = {
            "kind": "policy",
            "epoch": self.epoch,
            "K": self.schedule.K,
            "obs_horizon": self.obs_horizon,
            "pred_horizon": self.pred_horizon,
            "action_horizon": self.action_horizon,
            "losses": self.losses,
            "name": self.name,
        }
        arrays = {"schedule.betas": self.schedule.betas, **self.normalizer.to_arrays()}
        return dumps(self.net.layers, meta, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PolicyCheckpoint":
        layers, meta, arrays = loads(data)
        if meta.get("kind") != "policy":
            raise ValueError("container does not hold a policy checkpoint")
        return cls(
            DenseNet(layers), meta["epoch"], NoiseSchedule(arrays["schedule.betas"]),
            Normalizer.from_arrays(arrays), meta["obs_horizon"], meta["pred_horizon"],
            meta["action_horizon"], list(meta.get("losses", [])), meta.get("name", ""),
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PolicyCheckpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def obs_chunk(history: Sequence[np.ndarray]) -> np.ndarray:
    """Stack the last two observations, zero-padding before the episode start."""
    prev = history[-2] if len(history) >= 2 else np.zeros(E.OBS_DIM)
    return np.concatenate([prev, history[-1]])


def demo_windows(demos) -> tuple[np.ndarray, np.ndarray]:
    """Every full (obs chunk, action chunk) window of every demo."""
    obs, acts = [], []
    for d in demos:
        T = len(d.actions)
        for t in range(T - PRED_HORIZON + 1):
            obs.append(obs_chunk(list(d.observations[max(0, t - 1):t + 1])))
            acts.append(d.actions[t:t + PRED_HORIZON].reshape(-1))
    if not obs:
        raise ValueError("no demo is long enough to cut a single window")
    return np.array(obs), np.array(acts)


def init_denoiser(seed: int) -> DenseNet:
    sizes = (ACT_CHUNK_DIM + OBS_CHUNK_DIM + EMB_DIM, *HIDDEN, ACT_CHUNK_DIM)
    return init_dense(sizes, ["relu"] * len(HIDDEN) + ["identity"], seed)


def denoiser_input(x, obs_n, k) -> np.ndarray:
    x = np.atleast_2d(x)
    obs_n = np.atleast_2d(obs_n)
    emb = step_embedding(k)
    if emb.shape[0] == 1:
        emb = np.repeat(emb, len(x), axis=0)
    return np.concatenate([x, obs_n, emb], axis=1)


def predict_noise(net: DenseNet, x, obs_n, k) -> np.ndarray:
    return forward(net, denoiser_input(x, obs_n, k))[0]


def noise_loss_and_grads(net: DenseNet, x0, obs_n, k, noise, schedule: NoiseSchedule):
    ab = schedule.alpha_bars[k][:, None]
    xk = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    pred, tape = forward(net, denoiser_input(xk, obs_n, k))
    diff = pred - noise
    loss = float(np.mean(diff * diff))
    grads, _ = backward(net, tape, 2.0 * diff / diff.size)
    return loss, grads


def train_policy(
    demos,
    epochs: int,
    seed: int = 0,
    checkpoint_epochs: Sequence[int] = (),
    lr: float = 1e-3,
    batch_size: int = 128,
    schedule: Optional[NoiseSchedule] = None,
    name: str = "",
) -> list[PolicyCheckpoint]:
    """Noise-prediction regression on demo windows.

    Returns a checkpoint snapshot at each requested epoch plus the final one,
    sorted by epoch. ``epochs=0`` yields just the initialized network.
    """
    if not demos:
        raise ValueError("no demonstrations given")
    schedule = schedule or NoiseSchedule.linear()
    obs, acts = demo_windows(demos)
    all_actions = np.concatenate([d.actions for d in demos])
    norm = Normalizer.fit(obs, all_actions)
    obs_n, acts_n = norm.obs(obs), norm.act(acts)

    net = init_denoiser(seed)
    state = OptimizerState.for_params(net.parameters(), lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    wanted = {int(e) for e in checkpoint_epochs if 0 <= e <= epochs} | {epochs}
    losses: list[float] = []
    out = []

    def snapshot(ep):
        out.append(PolicyCheckpoint(net.copy(), ep, schedule, norm, losses=list(losses), name=name))

    if 0 in wanted:
        snapshot(0)
    n = len(obs_n)
    for ep in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            k = rng.integers(1, schedule.K + 1, size=len(idx))
            noise = rng.standard_normal((len(idx), ACT_CHUNK_DIM))
            loss, grads = noise_loss_and_grads(net, acts_n[idx], obs_n[idx], k, noise, schedule)
            if not np.isfinite(loss):
                raise FloatingPointError(f"policy loss became non-finite at epoch {ep}")
            adam_step(net, grads, state)
            total += loss
            batches += 1
        losses.append(total / batches)
        if ep in wanted:
            snapshot(ep)
    return out


# ---------------------------------------------------------------- sampling

GuidanceFn = Callable[..., np.ndarray]


def sampler_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(SAMPLER_STREAM,)))


def draw_chunk_noise(rng: np.random.Generator, K: int) -> np.ndarray:
    """Row 0 is the initial sample, row i (i >= 1) the noise added at k = K - i + 1."""
    return rng.standard_normal((K, ACT_CHUNK_DIM))


def reverse_process(
    ckpt: PolicyCheckpoint,
    obs_n: np.ndarray,
    noise: np.ndarray,
    guidance: Optional[GuidanceFn] = None,
    rows: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Batched DDPM reverse loop in normalized action space.

    ``obs_n`` is ``(n, 8)``, ``noise`` is ``(n, K, 16)``. ``guidance`` (if
    given) is called as ``guidance(eps, obs_n, x, k, rows)`` and returns the
    modified noise estimate; it must not draw randomness.
    """
    sched = ckpt.schedule
    ab = sched.alpha_bars
    x = noise[:, 0, :].copy()
    for k in range(sched.K, 0, -1):
        eps = predict_noise(ckpt.net, x, obs_n, k)
        if guidance is not None:
            eps = guidance(eps, obs_n, x, k, rows)
        beta = sched.betas[k - 1]
        mean = (x - beta / np.sqrt(1.0 - ab[k]) * eps) / np.sqrt(1.0 - beta)
        if k > 1:
            x = mean + sched.posterior_std(k) * noise[:, sched.K - k + 1, :]
        else:
            x = mean
    return x


def denoise_sample(
    ckpt: PolicyCheckpoint,
    obs,
    rng: np.random.Generator,
    guidance: Optional[GuidanceFn] = None,
) -> np.ndarray:
    """One action chunk (raw units, shape (16,)) for one observation chunk."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (OBS_CHUNK_DIM,):
        raise ValueError(f"observation chunk must have shape (8,), got {obs.shape}")
    noise = draw_chunk_noise(rng, ckpt.schedule.K)[None]
    x = reverse_process(ckpt, ckpt.normalizer.obs(obs)[None], noise, guidance, np.array([0]))
    return ckpt.normalizer.unact(x[0])


def execute_episodes(
    ckpt: PolicyCheckpoint,
    seeds: Sequence[int],
    guidance: Optional[GuidanceFn] = None,
) -> list[Trajectory]:
    """Receding-horizon rollouts for many seeds, run in lockstep.

    Each episode owns an environment stream and a sampler stream derived from
    its seed; all episodes replan at the same timesteps, so batching does
    not change which random numbers an episode consumes. ``guidance`` gets
    ``rows`` = indices into ``seeds`` of the episodes in the current batch.
    """
    seeds = [int(s) for s in seeds]
    n = len(seeds)
    K = ckpt.schedule.K
    states = [E.reset(s) for s in seeds]
    pos = np.array([s.pos for s in states]).reshape(n, 2)
    t = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    rngs = [sampler_rng(s) for s in seeds]
    prev_obs = np.zeros((n, E.OBS_DIM))
    cur_obs = np.concatenate([pos, E.GOAL - pos], axis=1)
    traces = [[p.copy()] for p in pos]
    rec_obs = [[] for _ in range(n)]
    rec_act = [[] for _ in range(n)]
    rec_t = [[] for _ in range(n)]

    while not done.all():
        rows = np.flatnonzero(~done)
        oc = np.concatenate([prev_obs[rows], cur_obs[rows]], axis=1)
        noise = np.stack([draw_chunk_noise(rngs[i], K) for i in rows])
        x = reverse_process(ckpt, ckpt.normalizer.obs(oc), noise, guidance, rows)
        chunks = ckpt.normalizer.unact(x)
        for j, i in enumerate(rows):
            rec_obs[i].append(oc[j])
            rec_act[i].append(chunks[j])
            rec_t[i].append(int(t[i]))
        plan = chunks.reshape(len(rows), PRED_HORIZON, 2)
        for step_i in range(ckpt.action_horizon):
            live = ~done[rows]
            if not live.any():
                break
            idx = rows[live]
            new_pos, new_t, d, s = E.step_arrays(pos[idx], t[idx], plan[live, step_i])
            prev_obs[idx] = cur_obs[idx]
            pos[idx], t[idx] = new_pos, new_t
            cur_obs[idx] = np.concatenate([new_pos, E.GOAL - new_pos], axis=1)
            done[idx] = d
            success[idx] = s
            for j, i in enumerate(idx):
                traces[i].append(new_pos[j].copy())

    return [
        Trajectory(
            np.array(rec_obs[i]), np.array(rec_act[i]), np.array(rec_t[i]),
            E.SUCCESS if success[i] else E.FAILURE, seeds[i], ckpt.epoch, np.array(traces[i]),
        )
        for i in range(n)
    ]


def execute_episode(ckpt: PolicyCheckpoint, seed: int, guidance: Optional[GuidanceFn] = None) -> Trajectory:
    return execute_episodes(ckpt, [seed], guidance)[0]


def success_rate(trajs: Sequence[Trajectory]) -> float:
    return sum(tr.success for tr in trajs) / len(trajs)
