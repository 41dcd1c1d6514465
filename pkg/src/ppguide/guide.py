"""Instance-level relevance classifier (SR / FR / IR) used for guidance."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .labels import CLASS_INDEX, CLASS_NAMES, FR, IR, SR, InstanceDataset
from .nn import DenseNet, OptimizerState, adam_step, backward, dumps, forward, init_dense, loads
from .policy import Normalizer
from .trajectory import ACT_CHUNK_DIM, INSTANCE_DIM, OBS_CHUNK_DIM

HIDDEN = (128, 128)


class MissingClassError(ValueError):
    pass


@dataclass
class GuideModel:
    net: DenseNet
    normalizer: Normalizer
    tau: float = 2.0
    fingerprint: str = ""
    val_accuracy: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)
    class_index: dict = field(default_factory=lambda: dict(CLASS_INDEX))

    def to_bytes(self) -> bytes:
        meta = {
            "kind": "guide", "tau": self.tau, "fingerprint": self.fingerprint,
            "class_index": self.class_index, "val_accuracy": self.val_accuracy, "losses": self.losses,
        }
        return dumps(self.net.layers, meta, self.normalizer.to_arrays())

    @classmethod
    def from_bytes(cls, data: bytes) -> "GuideModel":
        layers, meta, arrays = loads(data)
        if meta.get("kind") != "guide":
            raise ValueError("container does not hold a guide model")
        return cls(DenseNet(layers), Normalizer.from_arrays(arrays), meta["tau"], meta["fingerprint"],
                   meta.get("val_accuracy", {}), list(meta.get("losses", [])), meta["class_index"])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GuideModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_guide(seed: int, normalizer: Optional[Normalizer] = None) -> GuideModel:
    net = init_dense((INSTANCE_DIM, *HIDDEN, 3), ["relu", "relu", "identity"], seed)
    return GuideModel(net, normalizer or Normalizer.identity())


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logprobs_normalized(model: GuideModel, obs_n, act_n) -> np.ndarray:
    x = np.concatenate([np.atleast_2d(obs_n), np.atleast_2d(act_n)], axis=1)
    return log_softmax(forward(model.net, x)[0])


def grad_pair_normalized(model: GuideModel, obs_n, act_n) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of log P(SR) and log P(FR) with respect to the normalized
    action chunk, for a batch, from one forward and one stacked backward."""
    obs_n = np.atleast_2d(obs_n)
    act_n = np.atleast_2d(act_n)
    n = len(act_n)
    x = np.concatenate([obs_n, act_n], axis=1)
    x2 = np.concatenate([x, x], axis=0)
    logits, tape = forward(model.net, x2)
    p = np.exp(log_softmax(logits))
    onehot = np.zeros_like(p)
    onehot[:n, SR] = 1.0
    onehot[n:, FR] = 1.0
    _, gx = backward(model.net, tape, onehot - p, preactivation=True)
    ga = gx[:, OBS_CHUNK_DIM:]
    return ga[:n], ga[n:]


def class_logprobs(model: GuideModel, obs, action) -> np.ndarray:
    """(log P_SR, log P_FR, log P_IR) for raw observation and action chunks."""
    nrm = model.normalizer
    out = logprobs_normalized(model, nrm.obs(obs), nrm.act(action))
    return out[0] if np.ndim(action) == 1 else out


def grad_logprob_action(model: GuideModel, obs, action, cls) -> np.ndarray:
    """d log P(cls | obs, action) / d action, in raw action units."""
    c = CLASS_INDEX[cls] if isinstance(cls, str) else int(cls)
    if c not in (SR, FR, IR):
        raise ValueError(f"unknown class {cls!r}")
    nrm = model.normalizer
    x = np.concatenate([nrm.obs(obs), nrm.act(action)])[None]
    logits, tape = forward(model.net, x)
    p = np.exp(log_softmax(logits))
    onehot = np.zeros_like(p)
    onehot[0, c] = 1.0
    _, gx = backward(model.net, tape, onehot - p, preactivation=True)
    std = np.tile(nrm.act_std, ACT_CHUNK_DIM // 2)
    return gx[0, OBS_CHUNK_DIM:] / std


def class_weights(y: np.ndarray) -> np.ndarray:
    counts = np.bincount(y, minlength=3).astype(np.float64)
    return len(y) / (3.0 * np.maximum(counts, 1.0))


def _split(y: np.ndarray, fraction: float, rng: np.random.Generator):
    train, val = [], []
    for c in range(3):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_val = int(round(fraction * len(idx)))
        if len(idx) > 1:
            n_val = min(max(n_val, 1), len(idx) - 1)
        else:
            n_val = 0
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.concatenate(train), np.concatenate(val)


def per_class_accuracy(model: GuideModel, X_n: np.ndarray, y: np.ndarray) -> dict[str, float]:
    if len(y) == 0:
        return {}
    pred = forward(model.net, X_n)[0].argmax(axis=1)
    return {name: float((pred[y == c] == c).mean()) for c, name in enumerate(CLASS_NAMES) if (y == c).any()}


def train_guide(
    dataset: InstanceDataset,
    epochs: int,
    seed: int = 0,
    normalizer: Optional[Normalizer] = None,
    lr: float = 1e-3,
    batch_size: int = 128,
    val_fraction: float = 0.2,
    noise_sigma: float = 0.0,
) -> GuideModel:
    """Class-weighted cross-entropy on the pseudo-labeled instances.

    Weights are inverse class frequencies over the training split.
    ``noise_sigma > 0`` adds Gaussian noise to the normalized action part
    of every training batch.
    """
    counts = dataset.counts
    missing = [name for name, n in counts.items() if n == 0]
    if missing:
        raise MissingClassError(f"instance dataset lacks classes {missing}; counts {counts}")
    normalizer = normalizer or Normalizer.identity()
    model = init_guide(seed, normalizer)
    model.tau = float(dataset.tau)
    model.fingerprint = dataset.fingerprint()
    X_n = normalizer.instances(dataset.X)
    y = dataset.y
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(5,)))
    train_idx, val_idx = _split(y, val_fraction, rng)
    Xt, yt = X_n[train_idx], y[train_idx]
    cw = class_weights(yt)
    state = OptimizerState.for_params(model.net.parameters(), lr=lr)
    for ep in range(epochs):
        order = rng.permutation(len(yt))
        total, batches = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            xb = Xt[idx]
            if noise_sigma > 0:
                xb = xb.copy()
                xb[:, OBS_CHUNK_DIM:] += noise_sigma * rng.standard_normal((len(idx), ACT_CHUNK_DIM))
            yb = yt[idx]
            logits, tape = forward(model.net, xb)
            lp = log_softmax(logits)
            wb = cw[yb]
            loss = float(-(wb * lp[np.arange(len(yb)), yb]).sum() / len(yb))
            onehot = np.zeros_like(lp)
            onehot[np.arange(len(yb)), yb] = 1.0
            dlogits = wb[:, None] * (np.exp(lp) - onehot) / len(yb)
            grads, _ = backward(model.net, tape, dlogits, preactivation=True)
            adam_step(model.net, grads, state)
            total += loss
            batches += 1
        model.losses.append(total / max(batches, 1))
    model.val_accuracy = per_class_accuracy(model, X_n[val_idx], y[val_idx])
    return model
