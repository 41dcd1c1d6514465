"""Gated-attention multiple instance learning over rollout bags.

A bag is one trajectory; an instance is one (observation chunk, action
chunk) pair. The model encodes every instance, scores it with gated
attention, pools the embeddings with the softmax weights and classifies the
pooled vector as success or failure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .nn import (
    DenseNet, OptimizerState, adam_update, backward, dumps, forward, init_dense, loads, sigmoid,
)
from .policy import Normalizer
from .trajectory import INSTANCE_DIM, Trajectory

log = logging.getLogger(__name__)

EMBED_DIM = 64  # M
ATTN_DIM = 32  # L
ENCODER_HIDDEN = (64, 64)


class SingleClassError(ValueError):
    """Raised when a bag set lacks one of the two outcome classes."""


@dataclass
class MilModel:
    phi: DenseNet
    V: np.ndarray  # (L, M)
    U: np.ndarray  # (L, M)
    w: np.ndarray  # (L,)
    g: DenseNet
    normalizer: Normalizer = field(default_factory=Normalizer.identity)
    losses: list = field(default_factory=list)

    def parameters(self) -> list[np.ndarray]:
        return [*self.phi.parameters(), self.V, self.U, self.w, *self.g.parameters()]

    def _touch(self):
        self.phi.version += 1
        self.g.version += 1

    def to_bytes(self) -> bytes:
        meta = {"kind": "mil", "phi_layers": len(self.phi.layers), "losses": self.losses}
        arrays = {"attn.V": self.V, "attn.U": self.U, "attn.w": self.w, **self.normalizer.to_arrays()}
        return dumps(self.phi.layers + self.g.layers, meta, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MilModel":
        layers, meta, arrays = loads(data)
        if meta.get("kind") != "mil":
            raise ValueError("container does not hold a MIL model")
        n = meta["phi_layers"]
        return cls(
            DenseNet(layers[:n]), arrays["attn.V"], arrays["attn.U"], arrays["attn.w"],
            DenseNet(layers[n:]), Normalizer.from_arrays(arrays), list(meta.get("losses", [])),
        )

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MilModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_mil(seed: int, in_dim: int = INSTANCE_DIM, normalizer: Optional[Normalizer] = None) -> MilModel:
    ss = np.random.SeedSequence(seed)
    s_phi, s_attn, s_g = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    phi = init_dense((in_dim, *ENCODER_HIDDEN, EMBED_DIM), ["relu", "relu", "relu"], s_phi)
    rng = np.random.default_rng(s_attn)
    lim = np.sqrt(6.0 / (EMBED_DIM + ATTN_DIM))
    V = rng.uniform(-lim, lim, (ATTN_DIM, EMBED_DIM))
    U = rng.uniform(-lim, lim, (ATTN_DIM, EMBED_DIM))
    w = rng.uniform(-np.sqrt(6.0 / (ATTN_DIM + 1)), np.sqrt(6.0 / (ATTN_DIM + 1)), ATTN_DIM)
    g = init_dense((EMBED_DIM, 1), ["sigmoid"], s_g)
    return MilModel(phi, V, U, w, g, normalizer or Normalizer.identity())


def encode_instance(model: MilModel, inst) -> np.ndarray:
    """Embedding h_t of one raw instance (or a batch of them)."""
    return forward(model.phi, model.normalizer.instances(inst))[0]


def attention_scores(model: MilModel, H: np.ndarray) -> np.ndarray:
    H = np.atleast_2d(H)
    return (np.tanh(H @ model.V.T) * sigmoid(H @ model.U.T)) @ model.w


def softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max())
    return e / e.sum()


def attention_weights(model: MilModel, H) -> np.ndarray:
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if len(H) == 0:
        raise ValueError("attention needs at least one embedding")
    return softmax(attention_scores(model, H))


def bag_embedding(H, alpha) -> np.ndarray:
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(H) != len(alpha):
        raise ValueError(f"{len(H)} embeddings but {len(alpha)} attention weights")
    return alpha @ H


def _canonical_order(X: np.ndarray) -> np.ndarray:
    # pooling is done in a fixed instance order so predictions are exactly
    # invariant to how the bag was listed
    return np.lexsort(X.T[::-1])


def _bag_pass(model: MilModel, X_n: np.ndarray):
    order = _canonical_order(X_n)
    Xs = X_n[order]
    H, phi_tape = forward(model.phi, Xs)
    A = np.tanh(H @ model.V.T)
    G = sigmoid(H @ model.U.T)
    alpha = softmax((A * G) @ model.w)
    z = alpha @ H
    p, g_tape = forward(model.g, z)
    cache = dict(order=order, H=H, A=A, G=G, alpha=alpha, z=z, phi_tape=phi_tape, g_tape=g_tape)
    return float(p[0]), cache


def bag_forward(model: MilModel, X_n: np.ndarray) -> tuple[float, np.ndarray]:
    """(P(success), attention weights in the given instance order) on normalized instances."""
    p, c = _bag_pass(model, np.atleast_2d(X_n))
    alpha = np.empty_like(c["alpha"])
    alpha[c["order"]] = c["alpha"]
    return p, alpha


def bag_predict(model: MilModel, traj: Trajectory) -> float:
    return bag_forward(model, model.normalizer.instances(traj.instances))[0]


def bag_attention(model: MilModel, traj: Trajectory) -> np.ndarray:
    return bag_forward(model, model.normalizer.instances(traj.instances))[1]


def bce(p: float, y: float) -> float:
    p = min(max(p, 1e-300), 1.0 - 1e-16)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bag_loss_and_grads(model: MilModel, X_n: np.ndarray, y: float):
    """Binary cross-entropy of one bag and its gradient for every parameter,
    ordered as :meth:`MilModel.parameters`."""
    p, c = _bag_pass(model, np.atleast_2d(X_n))
    loss = bce(p, y)
    # sigmoid output: d loss / d logit = p - y
    g_grads, dz = backward(model.g, c["g_tape"], np.array([p - y]), preactivation=True)
    H, A, G, alpha = c["H"], c["A"], c["G"], c["alpha"]
    d_alpha = H @ dz
    d_score = alpha * (d_alpha - alpha @ d_alpha)
    dH = np.outer(alpha, dz)
    d_w = d_score @ (A * G)
    dA = np.outer(d_score, model.w) * G
    dG = np.outer(d_score, model.w) * A
    dA_pre = dA * (1.0 - A * A)
    dG_pre = dG * G * (1.0 - G)
    d_V = dA_pre.T @ H
    d_U = dG_pre.T @ H
    dH += dA_pre @ model.V + dG_pre @ model.U
    phi_grads, _ = backward(model.phi, c["phi_tape"], dH)
    return loss, [*phi_grads, d_V, d_U, d_w, *g_grads]


def balance_bags(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Bag indices for one epoch; the minority class is oversampled to parity
    when one class outnumbers the other by more than 2x."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    small, big = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    idx = np.arange(len(labels))
    if len(big) > 2 * len(small):
        extra = rng.choice(small, size=len(big) - len(small), replace=True)
        idx = np.concatenate([idx, extra])
    return idx


def fit_bags(
    bags: Sequence[np.ndarray],
    labels: Sequence[int],
    epochs: int,
    seed: int = 0,
    lr: float = 1e-3,
    model: Optional[MilModel] = None,
) -> MilModel:
    """Train on already-normalized bags, one bag per optimizer step."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        counts = {int(v): int((labels == v).sum()) for v in np.unique(labels)}
        raise SingleClassError(f"MIL training needs success and failure bags, got counts {counts}")
    bags = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in bags]
    model = model or init_mil(seed, in_dim=bags[0].shape[1])
    params = model.parameters()
    state = OptimizerState.for_params(params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    for ep in range(epochs):
        idx = rng.permutation(balance_bags(labels, rng))
        total = 0.0
        for i in idx:
            loss, grads = bag_loss_and_grads(model, bags[i], float(labels[i]))
            adam_update(params, grads, state)
            model._touch()
            total += loss
        model.losses.append(total / len(idx))
        log.debug("mil epoch %d loss %.4f", ep + 1, model.losses[-1])
    return model


def train_mil(
    trajectories: Sequence[Trajectory],
    epochs: int,
    seed: int = 0,
    normalizer: Optional[Normalizer] = None,
    lr: float = 1e-3,
) -> MilModel:
    """End-to-end BCE training on rollout bags (label 1 = success)."""
    normalizer = normalizer or Normalizer.identity()
    labels = np.array([int(t.success) for t in trajectories])
    bags = [normalizer.instances(t.instances) for t in trajectories]
    model = init_mil(seed, normalizer=normalizer)
    return fit_bags(bags, labels, epochs, seed, lr, model=model)


def bag_accuracy(model: MilModel, trajectories: Sequence[Trajectory]) -> float:
    hits = [(bag_predict(model, t) > 0.5) == t.success for t in trajectories]
    return float(np.mean(hits))
