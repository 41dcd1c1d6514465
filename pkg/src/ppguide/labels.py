"""Three-way instance labels from MIL attention z-scores."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mil import MilModel, bag_attention
from .trajectory import INSTANCE_DIM, Trajectory

SR, FR, IR = 0, 1, 2
CLASS_NAMES = ("SR", "FR", "IR")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
SCHEMA = "ppguide.instances/1"


def attention_zscores(alpha) -> np.ndarray:
    """Standard scores of one bag's attention weights (population std).

    Zero-variance bags map to all zeros. Single-instance bags are rejected.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.size < 2:
        raise ValueError("z-scores need at least two attention weights")
    std = alpha.std()
    if std == 0.0:
        return np.zeros_like(alpha)
    return (alpha - alpha.mean()) / std


def label_from_score(score: float, success: bool, tau: float) -> int:
    if score > tau:
        return SR if success else FR
    return IR


@dataclass
class LabeledInstance:
    instance: np.ndarray  # (24,) raw
    label: int
    trajectory_id: int
    step: int
    zscore: float


def _relevance_scores(alpha: np.ndarray, space: str) -> np.ndarray:
    if space == "zscore":
        if alpha.size < 2:
            return np.full(alpha.shape, -np.inf)
        return attention_zscores(alpha)
    if space == "raw":
        return alpha
    raise ValueError("threshold space must be 'zscore' or 'raw'")


def partition_trajectory(
    traj: Trajectory,
    alpha,
    tau: float,
    trajectory_id: int = 0,
    space: str = "zscore",
) -> list[LabeledInstance]:
    """Label every instance of one trajectory.

    ``space="zscore"`` thresholds per-bag standard scores (the default);
    ``space="raw"`` thresholds the attention weights themselves. Bags with a
    single instance are entirely irrelevant in z-score space.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(alpha) != len(traj):
        raise ValueError(f"{len(alpha)} attention weights for {len(traj)} instances")
    scores = _relevance_scores(alpha, space)
    inst = traj.instances
    stored = scores if space == "raw" else np.where(np.isfinite(scores), scores, 0.0)
    return [
        LabeledInstance(inst[i], label_from_score(scores[i], traj.success, tau), trajectory_id,
                        int(traj.steps[i]), float(stored[i]))
        for i in range(len(traj))
    ]


@dataclass
class InstanceDataset:
    X: np.ndarray  # (n, 24) raw instances
    y: np.ndarray  # (n,) class indices
    trajectory_ids: np.ndarray
    steps: np.ndarray
    zscores: np.ndarray
    tau: float
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_instances(cls, items: Sequence[LabeledInstance], tau: float, meta=None) -> "InstanceDataset":
        if not items:
            X = np.zeros((0, INSTANCE_DIM))
        else:
            X = np.array([it.instance for it in items])
        return cls(
            X, np.array([it.label for it in items], dtype=np.int64),
            np.array([it.trajectory_id for it in items], dtype=np.int64),
            np.array([it.step for it in items], dtype=np.int64),
            np.array([it.zscore for it in items], dtype=np.float64), tau, dict(meta or {}),
        )

    def __len__(self):
        return len(self.y)

    @property
    def counts(self) -> dict[str, int]:
        return {name: int((self.y == i).sum()) for i, name in enumerate(CLASS_NAMES)}

    @property
    def relevant(self) -> int:
        c = self.counts
        return c["SR"] + c["FR"]

    def imbalance(self) -> float:
        """|IR| / (|SR| + |FR|); infinite when nothing is relevant."""
        rel = self.relevant
        return float("inf") if rel == 0 else self.counts["IR"] / rel

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.X, self.y, self.trajectory_ids, self.steps):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(float(self.tau)).encode())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            header = {"schema": SCHEMA, "tau": self.tau, "counts": self.counts, "total": len(self),
                      "meta": self.meta}
            fh.write(json.dumps(header) + "\n")
            for i in range(len(self)):
                rec = {
                    "traj": int(self.trajectory_ids[i]), "step": int(self.steps[i]),
                    "z": float(self.zscores[i]), "label": CLASS_NAMES[self.y[i]],
                    "x": self.X[i].tolist(),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "InstanceDataset":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("schema") != SCHEMA:
                raise ValueError(f"unexpected instance-dataset schema {header.get('schema')!r}")
            items = []
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                items.append(LabeledInstance(np.array(r["x"]), CLASS_INDEX[r["label"]], r["traj"],
                                             r["step"], r["z"]))
        ds = cls.from_instances(items, header["tau"], header.get("meta"))
        if ds.counts != header["counts"]:
            raise ValueError("instance-dataset counts block disagrees with its records")
        return ds


def build_instance_dataset(
    trajectories: Sequence[Trajectory],
    mil_model: MilModel,
    tau: float = 2.0,
    space: str = "zscore",
) -> InstanceDataset:
    """Forward every trajectory through the MIL model and partition it."""
    if not trajectories:
        raise ValueError("no trajectories to label")
    items: list[LabeledInstance] = []
    for tid, traj in enumerate(trajectories):
        items.extend(partition_trajectory(traj, bag_attention(mil_model, traj), tau, tid, space))
    return InstanceDataset.from_instances(items, tau, {"space": space, "trajectories": len(trajectories)})


def dataset_from_attention(
    trajectories: Sequence[Trajectory],
    alphas: Sequence[np.ndarray],
    tau: float,
    space: str = "zscore",
) -> InstanceDataset:
    """Partition with precomputed attention (lets a tau sweep reuse one MIL pass)."""
    items: list[LabeledInstance] = []
    for tid, (traj, alpha) in enumerate(zip(trajectories, alphas)):
        items.extend(partition_trajectory(traj, alpha, tau, tid, space))
    return InstanceDataset.from_instances(items, tau, {"space": space, "trajectories": len(trajectories)})


def attention_csv_rows(trajectories: Sequence[Trajectory], alphas: Sequence[np.ndarray]):
    """(trajectory id, step, alpha, z-score) rows for inspection dumps."""
    rows = []
    for tid, (traj, alpha) in enumerate(zip(trajectories, alphas)):
        z = attention_zscores(alpha) if len(alpha) > 1 else np.zeros(1)
        for i in range(len(alpha)):
            rows.append((tid, int(traj.steps[i]), float(alpha[i]), float(z[i])))
    return rows
