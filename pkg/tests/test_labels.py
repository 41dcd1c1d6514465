import json
import statistics

import numpy as np
import pytest

from ppguide.labels import (
    FR, IR, SR, InstanceDataset, attention_zscores, dataset_from_attention, label_from_score,
    partition_trajectory,
)
from ppguide.trajectory import Trajectory


def make_traj(n, success, seed=0):
    rng = np.random.default_rng(seed)
    return Trajectory(rng.normal(size=(n, 8)), rng.normal(size=(n, 16)), np.arange(n) * 4,
                      "success" if success else "failure", seed)


def brute_force_labels(alpha, success, tau):
    """Independent recomputation with the statistics module."""
    if len(alpha) < 2:
        return ["IR"] * len(alpha)
    mu = statistics.fmean(alpha)
    sd = statistics.pstdev(alpha)
    out = []
    for a in alpha:
        z = 0.0 if sd == 0 else (a - mu) / sd
        out.append(("SR" if success else "FR") if z > tau else "IR")
    return out


def random_alpha(rng, n):
    logits = rng.normal(scale=rng.uniform(0.1, 3.0), size=n)
    e = np.exp(logits - logits.max())
    return e / e.sum()


NAMES = {SR: "SR", FR: "FR", IR: "IR"}


def test_zscore_known_values():
    np.testing.assert_allclose(attention_zscores([0.1, 0.2, 0.3, 0.4]),
                               np.array([-3, -1, 1, 3]) / np.sqrt(5), rtol=1e-12)


def test_zscore_zero_variance():
    np.testing.assert_array_equal(attention_zscores([0.25] * 4), np.zeros(4))


def test_zscore_needs_two():
    with pytest.raises(ValueError):
        attention_zscores([1.0])


def test_label_rule():
    assert label_from_score(2.5, True, 2.0) == SR
    assert label_from_score(2.5, False, 2.0) == FR
    assert label_from_score(2.0, True, 2.0) == IR


def test_one_spike_in_success_bag():
    alpha = np.array([0.02] * 9 + [0.82])
    items = partition_trajectory(make_traj(10, True), alpha, 2.0)
    assert [i.label for i in items] == [IR] * 9 + [SR]


def test_single_instance_trajectory_is_irrelevant():
    items = partition_trajectory(make_traj(1, True), np.array([1.0]), 2.0)
    assert [i.label for i in items] == [IR]


def test_uniform_attention_is_irrelevant():
    items = partition_trajectory(make_traj(6, False), np.full(6, 1 / 6), 0.5)
    assert all(i.label == IR for i in items)


def test_attention_length_must_match():
    with pytest.raises(ValueError):
        partition_trajectory(make_traj(4, True), np.ones(3) / 3, 2.0)


def test_raw_space_thresholds_weights():
    alpha = np.array([0.1, 0.6, 0.3])
    items = partition_trajectory(make_traj(3, False), alpha, 0.5, space="raw")
    assert [i.label for i in items] == [IR, FR, IR]
    with pytest.raises(ValueError):
        partition_trajectory(make_traj(3, False), alpha, 0.5, space="bogus")


def test_matches_brute_force_and_properties_on_random_attention():
    rng = np.random.default_rng(0)
    taus = [1.5, 1.75, 2.0, 2.25]
    for case in range(1000):
        n = int(rng.integers(1, 30))
        success = bool(rng.integers(2))
        alpha = random_alpha(rng, n)
        traj = make_traj(n, success, case)
        by_tau = {}
        for tau in taus:
            items = partition_trajectory(traj, alpha, tau, case)
            labels = [NAMES[i.label] for i in items]
            assert labels == brute_force_labels(alpha.tolist(), success, tau)
            # exhaustive and exclusive: one label per instance
            assert len(items) == n and all(i.label in (SR, FR, IR) for i in items)
            # no SR from failures, no FR from successes
            assert (FR if success else SR) not in [i.label for i in items]
            by_tau[tau] = [i.label for i in items]
        # raising tau never moves an instance out of IR
        for lo, hi in zip(taus, taus[1:]):
            assert all(b == IR for a, b in zip(by_tau[lo], by_tau[hi]) if a == IR)
        if n >= 2 and alpha.std() > 0:
            z = np.array([i.zscore for i in items])
            assert abs(z.mean()) < 1e-9 and abs(z.std() - 1.0) < 1e-9


@pytest.fixture
def small_dataset():
    rng = np.random.default_rng(1)
    trajs = [make_traj(int(rng.integers(3, 12)), bool(i % 2), i) for i in range(30)]
    alphas = [random_alpha(rng, len(t)) for t in trajs]
    return trajs, alphas


def test_counts_survive_file_roundtrip(tmp_path, small_dataset):
    trajs, alphas = small_dataset
    ds = dataset_from_attention(trajs, alphas, 1.0)
    path = tmp_path / "inst.ndjson"
    ds.save(path)
    header = json.loads(path.read_text().splitlines()[0])
    assert header["schema"] == "ppguide.instances/1"
    assert header["counts"] == ds.counts
    back = InstanceDataset.load(path)
    assert back.counts == ds.counts
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    assert back.fingerprint() == ds.fingerprint()
    recount = {"SR": 0, "FR": 0, "IR": 0}
    for line in path.read_text().splitlines()[1:]:
        recount[json.loads(line)["label"]] += 1
    assert recount == ds.counts


def test_tampered_counts_rejected(tmp_path, small_dataset):
    trajs, alphas = small_dataset
    path = tmp_path / "inst.ndjson"
    dataset_from_attention(trajs, alphas, 1.0).save(path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["counts"]["IR"] += 1
    path.write_text("\n".join([json.dumps(header), *lines[1:]]) + "\n")
    with pytest.raises(ValueError):
        InstanceDataset.load(path)


def test_relevant_count_monotone_in_tau(small_dataset):
    trajs, alphas = small_dataset
    rel = [dataset_from_attention(trajs, alphas, t).relevant for t in (0.5, 1.0, 1.5, 2.0, 2.25)]
    assert all(a >= b for a, b in zip(rel, rel[1:]))


def test_tenfold_imbalance_on_toy_corpus(pipeline):
    c = pipeline.dataset.counts
    assert c["IR"] > 10 * (c["SR"] + c["FR"])
