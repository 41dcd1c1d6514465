import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppguide import mil as M
from ppguide.labels import attention_zscores
from ppguide.nn import finite_diff, max_relative_error


def random_bag(rng, n, d=24):
    return rng.normal(size=(n, d))


@pytest.fixture(scope="module")
def model():
    return M.init_mil(0)


def test_parameter_shapes(model):
    assert model.V.shape == (M.ATTN_DIM, M.EMBED_DIM)
    assert model.U.shape == (M.ATTN_DIM, M.EMBED_DIM)
    assert model.w.shape == (M.ATTN_DIM,)
    assert model.phi.in_dim == 24 and model.phi.out_dim == M.EMBED_DIM
    assert model.g.in_dim == M.EMBED_DIM and model.g.out_dim == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_attention_sums_to_one(n, seed):
    m = M.init_mil(seed % 7)
    H = M.encode_instance(m, random_bag(np.random.default_rng(seed), n))
    alpha = M.attention_weights(m, H)
    assert abs(alpha.sum() - 1.0) <= 1e-9
    assert np.all(alpha > 0)


def test_singleton_bag_gets_full_attention(model):
    H = M.encode_instance(model, random_bag(np.random.default_rng(1), 1))
    assert M.attention_weights(model, H).tolist() == [1.0]


def test_identical_embeddings_get_uniform_attention(model):
    h = M.encode_instance(model, random_bag(np.random.default_rng(2), 1))
    alpha = M.attention_weights(model, np.repeat(h, 5, axis=0))
    np.testing.assert_allclose(alpha, np.full(5, 0.2), atol=1e-15)


def test_empty_bag_rejected(model):
    with pytest.raises(ValueError):
        M.attention_weights(model, np.zeros((0, M.EMBED_DIM)))


def test_bag_embedding_length_mismatch(model):
    with pytest.raises(ValueError):
        M.bag_embedding(np.ones((3, 4)), np.ones(2) / 2)


def test_bag_embedding_is_convex_combination():
    H = np.array([[0.0, 2.0], [4.0, 0.0]])
    np.testing.assert_allclose(M.bag_embedding(H, [0.25, 0.75]), [3.0, 0.5])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 25), st.integers(0, 10_000))
def test_prediction_permutation_invariant_exact(n, seed):
    rng = np.random.default_rng(seed)
    m = M.init_mil(1)
    X = random_bag(rng, n)
    perm = rng.permutation(n)
    p, alpha = M.bag_forward(m, X)
    p2, alpha2 = M.bag_forward(m, X[perm])
    assert p == p2
    np.testing.assert_array_equal(alpha[perm], alpha2)


@pytest.mark.parametrize("seed", range(20))
def test_bag_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    m = M.init_mil(seed)
    for layer in m.phi.layers + m.g.layers:
        layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
    X = random_bag(rng, int(rng.integers(2, 9)))
    y = float(seed % 2)
    _, grads = M.bag_loss_and_grads(m, X, y)
    for p, g in zip(m.parameters(), grads):
        flat = p.reshape(-1)
        for i in rng.choice(flat.size, size=min(8, flat.size), replace=False):
            orig = flat[i]

            def f(v):
                flat[i] = v[0]
                out = M.bag_loss_and_grads(m, X, y)[0]
                flat[i] = orig
                return out

            fd = finite_diff(f, np.array([orig]))[0]
            assert max_relative_error(g.reshape(-1)[i], fd, 1e-6) < 1e-4


def test_bag_log_likelihood_gradient_full_attention_block():
    # every coordinate of V, U and w on one bag
    rng = np.random.default_rng(5)
    m = M.init_mil(5)
    X = random_bag(rng, 6)
    _, grads = M.bag_loss_and_grads(m, X, 1.0)
    n_phi = len(m.phi.parameters())
    for j, p in enumerate([m.V, m.U, m.w]):
        def f(q, p=p):
            saved = p.copy()
            p[...] = q
            out = M.bag_loss_and_grads(m, X, 1.0)[0]
            p[...] = saved
            return out
        assert max_relative_error(grads[n_phi + j], finite_diff(f, p.copy()), 1e-6) < 1e-4


def test_single_class_rejected():
    bags = [np.zeros((3, 24))] * 4
    with pytest.raises(M.SingleClassError, match="counts"):
        M.fit_bags(bags, [1, 1, 1, 1], 1)


def test_balance_oversamples_minority():
    rng = np.random.default_rng(0)
    labels = np.array([1] * 10 + [0] * 2)
    idx = M.balance_bags(labels, rng)
    assert (labels[idx] == 0).sum() == (labels[idx] == 1).sum() == 10
    assert len(M.balance_bags(np.array([1, 1, 0]), rng)) == 3


def test_serialization_roundtrip(tmp_path):
    m = M.init_mil(3)
    path = tmp_path / "mil.ppgn"
    m.save(path)
    back = M.MilModel.load(path)
    assert back.to_bytes() == m.to_bytes()
    X = random_bag(np.random.default_rng(0), 7)
    assert M.bag_forward(back, X)[0] == M.bag_forward(m, X)[0]


def planted_witness_bags(n_bags=500, n_inst=20, d=24, seed=0):
    """Half the bags are positive and hide one instance with a distinctive
    signature among background instances that are the same in both classes."""
    rng = np.random.default_rng(seed)
    bags, labels, where = [], [], []
    for b in range(n_bags):
        X = rng.normal(size=(n_inst, d))
        y = b % 2
        pos = -1
        if y:
            pos = int(rng.integers(n_inst))
            X[pos, :4] += 3.0
        bags.append(X)
        labels.append(y)
        where.append(pos)
    return bags, np.array(labels), np.array(where)


@pytest.fixture(scope="module")
def witness_run():
    bags, labels, where = planted_witness_bags()
    model = M.fit_bags(bags, labels, epochs=6, seed=0, lr=1e-3)
    return model, bags, labels, where


def _witness_stats(witness_run):
    model, bags, labels, where = witness_run
    top1, zs = [], []
    for X, y, w in zip(bags, labels, where):
        if y:
            alpha = M.bag_forward(model, X)[1]
            top1.append(int(np.argmax(alpha)) == w)
            zs.append(attention_zscores(alpha)[w])
    return float(np.mean(top1)), float(np.mean(zs))


def test_planted_witness_recovered(witness_run):
    top1, _ = _witness_stats(witness_run)
    assert top1 >= 0.8


def test_planted_witness_zscore(witness_run):
    _, mean_z = _witness_stats(witness_run)
    assert mean_z > 2.0


def test_training_is_deterministic():
    bags, labels, _ = planted_witness_bags(n_bags=20, n_inst=5)
    a = M.fit_bags(bags, labels, 2, seed=4)
    b = M.fit_bags(bags, labels, 2, seed=4)
    assert a.to_bytes() == b.to_bytes()


def test_heldout_bag_accuracy(pipeline):
    trajs = pipeline.corpus.trajectories
    rng = np.random.default_rng(0)
    order = rng.permutation(len(trajs))
    cut = int(0.8 * len(trajs))
    train = [trajs[i] for i in order[:cut]]
    test = [trajs[i] for i in order[cut:]]
    model = M.train_mil(train, pipeline.cfg.mil_epochs, seed=0, normalizer=pipeline.final.normalizer)
    assert M.bag_accuracy(model, test) >= 0.9
