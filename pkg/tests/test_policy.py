import math

import numpy as np
import pytest

from ppguide import env as E
from ppguide import policy as P
from ppguide.nn import finite_diff, max_relative_error
from ppguide.trajectory import ACT_CHUNK_DIM, OBS_CHUNK_DIM


@pytest.fixture(scope="module")
def demos():
    return E.collect_demos(12, base_seed=500)


def test_schedule_shape_and_monotonicity():
    s = P.NoiseSchedule.linear()
    assert s.K == 50
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.betas) > 0)
    ab = s.alpha_bars
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)


def test_posterior_std_formula():
    s = P.NoiseSchedule.linear(K=10, beta_end=0.1)
    ab = s.alpha_bars
    for k in range(2, 11):
        expected = math.sqrt((1 - ab[k - 1]) / (1 - ab[k]) * s.betas[k - 1])
        assert s.posterior_std(k) == pytest.approx(expected, rel=1e-14)
    assert s.posterior_std(1) == 0.0


def test_step_embedding_dims():
    e = P.step_embedding(np.arange(1, 51))
    assert e.shape == (50, P.EMB_DIM)
    assert np.all(np.abs(e) <= 1.0)
    assert len({row.tobytes() for row in e}) == 50


def test_obs_chunk_zero_pads_first_step():
    o = np.array([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_array_equal(P.obs_chunk([o]), np.concatenate([np.zeros(4), o]))
    o2 = o + 1
    np.testing.assert_array_equal(P.obs_chunk([o, o2]), np.concatenate([o, o2]))


def test_demo_windows_count(demos):
    obs, acts = P.demo_windows(demos)
    assert obs.shape[1] == OBS_CHUNK_DIM and acts.shape[1] == ACT_CHUNK_DIM
    assert len(obs) == sum(len(d) - P.PRED_HORIZON + 1 for d in demos)


@pytest.mark.parametrize("seed", range(20))
def test_denoiser_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    net = P.init_denoiser(seed)
    for layer in net.layers:
        layer.bias[:] = rng.normal(scale=0.05, size=layer.bias.shape)
    sched = P.NoiseSchedule.linear()
    n = 3
    x0 = rng.normal(size=(n, ACT_CHUNK_DIM))
    obs = rng.normal(size=(n, OBS_CHUNK_DIM))
    k = rng.integers(1, 51, size=n)
    noise = rng.normal(size=(n, ACT_CHUNK_DIM))
    _, grads = P.noise_loss_and_grads(net, x0, obs, k, noise, sched)
    # check a random sample of coordinates in every parameter array
    for p, g in zip(net.parameters(), grads):
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for i in idx:
            orig = flat[i]

            def f(v):
                flat[i] = v[0]
                out = P.noise_loss_and_grads(net, x0, obs, k, noise, sched)[0]
                flat[i] = orig
                return out

            fd = finite_diff(f, np.array([orig]))[0]
            assert max_relative_error(g.reshape(-1)[i], fd, 1e-6) < 1e-4


def test_train_rejects_empty_demos():
    with pytest.raises(ValueError):
        P.train_policy([], 1)


def test_zero_epochs_returns_initial_net(demos):
    (ck,) = P.train_policy(demos, 0, seed=3)
    init = P.init_denoiser(3)
    assert ck.epoch == 0
    for a, b in zip(ck.net.parameters(), init.parameters()):
        np.testing.assert_array_equal(a, b)


def test_checkpoints_returned_in_order(demos):
    cks = P.train_policy(demos, 4, seed=0, checkpoint_epochs=[2, 1])
    assert [c.epoch for c in cks] == [1, 2, 4]


def test_nan_loss_aborts_with_epoch(demos):
    bad = [E.Demo(d.seed, d.mode, d.observations, d.actions.copy(), d.outcome) for d in demos]
    bad[0].actions[3, 0] = np.nan
    with pytest.raises(FloatingPointError, match="epoch 1"):
        P.train_policy(bad, 2)


def test_loss_decreases(demos):
    drops = []
    for seed in range(3):
        (ck,) = P.train_policy(demos, 50, seed=seed)
        drops.append(ck.losses[0] - ck.losses[49])
    assert np.mean(drops) > 0


def test_constant_demo_learns_injected_noise():
    T = 60
    obs = np.tile([0.5, 0.1, 0.0, 0.85], (T, 1))
    acts = np.tile([0.01, 0.02], (T, 1))
    demo = E.Demo(0, "left", obs, acts, E.SUCCESS)
    (ck,) = P.train_policy([demo], 200, seed=0, batch_size=8)
    o, a = P.demo_windows([demo])
    rng = np.random.default_rng(99)
    k = rng.integers(1, ck.schedule.K + 1, size=len(o))
    noise = rng.normal(size=a.shape)
    mse, _ = P.noise_loss_and_grads(ck.net, ck.normalizer.act(a), ck.normalizer.obs(o), k, noise, ck.schedule)
    assert mse < 0.05


def test_checkpoint_roundtrip(tmp_path, demos):
    (ck,) = P.train_policy(demos, 1, seed=0, name="t")
    path = tmp_path / "p.ppgn"
    ck.save(path)
    back = P.PolicyCheckpoint.load(path)
    assert back.to_bytes() == ck.to_bytes()
    assert (back.epoch, back.obs_horizon, back.pred_horizon, back.action_horizon) == (1, 2, 8, 4)
    np.testing.assert_array_equal(back.schedule.betas, ck.schedule.betas)


def test_sampling_is_deterministic(demos):
    (ck,) = P.train_policy(demos, 2, seed=0)
    obs = P.obs_chunk([E.observe(E.reset(1))])
    a = P.denoise_sample(ck, obs, P.sampler_rng(7))
    b = P.denoise_sample(ck, obs, P.sampler_rng(7))
    assert a.shape == (ACT_CHUNK_DIM,)
    np.testing.assert_array_equal(a, b)


def test_sampling_rejects_bad_obs(demos):
    (ck,) = P.train_policy(demos, 0)
    with pytest.raises(ValueError):
        P.denoise_sample(ck, np.zeros(4), P.sampler_rng(0))


def test_identity_hook_is_bit_identical(demos):
    (ck,) = P.train_policy(demos, 2, seed=0)
    obs = P.obs_chunk([E.observe(E.reset(1))])
    plain = P.denoise_sample(ck, obs, P.sampler_rng(3))
    hooked = P.denoise_sample(ck, obs, P.sampler_rng(3), guidance=lambda eps, *_: eps)
    np.testing.assert_array_equal(plain, hooked)


def test_episode_bounds_and_outcome(demos):
    (ck,) = P.train_policy(demos, 3, seed=0)
    for tr in P.execute_episodes(ck, range(5)):
        assert len(tr) <= math.ceil(E.HORIZON / P.ACTION_HORIZON)
        end = tr.positions[-1]
        if tr.success:
            assert E.in_goal(end)
        else:
            assert E.in_trap(end) or len(tr.positions) - 1 == E.HORIZON


def test_batched_rollout_matches_single(demos):
    (ck,) = P.train_policy(demos, 3, seed=0)
    batch = P.execute_episodes(ck, [4, 9])
    single = P.execute_episode(ck, 9)
    assert batch[1].outcome == single.outcome
    np.testing.assert_allclose(batch[1].positions, single.positions, atol=1e-12)


def test_trained_policy_is_bimodal_at_centre(pipeline):
    ck = pipeline.final
    start = E.EnvState(pos=np.array([0.5, 0.06]))
    obs = P.obs_chunk([E.observe(start)])
    rng = P.sampler_rng(2024)
    chunks = np.array([P.denoise_sample(ck, obs, rng) for _ in range(100)]).reshape(100, P.PRED_HORIZON, 2)
    # net sideways displacement over the chunk separates the two skirting modes
    left = float(np.mean(chunks[:, :, 0].sum(axis=1) < 0))
    assert 0.2 <= left <= 0.8


def test_final_checkpoint_beats_early(pipeline):
    cfg = pipeline.cfg
    early = [c for c in pipeline.checkpoints if c.epoch == cfg.collect_epochs()[0]][0]
    seeds = range(cfg.eval_seed, cfg.eval_seed + 200)
    final_rate = P.success_rate(P.execute_episodes(pipeline.final, seeds))
    early_rate = P.success_rate(P.execute_episodes(early, seeds))
    assert final_rate >= 0.6
    assert early_rate < final_rate
