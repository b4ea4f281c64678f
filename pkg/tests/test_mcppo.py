from __future__ import annotations

import numpy as np
import pytest

from dhal import distributions as D
from dhal.dha import DhaConfig
from dhal.envs.cart import CartConfig
from dhal.errors import ConfigError, ContractError
from dhal.mcppo import losses as L
from dhal.mcppo import train as rl
from dhal.mcppo.policy import ActorCritic
from dhal.nn import tensor as T
from dhal.nn.rng import RngStream

TINY_DHA = DhaConfig(latent_dim=4, selector_hidden=(8,), conv_channels=(4, 4), decoder_hidden=(8,), batch_size=32)


def tiny_learner(seed=0, **kw):
    base = dict(num_envs=4, horizon=6, actor_hidden=(16,), critic_hidden=(16,), learning_epochs=2, num_minibatches=2)
    return rl.build_learner(rl.PpoConfig(**{**base, **kw}), TINY_DHA, CartConfig(), seed)


# -- GAE -------------------------------------------------------------------------
def test_gae_single_terminal_step():
    adv, tgt = L.compute_gae([1.0], [0.0], [1.0], 5.0, 0.99, 0.9)
    assert adv[0] == 1.0 and tgt[0] == 1.0


def test_gae_two_step_oracle():
    adv, _ = L.compute_gae([0.0, 1.0], [0.0, 0.0], [0.0, 1.0], 0.0, 0.99, 0.9)
    np.testing.assert_allclose(adv, [0.891, 1.0], rtol=0, atol=1e-12)
    adv32 = adv.astype(np.float32)
    assert adv32[0] == np.float32(0.99 * 0.9)


def test_gae_zero_case_and_ignored_bootstrap():
    adv, _ = L.compute_gae(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(2), 0.99, 0.9)
    assert not np.any(adv)
    done, _ = L.compute_gae([0.0], [0.0], [1.0], 100.0, 0.99, 0.9)
    assert done[0] == 0.0


def test_gae_shape_mismatch():
    with pytest.raises(ContractError):
        L.compute_gae([0.0, 1.0], [0.0], [0.0, 0.0], 0.0, 0.99, 0.9)


# -- normalization and combination ---------------------------------------------------
def test_normalize_examples():
    np.testing.assert_allclose(L.normalize_advantages(np.array([[1.0], [3.0]]))[:, 0], [-1.0, 1.0], atol=1e-7)
    assert np.all(np.abs(L.normalize_advantages(np.full((5, 1), 4.2))) < 1e-6)
    with pytest.raises(ContractError):
        L.normalize_advantages(np.ones((1, 3)))


def test_normalize_moments_per_group():
    adv = RngStream(0).normal(size=(500, 3)) * np.array([0.01, 5.0, 300.0]) + np.array([1.0, -2.0, 9.0])
    norm = L.normalize_advantages(adv)
    np.testing.assert_allclose(norm.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(norm.std(axis=0), 1.0, atol=1e-6)


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e4])
def test_scale_invariance_of_combined_advantage(c):
    rng = RngStream(1)
    r = rng.normal(size=(16, 8, 3))
    v = rng.normal(size=(16, 8, 3))
    d = (rng.uniform(size=(16, 8)) < 0.1).astype(float)
    last = rng.normal(size=(8, 3))
    w = (0.35, 0.4, 0.25)

    def combined(scale):
        s = np.array([1.0, scale, 1.0])
        adv, _ = L.compute_group_gae(r * s, v * s, d, last * s, 0.99, 0.9)
        return L.combine_advantages(L.normalize_advantages(adv.reshape(-1, 3)), w)

    np.testing.assert_allclose(combined(c), combined(1.0), atol=1e-5)


def test_combine_examples():
    w = (0.4, 0.35, 0.25)
    assert L.combine_advantages(np.ones((1, 3)), w)[0] == pytest.approx(1.0)
    a = np.array([[2.0, 0.0, -1.0]])
    assert L.combine_advantages(a, w)[0] == pytest.approx(0.8 - 0.25)
    b = RngStream(2).normal(size=(6, 3))
    np.testing.assert_array_equal(L.combine_advantages(b, (1.0, 0.0, 0.0)), b[:, 0])


@pytest.mark.parametrize("w", [(0.5, 0.5, 0.5), (1.2, -0.1, -0.1)])
def test_bad_weights(w):
    with pytest.raises(ConfigError):
        L.check_weights(w)
    with pytest.raises(ConfigError):
        rl.PpoConfig(weights=w)


# -- losses ------------------------------------------------------------------------
def test_value_loss_examples():
    tgt = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    perfect = [T.Tensor(tgt[:, g]) for g in range(3)]
    assert L.value_loss(perfect, tgt)[0].item() == 0.0
    off = [T.Tensor(tgt[:, 0]), T.Tensor(tgt[:, 1] + 1.0), T.Tensor(tgt[:, 2])]
    loss, parts = L.value_loss(off, tgt)
    assert loss.item() == pytest.approx(1.0) and parts == pytest.approx([0.0, 1.0, 0.0])


def test_push_value_gradient_reaches_only_push_critic():
    ac = ActorCritic(6, 1, 1.0, ("glide", "push", "reg"), actor_hidden=(8,), critic_hidden=(8,)).init(RngStream(3))
    x = RngStream(4).normal(size=(5, 6))
    values = ac.values(x)
    tgt = np.zeros((5, 3))
    loss, _ = L.value_loss([values[1]], tgt[:, 1:2])
    T.backward(loss)
    for name, p in ac.params.items():
        touched = p.grad is not None and np.any(p.grad)
        assert touched == name.startswith("critic.push."), name


@pytest.mark.parametrize(
    "ratio, adv, want", [(1.5, 1.0, 1.2), (0.5, -1.0, -0.8), (1.0, 0.7, 0.7), (0.5, 1.0, 0.5), (1.5, -1.0, -1.5)]
)
def test_surrogate_examples(ratio, adv, want):
    # (0.5, -1): min(-0.5, 0.8 * -1) is the clipped branch, -0.8
    with T.precision(np.float64):
        s = L.surrogate_loss(T.Tensor([np.log(ratio)]), [0.0], [adv], 0.2)
    assert s.item() == pytest.approx(want, abs=1e-12)


def test_surrogate_on_policy_and_bound():
    adv = RngStream(5).normal(size=50)
    with T.precision(np.float64):
        assert L.surrogate_loss(T.Tensor(np.zeros(50)), np.zeros(50), adv, 0.2).item() == pytest.approx(adv.mean())
    logr = RngStream(6).normal(size=50)
    for i in range(50):
        s = L.surrogate_loss(T.Tensor(logr[i : i + 1]), [0.0], adv[i : i + 1], 0.2).item()
        assert s <= 1.2 * abs(adv[i]) + 1e-6


def test_total_loss_entropy_coefficient():
    ent = T.Tensor([0.3], requires_grad=True)
    loss = L.total_ppo_loss(T.Tensor([0.0]), T.Tensor([0.0]), ent.sum(), 0.0)
    T.backward(loss.sum())
    assert loss.item() == 0.0 and not np.any(ent.grad)


@pytest.mark.parametrize("kl, want", [(0.05, 1e-3 / 1.5), (0.001, 1.5e-3), (0.01, 1e-3)])
def test_adaptive_lr(kl, want):
    assert L.adaptive_lr_update(kl, 0.01, 1e-3) == pytest.approx(want)


def test_adaptive_lr_clamped():
    assert L.adaptive_lr_update(1.0, 0.01, 1e-6) == 1e-6
    assert L.adaptive_lr_update(0.0, 0.01, 1e-2) == 1e-2


# -- single-critic reduction --------------------------------------------------------
def test_single_critic_reduces_to_vanilla_ppo():
    """Summed rewards through the pipeline equal a hand-written PPO advantage."""
    r = np.array([[[0.1, 0.2, -0.05]], [[0.0, 1.0, -0.1]], [[0.5, 0.0, 0.0]]])
    v = np.array([[0.3], [0.1], [0.2]])[:, :, None]
    d = np.array([[0.0], [0.0], [1.0]])
    cfg = rl.PpoConfig(critics="single-raw")
    buf = rl.RolloutBuffer(*(np.zeros((3, 1, 1)),) * 6, rewards=r, values=v.reshape(3, 1, 1), dones=d,
                           next_obs=np.zeros((3, 1, 1)), contact=np.zeros((3, 1, 1)), true_mode=np.zeros((3, 1)),
                           clipped=np.zeros((3, 1)), timeout_values=np.zeros((3, 1, 1)), last_values=np.array([[9.0]]))
    combined, targets = rl.buffer_advantages(cfg, buf)
    total = r.sum(axis=-1)[:, 0]
    vals = v[:, 0, 0]
    g, lam = 0.99, 0.9
    d2 = total[2] - vals[2]
    d1 = total[1] + g * vals[2] - vals[1]
    d0 = total[0] + g * vals[1] - vals[0]
    a2 = d2
    a1 = d1 + g * lam * a2
    a0 = d0 + g * lam * a1
    raw = np.array([a0, a1, a2])
    np.testing.assert_allclose(targets[:, 0], raw + vals, atol=1e-12)
    np.testing.assert_allclose(combined, (raw - raw.mean()) / (raw.std() + 1e-8), atol=1e-12)


def test_timeout_bootstraps_but_failure_does_not():
    def buffer(timeout_value):
        z = np.zeros((1, 2, 1))
        return rl.RolloutBuffer(*(z,) * 6, rewards=np.array([[[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]]), values=z,
                                dones=np.ones((1, 2)), next_obs=z, contact=z, true_mode=np.zeros((1, 2)),
                                clipped=np.zeros((1, 2)), timeout_values=np.array([[[timeout_value], [0.0]]]),
                                last_values=np.array([[50.0], [50.0]]))

    cfg = rl.PpoConfig(critics="single-raw")
    assert rl.buffer_advantages(cfg, buffer(0.0))[1][0, 0] == 1.0
    assert rl.buffer_advantages(cfg, buffer(2.0))[1][0, 0] == pytest.approx(1.0 + 0.99 * 2.0)


def test_cart_reports_timeouts():
    env_cfg = CartConfig(horizon=3)
    from dhal.envs.cart import CartEnv

    env = CartEnv(env_cfg, RngStream(0))
    env.reset()
    results = [env.step(-0.3) for _ in range(3)]
    assert [r.done for r in results] == [False, False, True] and results[-1].timeout


def test_transfer_preset_premultiplies():
    cfg = rl.PpoConfig(critics="single-transfer")
    r = np.array([[1.0, 2.0, 3.0]])
    assert cfg.group_rewards(r)[0, 0] == pytest.approx(0.35 + 0.8 + 0.75)
    assert cfg.critic_groups == ("total",)


# -- rollouts and iterations -----------------------------------------------------------
def test_rollout_buffer_shape_and_determinism():
    a, b = tiny_learner(3), tiny_learner(3)
    ba = rl.collect_rollouts(a, RngStream(1))
    bb = rl.collect_rollouts(b, RngStream(1))
    assert ba.size == 24 and ba.rewards.shape == (6, 4, 3) and ba.values.shape == (6, 4, 3)
    for name in rl.RolloutBuffer.__dataclass_fields__:
        np.testing.assert_array_equal(getattr(ba, name), getattr(bb, name))


def test_default_buffer_size():
    cfg = rl.PpoConfig()
    assert cfg.horizon * cfg.num_envs == 1536


def test_all_done_envs():
    learner = tiny_learner(horizon=1)
    learner.env_cfg.horizon = 1
    buf = rl.collect_rollouts(learner, RngStream(0))
    assert np.all(buf.dones == 1.0)
    combined, targets = rl.buffer_advantages(learner.cfg, buf)
    # the horizon bootstrap is ignored; time-limit cuts bootstrap from V(s_{t+1}) instead
    assert np.all(buf.timeout_values != 0)
    want = buf.rewards + learner.cfg.gamma * buf.timeout_values
    np.testing.assert_allclose(targets, want.reshape(-1, 3), atol=1e-12)


def test_ppo_only_update_leaves_selector_unchanged():
    learner = tiny_learner(1)
    before = {n: learner.dha.params[n].data.copy() for n in learner.dha.params.names("selector")}
    enc_before = learner.dha.params["enc0.head.0.weight"].data.copy()
    rl.train_iteration(learner, dha_updates=False)
    for n, v in before.items():
        np.testing.assert_array_equal(learner.dha.params[n].data, v)
    # the encoder is trained through z even without the DHA step
    assert not np.array_equal(learner.dha.params["enc0.head.0.weight"].data, enc_before) or learner.dha.num_modes > 1


def test_dha_step_changes_selector():
    learner = tiny_learner(1)
    last = f"selector.{len(TINY_DHA.selector_hidden)}.weight"
    before = learner.dha.params[last].data.copy()
    m = rl.train_iteration(learner)
    assert not np.array_equal(learner.dha.params[last].data, before)
    assert m["dha_mse"] > 0


def test_metrics_determinism():
    a, b = tiny_learner(5), tiny_learner(5)
    ma = [rl.train_iteration(a) for _ in range(2)]
    mb = [rl.train_iteration(b) for _ in range(2)]
    assert ma == mb
    assert {"return_total", "return_glide", "return_push", "return_reg", "clip_rate", "kl", "lr", "mode_hist"} <= set(ma[0])


def test_beta_never_clips_gaussian_does():
    beta = tiny_learner(2, num_envs=8)
    buf = rl.collect_rollouts(beta, RngStream(0))
    assert buf.clipped.mean() == 0.0 and np.all(np.abs(buf.action) < 1.0)
    gauss = tiny_learner(2, num_envs=8, policy="gaussian")
    gbuf = rl.collect_rollouts(gauss, RngStream(0))
    assert gbuf.clipped.mean() > 0.0


def test_beta_actor_uses_softplus_offset():
    ac = ActorCritic(3, 1, 0.5, ("total",), actor_hidden=(4,), critic_hidden=(4,)).init(RngStream(0))
    for name in ac.params.names("actor.1"):
        ac.params[name].data[...] = 0.0
    dist = ac.distribution(np.zeros((2, 3)))
    np.testing.assert_allclose(dist.beta.alpha.data, np.log(2) + 1 + 1e-6, rtol=1e-6)
    assert D.beta_mean_action(dist.beta)[0, 0] == pytest.approx(0.0)


def test_learner_checkpoint_round_trip(tmp_path):
    learner = tiny_learner(4)
    rl.train_iteration(learner)
    rl.save_learner(tmp_path / "p.bin", learner)
    back = rl.load_learner(tmp_path / "p.bin")
    assert back.iteration == 1 and back.ppo_opt.lr == learner.ppo_opt.lr
    for n, p in learner.ac.params.items():
        np.testing.assert_array_equal(back.ac.params[n].data, p.data)


def test_metrics_log_round_trip(tmp_path):
    log = rl.MetricsLog(tmp_path / "m" / "metrics.jsonl")
    log.append({"iter": 0, "x": 1.5})
    log.append({"iter": 1, "x": 2.5})
    assert rl.read_metrics(log.path) == [{"iter": 0, "x": 1.5}, {"iter": 1, "x": 2.5}]
    log.path.write_text('{"iter": 0}\nnot json\n')
    with pytest.raises(ValueError, match="line 2"):
        rl.read_metrics(log.path)
