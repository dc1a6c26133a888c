"""GAE oracle, PPO gradient checks, rollout contracts, training determinism."""

import numpy as np
import pytest
import torch

from forgebody.env import TaskConfig, VecEnv
from forgebody.learn import (RolloutBatch, TrainConfig, collect_rollout, gae,
                             ppo_loss, ppo_update, train)
from forgebody.model import load_model, default_model_path
from forgebody.policy import PolicyBundle, PolicyNets


def _random_batch(rng, T=12, B=5, with_bootstrap=True):
    dones = rng.random((T, B)) < 0.15
    timeouts = dones & (rng.random((T, B)) < 0.5)
    return RolloutBatch(
        x=np.zeros((T, B, 4), dtype=np.float32),
        e_norm=np.zeros((T, B, 2), dtype=np.float32),
        e_hat_n=np.zeros((T, B, 2), dtype=np.float32),
        actions=np.zeros((T, B, 2)),
        mu=np.zeros((T, B, 2)),
        old_log_std=np.zeros(2),
        logp=np.zeros((T, B)),
        values=rng.normal(0, 1, (T, B)),
        rewards=rng.normal(0, 1, (T, B)),
        dones=dones,
        timeouts=timeouts,
        bootstrap=rng.normal(0, 1, (T, B)) * timeouts if with_bootstrap else np.zeros((T, B)),
        last_values=rng.normal(0, 1, B),
        infos={},
    )


def _gae_bruteforce(batch, gamma, lam):
    """Independent double-loop evaluation of A_t = sum_k (gamma lam)^k delta_{t+k}."""
    T, B = batch.rewards.shape
    adv = np.zeros((T, B))
    for b in range(B):
        for t in range(T):
            acc = 0.0
            factor = 1.0
            for k in range(t, T):
                if batch.dones[k, b]:
                    v_next = batch.bootstrap[k, b] if batch.timeouts[k, b] else 0.0
                else:
                    v_next = batch.last_values[b] if k == T - 1 else batch.values[k + 1, b]
                delta = batch.rewards[k, b] + gamma * v_next - batch.values[k, b]
                acc += factor * delta
                if batch.dones[k, b]:
                    break
                factor *= gamma * lam
            adv[t, b] = acc
    return adv


def test_gae_matches_bruteforce():
    rng = np.random.default_rng(0)
    for trial in range(5):
        batch = _random_batch(rng)
        adv, returns = gae(batch, 0.99, 0.95, normalize=False)
        expected = _gae_bruteforce(batch, 0.99, 0.95)
        np.testing.assert_allclose(adv, expected, atol=1e-6)
        np.testing.assert_allclose(returns, expected + batch.values, atol=1e-6)


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(1)
    batch = _random_batch(rng)
    adv, _ = gae(batch, 0.99, 0.0, normalize=False)
    T, B = batch.rewards.shape
    for t in range(T):
        v_next = batch.last_values if t == T - 1 else batch.values[t + 1]
        v_next = np.where(batch.dones[t],
                          np.where(batch.timeouts[t], batch.bootstrap[t], 0.0), v_next)
        delta = batch.rewards[t] + 0.99 * v_next - batch.values[t]
        np.testing.assert_allclose(adv[t], delta, atol=1e-12)


def test_gae_gamma_zero_returns_are_rewards():
    rng = np.random.default_rng(2)
    batch = _random_batch(rng)
    _, returns = gae(batch, 0.0, 0.95, normalize=False)
    np.testing.assert_allclose(returns, batch.rewards, atol=1e-12)


def test_gae_normalization():
    rng = np.random.default_rng(3)
    batch = _random_batch(rng)
    adv, _ = gae(batch, 0.99, 0.95)
    assert abs(adv.mean()) < 1e-6
    assert abs(adv.std() - 1.0) < 1e-6


def test_gae_no_credit_across_episode_boundary():
    rng = np.random.default_rng(4)
    batch = _random_batch(rng)
    batch.dones[:] = False
    batch.timeouts[:] = False
    batch.dones[6, :] = True  # failure boundary at t = 6
    adv1, _ = gae(batch, 0.99, 0.95, normalize=False)
    batch2 = _random_batch(rng)
    for name in ("x", "e_norm", "actions", "logp", "values", "dones", "timeouts",
                 "bootstrap", "last_values"):
        setattr(batch2, name, getattr(batch, name))
    batch2.rewards = batch.rewards.copy()
    batch2.rewards[7:] += 100.0  # post-boundary rewards
    adv2, _ = gae(batch2, 0.99, 0.95, normalize=False)
    np.testing.assert_allclose(adv1[:7], adv2[:7], atol=1e-12)


# ---------------------------------------------------------------------------
# PPO loss gradients vs finite differences (tiny nets)

def _tiny_setup(seed=0):
    torch.manual_seed(seed)
    nets = PolicyNets(flat_dim=6, act_dim=2, priv_dim=3,
                      estimator_hidden=(8,), actor_hidden=(8,), critic_hidden=(8,))
    nets.double()
    rng = np.random.default_rng(seed)
    N = 16
    x = torch.tensor(rng.normal(0, 1, (N, 6)))
    e = torch.tensor(rng.normal(0, 1, (N, 3)))
    actions = torch.tensor(rng.normal(0, 1, (N, 2)))
    # keep the probability ratios well away from the clip kinks so central
    # differences see a smooth objective
    with torch.no_grad():
        e_hat = nets.estimator(x)
        mu = nets.actor(torch.cat([x, e_hat], dim=-1))
        std = nets.log_std.exp()
        logp = (-0.5 * ((actions - mu) / std) ** 2 - nets.log_std
                - 0.5 * np.log(2 * np.pi)).sum(-1)
    offsets = torch.tensor(np.resize([0.30, 0.09, -0.05, -0.40], N))
    old_logp = logp + offsets
    adv = torch.tensor(rng.normal(0, 1, N))
    returns = torch.tensor(rng.normal(0, 1, N))
    return nets, (x, e, actions, old_logp, adv, returns)


def test_ppo_gradients_match_finite_differences():
    nets, args = _tiny_setup()

    def loss_fn():
        loss, _ = ppo_loss(nets, *args, clip_eps=0.2, value_coef=0.7,
                           entropy_coef=0.01, estimator_coef=1.3,
                           detach_estimator=False)
        return loss

    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(9)
    eps = 1e-6
    checked = 0
    for p in nets.parameters():
        grad = p.grad.detach().clone().reshape(-1)
        flat = p.data.reshape(-1)
        for idx in rng.choice(len(flat), size=min(4, len(flat)), replace=False):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = loss_fn().item()
            flat[idx] = orig - eps
            down = loss_fn().item()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            scale = max(abs(fd), abs(grad[idx].item()), 1e-8)
            assert abs(fd - grad[idx].item()) / scale < 1e-4, \
                f"grad mismatch: analytic {grad[idx].item():.8g} fd {fd:.8g}"
            checked += 1
    assert checked > 30


def test_estimator_gradient_routing():
    """With detaching on, estimator grads come from the supervised loss alone."""
    nets, args = _tiny_setup(5)
    loss, _ = ppo_loss(nets, *args, clip_eps=0.2, value_coef=0.7,
                       entropy_coef=0.01, estimator_coef=1.3)
    loss.backward()
    routed = [p.grad.detach().clone() for p in nets.estimator.parameters()]
    nets.zero_grad()
    x, e = args[0], args[1]
    sup = 1.3 * (nets.estimator(x) - e).pow(2).mean()
    sup.backward()
    for got, p in zip(routed, nets.estimator.parameters()):
        assert torch.allclose(got, p.grad, atol=1e-12)


def test_zero_advantage_freezes_policy_mean():
    nets, (x, e, actions, old_logp, adv, returns) = _tiny_setup(1)
    adv = torch.zeros_like(adv)
    loss, _ = ppo_loss(nets, x, e, actions, old_logp, adv, returns,
                       clip_eps=0.2, value_coef=1.0, entropy_coef=0.0,
                       estimator_coef=1.0)
    loss.backward()
    for p in nets.actor.parameters():
        assert p.grad is None or p.grad.abs().max().item() < 1e-12
    assert nets.log_std.grad is None or nets.log_std.grad.abs().max().item() < 1e-12


def test_ratio_clipping_activates():
    nets, (x, e, actions, old_logp, adv, returns) = _tiny_setup(2)
    # force large log-ratios by shifting old_logp
    shifted = old_logp - np.log(1.5)
    _, stats = ppo_loss(nets, x, e, actions, shifted, adv, returns,
                        clip_eps=0.2, value_coef=1.0, entropy_coef=0.0,
                        estimator_coef=1.0)
    assert stats["clip_frac"] > 0.5


def test_estimator_loss_decreases_supervised():
    torch.manual_seed(3)
    nets = PolicyNets(flat_dim=12, act_dim=2, priv_dim=3,
                      estimator_hidden=(16, 8), actor_hidden=(8,), critic_hidden=(8,))
    rng = np.random.default_rng(3)
    x = torch.tensor(rng.normal(0, 1, (256, 12)), dtype=torch.float32)
    W = rng.normal(0, 1, (12, 3))
    e = torch.tensor(np.tanh(rng.normal(0, 1, (256, 3)) * 0.1 + x.numpy() @ W * 0.3),
                     dtype=torch.float32)
    opt = torch.optim.Adam(nets.estimator.parameters(), lr=1e-3)
    losses = []
    for _ in range(50):
        pred = nets.estimator(x)
        loss = (pred - e).pow(2).mean()
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 47, f"estimator loss not decreasing: {losses[:5]} ... {losses[-5:]}"
    assert losses[-1] < 0.5 * losses[0]


# ---------------------------------------------------------------------------
# rollouts

@pytest.fixture(scope="module")
def pendulum_setup():
    cfg = TrainConfig.from_json("configs/smoke_pendulum.json")
    cfg.n_envs = 8
    model = load_model(cfg.model_path)
    return cfg, model


def test_rollout_transition_count(pendulum_setup):
    cfg, model = pendulum_setup
    env = VecEnv(model, cfg.task, 8, seed=0)
    bundle = PolicyBundle.initial(model, seed=0)
    gen = torch.Generator().manual_seed(0)
    batch = collect_rollout(env, bundle, 24, gen)
    assert batch.rewards.shape == (24, 8)
    assert batch.actions.shape == (24, 8, 1)
    assert batch.x.shape == (24, 8, 330)


def test_rollout_reset_contract(pendulum_setup):
    cfg, model = pendulum_setup
    task = TaskConfig.from_dict({**{}})
    env = VecEnv(model, cfg.task, 4, seed=0)
    env.steps[:] = env.max_steps - 3  # force imminent timeout
    bundle = PolicyBundle.initial(model, seed=0)
    gen = torch.Generator().manual_seed(0)
    batch = collect_rollout(env, bundle, 8, gen)
    t_done, b_done = np.nonzero(batch.dones)
    assert len(t_done) >= 4  # every env timed out once
    assert batch.timeouts[batch.dones].all()  # pendulum cannot fail
    assert (batch.bootstrap[batch.dones & batch.timeouts] != 0).any()
    # after a done, the env starts a fresh episode (step counter restarted)
    assert (env.steps < env.max_steps).all()


def test_rollout_deterministic(pendulum_setup):
    cfg, model = pendulum_setup

    def run():
        env = VecEnv(model, cfg.task, 8, seed=3)
        bundle = PolicyBundle.initial(model, seed=3)
        gen = torch.Generator().manual_seed(4)
        return collect_rollout(env, bundle, 16, gen)

    b1, b2 = run(), run()
    assert np.array_equal(b1.x, b2.x)
    assert np.array_equal(b1.actions, b2.actions)
    assert np.array_equal(b1.rewards, b2.rewards)


def test_ppo_update_aborts_on_nonfinite(pendulum_setup):
    cfg, model = pendulum_setup
    env = VecEnv(model, cfg.task, 8, seed=0)
    bundle = PolicyBundle.initial(model, seed=0)
    gen = torch.Generator().manual_seed(0)
    batch = collect_rollout(env, bundle, 8, gen)
    batch.rewards[0, 0] = np.nan
    before = {k: v.clone() for k, v in bundle.nets.state_dict().items()}
    opt = torch.optim.Adam(bundle.nets.parameters(), lr=1e-3)
    cfg8 = TrainConfig.from_json("configs/smoke_pendulum.json")
    cfg8.n_envs = 8
    cfg8.horizon = 8
    stats = ppo_update(bundle, opt, batch, cfg8, gen)
    assert stats["aborted"] == 1.0
    for k, v in bundle.nets.state_dict().items():
        assert torch.equal(v, before[k])


# ---------------------------------------------------------------------------
# training loop + resume determinism

def _metrics_rows(path):
    import csv
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_resume_determinism(tmp_path, pendulum_setup):
    cfg, model = pendulum_setup
    base = TrainConfig.from_json("configs/smoke_pendulum.json")
    base.n_envs = 8
    base.horizon = 8
    base.updates = 4
    base.checkpoint_every = 2
    base.torch_threads = 1

    train(base, tmp_path / "full")
    full = _metrics_rows(tmp_path / "full" / "metrics.csv")

    base2 = TrainConfig.from_json("configs/smoke_pendulum.json")
    base2.n_envs = 8
    base2.horizon = 8
    base2.updates = 2
    base2.checkpoint_every = 2
    base2.torch_threads = 1
    train(base2, tmp_path / "part")
    base2.updates = 4
    train(base2, tmp_path / "part", resume=True)
    part = _metrics_rows(tmp_path / "part" / "metrics.csv")

    assert len(full) == len(part) == 4
    skip = {"wall_time"}
    for rf, rp in zip(full, part):
        for col in rf:
            if col in skip:
                continue
            assert rf[col] == rp[col], f"update {rf['update']} column {col}: " \
                                       f"{rf[col]} != {rp[col]}"


def test_metrics_row_count(tmp_path, pendulum_setup):
    cfg, model = pendulum_setup
    base = TrainConfig.from_json("configs/smoke_pendulum.json")
    base.n_envs = 8
    base.horizon = 8
    base.updates = 3
    base.checkpoint_every = 10
    train(base, tmp_path / "m")
    rows = _metrics_rows(tmp_path / "m" / "metrics.csv")
    assert len(rows) == 3
    assert (tmp_path / "m" / "latest.ckpt").exists()
