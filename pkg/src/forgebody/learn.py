"""Rollout collection, GAE, PPO with a concurrent supervised estimator loss.

The actor consumes the estimator output with gradients blocked, so the
estimator is shaped only by its supervised loss against the simulator's
privileged state; actor and critic train with clipped-surrogate PPO.
Training is single-context and fully deterministic under a fixed seed;
resume restores environment, rng, optimizer and normalizer state exactly.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .env import TaskConfig, VecEnv
from .model import RobotModel, load_model
from .policy import PolicyBundle, load_checkpoint, save_checkpoint


@dataclass
class TrainConfig:
    model_path: str = "models/b1z1_planar.json"
    n_envs: int = 256
    horizon: int = 24
    updates: int = 1500
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    learning_rate: float = 3e-4
    desired_kl: float = 0.01        # adaptive lr target; 0 disables the schedule
    lr_bounds: tuple[float, float] = (1e-5, 1e-2)
    epochs: int = 5
    minibatches: int = 4
    value_coef: float = 1.0
    entropy_coef: float = 0.0
    estimator_coef: float = 1.0
    max_grad_norm: float = 1.0
    seed: int = 0
    torch_threads: int = 0          # 0: leave torch default
    checkpoint_every: int = 100
    arch: dict | None = None        # hidden sizes override (tests)
    task: TaskConfig = field(default_factory=TaskConfig)

    def __post_init__(self):
        samples = self.n_envs * self.horizon
        if samples % self.minibatches:
            raise ValueError("horizon * n_envs must divide into minibatches")
        for name in ("gamma", "lam", "clip_eps", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        d = json.loads(Path(path).read_text())
        task = TaskConfig.from_dict(d.pop("task", {}))
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown training config key(s): {sorted(bad)}")
        if "lr_bounds" in d:
            d["lr_bounds"] = tuple(d["lr_bounds"])
        return cls(task=task, **d)

    def to_json(self, path: str | Path):
        d = asdict(self)
        Path(path).write_text(json.dumps(d, indent=2))


@dataclass
class RolloutBatch:
    x: np.ndarray           # (T, B, flat) float32 normalized history, as seen at collection
    e_norm: np.ndarray      # (T, B, priv) float32 normalized privileged state
    e_hat_n: np.ndarray     # (T, B, priv) float32 estimator output fed to the actor
    actions: np.ndarray     # (T, B, act)
    mu: np.ndarray          # (T, B, act) policy mean at collection
    old_log_std: np.ndarray # (act,) log std at collection
    logp: np.ndarray        # (T, B)
    values: np.ndarray      # (T, B)
    rewards: np.ndarray     # (T, B)
    dones: np.ndarray       # (T, B) bool: failure or timeout
    timeouts: np.ndarray    # (T, B) bool
    bootstrap: np.ndarray   # (T, B) value of the pre-reset next state (timeout rows)
    last_values: np.ndarray # (B,)
    infos: dict


def _values(bundle: PolicyBundle, hist: np.ndarray, e: np.ndarray) -> np.ndarray:
    x = bundle.normalize_history(hist)
    en = torch.from_numpy(bundle.priv_norm.normalize(e).astype(np.float32))
    with torch.no_grad():
        return bundle.nets.critic(torch.cat([x, en], dim=-1))[:, 0].numpy().astype(np.float64)


def collect_rollout(env: VecEnv, bundle: PolicyBundle, horizon: int,
                    generator: torch.Generator, update_norm: bool = True) -> RolloutBatch:
    """Gather horizon x n_envs transitions; terminated envs reset mid-rollout."""
    B = env.B
    flat = bundle.flat_dim
    out = RolloutBatch(
        x=np.zeros((horizon, B, flat), dtype=np.float32),
        e_norm=np.zeros((horizon, B, bundle.priv_dim), dtype=np.float32),
        e_hat_n=np.zeros((horizon, B, bundle.priv_dim), dtype=np.float32),
        actions=np.zeros((horizon, B, bundle.act_dim)),
        mu=np.zeros((horizon, B, bundle.act_dim)),
        old_log_std=bundle.nets.log_std.detach().numpy().copy(),
        logp=np.zeros((horizon, B)),
        values=np.zeros((horizon, B)),
        rewards=np.zeros((horizon, B)),
        dones=np.zeros((horizon, B), dtype=bool),
        timeouts=np.zeros((horizon, B), dtype=bool),
        bootstrap=np.zeros((horizon, B)),
        last_values=np.zeros(B),
        infos={},
    )
    sums: dict[str, float] = {}
    force_err_num = force_err_den = 0.0
    pos_err_num = pos_err_den = 0.0
    est_err = 0.0
    terms = timeouts_n = 0

    for t in range(horizon):
        hist_t = env.hist_flat()
        e_t = env.privileged()
        if update_norm:
            bundle.obs_norm.update(env.history[:, -1, :])
            bundle.priv_norm.update(e_t)
        x = bundle.normalize_history(hist_t)
        en = torch.from_numpy(bundle.priv_norm.normalize(e_t).astype(np.float32))
        with torch.no_grad():
            e_hat_n = bundle.nets.estimator(x)
            mu = bundle.nets.actor(torch.cat([x, e_hat_n], dim=-1))
            std = bundle.nets.log_std.exp().expand_as(mu)
            noise = torch.randn(mu.shape, generator=generator)
            action = mu + std * noise
            logp = (-0.5 * noise**2 - bundle.nets.log_std
                    - 0.5 * np.log(2 * np.pi)).sum(-1)
            value = bundle.nets.critic(torch.cat([x, en], dim=-1))[:, 0]

        act_np = action.numpy().astype(np.float64)
        _, reward, done, timeout, info = env.step(act_np)

        out.x[t] = x.numpy()
        out.e_norm[t] = en.numpy()
        out.e_hat_n[t] = e_hat_n.numpy()
        out.actions[t] = act_np
        out.mu[t] = mu.numpy()
        out.logp[t] = logp.numpy()
        out.values[t] = value.numpy()
        out.rewards[t] = reward
        out.dones[t] = done
        out.timeouts[t] = timeout
        if timeout.any():
            vb = _values(bundle, info["final_hist"], info["final_e"])
            out.bootstrap[t, np.flatnonzero(done)[timeout[done]]] = \
                vb[timeout[done]]
        # monitoring
        b = info["breakdown"]
        for name in ("r_x_g", "r_f_g", "r_v_b", "swing", "stance", "r_l", "total"):
            sums[name] = sums.get(name, 0.0) + float(np.mean(getattr(b, name)))
        fmask = env.c_f == 1
        if fmask.any():
            force_err_num += float(np.linalg.norm(
                info["measured_force"][fmask] - env.F_cmd[fmask], axis=1).sum())
            force_err_den += int(fmask.sum())
        pmask = ~fmask
        if pmask.any():
            from .tasking import polar_to_xy
            pos_err_num += float(np.linalg.norm(
                env.grip_task[pmask] - polar_to_xy(env.p_cmd[pmask]), axis=1).sum())
            pos_err_den += int(pmask.sum())
        e_hat = bundle.priv_norm.denormalize(e_hat_n.numpy().astype(np.float64))
        est_err += float(np.linalg.norm(e_hat[:, 5:7] - e_t[:, 5:7], axis=1).mean())
        terms += int((done & ~timeout).sum())
        timeouts_n += int(timeout.sum())

    out.last_values = _values(bundle, env.hist_flat(), env.privileged())
    n = horizon
    out.infos = {f"mean_{k}": v / n for k, v in sums.items()}
    out.infos["force_err"] = force_err_num / max(force_err_den, 1)
    out.infos["pos_err"] = pos_err_num / max(pos_err_den, 1)
    out.infos["est_force_err"] = est_err / n
    out.infos["term_rate"] = terms / (n * B)
    out.infos["timeout_rate"] = timeouts_n / (n * B)
    return out


def gae(batch: RolloutBatch, gamma: float, lam: float, normalize: bool = True):
    """Generalized advantage estimation with episode-boundary masking.

    Timeout steps bootstrap from the pre-reset state's value; failures do
    not. Returns (advantages, returns), both (T, B); advantages are
    batch-normalized unless ``normalize=False``.
    """
    T, B = batch.rewards.shape
    adv = np.zeros((T, B))
    acc = np.zeros(B)
    for t in reversed(range(T)):
        v_next = batch.last_values if t == T - 1 else batch.values[t + 1]
        v_next = np.where(batch.dones[t],
                          np.where(batch.timeouts[t], batch.bootstrap[t], 0.0),
                          v_next)
        delta = batch.rewards[t] + gamma * v_next - batch.values[t]
        acc = delta + gamma * lam * (~batch.dones[t]) * acc
        adv[t] = acc
    returns = adv + batch.values
    if not normalize:
        return adv, returns
    normed = (adv - adv.mean()) / (adv.std() + 1e-8)
    return normed, returns


def ppo_loss(nets, x: torch.Tensor, e_norm: torch.Tensor, actions: torch.Tensor,
             old_logp: torch.Tensor, adv: torch.Tensor, returns: torch.Tensor,
             clip_eps: float, value_coef: float, entropy_coef: float,
             estimator_coef: float, detach_estimator: bool = True):
    """Clipped-surrogate PPO loss + value MSE + supervised estimator MSE.

    Gradients are blocked from the policy objective into the estimator (the
    actor sees a detached estimate), so the estimator trains on its
    supervised loss alone; ``detach_estimator=False`` exists for gradient
    checks against the fully differentiable objective.
    """
    e_hat = nets.estimator(x)
    actor_est = e_hat.detach() if detach_estimator else e_hat
    mu = nets.actor(torch.cat([x, actor_est], dim=-1))
    log_std = nets.log_std
    std = log_std.exp()
    logp = (-0.5 * ((actions - mu) / std) ** 2 - log_std
            - 0.5 * float(np.log(2 * np.pi))).sum(-1)
    ratio = (logp - old_logp).exp()
    surr = ratio * adv
    clipped = torch.clamp(ratio, 1 - clip_eps, 1 + clip_eps) * adv
    policy_loss = -torch.min(surr, clipped).mean()
    entropy = (log_std + 0.5 * float(np.log(2 * np.pi * np.e))).sum()

    value = nets.critic(torch.cat([x, e_norm], dim=-1))[:, 0]
    value_loss = (value - returns).pow(2).mean()
    est_loss = (e_hat - e_norm).pow(2).mean()

    loss = (policy_loss + value_coef * value_loss + estimator_coef * est_loss
            - entropy_coef * entropy)
    with torch.no_grad():
        kl = (old_logp - logp).mean()
        clip_frac = ((ratio - 1.0).abs() > clip_eps).float().mean()
    stats = {"policy_loss": policy_loss.item(), "value_loss": value_loss.item(),
             "estimator_loss": est_loss.item(), "kl": kl.item(),
             "clip_frac": clip_frac.item()}
    return loss, stats


def _gaussian_kl(mu_old: torch.Tensor, log_std_old: torch.Tensor,
                 mu_new: torch.Tensor, log_std_new: torch.Tensor) -> float:
    """Mean KL(old || new) for diagonal Gaussians."""
    var_old = (2 * log_std_old).exp()
    var_new = (2 * log_std_new).exp()
    kl = (log_std_new - log_std_old
          + (var_old + (mu_old - mu_new) ** 2) / (2 * var_new) - 0.5)
    return kl.sum(-1).mean().item()


def ppo_update(bundle: PolicyBundle, optimizer: torch.optim.Optimizer,
               batch: RolloutBatch, cfg: TrainConfig,
               generator: torch.Generator) -> dict:
    """One PPO update over the batch: epochs x minibatches gradient steps.

    When ``desired_kl`` is set, the learning rate follows the measured policy
    KL (halved when the step overshoots twice the target, raised when it
    undershoots half of it), which keeps long runs from destroying the policy
    in one violent update. A non-finite loss aborts the update and restores
    the previous parameters.
    """
    adv, returns = gae(batch, cfg.gamma, cfg.lam)
    T, B = batch.rewards.shape
    N = T * B
    x_all = torch.from_numpy(batch.x.reshape(N, -1))
    e_norm = torch.from_numpy(batch.e_norm.reshape(N, -1))
    e_hat_old = torch.from_numpy(batch.e_hat_n.reshape(N, -1))
    actions = torch.from_numpy(batch.actions.reshape(N, -1).astype(np.float32))
    mu_old_all = torch.from_numpy(batch.mu.reshape(N, -1).astype(np.float32))
    log_std_old = torch.from_numpy(batch.old_log_std.astype(np.float32))
    old_logp = torch.from_numpy(batch.logp.reshape(N).astype(np.float32))
    adv_t = torch.from_numpy(adv.reshape(N).astype(np.float32))
    ret_t = torch.from_numpy(returns.reshape(N).astype(np.float32))

    before = {k: v.detach().clone() for k, v in bundle.nets.state_dict().items()}
    opt_before = optimizer.state_dict()
    lr = optimizer.param_groups[0]["lr"]
    mb = N // cfg.minibatches
    agg: dict[str, float] = {}
    steps = 0
    for _ in range(cfg.epochs):
        perm = torch.randperm(N, generator=generator)
        for k in range(cfg.minibatches):
            idx = perm[k * mb:(k + 1) * mb]
            loss, stats = ppo_loss(
                bundle.nets, x_all[idx], e_norm[idx], actions[idx], old_logp[idx],
                adv_t[idx], ret_t[idx], cfg.clip_eps, cfg.value_coef,
                cfg.entropy_coef, cfg.estimator_coef)
            if not torch.isfinite(loss):
                bundle.nets.load_state_dict(before)
                optimizer.load_state_dict(opt_before)
                return {"aborted": 1.0, "lr": lr, **{k: float("nan") for k in
                        ("policy_loss", "value_loss", "estimator_loss", "kl", "clip_frac")}}
            if cfg.desired_kl:
                # measure actor drift with the estimates it actually saw at
                # collection: estimator learning must not throttle the lr
                with torch.no_grad():
                    mu_new = bundle.nets.actor(
                        torch.cat([x_all[idx], e_hat_old[idx]], dim=-1))
                    kl = _gaussian_kl(mu_old_all[idx], log_std_old,
                                      mu_new, bundle.nets.log_std)
                if kl > 2.0 * cfg.desired_kl:
                    lr = max(cfg.lr_bounds[0], lr / 1.5)
                elif kl < cfg.desired_kl / 2.0 and kl >= 0.0:
                    lr = min(cfg.lr_bounds[1], lr * 1.5)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                stats["kl"] = kl
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(bundle.nets.parameters(), cfg.max_grad_norm)
            optimizer.step()
            for k2, v2 in stats.items():
                agg[k2] = agg.get(k2, 0.0) + v2
            steps += 1
    out = {k: v / steps for k, v in agg.items()}
    out["aborted"] = 0.0
    out["lr"] = lr
    return out


METRIC_COLUMNS = [
    "update", "wall_time", "mean_reward", "mean_r_x_g", "mean_r_f_g", "mean_r_v_b",
    "mean_swing", "mean_stance", "mean_r_l", "force_err", "pos_err", "est_force_err",
    "term_rate", "timeout_rate", "policy_loss", "value_loss", "estimator_loss",
    "kl", "clip_frac", "action_std", "lr",
]


def train(cfg: TrainConfig, out_dir: str | Path, resume: bool = False,
          log_fn=None) -> Path:
    """Run PPO training; writes checkpoints + metrics.csv under out_dir.

    Returns the path of the final checkpoint. Interrupted runs restart
    exactly via ``resume=True`` (environment, rng, optimizer and normalizer
    state are restored bit-for-bit).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.torch_threads:
        torch.set_num_threads(cfg.torch_threads)
    torch.manual_seed(cfg.seed)

    model = load_model(cfg.model_path)
    env = VecEnv(model, cfg.task, cfg.n_envs, seed=cfg.seed)
    bundle = PolicyBundle.initial(model, seed=cfg.seed, arch=cfg.arch)
    optimizer = torch.optim.Adam(bundle.nets.parameters(), lr=cfg.learning_rate)
    generator = torch.Generator().manual_seed(cfg.seed + 1)
    start_update = 0
    metrics_path = out / "metrics.csv"
    cfg.to_json(out / "train_config.json")

    sidecar = out / "resume.pt"
    if resume and sidecar.exists():
        blob = torch.load(sidecar, weights_only=False)
        bundle = load_checkpoint(out / "latest.ckpt", model)
        optimizer = torch.optim.Adam(bundle.nets.parameters(), lr=cfg.learning_rate)
        optimizer.load_state_dict(blob["optimizer"])
        generator.set_state(blob["generator"])
        env.restore(blob["env"])
        start_update = blob["update"]
        # running statistics live in float64; the checkpoint stores float32
        norm = blob["norm"]
        bundle.obs_norm.mean, bundle.obs_norm.var, bundle.obs_norm.count = norm["obs"]
        bundle.priv_norm.mean, bundle.priv_norm.var, bundle.priv_norm.count = norm["priv"]

    new_file = not metrics_path.exists() or start_update == 0
    mode = "w" if new_file else "a"
    t0 = time.time()
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(METRIC_COLUMNS)
        for update in range(start_update, cfg.updates):
            batch = collect_rollout(env, bundle, cfg.horizon, generator)
            stats = ppo_update(bundle, optimizer, batch, cfg, generator)
            row = {
                "update": update,
                "wall_time": round(time.time() - t0, 2),
                "mean_reward": batch.infos["mean_total"],
                "mean_r_x_g": batch.infos["mean_r_x_g"],
                "mean_r_f_g": batch.infos["mean_r_f_g"],
                "mean_r_v_b": batch.infos["mean_r_v_b"],
                "mean_swing": batch.infos["mean_swing"],
                "mean_stance": batch.infos["mean_stance"],
                "mean_r_l": batch.infos["mean_r_l"],
                "force_err": batch.infos["force_err"],
                "pos_err": batch.infos["pos_err"],
                "est_force_err": batch.infos["est_force_err"],
                "term_rate": batch.infos["term_rate"],
                "timeout_rate": batch.infos["timeout_rate"],
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "estimator_loss": stats["estimator_loss"],
                "kl": stats["kl"],
                "clip_frac": stats["clip_frac"],
                "action_std": bundle.nets.log_std.exp().mean().item(),
                "lr": stats.get("lr", cfg.learning_rate),
            }
            writer.writerow([row[c] for c in METRIC_COLUMNS])
            fh.flush()
            if log_fn:
                log_fn(row)
            last = update == cfg.updates - 1
            if (update + 1) % cfg.checkpoint_every == 0 or last:
                save_checkpoint(bundle, out / f"update_{update + 1:06d}.ckpt")
            save_checkpoint(bundle, out / "latest.ckpt")
            torch.save({
                "optimizer": optimizer.state_dict(),
                "generator": generator.get_state(),
                "env": env.snapshot(),
                "update": update + 1,
                "norm": {
                    "obs": (bundle.obs_norm.mean.copy(), bundle.obs_norm.var.copy(),
                            bundle.obs_norm.count),
                    "priv": (bundle.priv_norm.mean.copy(), bundle.priv_norm.var.copy(),
                             bundle.priv_norm.count),
                },
            }, sidecar)
    final = out / f"update_{cfg.updates:06d}.ckpt"
    return final if final.exists() else out / "latest.ckpt"
