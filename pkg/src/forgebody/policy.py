"""Observation construction, actor/critic/estimator networks, checkpoints.

The policy consumes a 30-step history of (observation, command) entries,
flattened oldest-first. A state-estimation head predicts the privileged
state (body velocity, gripper position, external gripper force) from that
history; the actor sees the history plus the estimate, the critic sees the
history plus the true privileged state (training only).

Checkpoints are a self-describing binary: magic ``LFCP1``, a JSON metadata
block (shapes, dims, model hash, normalization layout), then little-endian
float32 tensor blobs in the declared order.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .model import RobotModel
from .tasking import CommandVector

MAGIC = b"LFCP1"
CHECKPOINT_VERSION = 1

HISTORY = 30
COMMAND_DIM = 6          # F_cmd (2), p_cmd (2), v_cmd, C_f
PRIV_DIM = 7             # body vel (3), gripper pos (2), gripper external force (2)
ACTION_SCALE = 0.25

ESTIMATOR_HIDDEN = (256, 128)
ACTOR_HIDDEN = (512, 256, 128)
CRITIC_HIDDEN = (512, 256, 128)
INIT_LOG_STD = 0.0


class CheckpointError(RuntimeError):
    pass


def obs_dim(model: RobotModel) -> int:
    """Per-step observation size: gravity (2) + feet clocks + q + qd + a_prev."""
    return 2 + len(model.foot_sites) + 3 * model.n_joints


def entry_dim(model: RobotModel) -> int:
    return obs_dim(model) + COMMAND_DIM


def flat_history_dim(model: RobotModel, history: int = HISTORY) -> int:
    return history * entry_dim(model)


def projected_gravity(pitch) -> np.ndarray:
    """World down-vector expressed in the body frame; unit norm by construction."""
    pitch = np.asarray(pitch, dtype=np.float64)
    return np.stack([-np.sin(pitch), -np.cos(pitch)], axis=-1)


def build_observation(model: RobotModel, q: np.ndarray, qd: np.ndarray,
                      theta_feet: np.ndarray, a_prev: np.ndarray) -> np.ndarray:
    """Assemble per-step observations (batched): [g_base, theta_feet, q, qd, a_prev]."""
    q = np.asarray(q, dtype=np.float64)
    qd = np.asarray(qd, dtype=np.float64)
    if not (np.isfinite(q).all() and np.isfinite(qd).all()):
        raise ValueError("non-finite state in observation")
    pitch = q[:, 2] if model.floating else np.full(q.shape[0], model.base_pitch)
    g = projected_gravity(pitch)
    nb = model.nb
    return np.concatenate([g, np.asarray(theta_feet, dtype=np.float64).reshape(q.shape[0], -1),
                           q[:, nb:], qd[:, nb:],
                           np.asarray(a_prev, dtype=np.float64)], axis=1)


def command_entry(cmd: CommandVector) -> np.ndarray:
    return np.concatenate([cmd.F_cmd, cmd.p_cmd, [cmd.v_cmd, float(cmd.C_f)]])


class HistoryBuffer:
    """Fixed-length ring of (observation + command) entries, zero-padded at reset.

    Flattening is oldest-first; the layout is recorded in the checkpoint
    metadata so serialized policies stay interpretable.
    """

    def __init__(self, entry: int, history: int = HISTORY):
        self.entry = entry
        self.history = history
        self.data = np.zeros((history, entry))

    def reset(self):
        self.data[:] = 0.0

    def push(self, obs: np.ndarray, cmd_vec: np.ndarray):
        self.data[:-1] = self.data[1:]
        self.data[-1] = np.concatenate([obs, cmd_vec])

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass
class RunningNorm:
    """Running mean/variance (Welford, batched); frozen at deployment.

    The denominator is floored so constant input dimensions (frozen clocks,
    zero privileged entries) stay near zero instead of exploding.
    """

    mean: np.ndarray
    var: np.ndarray
    count: float = 1e-4
    min_std: float = 0.01

    @classmethod
    def for_dim(cls, d: int) -> "RunningNorm":
        return cls(np.zeros(d), np.ones(d))

    def update(self, x: np.ndarray):
        x = x.reshape(-1, x.shape[-1])
        bc = x.shape[0]
        bmean = x.mean(axis=0)
        bvar = x.var(axis=0)
        delta = bmean - self.mean
        tot = self.count + bc
        self.mean = self.mean + delta * bc / tot
        m_a = self.var * self.count
        m_b = bvar * bc
        self.var = (m_a + m_b + delta**2 * self.count * bc / tot) / tot
        self.count = tot

    def _denom(self) -> np.ndarray:
        return np.maximum(np.sqrt(self.var), self.min_std)

    def normalize(self, x: np.ndarray, clip: float | None = None) -> np.ndarray:
        out = (x - self.mean) / self._denom()
        if clip is not None:
            out = np.clip(out, -clip, clip)
        return out

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self._denom() + self.mean


def _mlp(in_dim: int, hidden: tuple[int, ...], out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = in_dim
    for h in hidden:
        layers += [nn.Linear(prev, h), nn.ELU()]
        prev = h
    layers.append(nn.Linear(prev, out_dim))
    return nn.Sequential(*layers)


class PolicyNets(nn.Module):
    def __init__(self, flat_dim: int, act_dim: int, priv_dim: int = PRIV_DIM,
                 estimator_hidden=ESTIMATOR_HIDDEN, actor_hidden=ACTOR_HIDDEN,
                 critic_hidden=CRITIC_HIDDEN):
        super().__init__()
        self.estimator = _mlp(flat_dim, tuple(estimator_hidden), priv_dim)
        self.actor = _mlp(flat_dim + priv_dim, tuple(actor_hidden), act_dim)
        self.critic = _mlp(flat_dim + priv_dim, tuple(critic_hidden), 1)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(INIT_LOG_STD)))


@dataclass
class PolicyBundle:
    nets: PolicyNets
    obs_norm: RunningNorm            # per entry dim, shared across history slots
    priv_norm: RunningNorm           # estimator target normalization
    model_hash: str
    model_name: str
    q_def: np.ndarray
    joint_limits: np.ndarray
    entry: int
    history: int = HISTORY
    act_dim: int = 7
    priv_dim: int = PRIV_DIM
    sigma_a: float = ACTION_SCALE
    arch: dict = field(default_factory=lambda: {
        "estimator": list(ESTIMATOR_HIDDEN),
        "actor": list(ACTOR_HIDDEN),
        "critic": list(CRITIC_HIDDEN)})
    deployed: bool = False

    @classmethod
    def initial(cls, model: RobotModel, seed: int = 0, arch: dict | None = None) -> "PolicyBundle":
        arch = arch or {"estimator": list(ESTIMATOR_HIDDEN), "actor": list(ACTOR_HIDDEN),
                        "critic": list(CRITIC_HIDDEN)}
        e = entry_dim(model)
        torch.manual_seed(seed)
        nets = PolicyNets(HISTORY * e, model.n_joints,
                          estimator_hidden=tuple(arch["estimator"]),
                          actor_hidden=tuple(arch["actor"]),
                          critic_hidden=tuple(arch["critic"]))
        return cls(nets=nets, obs_norm=RunningNorm.for_dim(e),
                   priv_norm=RunningNorm.for_dim(PRIV_DIM),
                   model_hash=model.source_hash, model_name=model.name,
                   q_def=model.q_def.copy(), joint_limits=model.joint_limits.copy(),
                   entry=e, act_dim=model.n_joints, arch=arch)

    @property
    def flat_dim(self) -> int:
        return self.history * self.entry

    def normalize_history(self, hist: np.ndarray) -> torch.Tensor:
        """hist (..., H, E) or (..., H*E) raw -> normalized flat float32 tensor."""
        hist = np.asarray(hist)
        shaped = hist.reshape(*hist.shape[:-1], self.history, self.entry) \
            if hist.shape[-1] == self.flat_dim else hist
        normed = self.obs_norm.normalize(shaped, clip=10.0)
        flat = normed.reshape(*normed.shape[:-2], self.flat_dim)
        return torch.from_numpy(np.ascontiguousarray(flat, dtype=np.float32))


def policy_step(bundle: PolicyBundle, history: np.ndarray, deterministic: bool = True,
                generator: torch.Generator | None = None):
    """Run estimator + actor on a (batched) raw history.

    Returns ``(action, e_hat, log_prob)``; log_prob is None in deterministic
    mode. e_hat is de-normalized to physical units.
    """
    single = history.ndim == 1 or (history.ndim == 2 and history.shape[0] == bundle.history
                                   and history.shape[1] == bundle.entry)
    hist = history.reshape(1, -1) if single else history
    x = bundle.normalize_history(hist)
    if x.shape[-1] != bundle.flat_dim:
        raise CheckpointError(
            f"history dim {x.shape[-1]} incompatible with checkpoint flat dim {bundle.flat_dim}")
    with torch.no_grad():
        e_hat_n = bundle.nets.estimator(x)
        mu = bundle.nets.actor(torch.cat([x, e_hat_n], dim=-1))
        if deterministic:
            action, logp = mu, None
        else:
            std = bundle.nets.log_std.exp().expand_as(mu)
            noise = torch.randn(mu.shape, generator=generator)
            action = mu + std * noise
            logp = (-0.5 * ((action - mu) / std) ** 2 - bundle.nets.log_std
                    - 0.5 * np.log(2 * np.pi)).sum(-1)
    e_hat = bundle.priv_norm.denormalize(e_hat_n.numpy().astype(np.float64))
    act = action.numpy().astype(np.float64)
    if single:
        return act[0], e_hat[0], (None if logp is None else float(logp[0]))
    return act, e_hat, (None if logp is None else logp.numpy())


def critic_value(bundle: PolicyBundle, history: np.ndarray, e_t: np.ndarray) -> np.ndarray:
    """Critic on history + true privileged state. Training only."""
    if bundle.deployed:
        raise RuntimeError("critic_value requires the privileged state and is "
                           "unavailable on the serving path")
    single = history.ndim == 1
    hist = history.reshape(1, -1) if single else history
    e = np.asarray(e_t, dtype=np.float64).reshape(hist.shape[0], -1)
    x = bundle.normalize_history(hist)
    en = torch.from_numpy(bundle.priv_norm.normalize(e).astype(np.float32))
    with torch.no_grad():
        v = bundle.nets.critic(torch.cat([x, en], dim=-1))[:, 0]
    out = v.numpy().astype(np.float64)
    return float(out[0]) if single else out


def decode_action(a_t: np.ndarray, bundle: PolicyBundle) -> np.ndarray:
    """Joint PD targets: sigma_a * a + q_def, clamped to joint limits."""
    a = np.asarray(a_t, dtype=np.float64)
    targets = bundle.sigma_a * a + bundle.q_def
    return np.clip(targets, bundle.joint_limits[:, 0], bundle.joint_limits[:, 1])


# ---------------------------------------------------------------------------
# serialization

def _tensor_entries(bundle: PolicyBundle):
    """(name, float32 array) pairs in the canonical serialization order."""
    entries = [(f"nets.{k}", v.detach().cpu().numpy().astype(np.float32, copy=False))
               for k, v in bundle.nets.state_dict().items()]
    entries += [
        ("obs_norm.mean", bundle.obs_norm.mean.astype(np.float32)),
        ("obs_norm.var", bundle.obs_norm.var.astype(np.float32)),
        ("priv_norm.mean", bundle.priv_norm.mean.astype(np.float32)),
        ("priv_norm.var", bundle.priv_norm.var.astype(np.float32)),
    ]
    return entries


def save_checkpoint(bundle: PolicyBundle, path: str | Path):
    entries = _tensor_entries(bundle)
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_hash": bundle.model_hash,
        "model_name": bundle.model_name,
        "dims": {"entry": bundle.entry, "history": bundle.history,
                 "flat": bundle.flat_dim, "action": bundle.act_dim,
                 "priv": bundle.priv_dim},
        "arch": bundle.arch,
        "sigma_a": bundle.sigma_a,
        "q_def": bundle.q_def.tolist(),
        "joint_limits": bundle.joint_limits.tolist(),
        "norm_counts": {"obs": bundle.obs_norm.count, "priv": bundle.priv_norm.count},
        "history_layout": "oldest-first; per step [g_base, theta_feet, q, qd, a_prev, "
                          "F_cmd, p_cmd(r,theta), v_cmd, C_f]",
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in entries],
        "dtype": "<f4",
    }
    blob = io.BytesIO()
    blob.write(MAGIC)
    meta_bytes = json.dumps(meta).encode()
    blob.write(struct.pack("<I", len(meta_bytes)))
    blob.write(meta_bytes)
    for _, a in entries:
        blob.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(path).write_bytes(blob.getvalue())


def load_checkpoint(path: str | Path, model: RobotModel | None = None) -> PolicyBundle:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:len(MAGIC)]!r}; expected {MAGIC!r}")
    off = len(MAGIC)
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + meta_len > len(raw):
        raise CheckpointError("truncated metadata block")
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")

    dims = meta["dims"]
    nets = PolicyNets(dims["flat"], dims["action"], dims["priv"],
                      estimator_hidden=tuple(meta["arch"]["estimator"]),
                      actor_hidden=tuple(meta["arch"]["actor"]),
                      critic_hidden=tuple(meta["arch"]["critic"]))
    tensors = {}
    for spec in meta["tensors"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = n * 4
        if off + nbytes > len(raw):
            raise CheckpointError(f"truncated tensor data at {spec['name']!r}")
        tensors[spec["name"]] = np.frombuffer(raw, dtype="<f4", count=n,
                                              offset=off).reshape(spec["shape"])
        off += nbytes

    state = {}
    for k, v in nets.state_dict().items():
        key = f"nets.{k}"
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key!r}")
        if tuple(tensors[key].shape) != tuple(v.shape):
            raise CheckpointError(
                f"shape mismatch for {key!r}: file {tensors[key].shape}, net {tuple(v.shape)}")
        state[k] = torch.from_numpy(tensors[key].copy())
    nets.load_state_dict(state)

    counts = meta.get("norm_counts", {"obs": 1.0, "priv": 1.0})
    bundle = PolicyBundle(
        nets=nets,
        obs_norm=RunningNorm(tensors["obs_norm.mean"].astype(np.float64),
                             tensors["obs_norm.var"].astype(np.float64), counts["obs"]),
        priv_norm=RunningNorm(tensors["priv_norm.mean"].astype(np.float64),
                              tensors["priv_norm.var"].astype(np.float64), counts["priv"]),
        model_hash=meta["model_hash"], model_name=meta["model_name"],
        q_def=np.array(meta["q_def"]), joint_limits=np.array(meta["joint_limits"]),
        entry=dims["entry"], history=dims["history"], act_dim=dims["action"],
        priv_dim=dims["priv"], sigma_a=meta["sigma_a"], arch=meta["arch"])
    if model is not None and entry_dim(model) != bundle.entry:
        raise CheckpointError(
            f"checkpoint was trained for model {meta['model_name']!r} "
            f"(entry dim {bundle.entry}); runtime model {model.name!r} has "
            f"entry dim {entry_dim(model)}")
    return bundle
