"""Planar articulated rigid-body dynamics.

Minimal-coordinate model of a kinematic tree living in the x-z plane:
optional floating base (x, z, pitch) plus revolute joints. Everything is
vectorized over a leading batch axis so many independent robots can be
stepped together; the single-robot :class:`SimState` API wraps batch
size 1.

Equations of motion are assembled from link center-of-mass Jacobians:

    M(q) qdd = tau_gen - h(q, qd) + sum_i J_i^T F_i

with M = sum_l m_l Jc_l^T Jc_l + I_l ja_l^T ja_l and h the velocity-product
plus gravity bias. For a planar tree the angular Jacobian rows ja_l are
constant selectors, which keeps the bias term closed-form: the
velocity-product acceleration of any attached point is the summed
centripetal term -omega^2 r along its support chain.

Ground contact is a penalty model: one-sided normal spring-damper and a
tangential anchor spring with a Coulomb cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import RobotModel

PHYSICS_DT = 0.002
CONTROL_DECIMATION = 10
CONTROL_DT = PHYSICS_DT * CONTROL_DECIMATION
VELOCITY_GUARD = 50.0   # |qd| clamp, divergence guard


class SimDivergence(RuntimeError):
    """Simulation produced a non-finite state."""

    def __init__(self, substep: int):
        self.substep = substep
        super().__init__(f"non-finite state after substep {substep}")


@dataclass
class ExternalWrench:
    site: str
    force: np.ndarray   # world frame [N]


@dataclass
class ContactCache:
    """Per contact-site ground interaction state (forces + friction anchors)."""

    forces: np.ndarray      # (S, 2) tangent/normal force on the site [N]
    anchor: np.ndarray      # (S,) tangential anchor x position [m]
    active: np.ndarray      # (S,) bool, in contact last substep

    @classmethod
    def zero(cls, n_sites: int) -> "ContactCache":
        return cls(np.zeros((n_sites, 2)), np.zeros(n_sites), np.zeros(n_sites, dtype=bool))


@dataclass
class SimState:
    q: np.ndarray
    qd: np.ndarray
    t: float
    last_torques: np.ndarray
    contact_cache: ContactCache

    @classmethod
    def initial(cls, model: RobotModel, q: np.ndarray | None = None) -> "SimState":
        full = default_q(model) if q is None else np.asarray(q, dtype=np.float64)
        if full.shape != (model.dof,):
            raise ValueError(f"q must have shape ({model.dof},), got {full.shape}")
        return cls(full.copy(), np.zeros(model.dof), 0.0,
                   np.zeros(model.n_joints), ContactCache.zero(len(model.contact.sites)))


def default_q(model: RobotModel, base_xz: tuple[float, float] | None = None,
              pitch: float = 0.0) -> np.ndarray:
    """Full generalized coordinates for the default pose.

    For floating-base models the base height defaults to whatever places the
    lowest contact site exactly on the ground.
    """
    if not model.floating:
        return model.q_def.copy()
    q = np.concatenate([[0.0, 0.0, pitch], model.q_def])
    if base_xz is None:
        # drop the base until the lowest contact site touches z = 0
        pts = site_positions(model, q[None, :], list(model.contact.sites))[0]
        if len(pts):
            q[1] = -pts[:, 1].min()
    else:
        q[0], q[1] = base_xz
    return q


# ---------------------------------------------------------------------------
# per-model constant structure cache

class _ModelCache:
    def __init__(self, model: RobotModel):
        L = len(model.links)
        nj = model.n_joints
        self.child_of_joint = np.array([j.child for j in model.joints], dtype=np.int64)
        self.parent_of_joint = np.array([j.parent for j in model.joints], dtype=np.int64)
        self.pivots = np.array([j.pivot for j in model.joints])            # (nj, 2)
        self.coms = np.array([l.com for l in model.links])                 # (L, 2)
        self.masses = np.array([l.mass for l in model.links])              # (L,)
        self.inertias = np.array([l.inertia for l in model.links])
        self.ancestry = model.ancestry.astype(np.float64)                  # (L, nj)
        # constant angular selector rows (L, dof) and their inertia-weighted gram
        ja = np.zeros((L, model.dof))
        if model.floating:
            ja[:, 2] = 1.0
        ja[:, model.nb:] = self.ancestry
        self.ja = ja
        self.angular_mass = (ja * self.inertias[:, None]).T @ ja           # (dof, dof)
        self.contact_sites = [model.sites[s] for s in model.contact.sites]
        self.csite_links = np.array([s.link for s in self.contact_sites], dtype=np.int64)
        self.csite_offsets = np.array([s.offset for s in self.contact_sites]).reshape(-1, 2)
        self.foot_slots = np.array(
            [model.contact.sites.index(f) for f in model.contact.feet], dtype=np.int64)


_cache: dict[int, _ModelCache] = {}


def _mc(model: RobotModel) -> _ModelCache:
    c = _cache.get(id(model))
    if c is None:
        c = _ModelCache(model)
        _cache[id(model)] = c
    return c


def _perp(v: np.ndarray) -> np.ndarray:
    """90-degree counterclockwise rotation of (..., 2) vectors."""
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


# ---------------------------------------------------------------------------
# kinematics

@dataclass
class LinkPoses:
    angles: np.ndarray     # (B, L)
    origins: np.ndarray    # (B, L, 2) link frame origin, world
    omegas: np.ndarray     # (B, L) angular velocity
    origin_vel: np.ndarray # (B, L, 2)
    cos: np.ndarray
    sin: np.ndarray


def fk(model: RobotModel, q: np.ndarray, qd: np.ndarray | None = None) -> LinkPoses:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != model.dof:
        raise ValueError(f"q last dim must be {model.dof}, got {q.shape[-1]}")
    mc = _mc(model)
    B = q.shape[0]
    L = len(model.links)
    nb = model.nb
    qj = q[:, nb:]
    if model.floating:
        base_angle = q[:, 2]
    else:
        base_angle = np.full(B, model.base_pitch)
    angles = base_angle[:, None] + qj @ mc.ancestry.T          # (B, L)
    ca, sa = np.cos(angles), np.sin(angles)

    origins = np.empty((B, L, 2))
    if model.floating:
        origins[:, 0] = q[:, :2]
    else:
        origins[:, 0] = model.base_origin
    for j, joint in enumerate(model.joints):
        p, c = joint.parent, joint.child
        px, pz = joint.pivot
        origins[:, c, 0] = origins[:, p, 0] + ca[:, p] * px - sa[:, p] * pz
        origins[:, c, 1] = origins[:, p, 1] + sa[:, p] * px + ca[:, p] * pz

    if qd is None:
        omegas = np.zeros((B, L))
        ovel = np.zeros((B, L, 2))
    else:
        qd = np.asarray(qd, dtype=np.float64)
        qdj = qd[:, nb:]
        base_rate = qd[:, 2] if model.floating else np.zeros(B)
        omegas = base_rate[:, None] + qdj @ mc.ancestry.T
        ovel = np.empty((B, L, 2))
        ovel[:, 0] = qd[:, :2] if model.floating else 0.0
        for j, joint in enumerate(model.joints):
            p, c = joint.parent, joint.child
            seg = origins[:, c] - origins[:, p]
            ovel[:, c] = ovel[:, p] + omegas[:, p, None] * _perp(seg)
    return LinkPoses(angles, origins, omegas, ovel, ca, sa)


def _attached_points(model: RobotModel, poses: LinkPoses, link_ids: np.ndarray,
                     offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World positions and velocities of points fixed in link frames.

    link_ids (K,), offsets (K, 2) -> positions (B, K, 2), velocities (B, K, 2).
    """
    ca = poses.cos[:, link_ids]
    sa = poses.sin[:, link_ids]
    ox, oz = offsets[:, 0], offsets[:, 1]
    rel = np.empty((ca.shape[0], len(link_ids), 2))
    rel[..., 0] = ca * ox - sa * oz
    rel[..., 1] = sa * ox + ca * oz
    pos = poses.origins[:, link_ids] + rel
    vel = poses.origin_vel[:, link_ids] + poses.omegas[:, link_ids, None] * _perp(rel)
    return pos, vel


def site_positions(model: RobotModel, q: np.ndarray, names: list[str],
                   qd: np.ndarray | None = None):
    """World positions (B, K, 2) of named sites; velocities too when qd given."""
    poses = fk(model, q, qd)
    sites = [model.site(n) for n in names]
    link_ids = np.array([s.link for s in sites], dtype=np.int64)
    offsets = np.array([s.offset for s in sites]).reshape(-1, 2)
    pos, vel = _attached_points(model, poses, link_ids, offsets)
    if qd is None:
        return pos
    return pos, vel


def forward_kinematics(model: RobotModel, q: np.ndarray, qd: np.ndarray | None = None):
    """Poses (and velocities) for every named site of a single configuration.

    Returns ``{site: {"pos": (2,), "angle": float, "vel": (2,)}}``.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qb = q[None] if single else q
    qdb = None if qd is None else (np.asarray(qd)[None] if single else np.asarray(qd))
    poses = fk(model, qb, qdb)
    names = list(model.sites)
    sites = [model.sites[n] for n in names]
    link_ids = np.array([s.link for s in sites], dtype=np.int64)
    offsets = np.array([s.offset for s in sites]).reshape(-1, 2)
    pos, vel = _attached_points(model, poses, link_ids, offsets)
    out = {}
    for k, n in enumerate(names):
        entry = {
            "pos": pos[0, k] if single else pos[:, k],
            "angle": poses.angles[0, sites[k].link] if single else poses.angles[:, sites[k].link],
        }
        if qd is not None:
            entry["vel"] = vel[0, k] if single else vel[:, k]
        out[n] = entry
    return out


def _point_jacobians(model: RobotModel, poses: LinkPoses, link_ids: np.ndarray,
                     points: np.ndarray) -> np.ndarray:
    """Jacobians (B, K, 2, dof) of world points attached to links."""
    mc = _mc(model)
    B, K = points.shape[0], points.shape[1]
    J = np.zeros((B, K, 2, model.dof))
    if model.floating:
        J[..., 0, 0] = 1.0
        J[..., 1, 1] = 1.0
        J[:, :, :, 2] = _perp(points - poses.origins[:, 0][:, None, :])
    pivots_w = poses.origins[:, mc.child_of_joint]               # (B, nj, 2)
    diff = points[:, :, None, :] - pivots_w[:, None, :, :]       # (B, K, nj, 2)
    mask = mc.ancestry[link_ids]                                 # (K, nj)
    pj = _perp(diff) * mask[None, :, :, None]
    J[:, :, 0, model.nb:] = pj[..., 0]
    J[:, :, 1, model.nb:] = pj[..., 1]
    return J


def point_jacobian(model: RobotModel, q: np.ndarray, site: str) -> np.ndarray:
    """2 x dof Jacobian of a site: world velocity = J(q) @ qd."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qb = q[None] if single else q
    poses = fk(model, qb)
    s = model.site(site)
    link_ids = np.array([s.link], dtype=np.int64)
    pts, _ = _attached_points(model, poses, link_ids, s.offset.reshape(1, 2))
    J = _point_jacobians(model, poses, link_ids, pts)[:, 0]
    return J[0] if single else J


# ---------------------------------------------------------------------------
# dynamics

def _com_jacobian_stack(model: RobotModel, poses: LinkPoses):
    """COM positions (B, L, 2) and their Jacobians flattened to (B, 2L, dof)."""
    mc = _mc(model)
    L = len(model.links)
    link_ids = np.arange(L)
    coms, _ = _attached_points(model, poses, link_ids, mc.coms)
    Jc = _point_jacobians(model, poses, link_ids, coms)          # (B, L, 2, dof)
    return coms, Jc.reshape(Jc.shape[0], 2 * L, model.dof)


def mass_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Joint-space inertia matrix (B, dof, dof), symmetric positive definite."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qb = q[None] if single else q
    mc = _mc(model)
    poses = fk(model, qb)
    _, Jflat = _com_jacobian_stack(model, poses)
    w = np.repeat(mc.masses, 2)
    M = np.matmul(Jflat.transpose(0, 2, 1) * w[None, None, :], Jflat)
    M += mc.angular_mass
    return M[0] if single else M


def _velocity_product_accel(model: RobotModel, poses: LinkPoses, coms: np.ndarray) -> np.ndarray:
    """COM accelerations (B, L, 2) at qdd = 0 (centripetal terms only)."""
    L = len(model.links)
    acc = np.zeros((poses.angles.shape[0], L, 2))
    for j, joint in enumerate(model.joints):
        p, c = joint.parent, joint.child
        seg = poses.origins[:, c] - poses.origins[:, p]
        acc[:, c] = acc[:, p] - poses.omegas[:, p, None] ** 2 * seg
    acc -= poses.omegas[..., None] ** 2 * (coms - poses.origins)
    return acc


def bias_forces(model: RobotModel, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """h(q, qd): Coriolis/centrifugal plus gravity generalized forces (B, dof)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qb, qdb = (q[None], np.asarray(qd)[None]) if single else (q, np.asarray(qd))
    mc = _mc(model)
    poses = fk(model, qb, qdb)
    coms, Jflat = _com_jacobian_stack(model, poses)
    avp = _velocity_product_accel(model, poses, coms)
    avp[..., 1] += model.gravity           # a_vp - g_vec, with g_vec = (0, -g)
    weighted = (avp * mc.masses[None, :, None]).reshape(avp.shape[0], -1, 1)
    h = np.matmul(Jflat.transpose(0, 2, 1), weighted)[..., 0]
    return h[0] if single else h


def gravity_torques(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Actuated-joint torques that statically balance gravity (base held fixed)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qb = q[None] if single else q
    mc = _mc(model)
    poses = fk(model, qb)
    coms, Jflat = _com_jacobian_stack(model, poses)
    gvec = np.zeros_like(coms)
    gvec[..., 1] = -model.gravity * mc.masses[None, :]
    Qg = np.matmul(Jflat.transpose(0, 2, 1), gvec.reshape(coms.shape[0], -1, 1))[..., 0]
    tau = -Qg[:, model.nb:]
    return tau[0] if single else tau


def _generalized_external(model: RobotModel, poses: LinkPoses, link_ids: np.ndarray,
                          points: np.ndarray, forces: np.ndarray) -> np.ndarray:
    """sum_i J_i^T F_i for point forces (B, K, 2) at world points (B, K, 2)."""
    J = _point_jacobians(model, poses, link_ids, points)
    return np.einsum("bkxd,bkx->bd", J, forces)


def forward_dynamics(model: RobotModel, state: SimState, torques: np.ndarray,
                     externals: list[ExternalWrench] = ()) -> np.ndarray:
    """Generalized accelerations for a single state under joint torques."""
    tau = np.asarray(torques, dtype=np.float64)
    if tau.shape != (model.n_joints,):
        raise ValueError(f"torques must have shape ({model.n_joints},), got {tau.shape}")
    tau = np.clip(tau, -model.torque_limits, model.torque_limits)
    return _forward_dynamics_batch(model, state.q[None], state.qd[None], tau[None], list(externals))[0]


def _forward_dynamics_batch(model: RobotModel, q: np.ndarray, qd: np.ndarray,
                            tau_joints: np.ndarray,
                            externals: list[ExternalWrench]) -> np.ndarray:
    mc = _mc(model)
    poses = fk(model, q, qd)
    coms, Jflat = _com_jacobian_stack(model, poses)
    M = np.matmul(Jflat.transpose(0, 2, 1) * np.repeat(mc.masses, 2)[None, None, :], Jflat)
    M += mc.angular_mass
    avp = _velocity_product_accel(model, poses, coms)
    avp[..., 1] += model.gravity
    weighted = (avp * mc.masses[None, :, None]).reshape(avp.shape[0], -1, 1)
    h = np.matmul(Jflat.transpose(0, 2, 1), weighted)[..., 0]

    rhs = -h
    rhs[:, model.nb:] += tau_joints
    for w in externals:
        s = model.site(w.site)
        link_ids = np.array([s.link], dtype=np.int64)
        pts, _ = _attached_points(model, poses, link_ids, s.offset.reshape(1, 2))
        f = np.asarray(w.force, dtype=np.float64)
        f = np.broadcast_to(f, (q.shape[0], 1, 2)) if f.ndim <= 1 else f.reshape(q.shape[0], 1, 2)
        rhs += _generalized_external(model, poses, link_ids, pts, f)
    try:
        return np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as e:
        raise RuntimeError(f"singular mass matrix: {e}") from None


# ---------------------------------------------------------------------------
# contact + integration

def _contact_forces(model: RobotModel, pos: np.ndarray, vel: np.ndarray,
                    anchor: np.ndarray, active: np.ndarray,
                    mu: np.ndarray | None = None):
    """Penalty ground forces for contact sites.

    pos/vel (B, S, 2); anchor/active (B, S). Returns (forces (B, S, 2),
    new_anchor, new_active). Normal force is one-sided >= 0; tangential force
    is an anchored spring-damper capped by the friction cone, with the anchor
    re-seated on slip. ``mu`` optionally overrides friction per environment.
    """
    c = model.contact
    pen = -pos[..., 1]
    in_contact = pen > 0.0
    fn = np.maximum(c.k_n * pen - c.d_n * vel[..., 1], 0.0) * in_contact

    fresh = in_contact & ~active
    anchor = np.where(fresh, pos[..., 0], anchor)
    ft_raw = -c.k_t * (pos[..., 0] - anchor) - c.d_t * vel[..., 0]
    mu_eff = c.mu if mu is None else mu[:, None]
    cap = mu_eff * fn
    ft = np.clip(ft_raw, -cap, cap)
    slipped = in_contact & (np.abs(ft_raw) > cap)
    # re-seat the anchor so the spring is consistent with the capped force
    anchor = np.where(slipped, pos[..., 0] + (ft + c.d_t * vel[..., 0]) / c.k_t, anchor)
    ft = ft * in_contact
    forces = np.stack([ft, fn], axis=-1)
    return forces, anchor, in_contact


def step_batch(model: RobotModel, q: np.ndarray, qd: np.ndarray, t: float | np.ndarray,
               targets: np.ndarray | None,
               contact_anchor: np.ndarray, contact_active: np.ndarray,
               torques: np.ndarray | None = None,
               external_fn=None,
               substeps: int = CONTROL_DECIMATION, dt: float = PHYSICS_DT,
               check_finite: bool = True, contact_mu: np.ndarray | None = None,
               torque_fn=None):
    """Advance a batch of robots by one control period.

    Either ``targets`` (joint PD position targets, (B, nj)), ``torques``
    (direct joint torques held over the period), or ``torque_fn(q, qd)``
    (re-evaluated every physics substep) drives the actuators.
    ``external_fn(q, qd, t, poses)`` may return a list of
    ``(site_name, force (B, 1, 2))`` applied each substep. ``contact_mu``
    optionally overrides friction per environment.
    Returns ``(q, qd, t, anchor, active, contact_forces, tau)``.
    """
    mc = _mc(model)
    q = q.copy()
    qd = qd.copy()
    anchor = contact_anchor.copy()
    active = contact_active.copy()
    nb = model.nb
    S = len(mc.contact_sites)
    contact_forces = np.zeros((q.shape[0], S, 2))
    tau = np.zeros((q.shape[0], model.n_joints))
    masses2 = np.repeat(mc.masses, 2)[None, None, :]

    for k in range(substeps):
        poses = fk(model, q, qd)
        coms, Jflat = _com_jacobian_stack(model, poses)
        M = np.matmul(Jflat.transpose(0, 2, 1) * masses2, Jflat) + mc.angular_mass
        avp = _velocity_product_accel(model, poses, coms)
        avp[..., 1] += model.gravity
        weighted = (avp * mc.masses[None, :, None]).reshape(avp.shape[0], -1, 1)
        rhs = -np.matmul(Jflat.transpose(0, 2, 1), weighted)[..., 0]

        if torque_fn is not None:
            tau = np.clip(torque_fn(q, qd), -model.torque_limits, model.torque_limits)
        elif torques is not None:
            tau = np.clip(torques, -model.torque_limits, model.torque_limits)
        else:
            qj, qdj = q[:, nb:], qd[:, nb:]
            tau = np.clip(model.kp * (targets - qj) - model.kd * qdj,
                          -model.torque_limits, model.torque_limits)
        rhs[:, nb:] += tau

        if S:
            cpos, cvel = _attached_points(model, poses, mc.csite_links, mc.csite_offsets)
            contact_forces, anchor, active = _contact_forces(model, cpos, cvel, anchor,
                                                             active, contact_mu)
            rhs += _generalized_external(model, poses, mc.csite_links, cpos, contact_forces)

        if external_fn is not None:
            for site_name, force in external_fn(q, qd, t, poses):
                s = model.site(site_name)
                link_ids = np.array([s.link], dtype=np.int64)
                pts, _ = _attached_points(model, poses, link_ids, s.offset.reshape(1, 2))
                rhs += _generalized_external(model, poses, link_ids, pts,
                                             force.reshape(q.shape[0], 1, 2))

        qdd = np.linalg.solve(M, rhs[..., None])[..., 0]
        qd = np.clip(qd + dt * qdd, -VELOCITY_GUARD, VELOCITY_GUARD)
        q = q + dt * qd
        t = t + dt
        if check_finite and not np.isfinite(qd).all():
            raise SimDivergence(k)
    return q, qd, t, anchor, active, contact_forces, tau


def step(model: RobotModel, state: SimState, joint_position_targets: np.ndarray,
         externals: list[ExternalWrench] = (), control_dt: float = CONTROL_DT) -> SimState:
    """Advance one robot by a control period under joint PD targets."""
    substeps = int(round(control_dt / PHYSICS_DT))
    ext_fn = None
    if externals:
        def ext_fn(q, qd, t, poses, _w=list(externals)):
            return [(w.site, np.asarray(w.force, dtype=np.float64).reshape(1, 1, 2))
                    for w in _w]
    q, qd, t, anchor, active, cf, tau = step_batch(
        model, state.q[None], state.qd[None], state.t,
        np.asarray(joint_position_targets, dtype=np.float64)[None],
        state.contact_cache.anchor[None], state.contact_cache.active[None],
        external_fn=ext_fn, substeps=substeps)
    return SimState(q[0], qd[0], float(t), tau[0],
                    ContactCache(cf[0], anchor[0], active[0]))
