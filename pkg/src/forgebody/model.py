"""Robot model description and loading.

The robot is a planar kinematic tree: an optional floating base (x, z,
pitch) plus a chain of revolute joints. Models are described in a JSON
document (see ``models/`` for the shipped defaults) and validated here into
an immutable :class:`RobotModel` that the dynamics code consumes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REPO_ROOT = Path(__file__).resolve().parents[2]
MODEL_DIR = REPO_ROOT / "models"


class ModelError(ValueError):
    """Raised when a model document violates the schema or an invariant."""

    def __init__(self, path: str, message: str):
        self.field_path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class Link:
    name: str
    mass: float
    com: np.ndarray          # center of mass, link frame [m]
    inertia: float           # rotational inertia about the com [kg m^2]
    length: float            # along the link x axis, for rendering/collision [m]
    thickness: float = 0.0   # across the link, for proximity checks [m]


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int              # parent link index
    child: int               # child link index
    pivot: np.ndarray        # pivot offset in the parent link frame [m]
    limits: tuple[float, float]   # [rad]
    kp: float                # PD gains [N m / rad], [N m s / rad]
    kd: float
    torque_limit: float      # [N m]


@dataclass(frozen=True)
class Site:
    name: str
    link: int
    offset: np.ndarray       # link frame [m]


@dataclass(frozen=True)
class ContactParams:
    k_n: float = 5000.0      # normal penalty stiffness [N/m]
    d_n: float = 100.0       # normal damping [N s/m]
    mu: float = 0.8          # Coulomb friction coefficient
    k_t: float = 5000.0      # tangential anchor stiffness [N/m]
    d_t: float = 100.0       # tangential damping [N s/m]
    sites: tuple[str, ...] = ()   # sites that interact with the ground
    feet: tuple[str, ...] = ()    # subset counted as feet (gait/rewards)


@dataclass(frozen=True)
class RobotModel:
    name: str
    links: tuple[Link, ...]
    joints: tuple[Joint, ...]
    sites: dict[str, Site]
    q_def: np.ndarray        # default joint vector [rad], len == n_joints
    gravity: float           # magnitude, acts along -z [m/s^2]
    floating: bool
    base_origin: np.ndarray  # world pose of the base link when not floating
    base_pitch: float
    contact: ContactParams
    termination_height: float     # base z below this is a failure [m]
    gripper_clearance: float      # gripper-to-base proximity that counts as collision [m]
    source_hash: str = ""

    # derived, filled in __post_init__
    n_joints: int = field(init=False)
    dof: int = field(init=False)
    nb: int = field(init=False)                 # number of base coordinates
    link_parent_joint: np.ndarray = field(init=False)   # (L,) joint idx or -1
    ancestry: np.ndarray = field(init=False)            # (L, nj) bool
    joint_limits: np.ndarray = field(init=False)        # (nj, 2)
    kp: np.ndarray = field(init=False)
    kd: np.ndarray = field(init=False)
    torque_limits: np.ndarray = field(init=False)

    def __post_init__(self):
        nj = len(self.joints)
        nl = len(self.links)
        object.__setattr__(self, "n_joints", nj)
        object.__setattr__(self, "nb", 3 if self.floating else 0)
        object.__setattr__(self, "dof", self.nb + nj)

        parent_joint = np.full(nl, -1, dtype=np.int64)
        for j, joint in enumerate(self.joints):
            parent_joint[joint.child] = j
        object.__setattr__(self, "link_parent_joint", parent_joint)

        # ancestry[l, j] == True when joint j lies on the path base -> link l
        anc = np.zeros((nl, nj), dtype=bool)
        for l in range(nl):
            k = l
            while parent_joint[k] >= 0:
                j = parent_joint[k]
                anc[l, j] = True
                k = self.joints[j].parent
        object.__setattr__(self, "ancestry", anc)

        object.__setattr__(self, "joint_limits",
                           np.array([j.limits for j in self.joints], dtype=np.float64))
        object.__setattr__(self, "kp", np.array([j.kp for j in self.joints]))
        object.__setattr__(self, "kd", np.array([j.kd for j in self.joints]))
        object.__setattr__(self, "torque_limits",
                           np.array([j.torque_limit for j in self.joints]))

    @property
    def foot_sites(self) -> tuple[str, ...]:
        return self.contact.feet

    def site(self, name: str) -> Site:
        try:
            return self.sites[name]
        except KeyError:
            raise ModelError(f"sites.{name}", "unknown site") from None

    def link_index(self, name: str) -> int:
        for i, l in enumerate(self.links):
            if l.name == name:
                return i
        raise ModelError(f"links.{name}", "unknown link")


def _req(obj: dict, key: str, path: str):
    if key not in obj:
        raise ModelError(f"{path}.{key}", "missing required field")
    return obj[key]


def _vec2(value, path: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (2,):
        raise ModelError(path, f"expected a 2-vector, got shape {arr.shape}")
    return arr


def load_model(source: str | Path | dict) -> RobotModel:
    """Load and validate a robot model from a JSON document.

    ``source`` may be a path, a JSON string, or an already-parsed dict.
    Raises :class:`ModelError` naming the offending field on any schema or
    invariant violation.
    """
    if isinstance(source, dict):
        doc = source
        raw = json.dumps(source, sort_keys=True)
    else:
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ModelError("$", f"not valid JSON: {e}") from None
        raw = text
    source_hash = hashlib.sha256(raw.encode()).hexdigest()[:16]

    name = doc.get("name", "unnamed")
    links_doc = _req(doc, "links", "$")
    joints_doc = _req(doc, "joints", "$")
    sites_doc = _req(doc, "sites", "$")
    q_def_doc = _req(doc, "q_def", "$")
    gravity = float(doc.get("gravity", 9.81))

    links: list[Link] = []
    link_names: dict[str, int] = {}
    for i, ld in enumerate(links_doc):
        path = f"links[{i}]"
        lname = _req(ld, "name", path)
        if lname in link_names:
            raise ModelError(f"{path}.name", f"duplicate link name {lname!r}")
        mass = float(_req(ld, "mass", path))
        if mass <= 0:
            raise ModelError(f"{path}.mass", f"link {lname!r} mass must be > 0, got {mass}")
        inertia = float(_req(ld, "inertia", path))
        if inertia <= 0:
            raise ModelError(f"{path}.inertia", f"link {lname!r} inertia must be > 0, got {inertia}")
        links.append(Link(lname, mass, _vec2(ld.get("com", (0, 0)), f"{path}.com"),
                          inertia, float(ld.get("length", 0.0)),
                          float(ld.get("thickness", 0.0))))
        link_names[lname] = i

    joints: list[Joint] = []
    children = set()
    for i, jd in enumerate(joints_doc):
        path = f"joints[{i}]"
        jname = _req(jd, "name", path)
        parent = _req(jd, "parent", path)
        child = _req(jd, "child", path)
        for role, val in (("parent", parent), ("child", child)):
            if val not in link_names:
                raise ModelError(f"{path}.{role}", f"references unknown link {val!r}")
        if link_names[child] == 0:
            raise ModelError(f"{path}.child", "base link cannot be a joint child")
        if child in children:
            raise ModelError(f"{path}.child", f"link {child!r} has two parent joints")
        children.add(child)
        lo, hi = (float(v) for v in _req(jd, "limits", path))
        if not lo < hi:
            raise ModelError(f"{path}.limits", f"lower {lo} must be < upper {hi}")
        joints.append(Joint(jname, link_names[parent], link_names[child],
                            _vec2(_req(jd, "pivot", path), f"{path}.pivot"),
                            (lo, hi), float(_req(jd, "kp", path)),
                            float(_req(jd, "kd", path)),
                            float(_req(jd, "torque_limit", path))))

    # every non-base link needs a parent joint; reject cycles by walking up
    for lname, idx in link_names.items():
        if idx == 0:
            continue
        if lname not in children:
            raise ModelError(f"links.{lname}", "non-base link has no parent joint")
    # children must appear after their parents for the fk recursion
    order_ok = all(j.parent < j.child for j in joints)
    if not order_ok:
        raise ModelError("joints", "links must be declared parents-first (topological order)")

    sites: dict[str, Site] = {}
    for sname, sd in sites_doc.items():
        path = f"sites.{sname}"
        slink = _req(sd, "link", path)
        if slink not in link_names:
            raise ModelError(f"{path}.link", f"references unknown link {slink!r}")
        sites[sname] = Site(sname, link_names[slink], _vec2(_req(sd, "offset", path), f"{path}.offset"))

    q_def = np.asarray(q_def_doc, dtype=np.float64)
    if q_def.shape != (len(joints),):
        raise ModelError("q_def", f"expected {len(joints)} entries, got {q_def.shape}")
    for i, j in enumerate(joints):
        if not (j.limits[0] <= q_def[i] <= j.limits[1]):
            raise ModelError(f"q_def[{i}]", f"{q_def[i]} outside limits {j.limits} of joint {j.name!r}")

    cdoc = doc.get("contact", {})
    contact = ContactParams(
        k_n=float(cdoc.get("k_n", 5000.0)),
        d_n=float(cdoc.get("d_n", 100.0)),
        mu=float(cdoc.get("mu", 0.8)),
        k_t=float(cdoc.get("k_t", cdoc.get("k_n", 5000.0))),
        d_t=float(cdoc.get("d_t", cdoc.get("d_n", 100.0))),
        sites=tuple(cdoc.get("sites", ())),
        feet=tuple(cdoc.get("feet", ())),
    )
    for sname in contact.sites + contact.feet:
        if sname not in sites:
            raise ModelError(f"contact.sites.{sname}", "references unknown site")

    base_doc = doc.get("base", {"type": "floating"})
    btype = base_doc.get("type", "floating")
    if btype not in ("floating", "fixed"):
        raise ModelError("base.type", f"must be 'floating' or 'fixed', got {btype!r}")

    return RobotModel(
        name=name,
        links=tuple(links),
        joints=tuple(joints),
        sites=sites,
        q_def=q_def,
        gravity=gravity,
        floating=(btype == "floating"),
        base_origin=_vec2(base_doc.get("origin", (0.0, 0.0)), "base.origin"),
        base_pitch=float(base_doc.get("pitch", 0.0)),
        contact=contact,
        termination_height=float(doc.get("termination_height", 0.26)),
        gripper_clearance=float(doc.get("gripper_clearance", 0.06)),
        source_hash=source_hash,
    )


def default_model_path(name: str = "b1z1_planar") -> Path:
    return MODEL_DIR / f"{name}.json"
