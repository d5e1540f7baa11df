"""Built-in nonlinear hierarchies and banded-matrix fixtures.

Three problem families at desk scale: the ten-variable test-function stack
(disk / Rosenbrock / Himmelblau / regularization), a planar kinematic chain
with an out-of-reach target, and a quadruped centroidal-dynamics optimal
control problem, plus the randomized banded block matrices used to bench
the turnback nullspace.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .matrix_kernels import SparseMatrix
from .shlsp import NlHierarchy, NlTask

GRAVITY = np.array([0.0, 0.0, -9.81])


# -- banded fixture ----------------------------------------------------

def make_banded_ocp_matrix(n_x: int, n_u: int, T: int, seed: int = 0) -> SparseMatrix:
    """Banded T*n_x by T*(n_x+n_u) block matrix of a linearized dynamics chain.

    Dense full-rank random blocks S (state) and C (control), constant over
    the horizon, with identity coupling into the next state block.
    """
    if min(n_x, n_u, T) < 1:
        raise ValueError("block sizes and horizon must be >= 1")
    rng = np.random.default_rng(seed)
    s_blk = rng.normal(size=(n_x, n_x))
    c_blk = rng.normal(size=(n_x, n_u))
    stride = n_x + n_u
    rows, cols, vals = [], [], []

    def put(block, r0, c0):
        br, bc = block.shape
        ri, ci = np.meshgrid(np.arange(br), np.arange(bc), indexing="ij")
        rows.append((r0 + ri).ravel())
        cols.append((c0 + ci).ravel())
        vals.append(block.ravel())

    eye = np.eye(n_x)
    for k in range(T):
        r0 = k * n_x
        if k == 0:
            put(c_blk, r0, 0)
            put(eye, r0, n_u)
        else:
            base = (k - 1) * stride + n_u
            put(s_blk, r0, base)
            put(c_blk, r0, base + n_x)
            put(eye, r0, base + n_x + n_u)
    return SparseMatrix.from_coo(
        (T * n_x, T * stride),
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(vals),
    )


# -- generic finite-difference curvature --------------------------------

def fd_block_weighted_hessian(jac_fn, x, w, block_size, step_scale=1e-6):
    """Block-diagonal approximation of the Hessian of ``w . f`` by central
    differences of the gradient ``J(x)^T w``.

    Even and odd blocks are perturbed alternately, so coupling between
    neighbouring blocks cannot leak into the diagonal blocks being formed.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n % block_size:
        raise ValueError("variable count must be a multiple of the block size")
    nb = n // block_size
    blocks = [np.zeros((block_size, block_size)) for _ in range(nb)]
    for parity in (0, 1):
        group = [b for b in range(nb) if b % 2 == parity]
        if not group:
            continue
        for k in range(block_size):
            pert = np.zeros(n)
            for b in group:
                i = b * block_size + k
                pert[i] = step_scale * (1.0 + abs(x[i]))
            gp = jac_fn(x + pert).T @ w
            gm = jac_fn(x - pert).T @ w
            for b in group:
                i = b * block_size + k
                sl = slice(b * block_size, (b + 1) * block_size)
                blocks[b][:, k] = (gp[sl] - gm[sl]) / (2.0 * pert[i])
    rows, cols, vals = [], [], []
    for b, blk in enumerate(blocks):
        blk = 0.5 * (blk + blk.T)
        nz = np.nonzero(np.abs(blk) > 1e-12)
        rows.append(b * block_size + nz[0])
        cols.append(b * block_size + nz[1])
        vals.append(blk[nz])
    if not rows:
        return sp.csc_array((n, n))
    return sp.csc_array(
        sp.coo_array(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )
    )


# -- test-function hierarchy --------------------------------------------

def _disk_task(n, vars_, offset, kind, name):
    vars_ = np.asarray(vars_, dtype=int)

    def f(x):
        return np.array([np.sum(x[vars_] ** 2) + offset])

    def jac(x):
        row = np.zeros((1, n))
        row[0, vars_] = 2.0 * x[vars_]
        return row

    def whess(x, w):
        h = np.zeros((n, n))
        h[vars_, vars_] = 2.0 * w[0]
        return h

    return NlTask(f, jac, kind, whess, name)


def _rosenbrock_task(n, i, j, name):
    def f(x):
        return np.array([(1.0 - x[i]) ** 2 + 100.0 * (x[j] - x[i] ** 2) ** 2])

    def jac(x):
        row = np.zeros((1, n))
        row[0, i] = -2.0 * (1.0 - x[i]) - 400.0 * x[i] * (x[j] - x[i] ** 2)
        row[0, j] = 200.0 * (x[j] - x[i] ** 2)
        return row

    def whess(x, w):
        h = np.zeros((n, n))
        h[i, i] = w[0] * (2.0 - 400.0 * x[j] + 1200.0 * x[i] ** 2)
        h[i, j] = h[j, i] = w[0] * (-400.0 * x[i])
        h[j, j] = w[0] * 200.0
        return h

    return NlTask(f, jac, "eq", whess, name)


def _himmelblau_task(n, i, j, name):
    def f(x):
        return np.array([(x[i] ** 2 + x[j] - 11.0) ** 2 + (x[i] + x[j] ** 2 - 7.0) ** 2])

    def jac(x):
        u = x[i] ** 2 + x[j] - 11.0
        v = x[i] + x[j] ** 2 - 7.0
        row = np.zeros((1, n))
        row[0, i] = 4.0 * x[i] * u + 2.0 * v
        row[0, j] = 2.0 * u + 4.0 * x[j] * v
        return row

    def whess(x, w):
        u = x[i] ** 2 + x[j] - 11.0
        v = x[i] + x[j] ** 2 - 7.0
        h = np.zeros((n, n))
        h[i, i] = w[0] * (4.0 * u + 8.0 * x[i] ** 2 + 2.0)
        h[i, j] = h[j, i] = w[0] * (4.0 * x[i] + 4.0 * x[j])
        h[j, j] = w[0] * (4.0 * v + 8.0 * x[j] ** 2 + 2.0)
        return h

    return NlTask(f, jac, "eq", whess, name)


def _linear_eq_task(n, a, b, name):
    a = sp.csr_array(a)

    def f(x, a=a, b=b):
        return a @ x - b

    def jac(x, a=a):
        return a

    return NlTask(f, jac, "eq", None, name)


def make_testfn_hierarchy() -> NlHierarchy:
    """Nine-level, ten-variable stack of disk, Rosenbrock, Himmelblau, and
    regularization constraints with analytic Jacobians and Hessians."""
    n = 10
    levels = [
        [_disk_task(n, [0, 1], -1.9, "ineq", "disk_ineq_12")],
        [_rosenbrock_task(n, 0, 1, "rosenbrock_12")],
        [_disk_task(n, [0, 1], -0.9, "eq", "disk_eq_12")],
        [_disk_task(n, [1, 2], -1.0, "eq", "disk_eq_23")],
        [_disk_task(n, [3, 4], 1.0, "ineq", "disk_ineq_45_infeasible")],
        [_disk_task(n, [5, 6, 7], -4.0, "eq", "sphere_eq_678")],
        [_rosenbrock_task(n, 5, 6, "rosenbrock_67")],
        [_himmelblau_task(n, 8, 9, "himmelblau_910")],
        [_linear_eq_task(n, sp.eye_array(n), np.zeros(n), "regularization")],
    ]
    return NlHierarchy(levels, n, name="testfn")


# -- planar chain inverse kinematics -------------------------------------

@dataclass
class ChainTargets:
    """Geometry of the chain problem; defaults match a straight chain."""

    reach: tuple[float, float] | None = None
    far: tuple[float, float] | None = None
    box_center: tuple[float, float] | None = None
    box_halfwidth: float = 0.5
    joint_limit: float = 2.5


def _chain_fk(theta, upto):
    phi = np.cumsum(theta[:upto])
    return np.array([np.sum(np.cos(phi)), np.sum(np.sin(phi))])


def _chain_jac(theta, upto, n):
    phi = np.cumsum(theta[:upto])
    out = np.zeros((2, n))
    # d p / d theta_i = sum over links at or beyond i of the rotated tangent
    cs = np.cumsum(np.cos(phi)[::-1])[::-1]
    sn = np.cumsum(np.sin(phi)[::-1])[::-1]
    out[0, :upto] = -sn
    out[1, :upto] = cs
    return out


def _chain_whess(theta, w, upto, n):
    phi = np.cumsum(theta[:upto])
    proj = w[0] * np.cos(phi) + w[1] * np.sin(phi)
    suffix = np.cumsum(proj[::-1])[::-1]
    h = np.zeros((n, n))
    for a in range(upto):
        for b in range(upto):
            h[a, b] = -suffix[max(a, b)]
    return h


def _chain_position_task(n, upto, target, kind, sign, name):
    target = np.asarray(target, dtype=float)

    def f(x):
        return sign * (_chain_fk(x, upto) - target)

    def jac(x):
        return sign * _chain_jac(x, upto, n)

    def whess(x, w):
        return _chain_whess(x, sign * w, upto, n)

    return NlTask(f, jac, kind, whess, name)


def make_chain_ik(n_links: int, targets: ChainTargets | None = None) -> NlHierarchy:
    """Planar revolute chain with unit links and five priority levels:
    joint limits, a reachable end-effector target, a midpoint box, an
    out-of-reach second target, and zero regularization."""
    if n_links < 2:
        raise ValueError("need at least two links")
    n = n_links
    t = targets or ChainTargets()
    reach = t.reach if t.reach is not None else (float(n_links), 0.0)
    far = t.far if t.far is not None else (0.0, -float(n_links + 1))
    mid = n_links // 2
    box_center = (
        np.asarray(t.box_center, dtype=float)
        if t.box_center is not None
        else np.array([float(mid), 0.0])
    )
    hw = t.box_halfwidth
    lim = t.joint_limit

    joint_rows = sp.vstack([sp.eye_array(n), -sp.eye_array(n)])
    limits = NlTask(
        lambda x: np.concatenate([x - lim, -x - lim]),
        lambda x: joint_rows,
        "ineq",
        None,
        "joint_limits",
    )

    def box_f(x):
        p = _chain_fk(x, mid)
        return np.array(
            [
                p[0] - (box_center[0] + hw),
                -(p[0] - (box_center[0] - hw)),
                p[1] - (box_center[1] + hw),
                -(p[1] - (box_center[1] - hw)),
            ]
        )

    def box_jac(x):
        j = _chain_jac(x, mid, n)
        return np.vstack([j[0], -j[0], j[1], -j[1]])

    def box_whess(x, w):
        weights = np.array([w[0] - w[1], w[2] - w[3]])
        return _chain_whess(x, weights, mid, n)

    box = NlTask(box_f, box_jac, "ineq", box_whess, "midpoint_box")

    levels = [
        [limits],
        [_chain_position_task(n, n_links, reach, "eq", 1.0, "reach")],
        [box],
        [_chain_position_task(n, n_links, far, "eq", 1.0, "far_reach")],
        [_linear_eq_task(n, sp.eye_array(n), np.zeros(n), "regularization")],
    ]
    return NlHierarchy(levels, n, name="chain_ik")


# -- quadruped centroidal optimal control --------------------------------

@dataclass
class OcpSpec:
    """Centroidal optimal control data over a fixed contact schedule.

    Per-time-step variables are (c, c_dot, omega, F1..F4); state t-1 and the
    force grouped with step t drive the explicit-Euler transition into t.
    """

    horizon: int
    dt: float
    mass: float
    inertia: np.ndarray
    contact_schedule: np.ndarray  # (T, 4) {0,1}
    contact_points: np.ndarray  # (T, 4, 3)
    com_targets: np.ndarray  # (T, 3)
    fz_max: float = 50.0
    fxy_max: float = 20.0
    c_min_z: float = 0.1
    leg_length: float = 0.32
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    c0: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.2]))
    dc0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w0: np.ndarray = field(default_factory=lambda: np.zeros(3))

    NX: int = 9
    NU: int = 12

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        self.contact_schedule = np.asarray(self.contact_schedule)
        self.contact_points = np.asarray(self.contact_points, dtype=float)
        self.com_targets = np.asarray(self.com_targets, dtype=float)
        t = self.horizon
        if self.horizon < 1 or self.dt <= 0 or self.mass <= 0:
            raise ValueError("horizon, dt, and mass must be positive")
        if self.contact_schedule.shape != (t, 4):
            raise ValueError("contact schedule must have shape (T, 4)")
        if self.contact_points.shape != (t, 4, 3):
            raise ValueError("contact points must have shape (T, 4, 3)")
        if self.com_targets.shape != (t, 3):
            raise ValueError("CoM targets must have shape (T, 3)")

    @property
    def nvar_step(self) -> int:
        return self.NX + self.NU

    @property
    def n(self) -> int:
        return self.horizon * self.nvar_step

    @classmethod
    def from_dict(cls, d: dict) -> "OcpSpec":
        d = dict(d)
        for key in ("inertia", "contact_schedule", "contact_points",
                    "com_targets", "gravity", "c0", "dc0", "w0"):
            if key in d:
                d[key] = np.asarray(d[key], dtype=float)
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for k in ("horizon", "dt", "mass", "fz_max", "fxy_max", "c_min_z", "leg_length"):
            out[k] = getattr(self, k)
        for k in ("inertia", "contact_schedule", "contact_points",
                  "com_targets", "gravity", "c0", "dc0", "w0"):
            out[k] = np.asarray(getattr(self, k)).tolist()
        return out


def default_solo12_spec() -> OcpSpec:
    """Diagonal-leap scenario: stance, seven flight steps, shifted stance."""
    t_len = 25
    first = np.array(
        [[0.2, 0.142, 0.015], [0.2, -0.142, 0.015],
         [-0.2, 0.142, 0.015], [-0.2, -0.142, 0.015]]
    )
    second = np.array(
        [[0.25, 0.182, 0.015], [0.25, -0.102, 0.015],
         [-0.15, 0.182, 0.015], [-0.15, -0.102, 0.015]]
    )
    schedule = np.zeros((t_len, 4), dtype=int)
    points = np.zeros((t_len, 4, 3))
    for t in range(1, t_len + 1):
        if t <= 10:
            schedule[t - 1] = 1
            points[t - 1] = first
        elif t >= 18:
            schedule[t - 1] = 1
            points[t - 1] = second
    targets = np.zeros((t_len, 3))
    for t in range(1, t_len + 1):
        targets[t - 1] = [0.0, 0.0, 0.2] if t <= 12 else [0.05, 0.05, 0.2]
    return OcpSpec(
        horizon=t_len,
        dt=0.05,
        mass=2.5,
        inertia=np.array([0.03, 0.051, 0.067]),
        contact_schedule=schedule,
        contact_points=points,
        com_targets=targets,
    )


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


class _OcpIndex:
    def __init__(self, spec: OcpSpec):
        self.spec = spec
        self.stride = spec.nvar_step

    def base(self, t):  # t in 1..T
        return (t - 1) * self.stride

    def c(self, t):
        return slice(self.base(t), self.base(t) + 3)

    def dc(self, t):
        return slice(self.base(t) + 3, self.base(t) + 6)

    def w(self, t):
        return slice(self.base(t) + 6, self.base(t) + 9)

    def f(self, t, i):
        s = self.base(t) + 9 + 3 * i
        return slice(s, s + 3)


def _solo12_bounds_task(spec: OcpSpec, ix: _OcpIndex) -> NlTask:
    rows, cols, vals, offs = [], [], [], []
    r = 0
    for t in range(1, spec.horizon + 1):
        rows.append(r); cols.append(ix.c(t).start + 2); vals.append(-1.0)
        offs.append(spec.c_min_z)
        r += 1
        for i in range(4):
            for comp in range(2):  # |F_{x,y}| <= fxy_max
                col = ix.f(t, i).start + comp
                rows.append(r); cols.append(col); vals.append(1.0)
                offs.append(-spec.fxy_max); r += 1
                rows.append(r); cols.append(col); vals.append(-1.0)
                offs.append(-spec.fxy_max); r += 1
            colz = ix.f(t, i).start + 2
            rows.append(r); cols.append(colz); vals.append(-1.0)
            offs.append(0.0); r += 1
            rows.append(r); cols.append(colz); vals.append(1.0)
            offs.append(-spec.fz_max); r += 1
    a = sp.csr_array(sp.coo_array((vals, (rows, cols)), shape=(r, spec.n)))
    off = np.array(offs)
    return NlTask(lambda x: a @ x + off, lambda x: a, "ineq", None, "bounds")


def _solo12_leg_task(spec: OcpSpec, ix: _OcpIndex) -> NlTask:
    pairs = [
        (t, i)
        for t in range(1, spec.horizon + 1)
        for i in range(4)
        if spec.contact_schedule[t - 1, i]
    ]
    l2 = spec.leg_length**2

    def f(x):
        out = np.empty(len(pairs))
        for k, (t, i) in enumerate(pairs):
            d = x[ix.c(t)] - spec.contact_points[t - 1, i]
            out[k] = d @ d - l2
        return out

    def jac(x):
        rows, cols, vals = [], [], []
        for k, (t, i) in enumerate(pairs):
            d = x[ix.c(t)] - spec.contact_points[t - 1, i]
            rows.extend([k] * 3)
            cols.extend(range(ix.c(t).start, ix.c(t).stop))
            vals.extend(2.0 * d)
        return sp.csr_array(sp.coo_array((vals, (rows, cols)), shape=(len(pairs), spec.n)))

    def whess(x, w):
        return fd_block_weighted_hessian(jac, x, w, spec.nvar_step)

    return NlTask(f, jac, "ineq", whess, "leg_length")


def _solo12_dynamics_task(spec: OcpSpec, ix: _OcpIndex) -> NlTask:
    dt, m, inertia, g = spec.dt, spec.mass, spec.inertia, spec.gravity

    def prev_state(x, t):
        if t == 1:
            return spec.c0, spec.dc0, spec.w0
        return x[ix.c(t - 1)], x[ix.dc(t - 1)], x[ix.w(t - 1)]

    def f(x):
        out = np.empty(9 * spec.horizon)
        for t in range(1, spec.horizon + 1):
            cp, dcp, wp = prev_state(x, t)
            sched = spec.contact_schedule[t - 1]
            fsum = np.zeros(3)
            tsum = np.zeros(3)
            for i in range(4):
                if sched[i]:
                    fi = x[ix.f(t, i)]
                    fsum += fi
                    tsum += np.cross(spec.contact_points[t - 1, i] - cp, fi)
            r0 = 9 * (t - 1)
            out[r0 : r0 + 3] = x[ix.c(t)] - cp - dcp * dt
            out[r0 + 3 : r0 + 6] = x[ix.dc(t)] - dcp - fsum * dt / m - g * dt
            out[r0 + 6 : r0 + 9] = inertia * (x[ix.w(t)] - wp) - tsum * dt
        return out

    def jac(x):
        rows, cols, vals = [], [], []

        def put(r0, c0, block):
            br, bc = block.shape
            ri, ci = np.meshgrid(np.arange(br), np.arange(bc), indexing="ij")
            rows.append((r0 + ri).ravel())
            cols.append((c0 + ci).ravel())
            vals.append(np.asarray(block, dtype=float).ravel())

        eye3 = np.eye(3)
        for t in range(1, spec.horizon + 1):
            cp, _, _ = prev_state(x, t)
            sched = spec.contact_schedule[t - 1]
            r0 = 9 * (t - 1)
            put(r0, ix.c(t).start, eye3)
            put(r0 + 3, ix.dc(t).start, eye3)
            put(r0 + 6, ix.w(t).start, np.diag(inertia))
            fsk = np.zeros((3, 3))
            for i in range(4):
                if sched[i]:
                    fi = x[ix.f(t, i)]
                    put(r0 + 3, ix.f(t, i).start, -eye3 * dt / m)
                    put(r0 + 6, ix.f(t, i).start,
                        -dt * _skew(spec.contact_points[t - 1, i] - cp))
                    fsk += _skew(fi)
            if t > 1:
                put(r0, ix.c(t - 1).start, -eye3)
                put(r0, ix.dc(t - 1).start, -eye3 * dt)
                put(r0 + 3, ix.dc(t - 1).start, -eye3)
                put(r0 + 6, ix.w(t - 1).start, -np.diag(inertia))
                if np.any(np.abs(fsk) > 0):
                    put(r0 + 6, ix.c(t - 1).start, -dt * fsk)
        return sp.csr_array(
            sp.coo_array(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(9 * spec.horizon, spec.n),
            )
        )

    def whess(x, w):
        return fd_block_weighted_hessian(jac, x, w, spec.nvar_step)

    return NlTask(f, jac, "eq", whess, "centroidal_dynamics")


def _solo12_tracking_task(spec: OcpSpec, ix: _OcpIndex) -> NlTask:
    rows, cols, vals = [], [], []
    target = np.empty(3 * spec.horizon)
    for t in range(1, spec.horizon + 1):
        for comp in range(3):
            r = 3 * (t - 1) + comp
            rows.append(r)
            cols.append(ix.c(t).start + comp)
            vals.append(1.0)
            target[r] = spec.com_targets[t - 1, comp]
    a = sp.csr_array(sp.coo_array((vals, (rows, cols)), shape=(3 * spec.horizon, spec.n)))
    return NlTask(lambda x: a @ x - target, lambda x: a, "eq", None, "com_tracking")


def _solo12_rotation_task(spec: OcpSpec, ix: _OcpIndex) -> NlTask:
    inertia = spec.inertia

    def f(x):
        out = np.empty(3 * spec.horizon)
        for t in range(1, spec.horizon + 1):
            out[3 * (t - 1) : 3 * t] = inertia * x[ix.w(t)] ** 2
        return out

    def jac(x):
        rows, cols, vals = [], [], []
        for t in range(1, spec.horizon + 1):
            for comp in range(3):
                rows.append(3 * (t - 1) + comp)
                cols.append(ix.w(t).start + comp)
                vals.append(2.0 * inertia[comp] * x[ix.w(t).start + comp])
        return sp.csr_array(
            sp.coo_array((vals, (rows, cols)), shape=(3 * spec.horizon, spec.n))
        )

    def whess(x, w):
        return fd_block_weighted_hessian(jac, x, w, spec.nvar_step)

    return NlTask(f, jac, "eq", whess, "rotation_energy")


def make_solo12_ocp(spec: OcpSpec | None = None) -> tuple[NlHierarchy, np.ndarray]:
    """Six-level centroidal hierarchy plus the initial guess (CoM at target,
    everything else zero)."""
    spec = spec or default_solo12_spec()
    ix = _OcpIndex(spec)
    levels = [
        [_solo12_bounds_task(spec, ix)],
        [_solo12_leg_task(spec, ix)],
        [_solo12_dynamics_task(spec, ix)],
        [_solo12_tracking_task(spec, ix)],
        [_solo12_rotation_task(spec, ix)],
        [_linear_eq_task(spec.n, sp.eye_array(spec.n), np.zeros(spec.n), "regularization")],
    ]
    x0 = np.zeros(spec.n)
    for t in range(1, spec.horizon + 1):
        x0[ix.c(t)] = spec.com_targets[t - 1]
    return NlHierarchy(levels, spec.n, name="solo12"), x0
