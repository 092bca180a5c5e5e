"""Quasi-static planar rigid-body simulator.

One step drives the end-effector pose toward an impedance target through
``n_sub`` interpolated sub-targets.  Each sub-step detects contacts between
the grasped object's sampled surface and the environment half-planes,
solves a convex contact QP (friction-cone generator rows), and integrates
the generalized velocity.  The returned wrench is the contact force and
torque exerted by the environment on the object, expressed in world axes
about the end-effector origin.

Parameter vector layout (canonical order):
    [z1, z2, t_x, t_z, t_phi, s, mu, g_h, p_w]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qp
from .geometry import FACE_FLOOR, FACE_WALL, SurfaceCache, wrap_angle

# indices into the 9-dim parameter vector
Z1, Z2, TX, TZ, TPHI, SCALE, MU, GH, PW = range(9)

MAX_CONTACTS = 8
QP_BUCKETS = (1, 2, 4, 8)


class StepError(Exception):
    """Raised when the contact QP fails to converge for a step."""

    def __init__(self, message, kkt_residual=np.inf):
        super().__init__(message)
        self.kkt_residual = float(kkt_residual)


@dataclass(frozen=True)
class SimConfig:
    """Stepping parameters; stiffness in (N/m, N/m, N*m/rad)."""

    stiffness: tuple = (100.0, 100.0, 50.0)
    h: float = 0.1                 # sub-step duration (s)
    n_sub: int = 5                 # sub-steps per command
    contact_threshold: float = 0.002   # contact activation distance (m)
    merge_dist: float = 0.005      # per-face contact merge radius (m)
    gravity_comp: bool = True
    external_wrench: tuple = (0.0, 0.0, 0.0)   # applied when not compensated
    n_surface_points: int = 64
    qp_tol: float = 1e-6
    qp_max_iter: int = 4000

    def __post_init__(self):
        if min(self.stiffness) <= 0 or self.h <= 0 or self.n_sub < 1:
            raise ValueError("invalid simulator configuration")


@dataclass
class ContactPoint:
    p_world: np.ndarray    # (2,) m
    normal: np.ndarray     # (2,) unit, environment inward
    tangent: np.ndarray    # (2,) normal rotated +90 degrees
    phi: float             # signed distance (m)
    lever: np.ndarray      # (2,) from end-effector origin (m)
    face: int
    mu: float = 0.0        # friction coefficient bound to the cone rows


@dataclass
class Wrench:
    fx: float = 0.0
    fz: float = 0.0
    tau: float = 0.0

    def as_array(self):
        return np.array([self.fx, self.fz, self.tau])


@dataclass
class QpSolution:
    v: np.ndarray            # (3,) generalized velocity
    lambdas: np.ndarray      # (n_contacts, 2) generator impulses (N*s), >= 0
    wrench: Wrench
    kkt_residual: float
    iterations: int


@dataclass
class ContactBatch:
    """Fixed-width contact arrays for a batch of scenes."""

    normals: np.ndarray    # (B, C, 2)
    tangents: np.ndarray   # (B, C, 2)
    phis: np.ndarray       # (B, C)
    levers: np.ndarray     # (B, C, 2)
    faces: np.ndarray      # (B, C) int
    active: np.ndarray     # (B, C) bool
    points: np.ndarray     # (B, C, 2) world positions

    @property
    def counts(self):
        return self.active.sum(axis=1)


def _compose_to_world(thetas, poses, pts):
    """Object-frame points -> world: pose o t_oe applied to pts (B, n, 2).

    The two rotations fuse into one: R(pose) R(t) p + R(pose) t + xy.
    """
    wphi = poses[:, 2]
    alpha = wphi + thetas[:, TPHI]
    ca, sa = np.cos(alpha), np.sin(alpha)
    cw, sw = np.cos(wphi), np.sin(wphi)
    ox = cw * thetas[:, TX] - sw * thetas[:, TZ] + poses[:, 0]
    oz = sw * thetas[:, TX] + cw * thetas[:, TZ] + poses[:, 1]
    px, pz = pts[..., 0], pts[..., 1]
    out = np.empty_like(pts)
    out[..., 0] = ca[:, None] * px - sa[:, None] * pz + ox[:, None]
    out[..., 1] = sa[:, None] * px + ca[:, None] * pz + oz[:, None]
    return out


class Simulator:
    """Quasi-static stepper bound to one object SDF model and config."""

    def __init__(self, model, cfg: SimConfig = SimConfig()):
        self.model = model
        self.cfg = cfg
        self.cache = SurfaceCache(model, n_pts=cfg.n_surface_points)
        self._p_diag = (cfg.h ** 2) * np.asarray(cfg.stiffness)

    # ---------------- contact detection ----------------

    def detect_contacts_batch(self, thetas, poses, local=None,
                              threshold=None, radius=None) -> ContactBatch:
        """Contacts against floor and wall for each (theta, pose) row.

        Surface samples below the activation threshold are merged per
        environment face: samples closer than the merge radius chain into
        one cluster and the deepest sample represents it.  Chaining runs
        along consecutive boundary rays (surface samples are angularly
        ordered), which matches Euclidean single-linkage for non-folded
        boundaries.  At most 8 contacts are kept, deepest first.

        ``local`` optionally carries precomputed object-frame surface
        samples (one step reuses them across sub-steps).  ``threshold``
        optionally overrides the activation distance per row; the stepper
        widens it by the sub-step displacement bound so a sub-step cannot
        tunnel through a face.
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        poses = np.atleast_2d(np.asarray(poses, dtype=float))
        B_all = thetas.shape[0]
        if local is None:
            local = self.cache.get_batch(thetas[:, [Z1, Z2]],
                                         thetas[:, SCALE])
        if threshold is None:
            threshold = np.full(B_all, self.cfg.contact_threshold)
        else:
            threshold = np.broadcast_to(
                np.asarray(threshold, dtype=float), (B_all,))
        # bounding-circle prune: rows that cannot reach either face within
        # the activation distance skip all per-point work
        if radius is None:
            radius = np.linalg.norm(np.nan_to_num(local), axis=2).max(axis=1)
        cw, sw = np.cos(poses[:, 2]), np.sin(poses[:, 2])
        cx = cw * thetas[:, TX] - sw * thetas[:, TZ] + poses[:, 0]
        cz = sw * thetas[:, TX] + cw * thetas[:, TZ] + poses[:, 1]
        near = ((cz - thetas[:, GH] - radius < threshold)
                | (thetas[:, PW] - cx - radius < threshold))
        keep = np.where(near)[0]
        empty = ContactBatch(
            np.zeros((B_all, MAX_CONTACTS, 2)),
            np.zeros((B_all, MAX_CONTACTS, 2)),
            np.zeros((B_all, MAX_CONTACTS)),
            np.zeros((B_all, MAX_CONTACTS, 2)),
            np.zeros((B_all, MAX_CONTACTS), dtype=int),
            np.zeros((B_all, MAX_CONTACTS), dtype=bool),
            np.zeros((B_all, MAX_CONTACTS, 2)))
        if not len(keep):
            return empty
        full_idx = keep
        thetas, poses, local = thetas[keep], poses[keep], local[keep]
        threshold = threshold[keep]
        B = thetas.shape[0]

        flat = _compose_to_world(thetas, poses, local)
        n = flat.shape[1]
        finite = np.isfinite(flat[..., 0]) & np.isfinite(flat[..., 1])
        safe = np.where(finite[..., None], flat, 0.0)
        d_floor = safe[..., 1] - thetas[:, None, GH]
        d_wall = thetas[:, None, PW] - safe[..., 0]
        wall_closer = d_wall < d_floor
        phi = np.where(wall_closer, d_wall, d_floor)
        phi = np.where(finite, phi, np.inf)
        face = np.where(wall_closer, FACE_WALL, FACE_FLOOR)

        cand = phi < threshold[:, None]
        picked = np.zeros((B, n), dtype=bool)
        phi_c = np.where(cand, phi, np.inf)
        touch = np.where(cand.any(axis=1))[0]
        if len(touch):
            picked[touch] = self._cluster_deepest(
                flat[touch], face[touch], cand[touch],
                phi_c[touch].astype(np.float32))

        C = MAX_CONTACTS
        # cap at the 8 deepest picks in one partition pass
        masked_phi = np.where(picked[touch], phi_c[touch], np.inf)
        part = np.argpartition(masked_phi, C - 1, axis=1)[:, :C]
        vals = np.take_along_axis(masked_phi, part, axis=1)
        order = np.argsort(vals, axis=1, kind="stable")
        sel = np.take_along_axis(part, order, axis=1)       # (Bt, C)
        svals = np.take_along_axis(vals, order, axis=1)
        act_t = np.isfinite(svals)
        lanes = np.arange(len(touch))[:, None]
        pts_t = safe[touch][lanes, sel]
        face_sel = face[touch][lanes, sel]
        phi_sel = np.take_along_axis(phi[touch], sel, axis=1)

        out_n = np.zeros((B, C, 2))
        out_p = np.zeros((B, C, 2))
        out_phi = np.zeros((B, C))
        out_face = np.zeros((B, C), dtype=int)
        out_active = np.zeros((B, C), dtype=bool)
        out_p[touch] = np.where(act_t[..., None], pts_t, 0.0)
        out_phi[touch] = np.where(act_t, phi_sel, 0.0)
        out_face[touch] = np.where(act_t, face_sel, 0)
        out_active[touch] = act_t
        wall_sel = act_t & (face_sel == FACE_WALL)
        out_n[touch, :, 0] = np.where(wall_sel, -1.0, 0.0)
        out_n[touch, :, 1] = np.where(act_t & ~wall_sel, 1.0, 0.0)
        out_t = np.stack([-out_n[..., 1], out_n[..., 0]], axis=-1)
        out_lever = out_p - poses[:, None, :2]
        out_lever[~out_active] = 0.0
        empty.normals[full_idx] = out_n
        empty.tangents[full_idx] = out_t
        empty.phis[full_idx] = out_phi
        empty.levers[full_idx] = out_lever
        empty.faces[full_idx] = out_face
        empty.active[full_idx] = out_active
        empty.points[full_idx] = out_p
        return empty

    def _cluster_deepest(self, flat, face, cand, phi_c):
        """Pick the deepest sample of every contact cluster.

        Clusters chain consecutive candidate rays on the same face that lie
        within the merge radius.  Implemented as a segmented min doubling
        scan (float32 internally; value propagation keeps comparisons
        exact).  Returns a boolean pick mask shaped like cand.
        """
        B, n = cand.shape
        d2 = ((flat - np.roll(flat, 1, axis=1)) ** 2).sum(axis=2)
        close = (d2 < self.cfg.merge_dist ** 2) \
            & (face == np.roll(face, 1, axis=1))
        link = cand & np.roll(cand, 1, axis=1) & close
        wrap_link = link[:, 0].copy()
        link[:, 0] = False
        fm = phi_c.copy()
        reach = link.copy()      # reach[j]: run extends 2^k back from j
        shift = 1
        while shift < n:
            fm[:, shift:] = np.where(
                reach[:, shift:],
                np.minimum(fm[:, shift:], fm[:, :-shift]),
                fm[:, shift:])
            reach[:, shift:] &= reach[:, :-shift]
            shift *= 2
        bm = phi_c.copy()
        reach = np.concatenate(
            [link[:, 1:], np.zeros((B, 1), dtype=bool)], axis=1)
        shift = 1
        while shift < n:
            bm[:, :-shift] = np.where(
                reach[:, :-shift],
                np.minimum(bm[:, :-shift], bm[:, shift:]),
                bm[:, :-shift])
            reach[:, :-shift] &= reach[:, shift:]
            shift *= 2
        total = np.minimum(fm, bm)
        prev_fm = np.concatenate(
            [np.full((B, 1), np.inf, dtype=phi_c.dtype), fm[:, :-1]], axis=1)
        picked = cand & (phi_c == total) & (~link | (prev_fm > total))
        # a cluster can wrap ray index 0; keep only its deepest sample
        has_break = (cand & ~link)[:, 1:].any(axis=1)
        wrap = wrap_link & has_break
        if wrap.any():
            head = np.cumprod(
                np.concatenate([cand[:, :1], link[:, 1:]], axis=1),
                axis=1).astype(bool)
            tail = np.cumprod(
                np.concatenate([link[:, 1:], cand[:, -1:]],
                               axis=1)[:, ::-1], axis=1)[:, ::-1].astype(bool)
            tail_wins = total[:, n - 1] < total[:, 0]
            picked &= ~((wrap & tail_wins)[:, None] & head)
            picked &= ~((wrap & ~tail_wins)[:, None] & tail)
        return picked

    def detect_contacts(self, theta, pose):
        """Single-scene contact list (deepest first)."""
        theta = np.asarray(theta, dtype=float)
        batch = self.detect_contacts_batch(theta[None, :],
                                           np.asarray(pose)[None, :])
        out = []
        for i in range(MAX_CONTACTS):
            if not batch.active[0, i]:
                continue
            out.append(ContactPoint(
                p_world=batch.points[0, i].copy(),
                normal=batch.normals[0, i].copy(),
                tangent=batch.tangents[0, i].copy(),
                phi=float(batch.phis[0, i]),
                lever=batch.levers[0, i].copy(),
                face=int(batch.faces[0, i]),
                mu=float(theta[MU])))
        return out

    # ---------------- contact QP ----------------

    def _effective_mu(self, contacts: ContactBatch, thetas):
        """Per-contact friction coefficient: the full cone applies inside
        the activation distance; farther candidates act as frictionless
        non-penetration guards (they exist only to stop a sub-step from
        crossing the face)."""
        near = contacts.phis < self.cfg.contact_threshold
        return np.where(near & contacts.active,
                        thetas[:, MU][:, None], 0.0)

    def _qp_terms(self, contacts: ContactBatch, thetas, sel):
        """Generator rows for the selected scenes: G (B, 2C, 3), c (B, 2C)."""
        n = contacts.normals[sel]
        t = contacts.tangents[sel]
        lever = contacts.levers[sel]
        phi = contacts.phis[sel]
        act = contacts.active[sel]
        mu = self._effective_mu(contacts, thetas)[sel][:, :, None]
        d_plus = n + mu * t
        d_minus = n - mu * t
        h = self.cfg.h

        def rows(d):
            cross = lever[..., 0] * d[..., 1] - lever[..., 1] * d[..., 0]
            return h * np.concatenate([d, cross[..., None]], axis=-1)

        B, C = phi.shape
        G = np.zeros((B, 2 * C, 3))
        c = np.full((B, 2 * C), -1.0)
        G[:, 0::2] = np.where(act[..., None], rows(d_plus), 0.0)
        G[:, 1::2] = np.where(act[..., None], rows(d_minus), 0.0)
        c[:, 0::2] = np.where(act, -phi, -1.0)
        c[:, 1::2] = np.where(act, -phi, -1.0)
        return G, c

    def _solve_buckets(self, contacts, thetas, q_lin):
        """Solve the contact QP bucketed by contact count.

        Returns per-row velocity, per-generator duals (force units, N),
        convergence flags and KKT residuals.
        """
        B = q_lin.shape[0]
        counts = contacts.counts
        v = np.empty((B, 3))
        duals = np.zeros((B, 2 * MAX_CONTACTS))
        ok = np.ones(B, dtype=bool)
        resid = np.zeros(B)
        iters = np.zeros(B, dtype=int)
        lo = 0
        for cap in QP_BUCKETS:
            sel = (counts > lo) & (counts <= cap)
            lo = cap
            if not sel.any():
                continue
            idx = np.where(sel)[0]
            G_full, c_full = self._qp_terms(contacts, thetas, idx)
            G, c = G_full[:, :2 * cap], c_full[:, :2 * cap]
            res = qp.solve_batch(self._p_diag, q_lin[idx], G, c,
                                 tol=self.cfg.qp_tol,
                                 max_iter=self.cfg.qp_max_iter)
            v[idx] = res.v
            duals[idx, :2 * cap] = _symmetrize_degenerate_pairs(
                res.duals, self._effective_mu(contacts, thetas)[idx, :cap])
            ok[idx] = res.converged
            resid[idx] = res.kkt_residual
            iters[idx] = res.iterations
        return v, duals, ok, resid, iters

    def _wrench_from_duals(self, contacts, thetas, duals):
        """Contact wrench on the object from generator duals (N)."""
        mu = self._effective_mu(contacts, thetas)[:, :, None]
        d_plus = contacts.normals + mu * contacts.tangents
        d_minus = contacts.normals - mu * contacts.tangents
        lam_p = duals[:, 0::2][..., None]
        lam_m = duals[:, 1::2][..., None]
        f = np.where(contacts.active[..., None],
                     lam_p * d_plus + lam_m * d_minus, 0.0)
        force = f.sum(axis=1)
        tau = (contacts.levers[..., 0] * f[..., 1]
               - contacts.levers[..., 1] * f[..., 0]).sum(axis=1)
        return np.concatenate([force, tau[:, None]], axis=1)

    # ---------------- stepping ----------------

    def step_batch(self, thetas, poses, commands):
        """Advance a batch one command; poses/commands broadcast over rows.

        Returns (poses_next (B, 3), wrenches (B, 3), ok (B,)).  Rows whose
        QP failed are flagged in ok and carry their last valid pose.
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        B = thetas.shape[0]
        poses = np.broadcast_to(
            np.asarray(poses, dtype=float), (B, 3)).copy()
        commands = np.broadcast_to(
            np.asarray(commands, dtype=float), (B, 3)).copy()
        cfg = self.cfg
        tau_ext = np.zeros(3) if cfg.gravity_comp else np.asarray(
            cfg.external_wrench, dtype=float)
        k_diag = np.asarray(cfg.stiffness)

        x = poses.copy()
        dphi = wrap_angle(commands[:, 2] - poses[:, 2])
        wrench = np.zeros((B, 3))
        ok = np.ones(B, dtype=bool)
        resid = np.zeros(B)
        local = self.cache.get_batch(thetas[:, [Z1, Z2]], thetas[:, SCALE])
        radius = np.linalg.norm(np.nan_to_num(local), axis=2).max(axis=1)
        reach = radius + np.abs(thetas[:, [TX, TZ]]).sum(axis=1)
        for k in range(1, cfg.n_sub + 1):
            frac = k / cfg.n_sub
            x_star = (1.0 - frac) * poses + frac * commands
            x_star[:, 2] = poses[:, 2] + frac * dphi
            # activation widened by the largest point displacement this
            # sub-step can produce, so motion cannot tunnel through a face
            diff = x_star - x
            diff[:, 2] = wrap_angle(diff[:, 2])
            travel = np.abs(diff[:, :2]).sum(axis=1) \
                + np.abs(diff[:, 2]) * reach
            margin = self.cfg.contact_threshold + travel
            contacts = self.detect_contacts_batch(thetas, x, local=local,
                                                  threshold=margin,
                                                  radius=radius)
            free = ~contacts.active.any(axis=1)
            if k == cfg.n_sub:
                wrench[free] = 0.0
            if free.all():
                x = x_star.copy()
                x[:, 2] = wrap_angle(x[:, 2])
                continue
            q_lin = -cfg.h * (diff * k_diag[None, :] + tau_ext[None, :])
            v, duals, solved, res_k, _ = self._solve_buckets(
                contacts, thetas, q_lin)
            ok &= solved | free
            resid = np.where(solved | free, resid, np.maximum(resid, res_k))
            stepped = x + cfg.h * v
            stepped[:, 2] = wrap_angle(stepped[:, 2])
            x_star_wrapped = x_star.copy()
            x_star_wrapped[:, 2] = wrap_angle(x_star_wrapped[:, 2])
            x = np.where(free[:, None], x_star_wrapped, stepped)
            if k == cfg.n_sub:
                forces = self._wrench_from_duals(contacts, thetas, duals)
                wrench = np.where(free[:, None], 0.0, forces)
        return x, wrench, ok, resid

    def step(self, theta, pose, command):
        """Single-parameter step; raises StepError on QP failure."""
        theta = np.asarray(theta, dtype=float)
        x, w, ok, resid = self.step_batch(theta[None, :], pose, command)
        if not ok[0]:
            raise StepError("contact QP did not converge", resid[0])
        return x[0], w[0]

    # ---------------- single-scene QP API ----------------

    def build_and_solve_qp(self, contacts, pose, sub_target, theta) -> QpSolution:
        """Solve one sub-step QP for an explicit contact list."""
        theta = np.asarray(theta, dtype=float)
        batch = _contacts_to_batch(contacts)
        diff = np.asarray(sub_target, dtype=float) - np.asarray(pose, dtype=float)
        diff[2] = wrap_angle(diff[2])
        cfg = self.cfg
        tau_ext = np.zeros(3) if cfg.gravity_comp else np.asarray(
            cfg.external_wrench, dtype=float)
        q_lin = (-cfg.h * (diff * np.asarray(cfg.stiffness) + tau_ext))[None, :]
        if batch.active.any():
            G, c = self._qp_terms(batch, theta[None, :], np.array([0]))
            res = qp.solve_batch(self._p_diag, q_lin, G, c,
                                 tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)
        else:
            res = qp.solve_batch(self._p_diag, q_lin,
                                 np.zeros((1, 0, 3)), np.zeros((1, 0)))
        if not res.converged[0]:
            raise StepError("contact QP did not converge",
                            res.kkt_residual[0])
        n_c = len(contacts)
        if n_c:
            mus = self._effective_mu(batch, theta[None, :])[:, :n_c]
            sym = _symmetrize_degenerate_pairs(res.duals, mus)
            duals = sym[0][:2 * n_c].reshape(n_c, 2)
        else:
            duals = np.zeros((0, 2))
        sol = QpSolution(v=res.v[0], lambdas=cfg.h * duals,
                         wrench=Wrench(), kkt_residual=float(res.kkt_residual[0]),
                         iterations=int(res.iterations[0]))
        sol.wrench = self.recover_wrench(sol, contacts)
        return sol

    def recover_wrench(self, sol: QpSolution, contacts) -> Wrench:
        """Map generator impulses to the measured wrench (forces in N)."""
        total = np.zeros(3)
        for i, cp in enumerate(contacts):
            lam = sol.lambdas[i] / self.cfg.h
            f = lam[0] * (cp.normal + cp.mu * cp.tangent) \
                + lam[1] * (cp.normal - cp.mu * cp.tangent)
            total[:2] += f
            total[2] += cp.lever[0] * f[1] - cp.lever[1] * f[0]
        return Wrench(*total)


def _symmetrize_degenerate_pairs(duals, mus):
    """Even dual split for frictionless contacts.

    With mu = 0 the two cone generators coincide and the dual split is
    arbitrary; the symmetric split is canonical and preserves every KKT
    condition.  ``mus`` is the per-contact effective friction (B, C).
    """
    if not (mus == 0.0).any():
        return duals
    pairs = duals.reshape(duals.shape[0], -1, 2)
    mean = pairs.mean(axis=2, keepdims=True)
    out = np.where((mus == 0.0)[:, :, None], mean, pairs)
    return out.reshape(duals.shape)


def _contacts_to_batch(contacts) -> ContactBatch:
    C = MAX_CONTACTS
    normals = np.zeros((1, C, 2))
    tangents = np.zeros((1, C, 2))
    phis = np.zeros((1, C))
    levers = np.zeros((1, C, 2))
    faces = np.zeros((1, C), dtype=int)
    active = np.zeros((1, C), dtype=bool)
    points = np.zeros((1, C, 2))
    for i, cp in enumerate(contacts[:C]):
        normals[0, i] = cp.normal
        tangents[0, i] = cp.tangent
        phis[0, i] = cp.phi
        levers[0, i] = cp.lever
        faces[0, i] = cp.face
        active[0, i] = True
        points[0, i] = cp.p_world
    return ContactBatch(normals, tangents, phis, levers, faces, active, points)
