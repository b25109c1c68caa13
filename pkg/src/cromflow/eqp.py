"""Empirical quadrature for the reduced advection term.

A sparse non-negative reweighting of the component's quadrature points is
trained so that the projected advection integrals of all training snapshots
are reproduced within a relative threshold.  The weights come from a
Lawson-Hanson active-set iteration stopped as soon as the threshold is met,
which favors small support over least-squares optimality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _binio
from .weakforms import ComponentOperators

RULE_MAGIC = b"CROMEQP1"


class EqpError(RuntimeError):
    """Raised when the weight training cannot reach its residual target."""

    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


@dataclass
class EqpManifest:
    """Constraint system for one component: G w = d over quadrature weights.

    Row (b, s) of G holds the unit-weight contribution of every quadrature
    point to the projection of snapshot s's advection onto basis column b;
    d holds the full-quadrature values, so G @ w_full == d.
    """

    component: str
    G: np.ndarray                # (R * S, n_points)
    d: np.ndarray                # (R * S,)
    w_full: np.ndarray           # (n_points,)
    n_basis: int
    n_snapshots: int


@dataclass
class EqpRule:
    """Sparse positive quadrature rule with cached basis data at its points."""

    component: str
    element_ids: np.ndarray      # (n,) int
    local_ids: np.ndarray        # (n,) int, quadrature index within the element
    weights: np.ndarray          # (n,) strictly positive
    eps: float                   # trained relative threshold
    residual: float              # achieved relative residual
    n_basis: int
    basis_values: np.ndarray = field(repr=False, default=None)    # (n, R, 2)
    basis_grads: np.ndarray = field(repr=False, default=None)     # (n, R, 2, 2)

    def __post_init__(self):
        if np.any(self.weights <= 0.0):
            raise ValueError("EQP weights must be strictly positive")
        if self.residual > self.eps * (1.0 + 1e-9) and self.eps > 0:
            raise ValueError(
                f"stored residual {self.residual:.3e} violates threshold {self.eps:.3e}"
            )

    @property
    def n_points(self) -> int:
        return self.weights.size


def build_manifest(ops: ComponentOperators, phi_u: np.ndarray, snapshots) -> EqpManifest:
    """Assemble the EQP constraint matrix from basis columns and snapshots.

    ``snapshots`` is a :class:`~cromflow.reduction.SnapshotSet` or a plain
    (n_u, S) velocity snapshot matrix.
    """
    U = snapshots.U if hasattr(snapshots, "U") else np.asarray(snapshots)
    component = getattr(snapshots, "component", "")
    vals, _ = ops.adv.basis_at_quad(phi_u)          # (n_pts, R, 2)
    w_full = ops.adv.quad_weights
    space = ops.space
    r = phi_u.shape[1]
    s_count = U.shape[1]
    rows = []
    for s in range(s_count):
        u = U[:, s]
        loc = space.local_velocity(u)
        uq = np.einsum("qa,tac->tqc", space.p2v_q, loc).reshape(-1, 2)
        gq = np.einsum("tqad,tac->tqcd", space.p2g_q, loc).reshape(-1, 2, 2)
        aq = np.einsum("qd,qcd->qc", uq, gq)          # u . grad u per point
        rows.append(np.einsum("qbc,qc->bq", vals, aq))
    G = np.vstack(rows)                               # rows grouped (s, b)
    d = G @ w_full
    return EqpManifest(
        component=component,
        G=G,
        d=d,
        w_full=w_full,
        n_basis=r,
        n_snapshots=s_count,
    )


def nnls(G: np.ndarray, d: np.ndarray, rel_tol: float = 0.0, max_iter: Optional[int] = None):
    """Non-negative least squares by Lawson-Hanson active sets, early-stopped.

    With ``rel_tol > 0`` the active-set loop terminates as soon as
    ||G w - d|| <= rel_tol ||d||, trading least-squares optimality for a
    small support; :class:`EqpError` is raised when even the NNLS optimum
    misses that target.  With ``rel_tol = 0`` it runs to the NNLS optimum.
    Ties in column selection break to the lowest index.
    """
    G = np.asarray(G, dtype=float)
    d = np.asarray(d, dtype=float)
    n = G.shape[1]
    d_norm = float(np.linalg.norm(d))
    target = rel_tol * d_norm
    w = np.zeros(n)
    if d_norm == 0.0 or (rel_tol > 0 and d_norm <= target):
        return w

    A = G.T @ G
    b = G.T @ d
    passive = np.zeros(n, dtype=bool)
    max_iter = max_iter or 3 * n
    grad_tol = 1e-12 * max(np.abs(b).max(), 1.0)

    best = d_norm
    at_optimum = False
    for _ in range(max_iter):
        if rel_tol > 0 and best <= target:
            return w
        grad = b - A @ w
        grad[passive] = -np.inf
        k = int(np.argmax(grad))
        if grad[k] <= grad_tol:
            at_optimum = True
            break
        passive[k] = True
        # inner loop: unconstrained solve on the passive set, step back on
        # negative entries until feasible
        while True:
            idx = np.flatnonzero(passive)
            sub = A[np.ix_(idx, idx)]
            try:
                z = np.linalg.solve(sub, b[idx])
            except np.linalg.LinAlgError:
                z, *_ = np.linalg.lstsq(sub, b[idx], rcond=None)
            if z.size == 0 or z.min() > 0.0:
                w = np.zeros(n)
                w[idx] = z
                break
            zfull = np.zeros(n)
            zfull[idx] = z
            mask = passive & (zfull <= 0.0)
            alpha = np.min(w[mask] / (w[mask] - zfull[mask]))
            w = w + alpha * (zfull - w)
            passive &= w > 0.0
            w[~passive] = 0.0
        best = float(np.linalg.norm(G @ w - d))

    if at_optimum and rel_tol == 0.0:
        return w
    if best <= target:
        return w
    raise EqpError(
        f"NNLS stalled at relative residual {best / d_norm:.3e} (target {rel_tol:.3e})",
        best_residual=best / d_norm,
    )


def train_rule(
    manifest: EqpManifest,
    ops: ComponentOperators,
    phi_u: np.ndarray,
    eps: float,
) -> EqpRule:
    """Train a sparse rule meeting the relative threshold on the manifest."""
    w = nnls(manifest.G, manifest.d, rel_tol=eps)
    support = np.flatnonzero(w > 0.0)
    d_norm = np.linalg.norm(manifest.d)
    res = float(np.linalg.norm(manifest.G @ w - manifest.d))
    res_rel = res / d_norm if d_norm > 0 else 0.0
    elem, loc = ops.adv.point_ids()
    vals, grads = ops.adv.basis_at_quad(phi_u)
    if support.size > manifest.n_basis * manifest.n_snapshots + 1:
        raise EqpError("support exceeds the constraint count")
    return EqpRule(
        component=manifest.component,
        element_ids=elem[support],
        local_ids=loc[support],
        weights=w[support],
        eps=float(eps),
        residual=res_rel,
        n_basis=manifest.n_basis,
        basis_values=vals[support],
        basis_grads=grads[support],
    )


def attach_basis_data(rule: EqpRule, ops: ComponentOperators, phi_u: np.ndarray) -> EqpRule:
    """Recompute the cached per-point basis data (after loading from file)."""
    n_q = ops.space.qw.shape[1]
    flat = rule.element_ids * n_q + rule.local_ids
    vals, grads = ops.adv.basis_at_quad(phi_u)
    rule.basis_values = vals[flat]
    rule.basis_grads = grads[flat]
    rule.n_basis = phi_u.shape[1]
    return rule


def eqp_advection_value(rule: EqpRule, u_hat: np.ndarray) -> np.ndarray:
    """Reduced advection evaluated on the sparse point set."""
    if rule.n_points == 0:
        return np.zeros(rule.n_basis)
    u = np.einsum("qkc,k->qc", rule.basis_values, u_hat)
    gu = np.einsum("qkcd,k->qcd", rule.basis_grads, u_hat)
    a = np.einsum("qd,qcd->qc", u, gu)
    return np.einsum("q,qic,qc->i", rule.weights, rule.basis_values, a)


def eqp_advection_jacobian(rule: EqpRule, u_hat: np.ndarray) -> np.ndarray:
    if rule.n_points == 0:
        return np.zeros((rule.n_basis, rule.n_basis))
    u = np.einsum("qkc,k->qc", rule.basis_values, u_hat)
    gu = np.einsum("qkcd,k->qcd", rule.basis_grads, u_hat)
    # d/du_l: phi_l . grad u + u . grad phi_l
    t1 = np.einsum("qld,qcd->qcl", rule.basis_values, gu)
    t2 = np.einsum("qd,qlcd->qcl", u, rule.basis_grads)
    return np.einsum("q,qic,qcl->il", rule.weights, rule.basis_values, t1 + t2)


def save_rule(rule: EqpRule, path) -> None:
    import struct

    with open(path, "wb") as fh:
        _binio.write_magic(fh, RULE_MAGIC)
        _binio.write_str(fh, rule.component)
        _binio.write_u64(fh, rule.n_points)
        for e, l, w in zip(rule.element_ids, rule.local_ids, rule.weights):
            fh.write(struct.pack("<IBd", int(e), int(l), float(w)))
        fh.write(struct.pack("<dd", rule.eps, rule.residual))


def load_rule(path) -> EqpRule:
    import struct

    with open(path, "rb") as fh:
        _binio.check_magic(fh, RULE_MAGIC)
        component = _binio.read_str(fh)
        count = _binio.read_u64(fh)
        elem = np.empty(count, dtype=np.int64)
        loc = np.empty(count, dtype=np.int64)
        wts = np.empty(count)
        for i in range(count):
            raw = fh.read(13)
            if len(raw) != 13:
                raise _binio.FormatError("truncated file")
            e, l, w = struct.unpack("<IBd", raw)
            elem[i], loc[i], wts[i] = e, l, w
        tail = fh.read(16)
        if len(tail) != 16:
            raise _binio.FormatError("truncated file")
        eps, residual = struct.unpack("<dd", tail)
    return EqpRule(component, elem, loc, wts, eps, residual, n_basis=0)
