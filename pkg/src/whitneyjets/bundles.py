"""Bundles of linear subspaces over finite samples and their Glaeser saturation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import linalg as sla
from scipy.spatial import cKDTree

from .config import DEFAULT, Tolerances


@dataclass(frozen=True, eq=False)
class Subspace:
    """A subspace of R^ambient_dim held through an orthonormal column basis."""
    ambient_dim: int
    basis: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.basis, dtype=float).reshape(self.ambient_dim, -1)
        object.__setattr__(self, "basis", B)

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @classmethod
    def zero(cls, r: int) -> "Subspace":
        return cls(r, np.zeros((r, 0)))

    @classmethod
    def full(cls, r: int) -> "Subspace":
        return cls(r, np.eye(r))

    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def project(self, v: np.ndarray) -> np.ndarray:
        return self.basis @ (self.basis.T @ v)

    def contains(self, v, theta: float | None = None) -> bool:
        """Principal angle between ``v`` and the subspace is below ``theta``."""
        theta = DEFAULT.theta_tol if theta is None else theta
        v = np.asarray(v, float)
        nv = np.linalg.norm(v)
        if nv == 0:
            return True
        c = min(1.0, np.linalg.norm(self.basis.T @ v) / nv)
        return bool(np.arccos(c) < theta)

    def complement(self) -> "Subspace":
        if self.rank == 0:
            return Subspace.full(self.ambient_dim)
        if self.rank == self.ambient_dim:
            return Subspace.zero(self.ambient_dim)
        Q, _ = np.linalg.qr(self.basis, mode="complete")
        return Subspace(self.ambient_dim, Q[:, self.rank:])

    def to_json(self) -> dict:
        return {"rank": self.rank, "basis": self.basis.T.tolist()}

    @classmethod
    def from_json(cls, d: dict, r: int) -> "Subspace":
        rows = d.get("basis") or []
        if len(rows) != int(d.get("rank", len(rows))):
            raise ValueError("fiber rank does not match basis length")
        if not rows:
            return cls.zero(r)
        return cls(r, np.array(rows, float).T)


def subspace_span(vectors, r: int | None = None, tol: Tolerances = DEFAULT) -> Subspace:
    """Orthonormal basis of the span; singular values below eps_rank * sigma_max are dropped."""
    V = np.asarray(vectors, dtype=float)
    if V.size == 0:
        if r is None:
            raise ValueError("ambient dimension needed for an empty span")
        return Subspace.zero(r)
    if V.ndim == 1:
        V = V[None, :]
    # rows are vectors
    r = V.shape[1] if r is None else r
    if V.shape[1] != r:
        raise ValueError("vectors do not share the ambient dimension")
    U, s, _ = np.linalg.svd(V.T, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return Subspace.zero(r)
    k = int(np.sum(s > tol.eps_rank * s[0]))
    return Subspace(r, U[:, :k])


def _check_same(A: Subspace, B: Subspace):
    if A.ambient_dim != B.ambient_dim:
        raise ValueError(f"ambient dimensions differ: {A.ambient_dim} vs {B.ambient_dim}")


def subspace_sum(A: Subspace, B: Subspace, tol: Tolerances = DEFAULT) -> Subspace:
    _check_same(A, B)
    return subspace_span(np.hstack([A.basis, B.basis]).T, A.ambient_dim, tol)


def subspace_intersect(A: Subspace, B: Subspace, tol: Tolerances = DEFAULT) -> Subspace:
    """A ∩ B = (A^perp + B^perp)^perp."""
    _check_same(A, B)
    return subspace_sum(A.complement(), B.complement(), tol).complement()


def principal_angles(A: Subspace, B: Subspace) -> np.ndarray:
    """Principal angles, ascending; length min(rank A, rank B)."""
    _check_same(A, B)
    if A.rank == 0 or B.rank == 0:
        return np.zeros(0)
    return np.sort(sla.subspace_angles(A.basis, B.basis))


def contained_in(A: Subspace, B: Subspace, theta: float | None = None) -> bool:
    """Every direction of A is within ``theta`` of B."""
    theta = DEFAULT.theta_tol if theta is None else theta
    if A.rank == 0:
        return True
    if A.rank > B.rank:
        return False
    # largest angle between a unit vector of A and B
    s = np.linalg.svd(B.basis.T @ A.basis, compute_uv=False)
    c = float(np.clip(s.min(), 0.0, 1.0)) if s.size == A.rank else 0.0
    return bool(np.arccos(c) < theta)


def near_part(A: Subspace, B: Subspace, theta: float) -> Subspace:
    """Directions of A whose angle to B is below ``theta``."""
    _check_same(A, B)
    if A.rank == 0 or B.rank == 0:
        return Subspace.zero(A.ambient_dim)
    U, s, _ = np.linalg.svd(A.basis.T @ B.basis, full_matrices=False)
    keep = s > np.cos(theta)
    return Subspace(A.ambient_dim, A.basis @ U[:, keep])


def subspace_limit(seq: Sequence[Subspace], theta: float | None = None,
                   window: int = 3) -> tuple[Subspace, bool]:
    """Limit of a scale-tagged sequence, ordered coarse to fine.

    Returns the directions of the finest subspace that stay within ``theta``
    of every subspace in the trailing ``window``, and whether the window has
    converged (equal ranks and drift below ``theta``).
    """
    theta = DEFAULT.theta_tol if theta is None else theta
    if len(seq) < 3:
        raise ValueError("subspace_limit needs at least 3 scales")
    tail = list(seq[-window:])
    lim = tail[-1]
    for S in tail[:-1]:
        lim = near_part(lim, S, theta)
    ranks = {S.rank for S in tail}
    converged = len(ranks) == 1
    if converged:
        for S, T in zip(tail, tail[1:]):
            ang = principal_angles(S, T)
            if ang.size and ang.max() >= theta:
                converged = False
    return lim, converged


@dataclass(frozen=True, eq=False)
class Bundle:
    points: np.ndarray
    fibers: tuple[Subspace, ...]
    ambient_dim: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        fibers = tuple(self.fibers)
        if len(fibers) != len(pts):
            raise ValueError("one fiber per point required")
        for F in fibers:
            if F.ambient_dim != self.ambient_dim:
                raise ValueError("all fibers must share ambient_dim")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "fibers", fibers)

    def __len__(self) -> int:
        return len(self.fibers)

    def dims(self) -> np.ndarray:
        return np.array([F.rank for F in self.fibers], dtype=int)

    def with_fibers(self, fibers) -> "Bundle":
        return Bundle(self.points, tuple(fibers), self.ambient_dim)

    @classmethod
    def constant(cls, points, S: Subspace) -> "Bundle":
        pts = np.asarray(points, float)
        return cls(pts, tuple(S for _ in range(len(pts))), S.ambient_dim)

    def to_json(self) -> dict:
        return {"ambient_dim": self.ambient_dim, "points": self.points.tolist(),
                "fibers": [F.to_json() for F in self.fibers]}

    @classmethod
    def from_json(cls, d: dict) -> "Bundle":
        r = int(d["ambient_dim"])
        return cls(np.array(d["points"], float),
                   tuple(Subspace.from_json(f, r) for f in d["fibers"]), r)


@dataclass(frozen=True)
class GlaeserOpSpec:
    """A bundle refinement rule together with its declared locality radius.

    ``radius`` bounds how far from ``a`` the rule may look when it computes the
    new fiber at ``a``; ``glaeser_axiom_check`` probes exactly that claim.
    """
    rule: Callable[[Bundle], Bundle]
    radius: float
    name: str = "rho"

    def __call__(self, E: Bundle) -> Bundle:
        return self.rule(E)


@dataclass
class SaturationTrace:
    dims: list[np.ndarray] = field(default_factory=list)
    iterations: int = 0
    stabilized: bool = False
    cap: int = 0

    def to_json(self) -> dict:
        return {"iterations": self.iterations, "stabilized": self.stabilized,
                "cap": self.cap, "d_i": [d.tolist() for d in self.dims]}


class NonMonotoneError(RuntimeError):
    """A refinement step shrank a fiber, so the operation is not a Glaeser operation."""


def _same_fibers(E: Bundle, F: Bundle, theta: float) -> bool:
    for A, B in zip(E.fibers, F.fibers):
        if A.rank != B.rank:
            return False
        ang = principal_angles(A, B)
        if ang.size and ang.max() >= theta:
            return False
    return True


def saturate(E: Bundle, rho: GlaeserOpSpec, cap: int | None = None,
             tol: Tolerances = DEFAULT) -> tuple[Bundle, SaturationTrace]:
    """Iterate ``rho`` until a step changes nothing, with the hard cap 2r."""
    cap = 2 * E.ambient_dim if cap is None else cap
    trace = SaturationTrace(dims=[E.dims()], cap=cap)
    cur = E
    for _ in range(cap):
        nxt = rho(cur)
        trace.iterations += 1
        d_old, d_new = trace.dims[-1], nxt.dims()
        if np.any(d_new < d_old):
            bad = int(np.argmax(d_new < d_old))
            raise NonMonotoneError(
                f"fiber dimension dropped at point {bad}: {d_old[bad]} -> {d_new[bad]}")
        trace.dims.append(d_new)
        if _same_fibers(cur, nxt, tol.theta_tol):
            trace.stabilized = True
            return nxt, trace
        cur = nxt
    return cur, trace


def span_closure(E: Bundle, tol: Tolerances = DEFAULT, merge_radius: float = 1e-12) -> Bundle:
    """The operation lambda: fiberwise span of the closure.

    On a finite sample the closure only merges coincident points, so this is
    the fiberwise span plus the union over points closer than ``merge_radius``.
    """
    tree = cKDTree(E.points)
    out = []
    for i, F in enumerate(E.fibers):
        nb = tree.query_ball_point(E.points[i], merge_radius)
        if len(nb) == 1:
            out.append(subspace_span(F.basis.T, E.ambient_dim, tol))
        else:
            out.append(subspace_span(np.hstack([E.fibers[j].basis for j in nb]).T,
                                     E.ambient_dim, tol))
    return E.with_fibers(out)


def lambda_op(tol: Tolerances = DEFAULT) -> GlaeserOpSpec:
    return GlaeserOpSpec(lambda E: span_closure(E, tol), radius=0.0, name="lambda")


def glaeser_axiom_check(rho: GlaeserOpSpec, E: Bundle, probe_points: Iterable[int] | None = None,
                        seed: int = 0, tol: Tolerances = DEFAULT) -> dict:
    """Check containment E_a ⊆ rho(E)_a and locality within the declared radius."""
    R = rho(E)
    violations = []
    for i, (A, B) in enumerate(zip(E.fibers, R.fibers)):
        if not contained_in(A, B, tol.theta_tol):
            violations.append({"point": i, "kind": "containment",
                               "rank_before": A.rank, "rank_after": B.rank})
    rng = np.random.default_rng(seed)
    idx = list(range(len(E))) if probe_points is None else list(probe_points)
    locality = []
    for i in idx:
        d = np.linalg.norm(E.points - E.points[i], axis=1)
        far = np.where(d > rho.radius * (1 + 1e-9) + 1e-12)[0]
        if far.size == 0:
            continue
        fibers = list(E.fibers)
        for j in far:
            k = rng.integers(0, E.ambient_dim + 1)
            fibers[j] = subspace_span(rng.standard_normal((k, E.ambient_dim)), E.ambient_dim, tol) \
                if k else Subspace.zero(E.ambient_dim)
        R2 = rho(E.with_fibers(fibers))
        A, B = R.fibers[i], R2.fibers[i]
        ok = A.rank == B.rank and (A.rank == 0 or principal_angles(A, B).max() < tol.theta_tol)
        locality.append(i)
        if not ok:
            violations.append({"point": i, "kind": "locality",
                               "rank_before": A.rank, "rank_after": B.rank})
    return {"operation": rho.name, "containment_ok": not any(v["kind"] == "containment" for v in violations),
            "locality_ok": not any(v["kind"] == "locality" for v in violations),
            "locality_probed": locality, "violations": violations,
            "tolerances": tol.echo()}


def usc_probe(E: Bundle, radius: float) -> dict:
    """Flag points whose fiber dimension is below the limsup of nearby dimensions.

    The limsup at ``a`` is estimated as the maximum fiber dimension over the
    nearest points within ``radius`` that are themselves accumulating at
    ``a`` (every neighbor has a closer neighbor toward ``a`` in the sample).
    Violations are numerical-convergence warnings.
    """
    dims = E.dims()
    tree = cKDTree(E.points)
    warnings = []
    for i in range(len(E)):
        nb = [j for j in tree.query_ball_point(E.points[i], radius) if j != i]
        if not nb:
            continue
        lim = int(dims[nb].max())
        if dims[i] < lim:
            warnings.append({"point": i, "dim": int(dims[i]), "limsup_estimate": lim})
    return {"radius": radius, "violations": warnings, "ok": not warnings}
