"""Whitney fields on finite samples: remainders, the modulus check, 1-D criteria.

A field stores, at every sample point, the numbers F^alpha in the scaled jet
basis, so a row of ``jets`` is literally the coefficient vector of the
Taylor polynomial T^p_a F.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import BPoly
from scipy.spatial import cKDTree

from .config import DEFAULT, Tolerances
from .jetalg import JetDual, JetSignature, Poly, _shift_pattern, scaled_monomials, shift_matrix


@dataclass(frozen=True, eq=False)
class WhitneyField:
    sig: JetSignature
    points: np.ndarray
    jets: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        J = np.asarray(self.jets, dtype=float)
        if J.ndim == 1:
            J = J[:, None]
        if pts.shape[1] != self.sig.n:
            raise ValueError(f"points live in R^{pts.shape[1]}, signature says n={self.sig.n}")
        if J.shape != (len(pts), self.sig.dim):
            raise ValueError(f"jets must have shape ({len(pts)}, {self.sig.dim}), got {J.shape}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "jets", J)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def values(self) -> np.ndarray:
        return self.jets[:, 0]

    @classmethod
    def from_polynomial(cls, P: Poly, points) -> "WhitneyField":
        """The field F^alpha = D^alpha P restricted to ``points``."""
        pts = np.asarray(points, float).reshape(len(points), -1)
        S = shift_matrix(P.sig, pts - P.center)
        return cls(P.sig, pts, S @ P.coeffs)

    def index_of(self, a) -> int:
        if isinstance(a, (int, np.integer)):
            if not 0 <= a < len(self):
                raise IndexError(f"point index {a} out of range")
            return int(a)
        a = np.atleast_1d(np.asarray(a, float))
        d = np.linalg.norm(self.points - a, axis=1)
        i = int(np.argmin(d))
        if d[i] > 1e-12 * max(1.0, float(np.abs(a).max(initial=0.0))):
            raise KeyError(f"{a.tolist()} is not a sample point")
        return i

    def to_json(self) -> dict:
        return {"n": self.sig.n, "p": self.sig.p, "points": self.points.tolist(),
                "jets": self.jets.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "WhitneyField":
        for key in ("n", "p", "points", "jets"):
            if key not in d:
                raise ValueError(f"field JSON is missing '{key}'")
        sig = JetSignature(int(d["n"]), int(d["p"]))
        return cls(sig, np.array(d["points"], float).reshape(-1, sig.n),
                   np.array(d["jets"], float).reshape(-1, sig.dim))

    @classmethod
    def from_csv(cls, path, p: int = 0) -> "WhitneyField":
        """Order-0 field from columns x1..xn, f. Higher jets are zero unless p = 0."""
        pts, vals = read_points_csv(path, need_values=True)
        sig = JetSignature(pts.shape[1], p)
        J = np.zeros((len(pts), sig.dim))
        J[:, 0] = vals
        return cls(sig, pts, J)

    def to_csv(self, path) -> None:
        n = self.sig.n
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(n)] + ["f"])
            for x, v in zip(self.points, self.values):
                w.writerow([repr(float(t)) for t in x] + [repr(float(v))])


def read_points_csv(path, need_values: bool = False):
    """Read a points CSV with header x1..xn[,f]; errors name the offending line."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    head = [h.strip() for h in rows[0]]
    xcols = [i for i, h in enumerate(head) if h.startswith("x")]
    fcol = head.index("f") if "f" in head else None
    if not xcols:
        raise ValueError(f"{path}:1: header needs columns x1..xn")
    if need_values and fcol is None:
        raise ValueError(f"{path}:1: header needs an 'f' column")
    pts, vals = [], []
    for ln, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(head):
            raise ValueError(f"{path}:{ln}: expected {len(head)} fields, got {len(row)}")
        try:
            pts.append([float(row[i]) for i in xcols])
            if fcol is not None:
                vals.append(float(row[fcol]))
        except ValueError as e:
            raise ValueError(f"{path}:{ln}: {e}") from None
    return np.array(pts, float), (np.array(vals, float) if fcol is not None else None)


def taylor_poly(F: WhitneyField, a) -> Poly:
    i = F.index_of(a)
    return Poly(F.sig, F.points[i], F.jets[i])


def _remainders(F: WhitneyField, ia: np.ndarray, ib: np.ndarray, both: bool = False):
    """(R^p_a F)^alpha(b) for index arrays, all alpha at once.

    With ``both`` the reversed remainders (R^p_b F)(a) are returned too; they
    reuse the same monomials since (-d)^gamma = (-1)^|gamma| d^gamma.
    """
    rows, cols, gam = _shift_pattern(F.sig.n, F.sig.p)
    mono = scaled_monomials(F.sig, F.points[ib] - F.points[ia]).T
    sign = (-1.0) ** F.sig.orders()
    Ja = F.jets.T[:, ia]
    Jb = F.jets.T[:, ib]
    R = Jb.copy()
    Rr = Ja.copy() if both else None
    # walk the sparse shift pattern instead of forming the matrices
    for r, c, g in zip(rows, cols, gam):
        R[r] -= mono[g] * Ja[c]
        if both:
            Rr[r] -= (sign[g] * mono[g]) * Jb[c]
    return (R.T, Rr.T) if both else R.T


def remainder(F: WhitneyField, a, b, alpha: Sequence[int]) -> float:
    ia, ib = F.index_of(a), F.index_of(b)
    R = _remainders(F, np.array([ia]), np.array([ib]))[0]
    return float(R[F.sig.index(tuple(alpha))])


def delta_quotient(F: WhitneyField, a, b, alpha: Sequence[int]) -> float:
    ia, ib = F.index_of(a), F.index_of(b)
    d = float(np.linalg.norm(F.points[ib] - F.points[ia]))
    if d == 0.0:
        raise ValueError("delta quotient needs a != b")
    return remainder(F, ia, ib, alpha) / d ** (F.sig.p - sum(alpha))


def field_pairing(xi: JetDual, F: WhitneyField, a) -> float:
    """xi(F, a) := sum_alpha xi_alpha(a) F^alpha(a)."""
    i = F.index_of(a)
    return float(xi.recenter(F.points[i]).coords @ F.jets[i])


def pair_identity_residual(F: WhitneyField, xi: JetDual | None, eta: JetDual, a, b) -> float:
    """|LHS - RHS| of the two-point identity; ``xi=None`` gives the one-functional case."""
    ia, ib = F.index_of(a), F.index_of(b)
    pa, pb = F.points[ia], F.points[ib]
    d = float(np.linalg.norm(pb - pa))
    if d == 0.0:
        raise ValueError("pair identity needs a != b")
    if xi is None:
        xi = JetDual(eta.sig, pa, np.zeros(eta.sig.dim))
    lhs = field_pairing(xi, F, ia) + field_pairing(eta, F, ib)
    eta_b = eta.recenter(pb).coords
    corr = 0.0
    for k, alpha in enumerate(F.sig.basis):
        w = d ** (F.sig.p - sum(alpha))
        corr += delta_quotient(F, ia, ib, alpha) * w * eta_b[k]
    rhs = field_pairing(xi + eta, F, ia) + corr
    return abs(lhs - rhs)


@dataclass
class ModulusReport:
    edges: list[float]
    maxima: list[float | None]
    counts: list[int]
    verdict: str
    witness: dict | None = None
    bin_witness: list[dict | None] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    tolerances: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        bins = []
        for k in range(len(self.maxima)):
            bins.append({"lo": self.edges[k + 1], "hi": self.edges[k],
                         "max": self.maxima[k], "count": self.counts[k],
                         "witness": self.bin_witness[k] if self.bin_witness else None})
        return {"kind": "modulus", "verdict": self.verdict, "bins": bins,
                "witness": self.witness, "notes": self.notes,
                "tolerances": self.tolerances}


def _bin_edges(schedule: Sequence[float]) -> np.ndarray:
    s = [float(x) for x in schedule]
    if not s:
        raise ValueError("empty scale schedule")
    if any(x <= 0 for x in s) or any(b >= a for a, b in zip(s, s[1:])):
        raise ValueError("schedule must be positive and strictly decreasing")
    return np.array(s + [0.0])


def _verdict(maxima: list[float | None], tol: Tolerances) -> tuple[str, list[str]]:
    """Pass: finest three nonempty bins nonincreasing and finest < eps_mod.
    Fail: every nonempty bin has max >= eps_fail. Otherwise inconclusive."""
    vals = [m for m in maxima if m is not None]
    notes = []
    if not vals:
        return "inconclusive", ["no pairs within the coarsest scale"]
    if min(vals) >= tol.eps_fail:
        return "fail", notes
    tail = [0.0 if v < tol.noise_floor else v for v in vals[-3:]]
    if len(tail) < 3:
        notes.append("fewer than 3 populated bins; cannot certify decay")
        return "inconclusive", notes
    mono = all(b <= a * (1 + 1e-9) for a, b in zip(tail, tail[1:]))
    if mono and tail[-1] < tol.eps_mod:
        return "pass", notes
    if not mono:
        notes.append("per-bin maxima not decreasing over the finest bins")
    else:
        notes.append(f"finest bin max {tail[-1]:.3g} >= eps_mod")
    return "inconclusive", notes


def _binned_max(dist: np.ndarray, vals: np.ndarray, edges: np.ndarray):
    """Per-bin max of ``vals`` with the arg index; bins are (edges[k+1], edges[k]]."""
    nb = len(edges) - 1
    # edges descend; bin k holds edges[k+1] < d <= edges[k]
    k = np.searchsorted(-edges, -dist, side="left") - 1
    k = np.clip(k, 0, nb - 1)
    out = [None] * nb
    arg = [None] * nb
    for b in range(nb):
        m = np.where(k == b)[0]
        if m.size:
            j = m[np.argmax(vals[m])]
            out[b] = float(vals[j])
            arg[b] = int(j)
    counts = np.bincount(k, minlength=nb).tolist()
    return out, arg, counts


def whitney_check(F: WhitneyField, schedule: Sequence[float],
                  tol: Tolerances = DEFAULT, chunk: int = 200_000) -> ModulusReport:
    """Scan ordered pairs with |a-b| <= schedule[0] and bin max |delta_alpha(a,b)|."""
    edges = _bin_edges(schedule)
    if len(F) < 2:
        raise ValueError("whitney_check needs at least 2 points")
    tree = cKDTree(F.points)
    pairs = tree.query_pairs(edges[0], output_type="ndarray")
    if pairs.size == 0:
        return ModulusReport(edges.tolist(), [None] * (len(edges) - 1), [0] * (len(edges) - 1),
                             "inconclusive", notes=["no pairs within the coarsest scale"],
                             tolerances=tol.echo())
    i0, i1 = pairs[:, 0], pairs[:, 1]
    m = len(i0)
    ia = np.concatenate([i0, i1])
    ib = np.concatenate([i1, i0])
    d1 = np.linalg.norm(F.points[i1] - F.points[i0], axis=1)
    dist = np.concatenate([d1, d1])
    expo = F.sig.p - F.sig.orders()
    best = np.empty(2 * m)
    best_alpha = np.empty(2 * m, dtype=int)
    for s in range(0, m, chunk):
        sl = slice(s, min(s + chunk, m))
        w = d1[sl, None] ** expo
        for off, R in zip((0, m), _remainders(F, i0[sl], i1[sl], both=True)):
            Q = np.abs(R) / w
            k = np.argmax(Q, axis=1)
            best_alpha[sl.start + off:sl.stop + off] = k
            best[sl.start + off:sl.stop + off] = Q[np.arange(Q.shape[0]), k]
    maxima, arg, counts = _binned_max(dist, best, edges)

    def wit(j):
        if j is None:
            return None
        return {"a": F.points[ia[j]].tolist(), "b": F.points[ib[j]].tolist(),
                "a_index": int(ia[j]), "b_index": int(ib[j]),
                "alpha": list(F.sig.basis[best_alpha[j]]), "value": float(best[j]),
                "distance": float(dist[j])}

    verdict, notes = _verdict(maxima, tol)
    bw = [wit(j) for j in arg]
    nonempty = [w for w in bw if w is not None]
    witness = nonempty[-1] if nonempty else None
    return ModulusReport(edges.tolist(), maxima, counts, verdict, witness, bw, notes, tol.echo())


def divided_difference(xs: Sequence[float], ys: Sequence[float]) -> float:
    """p! times the leading coefficient of the Lagrange interpolant through (xs, ys)."""
    x = np.asarray(xs, dtype=float)
    c = np.asarray(ys, dtype=float).copy()
    if x.shape != c.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D of equal length")
    if len(np.unique(x)) != len(x):
        raise ValueError("divided difference nodes must be distinct")
    p = len(x) - 1
    for j in range(1, p + 1):
        c[j:] = (c[j:] - c[j - 1:-1]) / (x[j:] - x[:-j])
    return float(c[-1] * math.factorial(p))


def whitney_1d_check(xs, fs, p: int, schedule: Sequence[float],
                     tol: Tolerances = DEFAULT) -> ModulusReport:
    """Spread of p-th divided differences at shrinking scales.

    Nodes are sorted; for each stride s the windows x_i, x_{i+s}, ..., x_{i+ps}
    give divided differences at diameter about p*s*h. Comparing window i with
    window i+s measures how much the divided-difference function moves over a
    diagonal step comparable to the window size. Each comparison is binned by
    the larger of the two window diameters.
    """
    x = np.asarray(xs, float).reshape(-1)
    f = np.asarray(fs, float).reshape(-1)
    if len(x) < p + 1:
        raise ValueError(f"need at least p+1 = {p + 1} points, got {len(x)}")
    order = np.argsort(x)
    x, f = x[order], f[order]
    edges = _bin_edges(schedule)
    diam, spread, loc = [], [], []
    N = len(x)
    s = 1
    while p * s < N - 1 or (p == 0 and s == 1):
        idx = np.arange(0, N - max(p, 1) * s)
        if p == 0:
            dd = f[idx]
            dm = np.zeros(len(idx))
        else:
            cols = [idx + j * s for j in range(p + 1)]
            X = np.stack([x[c] for c in cols], axis=1)
            Y = np.stack([f[c] for c in cols], axis=1)
            # vectorised Newton table
            C = Y.copy()
            for j in range(1, p + 1):
                C[:, j:] = (C[:, j:] - C[:, j - 1:-1]) / (X[:, j:] - X[:, :-j])
            dd = C[:, -1] * math.factorial(p)
            dm = X[:, -1] - X[:, 0]
        if len(idx) > s:
            a, b = np.arange(len(idx) - s), np.arange(s, len(idx))
            diam.append(np.maximum(dm[a], dm[b]) if p else np.abs(x[idx[b]] - x[idx[a]]))
            spread.append(np.abs(dd[b] - dd[a]))
            loc.append(0.5 * (x[idx[a]] + x[idx[b] + p * s]))
        s *= 2
        if s > N:
            break
    if not diam:
        return ModulusReport(edges.tolist(), [None] * (len(edges) - 1), [0] * (len(edges) - 1),
                             "inconclusive", notes=["too few points"], tolerances=tol.echo())
    D = np.concatenate(diam)
    V = np.concatenate(spread)
    L = np.concatenate(loc)
    keep = D <= edges[0]
    D, V, L = D[keep], V[keep], L[keep]
    maxima, arg, counts = _binned_max(D, V, edges)
    verdict, notes = _verdict(maxima, tol)
    bw = [None if j is None else {"location": float(L[j]), "spread": float(V[j]),
                                  "diameter": float(D[j])} for j in arg]
    nonempty = [w for w in bw if w is not None]
    notes.append("modulus of the divided-difference function estimated by window spread")
    return ModulusReport(edges.tolist(), maxima, counts, verdict,
                         nonempty[-1] if nonempty else None, bw, notes, tol.echo())


@dataclass(frozen=True, eq=False)
class PiecewiseJet:
    """A C^p function on R built from Hermite pieces between sorted nodes.

    ``pieces[i]`` is a Poly of order 2p+1 centered at ``nodes[i]``, valid on
    [nodes[i], nodes[i+1]]; outside the hull the Taylor polynomial of the
    nearest end node is used.
    """
    p: int
    nodes: np.ndarray
    pieces: tuple[Poly, ...]
    left: Poly
    right: Poly

    def __call__(self, x, nu: int = 0):
        x = np.atleast_1d(np.asarray(x, float))
        out = np.empty_like(x)
        for k, t in enumerate(x):
            if t <= self.nodes[0]:
                P = self.left
            elif t >= self.nodes[-1]:
                P = self.right
            else:
                i = int(np.searchsorted(self.nodes, t, side="right")) - 1
                P = self.pieces[i]
            out[k] = P.derivative_at((nu,), [t]) if nu else np.ravel(P([t]))[0]
        return out

    def to_json(self) -> dict:
        return {"kind": "piecewise_hermite", "p": self.p, "nodes": self.nodes.tolist(),
                "pieces": [P.to_json() for P in self.pieces],
                "left": self.left.to_json(), "right": self.right.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "PiecewiseJet":
        return cls(int(d["p"]), np.array(d["nodes"], float),
                   tuple(Poly.from_json(q) for q in d["pieces"]),
                   Poly.from_json(d["left"]), Poly.from_json(d["right"]))


class ExtensionError(ValueError):
    pass


def default_schedule(points: np.ndarray, count: int = 8) -> list[float]:
    """Halving scales from the diameter of the sample."""
    pts = np.asarray(points, float).reshape(len(points), -1)
    span = float(np.max(np.linalg.norm(pts - pts[0], axis=1))) if len(pts) else 1.0
    span = span if span > 0 else 1.0
    return [span * 2.0 ** -k for k in range(count)]


def extend_1d(F: WhitneyField, schedule: Sequence[float] | None = None,
              tol: Tolerances = DEFAULT, check: bool = True) -> PiecewiseJet:
    """Two-point Hermite extension of degree 2p+1 on each gap.

    Refuses fields the modulus check rejects; inconclusive checks (typical of
    a handful of nodes) are allowed through. ``check=False`` skips the check
    for callers that ran it already.
    """
    if F.sig.n != 1:
        raise ValueError("extend_1d needs n = 1")
    order = np.argsort(F.points[:, 0])
    x = F.points[order, 0]
    J = F.jets[order]
    if len(np.unique(x)) != len(x):
        raise ValueError("duplicate nodes")
    p = F.sig.p
    if len(x) >= 2 and check:
        if schedule is None:
            schedule = default_schedule(x[:, None])
        rep = whitney_check(F, schedule, tol)
        if rep.verdict == "fail":
            raise ExtensionError(f"field fails the Whitney check; witness {rep.witness}")
    sig_out = JetSignature(1, 2 * p + 1)

    def taylor(i):
        k = np.zeros(sig_out.dim)
        k[: p + 1] = J[i]
        return Poly(sig_out, [x[i]], k)

    pieces = []
    if len(x) >= 2:
        # F^alpha are derivatives in the scaled basis, which is what BPoly expects
        bp = BPoly.from_derivatives(x, [list(row) for row in J])
        for i in range(len(x) - 1):
            k = np.array([float(bp(x[i], nu)) if nu <= 2 * p + 1 else 0.0
                          for nu in range(2 * p + 2)])
            pieces.append(Poly(sig_out, [x[i]], k))
    return PiecewiseJet(p, x, tuple(pieces), taylor(0), taylor(len(x) - 1))
