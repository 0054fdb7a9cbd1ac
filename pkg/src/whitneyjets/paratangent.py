"""Paratangent bundles of finite samples and the graph bundle of a function.

Fibers of every bundle here are stored in the local dual coordinates of
their own base point: the vector (xi_alpha(a))_alpha for xi in P_p*. In these
coordinates delta_a is e_0, D^alpha(a) is e_alpha, and pairing with the
Taylor polynomial T^p_a F is the dot product with F's jet at a.

Closures and limits are approximated over a decreasing scale schedule. At
scale delta_j a base point a sees the neighbours b with
delta_{j+1} < |b - a| <= delta_j (nearest first, capped; sparse annuli are
merged outward), and the limit over scales keeps the directions of the
finest scale that persist, within theta_geom, at the next coarser ones.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import qr as pivoted_qr
from scipy.spatial import cKDTree

from .bundles import (Bundle, GlaeserOpSpec, SaturationTrace, Subspace,
                      lambda_op, near_part, principal_angles, saturate, subspace_intersect,
                      subspace_span)
from .config import DEFAULT, Tolerances
from .jetalg import (JetDual, JetSignature, MapJet, Poly, dual_transfer, pullback_matrix,
                     pushforward, rebase, scaled_monomials, shift_matrix)
from .whitney import WhitneyField


def geometric_schedule(delta0: float, count: int) -> tuple[float, ...]:
    return tuple(delta0 * 2.0 ** -k for k in range(count))


def parse_schedule(text: str) -> tuple[float, ...]:
    """'0.2x8' -> 8 scales from 0.2 with ratio 1/2; '0.2,0.1,0.03' -> explicit list."""
    text = text.strip()
    try:
        if "x" in text:
            d0, n = text.split("x")
            sched = geometric_schedule(float(d0), int(n))
        else:
            sched = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise ValueError(f"bad schedule {text!r}; use 'D0xN' or a comma list") from None
    _check_schedule(sched)
    return sched


def _check_schedule(s: Sequence[float]) -> None:
    if not s:
        raise ValueError("empty schedule")
    if any(x <= 0 for x in s) or any(b >= a for a, b in zip(s, s[1:])):
        raise ValueError("schedule must be positive and strictly decreasing")


@dataclass(frozen=True)
class DeltaConfig:
    p: int
    k: int = 1
    schedule: tuple[float, ...] = geometric_schedule(0.2, 8)
    neighbor_cap: int = 12
    # number of finest populated scales the limit is taken over
    window: int = 3
    tol: Tolerances = DEFAULT
    # nearest neighbours per scale used to form k-tuples when k > 1
    tuple_cap: int = 6
    # annuli with fewer neighbours are merged into the next coarser one;
    # None means dim P_p, enough points to pin a polynomial of order p
    min_group: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.p < 0:
            raise ValueError("p must be >= 0")
        object.__setattr__(self, "schedule", tuple(float(s) for s in self.schedule))
        _check_schedule(self.schedule)

    def group_size(self, n: int) -> int:
        if self.min_group is not None:
            return self.min_group
        return max(2 * n - 1, math.comb(n + self.p, n))

    def to_json(self) -> dict:
        return {"p": self.p, "k": self.k, "schedule": list(self.schedule),
                "neighbor_cap": self.neighbor_cap, "window": self.window,
                "tuple_cap": self.tuple_cap, "min_group": self.min_group}


@dataclass
class ScaleGraph:
    """Annulus neighbours per base point and scale, nearest first."""
    nbrs: list[list[np.ndarray]]
    truncated: list[tuple[int, int]]

    def populated(self, i: int) -> list[int]:
        return [j for j, nb in enumerate(self.nbrs[i]) if len(nb)]


def scale_graph(points: np.ndarray, schedule: Sequence[float], cap: int,
                min_group: int | None = None) -> ScaleGraph:
    """Annulus neighbour lists; sparse annuli are merged outward.

    Walking from the finest annulus out, neighbours accumulate until at least
    ``min_group`` are present; the group is then tagged with the outermost
    annulus it reached. A sparse remainder at the coarse end joins the last
    group formed.
    """
    pts = np.asarray(points, float)
    n = pts.shape[1]
    mg = (2 * n - 1) if min_group is None else max(1, int(min_group))
    tree = cKDTree(pts)
    edges = list(schedule) + [0.0]
    J = len(schedule)
    nbrs, trunc = [], []
    balls = tree.query_ball_point(pts, edges[0])
    for i, cand in enumerate(balls):
        cand = np.array([c for c in cand if c != i], dtype=int)
        d = np.linalg.norm(pts[cand] - pts[i], axis=1) if len(cand) else np.zeros(0)
        order = np.lexsort((cand, d))
        cand, d = cand[order], d[order]
        ann = [cand[(d > edges[j + 1]) & (d <= edges[j])] for j in range(J)]
        row = [np.zeros(0, dtype=int) for _ in range(J)]
        acc, last = [], None
        for j in range(J - 1, -1, -1):
            acc.extend(ann[j].tolist())
            if len(acc) >= mg:
                row[j] = np.array(acc, dtype=int)
                acc, last = [], j
        if acc and last is not None:
            row[last] = np.concatenate([row[last], np.array(acc, dtype=int)])
        elif acc:
            row[0] = np.array(acc, dtype=int)
        for j in range(J):
            if len(row[j]) > cap:
                trunc.append((i, j))
                row[j] = row[j][:cap]
        nbrs.append(row)
    return ScaleGraph(nbrs, trunc)


def _pad(B: np.ndarray, r: int) -> np.ndarray:
    out = np.zeros((r, r))
    out[:, : B.shape[1]] = B
    return out


def _greedy_span(C: np.ndarray, tau: float) -> np.ndarray:
    """Orthonormal basis for the well-represented directions among columns of C.

    Pivoted QR decides the count m (diagonal of R above ``tau``); the basis is
    the top-m left singular subspace, which averages out first-order errors
    that cancel between neighbours on opposite sides.
    """
    if C.shape[1] == 0:
        return np.zeros((C.shape[0], 0))
    _, R, _ = pivoted_qr(C, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    m = int(np.sum(diag >= tau))
    if m == 0:
        return np.zeros((C.shape[0], 0))
    U, _, _ = np.linalg.svd(C, full_matrices=False)
    return U[:, :m]


@dataclass
class _Ctx:
    points: np.ndarray
    sig: JetSignature
    r: int                 # fiber ambient dimension (dim P_p, +1 for the graph bundle)
    graph: ScaleGraph
    cfg: DeltaConfig
    # per ordered (a, b): transfer of dual coordinates b -> a, padded to r
    transfer: dict = field(default_factory=dict)
    # bookkeeping for skipping points whose inputs did not change
    last_output: Bundle | None = None
    last_changed: np.ndarray | None = None
    idle: set = field(default_factory=set)
    last_diag: dict = field(default_factory=dict)
    _lay: tuple | None = None


def _transfer_block(ctx: _Ctx, ia: int, nb: np.ndarray) -> np.ndarray:
    """Dual-coordinate transfer matrices from each neighbour to the base, shape (m, r, r)."""
    key = (ia, nb.tobytes())
    T = ctx.transfer.get(key)
    if T is None:
        dim = ctx.sig.dim
        T = np.zeros((len(nb), ctx.r, ctx.r))
        T[:, :dim, :dim] = dual_transfer(ctx.sig, ctx.points[nb], ctx.points[ia])
        if ctx.r > dim:
            T[:, dim, dim] = 1.0
        ctx.transfer[key] = T
    return T


def _compatible_parts(ctx: _Ctx, E: Bundle, ia: int, nb: np.ndarray, T: np.ndarray) -> np.ndarray:
    """For each neighbour b, the directions of E_b within theta_geom of E_a carried to b.

    Directions E_b has but E_a lacks are a property of b, not of the pair;
    letting them through would let a large fiber leak one neighbour per
    iteration. Returned padded to shape (m, r, r).
    """
    r = ctx.r
    theta = ctx.cfg.tol.theta_geom
    B = np.stack([_pad(E.fibers[b].basis, r) for b in nb])
    Qa = E.fibers[ia].basis
    if Qa.shape[1] == 0:
        return np.zeros_like(B)
    # E_a in b-coordinates: invert the b -> a transfer
    Ab = np.linalg.solve(T, np.broadcast_to(Qa, (len(nb),) + Qa.shape))
    Ab, _ = np.linalg.qr(Ab)
    U, sv, _ = np.linalg.svd(np.swapaxes(B, 1, 2) @ Ab, full_matrices=False)
    keep = sv > math.cos(theta)
    # B U restricted to the kept singular directions
    BU = B @ U
    BU[:, :, : keep.shape[1]] *= keep[:, None, :]
    out = np.zeros_like(B)
    out[:, :, : BU.shape[2]] = BU
    return out


def _constraint_weights(ctx: _Ctx, d: np.ndarray) -> np.ndarray:
    """diag(|a-b|^{p-|alpha|}) on the jet part; the value coordinate is unconstrained."""
    w = d[:, None] ** (ctx.sig.p - ctx.sig.orders())[None, :]
    if ctx.r > ctx.sig.dim:
        w = np.concatenate([w, np.zeros((len(d), 1))], axis=1)
    return w


def _neighbor_maps(ctx: _Ctx, E: Bundle, ia: int, nb: np.ndarray):
    """Per neighbour: Mpre_b (base coordinates of the constraint ellipsoid) and
    its projection off E_a. Shapes (m, r, r)."""
    r = ctx.r
    d = np.linalg.norm(ctx.points[nb] - ctx.points[ia], axis=1)
    T = _transfer_block(ctx, ia, nb)
    B = _compatible_parts(ctx, E, ia, nb, T)
    G = _constraint_weights(ctx, d)[:, :, None] * B
    Mpre = T @ B @ np.linalg.pinv(G, rcond=1e-12)
    Qa = E.fibers[ia].basis
    P_perp = np.eye(r) - Qa @ Qa.T
    return Mpre, P_perp @ Mpre


def _candidates(ctx: _Ctx, Mpre: np.ndarray, M: np.ndarray, sel: np.ndarray,
                k: int = 1) -> np.ndarray:
    """Refinement candidates at a base point from k-tuples of neighbours ``sel``.

    For each neighbour b the admissible eta in E_b form the ellipsoid
    ||W_b eta(b)|| <= 1 (W_b the constraint weights); in base coordinates it
    is the image of the unit ball under Mpre_b = T_b B_b (W_b B_b)^+. The free
    summand xi in E_a is used to project the sum off E_a (M_b = P_perp Mpre_b).
    The image of a k-tuple is approximated by the concatenated map
    [M_b1 ... M_bk]. Axes are kept when the projection cancelled most of eta
    (a genuine finite difference rather than a neighbour's fiber carried
    over), then clipped to length at most 1.
    """
    tol = ctx.cfg.tol
    r = ctx.r
    tup = np.repeat(sel[:, None], k, axis=1)
    if k > 1:
        # every singleton, plus the genuine tuples among the nearest few
        near = sel[: ctx.cfg.tuple_cap]
        multi = [t for t in itertools.combinations_with_replacement(near, k) if t[0] != t[-1]]
        if multi:
            tup = np.vstack([tup, np.array(multi)])
    # repeated members contribute once
    dup = np.zeros(tup.shape, dtype=bool)
    dup[:, 1:] = tup[:, 1:] == tup[:, :-1]
    live = (~dup).astype(float)[:, :, None, None]
    Mt = M[tup] * live                      # (t, k, r, r)
    Pt = Mpre[tup] * live
    Mcat = np.concatenate(list(np.moveaxis(Mt, 1, 0)), axis=2)   # (t, r, k r)
    U, S, Vt = np.linalg.svd(Mcat, full_matrices=False)
    # eta norm per axis: stacked pre-projection blocks applied to the axis
    V = np.swapaxes(Vt, 1, 2).reshape(len(tup), k, r, -1)          # (t, k, r, ax)
    eta = np.sqrt(np.sum((Pt @ V) ** 2, axis=(1, 2)))              # (t, ax)
    ok = (S > 1e-14) & (S <= tol.big_factor * eta)
    C = U * np.minimum(1.0, S)[:, None, :]
    C = np.swapaxes(C, 1, 2)[ok]
    return C.T if len(C) else np.zeros((r, 0))


def _refine_point(ctx: _Ctx, E: Bundle, ia: int) -> tuple[np.ndarray, dict]:
    """New directions at ``ia`` (orthonormal, orthogonal to E_a) and diagnostics."""
    tol = ctx.cfg.tol
    pop = ctx.graph.populated(ia)
    if not pop:
        return np.zeros((ctx.r, 0)), {"scales": 0}
    pop = pop[-max(ctx.cfg.window, 1):]
    groups = [ctx.graph.nbrs[ia][j] for j in pop]
    allnb = np.concatenate(groups)
    Mpre, M = _neighbor_maps(ctx, E, ia, allnb)
    # repeated tuples reproduce k = 1, so its limit is always included
    levels = [1] if ctx.cfg.k == 1 else [1, ctx.cfg.k]
    lims, conv = [], True
    for k in levels:
        per_scale = []
        start = 0
        for g in groups:
            sel = np.arange(start, start + len(g))
            start += len(g)
            C = _candidates(ctx, Mpre, M, sel, k)
            per_scale.append(Subspace(ctx.r, _greedy_span(C, tol.tau_mag)))
        lim = per_scale[-1]
        for S in per_scale[:-1]:
            lim = near_part(lim, S, tol.theta_geom)
        lims.append(lim.basis)
        conv = conv and len({S.rank for S in per_scale}) == 1 and all(
            (principal_angles(S, T).max(initial=0.0) < tol.theta_tol)
            for S, T in zip(per_scale, per_scale[1:]))
    # keep only what is new relative to E_a
    Qa = E.fibers[ia].basis
    L = np.hstack(lims)
    if L.shape[1]:
        R = L - Qa @ (Qa.T @ L)
        new = _greedy_span(R, tol.tau_mag)
    else:
        new = np.zeros((ctx.r, 0))
    return new, {"scales": len(pop), "converged": bool(conv),
                 "ranks": [S.rank for S in per_scale]}


def _batched_count(C: np.ndarray, tau: float) -> np.ndarray:
    """Number of pivoted-QR diagonal entries >= tau, for a stack of matrices.

    Greedy Gram-Schmidt with largest-residual pivoting produces the same
    diagonal as column-pivoted QR.
    """
    R = C.copy()
    m = np.zeros(C.shape[:-2], dtype=int)
    alive = np.ones(C.shape[:-2], dtype=bool)
    for _ in range(min(C.shape[-2], C.shape[-1])):
        nrm = np.linalg.norm(R, axis=-2)
        j = np.argmax(nrm, axis=-1)
        best = np.take_along_axis(nrm, j[..., None], -1)[..., 0]
        alive &= best >= tau
        if not alive.any():
            break
        m += alive
        q = np.take_along_axis(R, j[..., None, None], -1)[..., 0]
        q = q / np.where(best > 0, best, 1.0)[..., None]
        R = R - q[..., :, None] * np.einsum("...i,...ij->...j", q, R)[..., None, :]
    return m


def _batched_span(C: np.ndarray, tau: float) -> np.ndarray:
    """Stacked ``_greedy_span``: top-m left singular vectors, zero-padded to r columns."""
    r = C.shape[-2]
    m = _batched_count(C, tau)
    U, _, _ = np.linalg.svd(C, full_matrices=False)
    out = np.zeros(C.shape[:-1] + (r,))
    w = min(r, U.shape[-1])
    out[..., :w] = U[..., :w] * (np.arange(w) < m[..., None])[..., None, :]
    return out


def _batched_near(A: np.ndarray, B: np.ndarray, theta: float) -> np.ndarray:
    """Stacked ``near_part`` on zero-padded bases."""
    U, s, _ = np.linalg.svd(np.swapaxes(A, -1, -2) @ B)
    return A @ (U * (s > math.cos(theta))[..., None, :])


def _rank(Q: np.ndarray) -> np.ndarray:
    return np.sum(np.linalg.norm(Q, axis=-2) > 0.5, axis=-1)


def _max_angle(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Largest principal angle between equal-rank padded bases (0 for rank 0)."""
    s = np.linalg.svd(np.swapaxes(A, -1, -2) @ B, compute_uv=False)
    m = _rank(A)
    idx = np.clip(m - 1, 0, s.shape[-1] - 1)
    c = np.take_along_axis(s, idx[..., None], -1)[..., 0]
    return np.where(m > 0, np.arccos(np.clip(c, 0.0, 1.0)), 0.0)


def _layout(ctx: _Ctx):
    """Right-aligned neighbour layout over the window: (N, G, cap) indices and masks."""
    if ctx._lay is None:
        G = max(ctx.cfg.window, 1)
        cap = max([len(g) for row in ctx.graph.nbrs for g in row] + [1])
        N = len(ctx.points)
        NB = np.zeros((N, G, cap), dtype=int)
        MK = np.zeros((N, G, cap), dtype=bool)
        for i in range(N):
            pop = ctx.graph.populated(i)[-G:]
            for slot, j in enumerate(pop, start=G - len(pop)):
                g = ctx.graph.nbrs[i][j]
                NB[i, slot, : len(g)] = g
                MK[i, slot, : len(g)] = True
        ctx._lay = (NB, MK)
    return ctx._lay


def _refine_batch(ctx: _Ctx, Qpad: np.ndarray, idx: np.ndarray):
    """``_refine_point`` for k = 1 over the points ``idx`` at once.

    ``Qpad`` holds every fiber basis zero-padded to (r, r). Returns padded
    new directions and per-point diagnostics.
    """
    tol = ctx.cfg.tol
    r = ctx.r
    dim = ctx.sig.dim
    NB, MK = _layout(ctx)
    nb, mk = NB[idx], MK[idx]
    Nc, G, cap = nb.shape
    L = G * cap
    nbf, mkf = nb.reshape(Nc, L), mk.reshape(Nc, L)
    pa = ctx.points[idx]
    pb = ctx.points[nbf]
    d = np.linalg.norm(pb - pa[:, None, :], axis=-1)
    T = np.zeros((Nc, L, r, r))
    T[..., :dim, :dim] = dual_transfer(ctx.sig, pb, pa[:, None, :])
    Tinv = np.zeros((Nc, L, r, r))
    Tinv[..., :dim, :dim] = dual_transfer(ctx.sig, pa[:, None, :], pb)
    if r > dim:
        T[..., dim, dim] = 1.0
        Tinv[..., dim, dim] = 1.0
    Qa = Qpad[idx]
    B = Qpad[nbf] * mkf[..., None, None]
    # compatible parts: directions of E_b within theta_geom of E_a carried to b
    # padding columns trail, so the leading rank(E_a) columns of Q span Tinv E_a
    Ab, _ = np.linalg.qr(Tinv @ Qa[:, None])
    Ab = Ab * (np.arange(r) < _rank(Qa)[:, None])[:, None, None, :]
    U, sv, _ = np.linalg.svd(np.swapaxes(B, -1, -2) @ Ab)
    BU = B @ (U * (sv > math.cos(tol.theta_geom))[..., None, :])
    W = _constraint_weights(ctx, d.reshape(-1)).reshape(Nc, L, r)
    Mpre = T @ BU @ np.linalg.pinv(W[..., :, None] * BU, rcond=1e-12)
    Pperp = np.eye(r) - Qa @ np.swapaxes(Qa, -1, -2)
    M = Pperp[:, None] @ Mpre
    U, S, Vt = np.linalg.svd(M)
    eta = np.linalg.norm(Mpre @ np.swapaxes(Vt, -1, -2), axis=-2)
    ok = (S > 1e-14) & (S <= tol.big_factor * eta) & mkf[..., None]
    C = U * (np.minimum(1.0, S) * ok)[..., None, :]               # (Nc, L, r, r)
    C = C.reshape(Nc, G, cap, r, r).transpose(0, 1, 3, 2, 4).reshape(Nc, G, r, cap * r)
    per = _batched_span(C, tol.tau_mag)                          # (Nc, G, r, r)
    present = mk.any(axis=-1)
    lim = per[:, -1]
    for g in range(G - 1):
        nearer = _batched_near(lim, per[:, g], tol.theta_geom)
        lim = np.where(present[:, g, None, None], nearer, lim)
    ranks = _rank(per)
    conv = np.ones(Nc, dtype=bool)
    for g in range(G - 1):
        both = present[:, g] & present[:, g + 1]
        same = ranks[:, g] == ranks[:, g + 1]
        small = _max_angle(per[:, g], per[:, g + 1]) < tol.theta_tol
        conv &= ~both | (same & small)
    R = Pperp @ lim
    new = _batched_span(R, tol.tau_mag)
    new = new * present[:, -1, None, None]
    diags = []
    for t in range(Nc):
        ns = int(present[t].sum())
        if ns == 0:
            diags.append({"scales": 0})
        else:
            diags.append({"scales": ns, "converged": bool(conv[t]),
                          "ranks": [int(x) for x, q in zip(ranks[t], present[t]) if q]})
    return new, diags


def _padded(E: Bundle, r: int) -> np.ndarray:
    Q = np.zeros((len(E), r, r))
    for i, F in enumerate(E.fibers):
        Q[i, :, : F.rank] = F.basis
    return Q


def _refine_bundle(ctx: _Ctx, E: Bundle, diag: list | None = None,
                   chunk: int = 256) -> Bundle:
    # a point whose fiber is full, or whose fiber and neighbours are unchanged
    # since a refinement that found nothing, would produce nothing new
    if ctx.last_output is E:
        changed = ctx.last_changed
    else:
        changed = np.ones(len(E), dtype=bool)
        ctx.idle.clear()
    todo = [i for i, F in enumerate(E.fibers)
            if F.rank < ctx.r and not (i in ctx.idle and not changed[i]
                                       and not any(changed[g].any() for g in ctx.graph.nbrs[i]))]
    results = {}
    if ctx.cfg.k == 1 and todo:
        Qpad = _padded(E, ctx.r)
        for s in range(0, len(todo), chunk):
            idx = np.array(todo[s:s + chunk])
            new, dg = _refine_batch(ctx, Qpad, idx)
            for t, i in enumerate(idx):
                results[int(i)] = (new[t][:, np.linalg.norm(new[t], axis=0) > 0.5], dg[t])
    else:
        for i in todo:
            results[i] = _refine_point(ctx, E, i)
    grew = np.zeros(len(E), dtype=bool)
    fibers = []
    info = []
    for i, F in enumerate(E.fibers):
        if i not in results:
            info.append(ctx.last_diag.get(i, {"scales": len(ctx.graph.populated(i))}))
            fibers.append(F)
            continue
        new, d = results[i]
        info.append(d)
        ctx.last_diag[i] = d
        if new.shape[1]:
            Q, _ = np.linalg.qr(np.hstack([F.basis, new]))
            F = Subspace(ctx.r, Q)
            grew[i] = True
            ctx.idle.discard(i)
        else:
            ctx.idle.add(i)
        fibers.append(F)
    if diag is not None:
        diag.append(info)
    out = E.with_fibers(fibers)
    ctx.last_output, ctx.last_changed = out, grew
    return out


def delta_refine(E: Bundle, delta: float | Sequence[float], k: int = 1, p: int | None = None,
                 neighbor_cap: int = 12, tol: Tolerances = DEFAULT) -> Bundle:
    """One refinement step of a bundle in P_p* (or P_p* x R).

    ``delta`` is either the coarsest scale (a geometric schedule of 8 scales
    is used below it) or an explicit schedule.
    """
    sched = geometric_schedule(float(delta), 8) if np.isscalar(delta) else tuple(delta)
    n = E.points.shape[1]
    if p is None:
        p = _order_from_dim(n, E.ambient_dim)
    cfg = DeltaConfig(p=p, k=k, schedule=sched, neighbor_cap=neighbor_cap, tol=tol)
    ctx = _make_ctx(E.points, cfg, E.ambient_dim)
    return _refine_bundle(ctx, E)


def _order_from_dim(n: int, r: int) -> int:
    for p in range(0, 64):
        dim = math.comb(n + p, n)
        if dim == r or dim + 1 == r:
            return p
        if dim > r:
            break
    raise ValueError(f"ambient dimension {r} is not dim P_p(R^{n}) (or +1)")


def _make_ctx(points: np.ndarray, cfg: DeltaConfig, r: int) -> _Ctx:
    pts = np.asarray(points, float)
    if pts.ndim == 1:
        pts = pts[:, None]
    sig = JetSignature(pts.shape[1], cfg.p)
    graph = scale_graph(pts, cfg.schedule, cfg.neighbor_cap, cfg.group_size(pts.shape[1]))
    return _Ctx(pts, sig, r, graph, cfg)


def refinement_op(points, cfg: DeltaConfig, r: int, diag: list | None = None) -> GlaeserOpSpec:
    ctx = _make_ctx(points, cfg, r)
    return GlaeserOpSpec(lambda E: _refine_bundle(ctx, E, diag), radius=cfg.schedule[0],
                         name=f"delta_refine(p={cfg.p},k={cfg.k})")


@dataclass
class ParatangentResult:
    bundle: Bundle
    trace: SaturationTrace
    config: DeltaConfig
    diagnostics: dict

    @property
    def inconclusive(self) -> bool:
        return not self.trace.stabilized

    def to_json(self) -> dict:
        return {"bundle": self.bundle.to_json(), "trace": self.trace.to_json(),
                "config": self.config.to_json(), "diagnostics": self.diagnostics,
                "verdict": "inconclusive" if self.inconclusive else "stabilized"}


def _sat_diagnostics(ctx_trunc, diag) -> dict:
    last = diag[-1] if diag else []
    return {"neighbor_cap_truncations": len(ctx_trunc),
            "unconverged_points": [i for i, d in enumerate(last) if d.get("scales") and not d.get("converged")],
            "isolated_points": [i for i, d in enumerate(last) if not d.get("scales")]}


def seed_delta_bundle(points: np.ndarray, p: int) -> Bundle:
    pts = np.asarray(points, float).reshape(len(points), -1)
    sig = JetSignature(pts.shape[1], p)
    e0 = np.zeros((sig.dim, 1))
    e0[0, 0] = 1.0
    return Bundle.constant(pts, Subspace(sig.dim, e0))


def tau_p(X, cfg: DeltaConfig) -> ParatangentResult:
    """Saturate the delta-functional line bundle under the refinement operation."""
    pts = np.asarray(X, float).reshape(len(X), -1)
    E0 = seed_delta_bundle(pts, cfg.p)
    prior = None
    if cfg.k > 1:
        # the k = 1 operation is contained in the k-tuple one, so its
        # saturation is a valid starting point with the same limit
        prior = tau_p(pts, replace(cfg, k=1))
        E0 = prior.bundle
    diag: list = []
    ctx = _make_ctx(pts, cfg, E0.ambient_dim)
    rho = GlaeserOpSpec(lambda E: _refine_bundle(ctx, E, diag), radius=cfg.schedule[0],
                        name="delta_refine")
    Ehat, trace = saturate(E0, rho, tol=cfg.tol)
    info = _sat_diagnostics(ctx.graph.truncated, diag)
    if prior is not None:
        info["k1_iterations"] = prior.trace.iterations
        trace = SaturationTrace(prior.trace.dims + trace.dims[1:],
                                prior.trace.iterations + trace.iterations,
                                prior.trace.stabilized and trace.stabilized, trace.cap)
    return ParatangentResult(Ehat, trace, cfg, info)


def tau_slice(B: Bundle, p: int, q: int | None = None, tol: Tolerances = DEFAULT) -> Bundle:
    """Fiberwise intersection of a P_q* bundle with the embedded P_p*.

    In local coordinates the embedded copy of P_p* at the base point is the
    span of the first dim P_p coordinates, so the slice is an intersection
    with a coordinate subspace followed by dropping the zero tail.
    """
    n = B.points.shape[1]
    if q is None:
        q = _order_from_dim(n, B.ambient_dim)
    if q < p:
        raise ValueError(f"cannot slice an order-{q} bundle to order {p}")
    dp = math.comb(n + p, n)
    emb = np.zeros((B.ambient_dim, dp))
    emb[:dp, :dp] = np.eye(dp)
    Ep = Subspace(B.ambient_dim, emb)
    fibers = []
    for F in B.fibers:
        I = subspace_intersect(F, Ep, tol)
        fibers.append(subspace_span(I.basis[:dp].T, dp, tol) if I.rank else Subspace.zero(dp))
    return B.with_fibers(fibers) if dp == B.ambient_dim else Bundle(B.points, tuple(fibers), dp)


# ---------------------------------------------------------------- order one


def secant_ptg(X, schedule: Sequence[float] = geometric_schedule(0.2, 8), cap: int = 12,
               window: int = 3, tol: Tolerances = DEFAULT) -> Bundle:
    """Limits of unit secants (x - y)/|x - y| for x, y near a.

    At each scale the secants joining a, and every pair of its annulus
    neighbours, are pooled; the fiber is the limit over the finest scales.
    """
    pts = np.asarray(X, float).reshape(len(X), -1)
    n = pts.shape[1]
    g = scale_graph(pts, schedule, cap)
    fibers = []
    for i in range(len(pts)):
        pop = g.populated(i)[-window:]
        if not pop:
            fibers.append(Subspace.zero(n))
            continue
        subs = []
        for j in pop:
            S = np.vstack([pts[i][None, :], pts[g.nbrs[i][j]]])
            a, b = np.triu_indices(len(S), 1)
            V = S[b] - S[a]
            V = V / np.linalg.norm(V, axis=1)[:, None]
            subs.append(Subspace(n, _greedy_span(V.T, tol.tau_mag)))
        lim = subs[-1]
        for T in subs[:-1]:
            lim = near_part(lim, T, tol.theta_geom)
        fibers.append(lim)
    return Bundle(pts, tuple(fibers), n)


def tau1(X, schedule: Sequence[float] = geometric_schedule(0.2, 8), cap: int = 12,
         tol: Tolerances = DEFAULT) -> tuple[Bundle, SaturationTrace]:
    E = secant_ptg(X, schedule, cap, tol=tol)
    return saturate(E, lambda_op(tol), tol=tol)


@dataclass
class CriterionVerdict:
    is_function: bool | None          # None means inconclusive
    witness: dict | None
    fiber_dims: dict[int, int]
    diagnostics: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return {True: "pass", False: "fail", None: "inconclusive"}[self.is_function]

    def to_json(self) -> dict:
        return {"is_function": self.is_function, "verdict": self.label, "witness": self.witness,
                "fiber_dims": {str(k): int(v) for k, v in self.fiber_dims.items()},
                "diagnostics": self.diagnostics}


def _vertical_test(B: Bundle, tol: Tolerances):
    """First fiber containing the unit vector on the last coordinate, if any."""
    r = B.ambient_dim
    e = np.zeros(r)
    e[-1] = 1.0
    best = None
    for i, F in enumerate(B.fibers):
        if F.rank == 0:
            continue
        v = F.project(e)
        nv = float(np.linalg.norm(v))
        if nv >= 1.0 - tol.eps_vert:
            u = v / nv
            w = {"point_index": i, "point": B.points[i].tolist(),
                 "vector": u.tolist(), "jet_part_norm": float(np.linalg.norm(u[:-1])),
                 "value_part": float(u[-1]), "projection_norm": nv}
            if best is None or w["jet_part_norm"] < best["jet_part_norm"]:
                best = w
    return best


def tau1_function_test(X, f, schedule: Sequence[float] = geometric_schedule(0.2, 8),
                       cap: int = 12, tol: Tolerances = DEFAULT) -> CriterionVerdict:
    """Secant bundle of the graph of f, regarded over X, tested for vertical vectors."""
    pts = np.asarray(X, float).reshape(len(X), -1)
    vals = np.asarray(f, float).reshape(-1)
    G = np.hstack([pts, vals[:, None]])
    B, trace = tau1(G, schedule, cap, tol)
    w = _vertical_test(B, tol)
    dims = {i: int(F.rank) for i, F in enumerate(B.fibers)}
    return CriterionVerdict(w is None, w, dims, {"saturation": trace.to_json(),
                                                 "tolerances": tol.echo()})


# ---------------------------------------------------------------- the graph bundle


@dataclass
class NablaBundle:
    bundle: Bundle          # fibers in P_p* x R
    sig: JetSignature
    values: np.ndarray

    def to_json(self) -> dict:
        return {"n": self.sig.n, "p": self.sig.p, "values": self.values.tolist(),
                **self.bundle.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "NablaBundle":
        sig = JetSignature(int(d["n"]), int(d["p"]))
        return cls(Bundle.from_json(d), sig, np.array(d["values"], float))

    def tau_part(self, tol: Tolerances = DEFAULT) -> Bundle:
        """Projection of each fiber to P_p*."""
        dim = self.sig.dim
        return Bundle(self.bundle.points,
                      tuple(subspace_span(F.basis[:dim].T, dim, tol) if F.rank else Subspace.zero(dim)
                            for F in self.bundle.fibers), dim)


def _nabla_once(pts, vals, cfg: DeltaConfig):
    sig = JetSignature(pts.shape[1], cfg.p)
    r = sig.dim + 1
    seeds = []
    for v in vals:
        s = np.zeros(r)
        s[0], s[-1] = 1.0, v
        seeds.append(Subspace(r, (s / np.linalg.norm(s))[:, None]))
    Phi0 = Bundle(pts, tuple(seeds), r)
    if cfg.k > 1:
        Phi0, _, _, _ = _nabla_once(pts, vals, replace(cfg, k=1))
    diag: list = []
    ctx = _make_ctx(pts, cfg, r)
    rho = GlaeserOpSpec(lambda E: _refine_bundle(ctx, E, diag), radius=cfg.schedule[0],
                        name="delta_refine_graph")
    Phi, trace = saturate(Phi0, rho, tol=cfg.tol)
    return Phi, trace, ctx, diag


def _truncated_schedule(pts, cfg: DeltaConfig) -> tuple[float, ...] | None:
    """The schedule with its finest populated scale removed (None if impossible)."""
    g = scale_graph(pts, cfg.schedule, cfg.neighbor_cap, cfg.group_size(pts.shape[1]))
    finest = max((max(g.populated(i), default=-1) for i in range(len(pts))), default=-1)
    if finest < 1:
        return None
    return cfg.schedule[:finest]


def nabla_p(f, X, cfg: DeltaConfig, robust: bool = True) -> tuple[NablaBundle, CriterionVerdict]:
    """Saturated graph bundle of f and the vertical-vector verdict.

    With ``robust`` the construction is repeated with the finest populated
    scale dropped; disagreeing verdicts degrade to inconclusive.
    """
    pts = np.asarray(X, float).reshape(len(X), -1)
    vals = np.asarray(f, float).reshape(-1)
    if len(vals) != len(pts):
        raise ValueError(f"{len(vals)} values for {len(pts)} points")
    if not np.all(np.isfinite(vals)):
        raise ValueError("f must be finite at every sample point")
    tol = cfg.tol
    Phi, trace, ctx, diag = _nabla_once(pts, vals, cfg)
    w = _vertical_test(Phi, tol)
    is_fn: bool | None = w is None
    diagnostics = {"saturation": trace.to_json(), "config": cfg.to_json(),
                   "tolerances": tol.echo(), **_sat_diagnostics(ctx.graph.truncated, diag)}
    if not trace.stabilized:
        is_fn = None
        diagnostics["reason"] = "saturation did not stabilize under the 2r cap"
    if robust and is_fn is not None:
        coarse = _truncated_schedule(pts, cfg)
        if coarse is not None and len(coarse) >= 1:
            cfg2 = replace(cfg, schedule=coarse)
            Phi2, trace2, _, _ = _nabla_once(pts, vals, cfg2)
            w2 = _vertical_test(Phi2, tol)
            diagnostics["truncated_schedule"] = list(coarse)
            diagnostics["truncated_is_function"] = w2 is None
            if (w2 is None) != is_fn or not trace2.stabilized:
                diagnostics["reason"] = "verdict changed when the finest scale was dropped"
                is_fn = None
        else:
            diagnostics["truncated_schedule"] = None
    dims = {i: int(F.rank) for i, F in enumerate(Phi.fibers)}
    sig = JetSignature(pts.shape[1], cfg.p)
    return NablaBundle(Phi, sig, vals), CriterionVerdict(is_fn, w, dims, diagnostics)


class OutsideFiberError(ValueError):
    pass


def nabla_value(nb: NablaBundle, a, xi, tol: Tolerances = DEFAULT) -> tuple[float, float]:
    """Value of the graph bundle at (a, xi) and the least-squares residual.

    ``xi`` is a JetDual or a vector of local dual coordinates at ``a``.
    """
    B = nb.bundle
    ia = a if isinstance(a, (int, np.integer)) else int(np.argmin(np.linalg.norm(B.points - np.atleast_1d(a), axis=1)))
    dim = nb.sig.dim
    if isinstance(xi, JetDual):
        x = xi.recenter(B.points[ia]).coords
    else:
        x = np.asarray(xi, float).reshape(-1)
    F = B.fibers[ia]
    A, c = F.basis[:dim], F.basis[dim]
    if F.rank == 0 or np.linalg.norm(x) == 0:
        if np.linalg.norm(x) == 0:
            return 0.0, 0.0
        raise OutsideFiberError("empty fiber")
    w, *_ = np.linalg.lstsq(A, x, rcond=None)
    res = float(np.linalg.norm(A @ w - x) / np.linalg.norm(x))
    if math.asin(min(1.0, res)) >= tol.theta_tol:
        raise OutsideFiberError(f"functional is {math.asin(min(1.0, res)):.3g} rad from the fiber at point {ia}")
    return float(c @ w), res


def field_from_nabla(nb: NablaBundle, tol: Tolerances = DEFAULT) -> tuple[WhitneyField, dict]:
    """F^alpha(a) := value of the graph bundle at D^alpha(a).

    Where D^alpha(a) lies outside the computed fiber the value is not pinned
    by the bundle. Such jets are completed from the nearest point whose jet is
    fully determined: its Taylor polynomial is moved to a and then corrected,
    with the least change, so every functional in the fiber at a takes its
    prescribed value. The whole jet at such a point is replaced, since entries
    read off within theta_tol of a deficient fiber are only approximately
    pinned. Completed points and the largest disagreement with the directly
    read entries are listed in the report.
    """
    dim = nb.sig.dim
    pts = nb.bundle.points
    J = np.full((len(pts), dim), np.nan)
    missing = []
    worst = 0.0
    for i in range(len(pts)):
        for k in range(dim):
            e = np.zeros(dim)
            e[k] = 1.0
            try:
                v, res = nabla_value(nb, i, e, tol)
                J[i, k] = v
                worst = max(worst, res)
            except OutsideFiberError:
                missing.append([i, list(nb.sig.basis[k])])
    J[:, 0] = nb.values
    incomplete = sorted({m[0] for m in missing})
    filled = []
    done = np.array([i not in set(incomplete) for i in range(len(pts))])
    if incomplete and done.any():
        tree = cKDTree(pts[done])
        src = np.where(done)[0]
        for i in incomplete:
            _, j = tree.query(pts[i])
            b = int(src[j])
            x0 = shift_matrix(nb.sig, pts[i] - pts[b]) @ J[b]
            F = nb.bundle.fibers[i]
            A, c = F.basis[:dim], F.basis[dim]
            x = x0 + np.linalg.pinv(A.T, rcond=tol.eps_rank) @ (c - A.T @ x0) if F.rank else x0
            x[0] = nb.values[i]
            read = ~np.isnan(J[i])
            dev = float(np.max(np.abs(x[read] - J[i, read]))) if read.any() else 0.0
            J[i] = x
            filled.append({"point_index": int(i), "from_index": b, "deviation": dev})
    return WhitneyField(nb.sig, pts, J), {"complete": not missing, "missing": missing,
                                          "filled": filled, "max_residual": worst}


# ---------------------------------------------------------------- Zariski probes


def vanishing_polys(X, q: int, center=None, tol: Tolerances = DEFAULT) -> tuple[list[Poly], dict]:
    """Basis of polynomials of degree <= q vanishing on the sample (Vandermonde nullspace)."""
    pts = np.asarray(X, float).reshape(len(X), -1)
    n = pts.shape[1]
    sig = JetSignature(n, q)
    c = np.zeros(n) if center is None else np.asarray(center, float)
    V = scaled_monomials(sig, pts - c)
    # column scaling keeps the rank decision independent of the factorials
    scale = np.linalg.norm(V, axis=0)
    scale[scale == 0] = 1.0
    _, s, Vt = np.linalg.svd(V / scale, full_matrices=True)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > tol.eps_rank * smax)) if smax > 0 else 0
    null = Vt[rank:].T / scale[:, None]
    polys = []
    for j in range(null.shape[1]):
        v = null[:, j] / np.linalg.norm(null[:, j])
        polys.append(Poly(sig, c, v))
    info = {"rank": rank, "columns": sig.dim, "rows": len(pts),
            "underdetermined": len(pts) < sig.dim,
            "gap": float(s[rank - 1] / s[rank]) if 0 < rank < len(s) and s[rank] > 0 else None}
    return polys, info


def zariski_Tp(X, p: int, q: int | None = None, tol: Tolerances = DEFAULT,
               polys: list[Poly] | None = None) -> tuple[Bundle, dict]:
    """Fibers (T^p_a I^q(X))^perp in local dual coordinates."""
    q = p if q is None else q
    if q < p:
        raise ValueError("zariski_Tp needs q >= p")
    pts = np.asarray(X, float).reshape(len(X), -1)
    n = pts.shape[1]
    info = {}
    if polys is None:
        polys, info = vanishing_polys(pts, q, tol=tol)
    sig_p = JetSignature(n, p)
    fibers = []
    for a in pts:
        if polys:
            rows = np.array([rebase(g, a).coeffs[: sig_p.dim] for g in polys])
            ann = subspace_span(rows, sig_p.dim, tol)
            fibers.append(ann.complement())
        else:
            fibers.append(Subspace.full(sig_p.dim))
    return Bundle(pts, tuple(fibers), sig_p.dim), info


def stability_probe(X, a, p: int, q_max: int, tol: Tolerances = DEFAULT) -> dict:
    """dim T^q_a(X)_p for q = p..q_max and the first q where consecutive values agree."""
    pts = np.asarray(X, float).reshape(len(X), -1)
    a = np.atleast_1d(np.asarray(a, float))
    sig_p = JetSignature(pts.shape[1], p)
    dims = []
    flags = []
    for q in range(p, q_max + 1):
        polys, info = vanishing_polys(pts, q, center=a, tol=tol)
        flags.append(info)
        if polys:
            rows = np.array([g.coeffs[: sig_p.dim] for g in polys])
            dims.append(sig_p.dim - subspace_span(rows, sig_p.dim, tol).rank)
        else:
            dims.append(sig_p.dim)
    s = None
    for i in range(1, len(dims)):
        if dims[i] == dims[i - 1]:
            s = p + i
            break
    return {"p": p, "q": list(range(p, q_max + 1)), "dims": dims,
            "nonincreasing": all(b <= a_ for a_, b in zip(dims, dims[1:])),
            "first_stable_q": s, "sample_diagnostics": flags}


def zariski_containment(tau: Bundle, T: Bundle, tol: Tolerances = DEFAULT) -> dict:
    bad = []
    worst = 0.0
    for i, (A, B) in enumerate(zip(tau.fibers, T.fibers)):
        if A.rank == 0:
            continue
        s = np.linalg.svd(B.basis.T @ A.basis, compute_uv=False) if B.rank else np.zeros(A.rank)
        c = float(np.clip(s.min(), 0, 1)) if len(s) == A.rank else 0.0
        ang = math.acos(c)
        worst = max(worst, ang)
        if ang >= tol.theta_tol:
            bad.append(i)
    return {"contained": not bad, "violations": bad, "max_angle": worst}


# ---------------------------------------------------------------- pushforwards


def pushforward_bundle(maps: Sequence[MapJet], tauY: Bundle, tauX: Bundle,
                       eps_match: float | None = None, tol: Tolerances = DEFAULT) -> dict:
    """Check that each fiber of tau^p(Y) pushes into the fiber of tau^p(X) at the image point.

    ``maps[i]`` is the jet of phi at Y sample point i. Fibers are in local
    coordinates on both sides.
    """
    Xp = tauX.points
    tree = cKDTree(Xp)
    if eps_match is None:
        nn, _ = tree.query(Xp, 2) if len(Xp) > 1 else (np.zeros((1, 2)), None)
        eps_match = float(np.max(nn[:, 1])) if len(Xp) > 1 else 1e-9
    checks, worst = [], 0.0
    for i, (phi, F) in enumerate(zip(maps, tauY.fibers)):
        img = phi.image
        dist, j = tree.query(img)
        if dist > eps_match:
            raise ValueError(f"image of Y point {i} is {dist:.3g} away from the X sample")
        sig = phi.source_sig
        A = pullback_matrix(phi)
        # express the image functional at the matched X point
        Tm = dual_transfer(JetSignature(phi.target_dim, sig.p), img, Xp[j])
        pushed = Tm @ A.T @ F.basis
        target = tauX.fibers[j]
        for col in range(pushed.shape[1]):
            v = pushed[:, col]
            if np.linalg.norm(v) < 1e-14:
                continue
            c = min(1.0, np.linalg.norm(target.basis.T @ v) / np.linalg.norm(v)) if target.rank else 0.0
            ang = math.acos(c)
            worst = max(worst, ang)
            checks.append({"y_index": i, "x_index": int(j), "angle": ang, "ok": ang < tol.theta_tol})
    return {"ok": all(c["ok"] for c in checks), "max_angle": worst, "checks": checks,
            "eps_match": eps_match, "tolerances": tol.echo()}


def constraint_bound(eta_coords: np.ndarray, sig: JetSignature, dist: float) -> float:
    """max_alpha |a-b|^{p-|alpha|} |eta_alpha(b)| for coordinates at b."""
    w = dist ** (sig.p - sig.orders())
    return float(np.max(np.abs(w * eta_coords)))


def boundedness_transfer(phi: MapJet, eta: JetDual, b0, sig_target: JetSignature | None = None) -> dict:
    """Compare the pairwise constraint of eta at b (distance to b0) with that of its pushforward."""
    b = phi.base
    b0 = np.atleast_1d(np.asarray(b0, float))
    before = constraint_bound(eta.recenter(b).coords, eta.sig, float(np.linalg.norm(b - b0)))
    pushed = pushforward(phi, eta)
    return {"source_bound": before, "pushed": pushed}


def composite_flat_test(g_jets: Sequence[Poly], maps: Sequence[MapJet],
                        tol: Tolerances = DEFAULT) -> dict:
    """Find P with T^p_b g = phi*_b(P) for every b in the fiber over a.

    ``g_jets[i]`` is T^p_b g at the i-th fiber point and ``maps[i]`` the jet of
    phi there; all maps must send their base to the same point a.
    """
    if not maps:
        raise ValueError("empty fiber over a")
    a = maps[0].image
    for phi in maps[1:]:
        if not np.allclose(phi.image, a, atol=1e-9):
            raise ValueError("all fiber points must map to the same point")
    rows, rhs = [], []
    for g, phi in zip(g_jets, maps):
        A = pullback_matrix(phi)
        rows.append(A)
        rhs.append(rebase(g, phi.base).coeffs)
    A = np.vstack(rows)
    y = np.concatenate(rhs)
    c, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.linalg.norm(A @ c - y))
    scale = max(1.0, float(np.linalg.norm(y)))
    ok = resid <= tol.eps_alg * scale * 10
    sig = JetSignature(maps[0].target_dim, maps[0].source_sig.p)
    return {"feasible": ok, "residual": resid, "P": Poly(sig, a, c) if ok else None,
            "least_squares_P": Poly(sig, a, c)}
