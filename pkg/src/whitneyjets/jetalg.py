"""Polynomial jets on R^n, their duals, and jet pullback/pushforward.

Coordinates
-----------
A polynomial of degree <= p centered at ``c`` is stored through its
coefficients in the scaled basis ``(x - c)^alpha / alpha!``, so the
coefficient of index ``alpha`` is exactly ``(D^alpha P)(c)``.  A dual
element (a linear functional on P_p) is stored through its values on the
same scaled basis at its own center: ``coords[alpha] = xi((x - c)^alpha / alpha!)``.
With these conventions the pairing is a plain dot product and delta and
derivative functionals are unit vectors.

The monomial order is fixed globally: total degree first, then
lexicographic with the first variable dominant, e.g. for n=2, p=2::

    (0,0), (1,0), (0,1), (2,0), (1,1), (0,2)

Because the order is graded, the basis of P_p is a prefix of the basis of
P_q for q >= p, which makes truncation and the dual embedding slicing.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb, factorial, prod
from typing import Sequence

import numpy as np

MultiIndex = tuple[int, ...]


@lru_cache(maxsize=None)
def monomial_basis(n: int, p: int) -> tuple[MultiIndex, ...]:
    """All multiindices of length ``n`` and order <= ``p`` in the global order."""
    if n < 1 or p < 0:
        raise ValueError(f"need n >= 1 and p >= 0, got n={n}, p={p}")
    out: list[MultiIndex] = []
    for d in range(p + 1):
        out.extend(_of_degree(n, d))
    return tuple(out)


def _of_degree(n: int, d: int) -> list[MultiIndex]:
    if n == 1:
        return [(d,)]
    res = []
    for first in range(d, -1, -1):
        for rest in _of_degree(n - 1, d - first):
            res.append((first,) + rest)
    return res


def mi_factorial(alpha: Sequence[int]) -> int:
    return prod(factorial(a) for a in alpha)


@dataclass(frozen=True)
class JetSignature:
    n: int
    p: int

    def __post_init__(self):
        if self.n < 1 or self.p < 0:
            raise ValueError(f"invalid signature n={self.n}, p={self.p}")

    @property
    def dim(self) -> int:
        return comb(self.n + self.p, self.n)

    @property
    def basis(self) -> tuple[MultiIndex, ...]:
        return monomial_basis(self.n, self.p)

    def index(self, alpha: Sequence[int]) -> int:
        return _index_map(self.n, self.p)[tuple(alpha)]

    def orders(self) -> np.ndarray:
        return _orders(self.n, self.p)

    def to_json(self) -> dict:
        return {"n": self.n, "p": self.p}


@lru_cache(maxsize=None)
def _index_map(n: int, p: int) -> dict[MultiIndex, int]:
    return {a: i for i, a in enumerate(monomial_basis(n, p))}


@lru_cache(maxsize=None)
def _orders(n: int, p: int) -> np.ndarray:
    o = np.array([sum(a) for a in monomial_basis(n, p)], dtype=int)
    o.flags.writeable = False
    return o


@lru_cache(maxsize=None)
def _exponents(n: int, p: int) -> np.ndarray:
    e = np.array(monomial_basis(n, p), dtype=int).reshape(-1, n)
    e.flags.writeable = False
    return e


@lru_cache(maxsize=None)
def _inv_factorials(n: int, p: int) -> np.ndarray:
    f = np.array([1.0 / mi_factorial(a) for a in monomial_basis(n, p)])
    f.flags.writeable = False
    return f


@lru_cache(maxsize=None)
def _shift_pattern(n: int, p: int):
    """Index triples (row alpha, col beta, gamma = beta - alpha) for alpha <= beta."""
    basis = monomial_basis(n, p)
    idx = _index_map(n, p)
    rows, cols, gam = [], [], []
    for j, beta in enumerate(basis):
        for i, alpha in enumerate(basis):
            if all(a <= b for a, b in zip(alpha, beta)):
                rows.append(i)
                cols.append(j)
                gam.append(idx[tuple(b - a for a, b in zip(alpha, beta))])
    return np.array(rows), np.array(cols), np.array(gam)


def scaled_monomials(sig: JetSignature, d: np.ndarray) -> np.ndarray:
    """``d^alpha / alpha!`` for every basis index; ``d`` has shape (..., n)."""
    d = np.asarray(d, dtype=float)
    e = _exponents(sig.n, sig.p)
    # powers d_i^k by repeated multiplication, then gathered per multiindex
    pw = np.empty(d.shape[:-1] + (sig.p + 1, sig.n))
    pw[..., 0, :] = 1.0
    for k in range(1, sig.p + 1):
        pw[..., k, :] = pw[..., k - 1, :] * d
    vals = pw[..., e[:, 0], 0]
    for i in range(1, sig.n):
        vals = vals * pw[..., e[:, i], i]
    return vals * _inv_factorials(sig.n, sig.p)


def shift_matrix(sig: JetSignature, d: np.ndarray) -> np.ndarray:
    """Matrix taking coefficients at center c to coefficients at center c + d.

    ``S[alpha, beta] = d^(beta - alpha) / (beta - alpha)!`` for alpha <= beta.
    Batched over leading axes of ``d``.
    """
    d = np.asarray(d, dtype=float)
    rows, cols, gam = _shift_pattern(sig.n, sig.p)
    mono = scaled_monomials(sig, d)
    out = np.zeros(d.shape[:-1] + (sig.dim, sig.dim))
    out[..., rows, cols] = mono[..., gam]
    return out


def dual_transfer(sig: JetSignature, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Matrix taking dual coordinates at ``src`` to dual coordinates at ``dst``."""
    S = shift_matrix(sig, np.asarray(src, float) - np.asarray(dst, float))
    return np.swapaxes(S, -1, -2)


def _as_point(x, n: int) -> np.ndarray:
    a = np.atleast_1d(np.asarray(x, dtype=float))
    if a.shape != (n,):
        raise ValueError(f"expected a point in R^{n}, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("point has non-finite entries")
    return a


@dataclass(frozen=True, eq=False)
class Poly:
    sig: JetSignature
    center: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        c = _as_point(self.center, self.sig.n)
        k = np.asarray(self.coeffs, dtype=float).reshape(-1)
        if k.shape != (self.sig.dim,):
            raise ValueError(f"need {self.sig.dim} coefficients, got {k.shape[0]}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "coeffs", k)

    @classmethod
    def zero(cls, sig: JetSignature, center=None) -> "Poly":
        c = np.zeros(sig.n) if center is None else center
        return cls(sig, c, np.zeros(sig.dim))

    @classmethod
    def from_monomials(cls, sig: JetSignature, terms: dict, center=None) -> "Poly":
        """Build from plain coefficients ``{alpha: c}`` of ``(x - center)^alpha``."""
        k = np.zeros(sig.dim)
        for alpha, c in terms.items():
            alpha = tuple(alpha) if not isinstance(alpha, int) else (alpha,)
            k[sig.index(alpha)] += c * mi_factorial(alpha)
        return cls(sig, np.zeros(sig.n) if center is None else center, k)

    def monomial_coeffs(self) -> np.ndarray:
        return self.coeffs * _inv_factorials(self.sig.n, self.sig.p)

    def __call__(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1 and self.sig.n > 1 or x.ndim == 0
        pts = x.reshape(-1, self.sig.n)
        vals = scaled_monomials(self.sig, pts - self.center) @ self.coeffs
        return float(vals[0]) if single else vals

    def __add__(self, other: "Poly") -> "Poly":
        other = rebase(other, self.center)
        return Poly(self.sig, self.center, self.coeffs + other.coeffs)

    def __sub__(self, other: "Poly") -> "Poly":
        other = rebase(other, self.center)
        return Poly(self.sig, self.center, self.coeffs - other.coeffs)

    def __mul__(self, s: float) -> "Poly":
        return Poly(self.sig, self.center, self.coeffs * float(s))

    __rmul__ = __mul__

    def derivative_at(self, alpha: Sequence[int], b) -> float:
        """``(D^alpha P)(b)``."""
        return float(rebase(self, b).coeffs[self.sig.index(alpha)])

    def allclose(self, other: "Poly", tol: float = 1e-9) -> bool:
        other = rebase(other, self.center)
        scale = max(1.0, float(np.max(np.abs(self.coeffs))))
        return bool(np.max(np.abs(self.coeffs - other.coeffs)) <= tol * scale)

    def to_json(self) -> dict:
        return {"signature": self.sig.to_json(), "center": self.center.tolist(),
                "coeffs": self.coeffs.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Poly":
        sig = JetSignature(int(d["signature"]["n"]), int(d["signature"]["p"]))
        return cls(sig, np.array(d["center"], float), np.array(d["coeffs"], float))


@dataclass(frozen=True, eq=False)
class JetDual:
    sig: JetSignature
    center: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        c = _as_point(self.center, self.sig.n)
        k = np.asarray(self.coords, dtype=float).reshape(-1)
        if k.shape != (self.sig.dim,):
            raise ValueError(f"need {self.sig.dim} dual coordinates, got {k.shape[0]}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "coords", k)

    def recenter(self, a) -> "JetDual":
        a = _as_point(a, self.sig.n)
        T = dual_transfer(self.sig, self.center, a)
        return JetDual(self.sig, a, T @ self.coords)

    def __call__(self, P: Poly) -> float:
        return pair(self, P)

    def __add__(self, other: "JetDual") -> "JetDual":
        other = other.recenter(self.center)
        return JetDual(self.sig, self.center, self.coords + other.coords)

    def __mul__(self, s: float) -> "JetDual":
        return JetDual(self.sig, self.center, self.coords * float(s))

    __rmul__ = __mul__

    def to_json(self) -> dict:
        return {"signature": self.sig.to_json(), "center": self.center.tolist(),
                "coeffs": self.coords.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "JetDual":
        sig = JetSignature(int(d["signature"]["n"]), int(d["signature"]["p"]))
        return cls(sig, np.array(d["center"], float), np.array(d["coeffs"], float))


def rebase(P: Poly, a) -> Poly:
    """Re-express ``P`` in the scaled basis centered at ``a`` (exact, no truncation)."""
    a = _as_point(a, P.sig.n)
    S = shift_matrix(P.sig, a - P.center)
    return Poly(P.sig, a, S @ P.coeffs)


def truncate(P: Poly, p: int) -> Poly:
    """Drop terms of order > p in ``x - center``."""
    if p > P.sig.p:
        raise ValueError(f"cannot truncate order {P.sig.p} polynomial to higher order {p}")
    sig = JetSignature(P.sig.n, p)
    return Poly(sig, P.center, P.coeffs[: sig.dim])


def raise_order(P: Poly, q: int) -> Poly:
    """The same polynomial viewed in P_q, q >= p."""
    if q < P.sig.p:
        raise ValueError("raise_order needs q >= p")
    sig = JetSignature(P.sig.n, q)
    k = np.zeros(sig.dim)
    k[: P.sig.dim] = P.coeffs
    return Poly(sig, P.center, k)


def pair(xi: JetDual, P: Poly) -> float:
    if xi.sig != P.sig:
        raise ValueError(f"signature mismatch: {xi.sig} vs {P.sig}")
    return float(xi.coords @ rebase(P, xi.center).coeffs)


def delta_functional(a, sig: JetSignature) -> JetDual:
    """Evaluation at ``a``."""
    k = np.zeros(sig.dim)
    k[0] = 1.0
    return JetDual(sig, a, k)


def deriv_functional(alpha: Sequence[int], b, sig: JetSignature) -> JetDual:
    """``P -> (D^alpha P)(b)``."""
    alpha = tuple(alpha)
    if len(alpha) != sig.n or sum(alpha) > sig.p or min(alpha) < 0:
        raise ValueError(f"multiindex {alpha} not admissible for {sig}")
    k = np.zeros(sig.dim)
    k[sig.index(alpha)] = 1.0
    return JetDual(sig, b, k)


def dual_coord(xi: JetDual, alpha: Sequence[int], a) -> float:
    """``xi((x - a)^alpha / alpha!)``."""
    alpha = tuple(alpha)
    if sum(alpha) > xi.sig.p:
        raise ValueError(f"|alpha| = {sum(alpha)} exceeds p = {xi.sig.p}")
    return float(xi.recenter(a).coords[xi.sig.index(alpha)])


def jet_embed(xi: JetDual, a, q: int) -> JetDual:
    """Embed ``xi`` in P_q* as the functional ``P -> xi(truncation of P at a)``.

    The image annihilates every polynomial of order >= p+1 at ``a``.
    """
    if q < xi.sig.p:
        raise ValueError(f"cannot embed order {xi.sig.p} functional into order {q}")
    local = xi.recenter(a)
    sig_q = JetSignature(xi.sig.n, q)
    k = np.zeros(sig_q.dim)
    k[: xi.sig.dim] = local.coords
    return JetDual(sig_q, local.center, k)


def dual_project(eta: JetDual, p: int) -> JetDual:
    """Restriction of ``eta`` in P_q* to the subspace P_p of P_q."""
    if p > eta.sig.p:
        raise ValueError("dual_project needs p <= q")
    sig = JetSignature(eta.sig.n, p)
    return JetDual(sig, eta.center, eta.coords[: sig.dim])


# -- truncated multiplication in plain (unscaled) monomial coefficients --------

@lru_cache(maxsize=None)
def _mul_table(n: int, p: int):
    basis = monomial_basis(n, p)
    idx = _index_map(n, p)
    ii, jj, kk = [], [], []
    for i, a in enumerate(basis):
        for j, b in enumerate(basis):
            c = tuple(x + y for x, y in zip(a, b))
            if sum(c) <= p:
                ii.append(i)
                jj.append(j)
                kk.append(idx[c])
    return np.array(ii), np.array(jj), np.array(kk)


def _trunc_mul(u: np.ndarray, v: np.ndarray, n: int, p: int) -> np.ndarray:
    ii, jj, kk = _mul_table(n, p)
    out = np.zeros_like(u)
    np.add.at(out, kk, u[ii] * v[jj])
    return out


@dataclass(frozen=True, eq=False)
class MapJet:
    """Order-p Taylor jet at ``base`` of a map R^m -> R^n.

    ``components[i]`` is ``T^p_b phi_i`` as a Poly over R^m centered at ``base``.
    """
    components: tuple[Poly, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a MapJet needs at least one component")
        sig = comps[0].sig
        base = comps[0].center
        fixed = []
        for c in comps:
            if c.sig != sig:
                raise ValueError("components must share a signature")
            fixed.append(rebase(c, base) if not np.array_equal(c.center, base) else c)
        object.__setattr__(self, "components", tuple(fixed))

    @property
    def source_sig(self) -> JetSignature:
        return self.components[0].sig

    @property
    def base(self) -> np.ndarray:
        return self.components[0].center

    @property
    def target_dim(self) -> int:
        return len(self.components)

    @property
    def image(self) -> np.ndarray:
        return np.array([c.coeffs[0] for c in self.components])

    @classmethod
    def of_polynomial_map(cls, polys: Sequence[Poly], b, p: int) -> "MapJet":
        """Order-p jet at ``b`` of the polynomial map with components ``polys``."""
        comps = []
        for P in polys:
            Q = rebase(P, b)
            comps.append(truncate(Q, p) if P.sig.p >= p else raise_order(Q, p))
        return cls(tuple(comps))

    @classmethod
    def identity(cls, b, p: int) -> "MapJet":
        b = np.atleast_1d(np.asarray(b, float))
        sig = JetSignature(len(b), p)
        comps = []
        for i in range(len(b)):
            k = np.zeros(sig.dim)
            k[0] = b[i]
            if p >= 1:
                e = [0] * len(b)
                e[i] = 1
                k[sig.index(e)] = 1.0
            comps.append(Poly(sig, b, k))
        return cls(tuple(comps))


def pullback_matrix(phi: MapJet) -> np.ndarray:
    """Matrix of ``P -> T^p_b(P o phi)`` from coefficients at phi(b) to coefficients at b."""
    src = phi.source_sig
    m, p = src.n, src.p
    n = phi.target_dim
    tgt = JetSignature(n, p)
    # plain coefficients of h_i = phi_i - phi_i(b)
    h = []
    for c in phi.components:
        u = c.monomial_coeffs().copy()
        u[0] = 0.0
        h.append(u)
    one = np.zeros(src.dim)
    one[0] = 1.0
    # powers h_i^k for k <= p
    pw = [[one] for _ in range(n)]
    for i in range(n):
        for _ in range(p):
            pw[i].append(_trunc_mul(pw[i][-1], h[i], m, p))
    A = np.zeros((src.dim, tgt.dim))
    inv_f = _inv_factorials(n, p)
    f_src = 1.0 / _inv_factorials(m, p)
    for j, alpha in enumerate(tgt.basis):
        acc = one
        for i, k in enumerate(alpha):
            if k:
                acc = _trunc_mul(acc, pw[i][k], m, p)
        A[:, j] = acc * inv_f[j] * f_src
    return A


def pullback(phi: MapJet, P: Poly) -> Poly:
    """``T^p_b(P o phi)``: rebase P at phi(b), substitute, truncate at order p."""
    if P.sig.n != phi.target_dim:
        raise ValueError(f"P lives on R^{P.sig.n} but the map targets R^{phi.target_dim}")
    if P.sig.p != phi.source_sig.p:
        raise ValueError("P and the map jet must have the same order")
    Pa = rebase(P, phi.image)
    return Poly(phi.source_sig, phi.base, pullback_matrix(phi) @ Pa.coeffs)


def pushforward(phi: MapJet, eta: JetDual) -> JetDual:
    """``phi_{*b}(eta)(P) = eta(phi*_b P)``; the result is centered at phi(b)."""
    if eta.sig != phi.source_sig:
        raise ValueError(f"eta has signature {eta.sig}, map source is {phi.source_sig}")
    local = eta.recenter(phi.base)
    A = pullback_matrix(phi)
    return JetDual(JetSignature(phi.target_dim, eta.sig.p), phi.image, A.T @ local.coords)


def compose(psi: MapJet, phi: MapJet) -> MapJet:
    """Jet of ``psi o phi`` at phi's base; psi must be based at phi(b)."""
    if not np.allclose(psi.base, phi.image, atol=1e-12):
        raise ValueError("psi must be based at phi(b)")
    return MapJet(tuple(pullback(phi, c) for c in psi.components))
