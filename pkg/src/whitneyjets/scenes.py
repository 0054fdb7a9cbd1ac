"""Executable test scenes: analytic descriptions of X and deterministic samplers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .jetalg import JetSignature
from .whitney import WhitneyField


@dataclass(frozen=True)
class ParametricArc:
    """t -> (sum_k coeffs[i][k] t^k)_i on [t0, t1]."""
    coeffs: tuple[tuple[float, ...], ...]
    t0: float
    t1: float
    kind = "arc"

    @property
    def dim(self) -> int:
        return len(self.coeffs)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        # numpy wants highest degree first
        return np.stack([np.polyval(list(c)[::-1], t) for c in self.coeffs], axis=-1)

    def to_json(self) -> dict:
        return {"kind": "arc", "coeffs": [list(c) for c in self.coeffs],
                "t0": self.t0, "t1": self.t1}


@dataclass(frozen=True)
class PointSequence:
    points: tuple[tuple[float, ...], ...]
    kind = "sequence"

    @property
    def dim(self) -> int:
        return len(self.points[0])

    def to_json(self) -> dict:
        return {"kind": "sequence", "points": [list(p) for p in self.points]}


@dataclass(frozen=True)
class Region:
    """Rejection-sampled region; ``shape`` is 'ball' (center, radius) or 'box' (lo, hi)."""
    shape: str
    params: dict
    kind = "region"

    @property
    def dim(self) -> int:
        return len(self.params["center"] if self.shape == "ball" else self.params["lo"])

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.shape == "ball":
            c = np.asarray(self.params["center"], float)
            r = float(self.params["radius"])
            return c - r, c + r
        return np.asarray(self.params["lo"], float), np.asarray(self.params["hi"], float)

    def contains(self, x: np.ndarray) -> np.ndarray:
        if self.shape == "ball":
            c = np.asarray(self.params["center"], float)
            return np.linalg.norm(x - c, axis=-1) <= float(self.params["radius"])
        lo, hi = self.bbox()
        return np.all((x >= lo) & (x <= hi), axis=-1)

    def to_json(self) -> dict:
        return {"kind": "region", "shape": self.shape, **self.params}


@dataclass(frozen=True)
class RawCloud:
    points: tuple[tuple[float, ...], ...]
    kind = "raw"

    @property
    def dim(self) -> int:
        return len(self.points[0])

    def to_json(self) -> dict:
        return {"kind": "raw", "points": [list(p) for p in self.points]}


Component = ParametricArc | PointSequence | Region | RawCloud


@dataclass(frozen=True)
class Scene:
    name: str
    components: tuple
    markers: tuple[tuple[float, ...], ...] = ()
    # Optional attached Whitney field fixture (zigzag)
    fixture: WhitneyField | None = field(default=None, compare=False)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def to_json(self) -> dict:
        return {"name": self.name, "components": [c.to_json() for c in self.components],
                "markers": [list(m) for m in self.markers]}

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        comps = []
        for k, c in enumerate(d.get("components", [])):
            kind = c.get("kind")
            if kind == "arc":
                comps.append(ParametricArc(tuple(tuple(float(v) for v in row) for row in c["coeffs"]),
                                           float(c["t0"]), float(c["t1"])))
            elif kind == "sequence":
                comps.append(PointSequence(tuple(tuple(map(float, p)) for p in c["points"])))
            elif kind == "raw":
                comps.append(RawCloud(tuple(tuple(map(float, p)) for p in c["points"])))
            elif kind == "region":
                params = {key: v for key, v in c.items() if key not in ("kind", "shape")}
                comps.append(Region(c["shape"], params))
            else:
                raise ValueError(f"components[{k}]: unknown kind {kind!r}")
        if not comps:
            raise ValueError("scene has no components")
        return cls(d.get("name", "custom"), tuple(comps),
                   tuple(tuple(map(float, m)) for m in d.get("markers", [])))


def _arc_params(arc: ParametricArc, delta: float, marker_balls) -> np.ndarray:
    """Parameter values stepping along arc length with the local spacing.

    The spacing is delta away from markers and delta * 2^-j inside the
    2^-j ball of a marker; marker parameters themselves are always included.
    """
    fine = np.linspace(arc.t0, arc.t1, 40001)
    xy = arc(fine)
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    L = s[-1]
    if L <= 0:
        raise ValueError("degenerate arc (zero length)")
    h = np.full(len(fine), float(delta))
    hits = []
    for m, radius, step in marker_balls:
        dist = np.linalg.norm(xy - m, axis=1)
        h = np.where(dist < radius, np.minimum(h, step), h)
        k = int(np.argmin(dist))
        if dist[k] < 1e-9:
            hits.append(s[k])
    # cut the arc at marker hits so refinement is symmetric around them
    cuts = sorted(set([0.0, L] + hits))
    out = []
    for lo, hi in zip(cuts, cuts[1:]):
        pts = [lo]
        while pts[-1] < hi:
            step = float(np.interp(pts[-1], s, h))
            # look ahead so a step never overshoots a finer region
            step = min(step, float(np.interp(min(pts[-1] + step, hi), s, h)) * 2.0, step)
            pts.append(min(pts[-1] + step, hi))
        sp = np.array(pts)
        # even out the last, possibly short, step
        if len(sp) > 2 and sp[-1] - sp[-2] < 0.5 * (sp[-2] - sp[-3]):
            sp = np.delete(sp, -2)
        out.append(sp)
    arc_s = np.unique(np.concatenate(out))
    return np.interp(arc_s, s, fine)


def _dedupe(points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    if len(points) == 0:
        return points
    key = np.round(points / tol).astype(np.int64) if tol > 0 else points
    _, idx = np.unique(key, axis=0, return_index=True)
    return points[np.sort(idx)]


def sample(scene: Scene, delta: float, seed: int = 0, levels: int = 3) -> np.ndarray:
    """Deterministic point cloud of ``scene`` at scale ``delta``.

    Arcs get spacing <= delta along arc length; within the 2^-j ball of each
    marker the spacing drops to delta * 2^-j, j = 1..levels. Regions draw
    bbox_volume / delta^n uniform candidates and keep those inside.
    """
    if delta <= 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    markers = [np.asarray(m, float) for m in scene.markers]
    balls = [(m, 2.0 ** -j, delta * 2.0 ** -j) for m in markers for j in range(1, levels + 1)]
    out = []
    for comp in scene.components:
        if isinstance(comp, ParametricArc):
            out.append(comp(_arc_params(comp, delta, balls)))
        elif isinstance(comp, (PointSequence, RawCloud)):
            out.append(np.asarray(comp.points, float))
        elif isinstance(comp, Region):
            lo, hi = comp.bbox()
            vol = float(np.prod(hi - lo))
            m = int(math.ceil(vol / delta ** len(lo)))
            cand = lo + (hi - lo) * rng.random((m, len(lo)))
            pts = cand[comp.contains(cand)]
            # markers inside the region are sampled exactly
            extra = [mk for mk in markers if comp.contains(mk[None, :])[0]]
            out.append(np.vstack([pts] + [mk[None, :] for mk in extra]) if extra else pts)
        else:
            raise TypeError(f"unknown component {comp!r}")
    pts = np.vstack([np.atleast_2d(o) for o in out if len(o)])
    return _dedupe(pts)


def _poly_arc(coeffs, t0=-1.0, t1=1.0) -> ParametricArc:
    return ParametricArc(tuple(tuple(float(v) for v in c) for c in coeffs), t0, t1)


def segment(a: float = -1.0, b: float = 1.0) -> Scene:
    return Scene("segment", (_poly_arc([[0.0, 1.0]], a, b),))


def disk(radius: float = 1.0, center=(0.0, 0.0)) -> Scene:
    return Scene("disk", (Region("ball", {"center": list(center), "radius": radius}),))


def graph_abs() -> Scene:
    return Scene("graph_abs", (_poly_arc([[0, 1], [0, -1]], -1.0, 0.0),
                               _poly_arc([[0, 1], [0, 1]], 0.0, 1.0)), ((0.0, 0.0),))


def cusp() -> Scene:
    return Scene("cusp", (_poly_arc([[0, 0, 1], [0, 0, 0, 1]]),), ((0.0, 0.0),))


def parabola() -> Scene:
    return Scene("parabola", (_poly_arc([[0, 1], [0, 0, 1]]),), ((0.0, 0.0),))


def half_parabola() -> Scene:
    return Scene("half_parabola", (_poly_arc([[0, 1], [0, 0, 1]], 0.0, 1.0),), ((0.0, 0.0),))


def point_sequence(count: int = 200) -> Scene:
    pts = tuple((1.0 / j,) for j in range(1, count + 1)) + ((0.0,),)
    return Scene("point_sequence", (PointSequence(pts),), ((0.0,),))


def parabola_union(p: int) -> Scene:
    """Arcs y = i x^2, i = 0..p, through the origin."""
    if p < 1:
        raise ValueError("parabola_union needs p >= 1")
    arcs = tuple(_poly_arc([[0, 1], [0, 0, i]]) for i in range(p + 1))
    return Scene(f"parabola_union_{p}", arcs, ((0.0, 0.0),))


def zigzag_sequence(stop: float = 1e-6, max_terms: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """The alternating sequence (x_j, y_j) on y = +x^2 / y = -x^2.

    From (x_j, y_j) the line of slope +2 (j odd) or -2 (j even) meets the
    opposite parabola at x_{j+1} = -1 + sqrt(1 + c), c = 2 x_j - x_j^2 in both
    cases; the form c / (1 + sqrt(1 + c)) avoids cancellation.
    """
    xs, ys = [1.0], [1.0]
    while xs[-1] >= stop and len(xs) < max_terms:
        x = xs[-1]
        c = 2.0 * x - x * x
        xn = c / (1.0 + math.sqrt(1.0 + c))
        sign = -1.0 if len(xs) % 2 == 1 else 1.0
        xs.append(xn)
        ys.append(sign * xn * xn)
    return np.array(xs), np.array(ys)


def zigzag(stop: float = 1e-6, max_terms: int = 2000) -> Scene:
    xs, ys = zigzag_sequence(stop, max_terms)
    pts = np.concatenate([[0.0], xs])[:, None]
    jets = np.zeros((len(pts), 2))
    jets[1:, 0] = ys
    F = WhitneyField(JetSignature(1, 1), pts, jets)
    return Scene("zigzag", (RawCloud(tuple((float(x),) for x in pts[:, 0])),), ((0.0,),), F)


BUILTINS: dict[str, Callable[..., Scene]] = {
    "segment": segment,
    "disk": disk,
    "graph_abs": graph_abs,
    "cusp": cusp,
    "parabola": parabola,
    "half_parabola": half_parabola,
    "point_sequence": point_sequence,
    "parabola_union": parabola_union,
    "zigzag": zigzag,
}


def builtin(name: str, p: int | None = None) -> Scene:
    if name not in BUILTINS:
        raise KeyError(f"unknown scene {name!r}; choose from {sorted(BUILTINS)}")
    if name == "parabola_union":
        return parabola_union(p if p is not None else 1)
    return BUILTINS[name]()


@dataclass(frozen=True)
class FunctionSpec:
    """Values of f on a sample: a polynomial, a named closed form, or raw values."""
    rule: str
    payload: object = None

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, float)
        if self.rule == "values":
            v = np.asarray(self.payload, float).reshape(-1)
            if len(v) != len(pts):
                raise ValueError(f"{len(v)} values for {len(pts)} points")
            return v
        if self.rule == "polynomial":
            P = self.payload
            return np.array([P(x) for x in pts], dtype=float)
        if self.rule == "closed_form":
            fn = CLOSED_FORMS[self.payload]
            return fn(pts)
        raise ValueError(f"unknown function rule {self.rule!r}")


CLOSED_FORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "abs": lambda X: np.abs(X[:, 0]),
    "x_abs_x": lambda X: X[:, 0] * np.abs(X[:, 0]),
    "zero": lambda X: np.zeros(len(X)),
    "square": lambda X: X[:, 0] ** 2,
}
