"""Numerical tolerances shared by every module.

All reports echo the instance they were computed with, so the knobs are
always visible next to the verdicts they produced.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class Tolerances:
    # floating comparisons in jet algebra (relative where a scale exists)
    eps_alg: float = 1e-9
    # singular values below eps_rank * sigma_max are dropped
    eps_rank: float = 1e-8
    # principal-angle tolerance for subspace convergence / containment
    theta_tol: float = 1e-3
    # looser angle used when comparing subspaces estimated at finite scale
    theta_geom: float = 0.2
    # Whitney modulus verdicts
    eps_mod: float = 1e-3
    eps_fail: float = 1e-1
    # slack below which bin maxima are treated as round-off
    noise_floor: float = 1e-6
    # a pooled candidate direction is accepted when its residual norm
    # (after projecting out the current fiber) is at least this
    tau_mag: float = 0.25
    # a candidate axis is kept only when projecting off the current fiber
    # cancels most of its eta: residual <= big_factor * |eta|. Axes without
    # cancellation are a neighbour's fiber carried over, not a difference
    # quotient
    big_factor: float = 0.5
    # vertical witness: jet part norm below this with value part 1
    eps_vert: float = 1e-6

    def with_(self, **kw) -> "Tolerances":
        return replace(self, **kw)

    def echo(self) -> dict:
        return asdict(self)


DEFAULT = Tolerances()
