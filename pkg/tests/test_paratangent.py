import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cloud
from oracles import span_rank, tuple_candidates
from whitneyjets.bundles import glaeser_axiom_check
from whitneyjets.jetalg import JetSignature, MapJet, Poly, delta_functional
from whitneyjets.paratangent import (DeltaConfig, OutsideFiberError, _candidates, _make_ctx,
                                     _neighbor_maps, _padded, _refine_batch, _refine_point,
                                     composite_flat_test, field_from_nabla, geometric_schedule,
                                     nabla_p, nabla_value, parse_schedule, pushforward_bundle,
                                     refinement_op, scale_graph, secant_ptg, seed_delta_bundle,
                                     stability_probe, tau1_function_test, tau_p, tau_slice,
                                     vanishing_polys, zariski_containment, zariski_Tp)
from whitneyjets.scenes import sample
from whitneyjets.whitney import WhitneyField, whitney_check


def origin(X):
    return int(np.argmin(np.linalg.norm(X, axis=1)))


def test_schedules():
    assert parse_schedule("0.2x3") == (0.2, 0.1, 0.05)
    assert parse_schedule("0.3,0.1") == (0.3, 0.1)
    for bad in ("0.1,0.2", "abc", "0.2x0", "-1x2"):
        with pytest.raises(ValueError):
            parse_schedule(bad)


@given(seed=st.integers(0, 2**31), mg=st.integers(1, 6))
@settings(max_examples=25)
def test_scale_graph_groups(seed, mg):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (60, 2))
    sched = geometric_schedule(0.8, 5)
    g = scale_graph(X, sched, cap=100, min_group=mg)
    for i, row in enumerate(g.nbrs):
        flat = np.concatenate(row)
        assert len(set(flat.tolist())) == len(flat) and i not in flat
        d_all = np.linalg.norm(X - X[i], axis=1)
        assert len(flat) == int(np.sum(d_all <= sched[0])) - 1
        pop = g.populated(i)
        for j in pop:
            d = d_all[row[j]]
            # the coarsest group also absorbs the sparse remainder beyond its tag
            bound = sched[0] if j == pop[0] else sched[j]
            assert np.all(d <= bound + 1e-15)
            # only the coarsest group may hold a short remainder of everything
            assert len(row[j]) >= mg or pop == [j]


def test_seed_bundle():
    E = seed_delta_bundle(np.zeros((3, 2)), 2)
    assert E.ambient_dim == 6 and list(E.dims()) == [1, 1, 1]


def test_segment_full_rank():
    X = cloud("segment", 0.05)
    for p in (1, 2):
        res = tau_p(X, DeltaConfig(p=p))
        assert res.trace.stabilized
        interior = np.abs(X[:, 0]) < 0.8
        assert np.all(res.bundle.dims()[interior] == p + 1)


def test_isolated_points_keep_delta():
    X = cloud("point_sequence", 0.05)
    res = tau_p(X, DeltaConfig(p=1))
    i1 = int(np.argmax(X[:, 0]))
    assert X[i1, 0] == 1.0 and i1 in res.diagnostics["isolated_points"]
    assert res.bundle.dims()[i1] == 1


def test_k_monotone_small_union():
    X = sample(__import__("whitneyjets.scenes", fromlist=["x"]).parabola_union(1), 0.05)
    d = [tau_p(X, DeltaConfig(p=1, k=k)).bundle.dims() for k in (1, 2)]
    assert np.all(d[1] >= d[0])


def test_tau_slice_restricts_order():
    X = cloud("segment", 0.05)
    B2 = tau_p(X, DeltaConfig(p=2)).bundle
    B1 = tau_slice(B2, 1)
    assert B1.ambient_dim == 2
    interior = np.abs(X[:, 0]) < 0.8
    assert np.all(B1.dims()[interior] == 2)
    with pytest.raises(ValueError):
        tau_slice(B1, 2)


def test_batched_agrees_with_pointwise():
    """The vectorised k = 1 step and the per-point step give the same new directions."""
    X = cloud("parabola", 0.05)
    cfg = DeltaConfig(p=2)
    E = seed_delta_bundle(X, 2)
    for _ in range(2):
        ctx = _make_ctx(X, cfg, E.ambient_dim)
        idx = np.arange(len(X))
        new_b, _ = _refine_batch(ctx, _padded(E, ctx.r), idx)
        for i in range(0, len(X), 7):
            nb = new_b[i][:, np.linalg.norm(new_b[i], axis=0) > 0.5]
            npnt, _ = _refine_point(ctx, E, i)
            assert nb.shape[1] == npnt.shape[1], i
            if nb.shape[1]:
                assert np.max(np.linalg.svd(nb.T @ npnt, compute_uv=False) - 1) < 1e-6
                s = np.linalg.svd(nb.T @ npnt, compute_uv=False)
                assert s.min() > math.cos(1e-6)
        E = refinement_op(X, cfg, E.ambient_dim)(E)


@pytest.mark.parametrize("k", [1, 2])
def test_candidates_match_tuple_enumeration(k):
    """Per-scale candidate span against the per-tuple loop, mid-saturation.

    The engine is run with a tuple cap covering whole groups so the two
    enumerate the same tuples; the cap itself is tested separately.
    """
    from whitneyjets.scenes import parabola_union
    X = sample(parabola_union(1), 0.05)
    cfg = DeltaConfig(p=1, k=k, tuple_cap=100)
    E = seed_delta_bundle(X, 1)
    E = refinement_op(X, DeltaConfig(p=1), E.ambient_dim)(E)
    ctx = _make_ctx(X, cfg, E.ambient_dim)
    fib = [F.basis for F in E.fibers]
    tau = cfg.tol.tau_mag
    checked = 0
    for i in range(0, len(X), 5):
        for j in ctx.graph.populated(i)[-3:]:
            g = ctx.graph.nbrs[i][j]
            Mpre, M = _neighbor_maps(ctx, E, i, g)
            Ce = _candidates(ctx, Mpre, M, np.arange(len(g)), k)
            Co = tuple_candidates(X, fib, i, list(g), k, 1)
            assert span_rank(Ce, tau) == span_rank(Co, tau), (i, j)
            checked += span_rank(Co, tau) > 0
    assert checked > 0


def test_tuple_cap_does_not_change_saturation():
    from whitneyjets.scenes import parabola_union
    X = sample(parabola_union(1), 0.05)
    capped = tau_p(X, DeltaConfig(p=1, k=2)).bundle.dims()
    full = tau_p(X, DeltaConfig(p=1, k=2, tuple_cap=100)).bundle.dims()
    assert np.array_equal(capped, full)


def test_refinement_is_glaeser_operation():
    X = cloud("parabola", 0.05)
    cfg = DeltaConfig(p=1)
    E = seed_delta_bundle(X, 1)
    rho = refinement_op(X, cfg, E.ambient_dim)
    rep = glaeser_axiom_check(rho, E, probe_points=[origin(X), 0])
    assert rep["containment_ok"] and rep["locality_ok"]


def test_secant_tangent_lines():
    X = cloud("parabola", 0.01)
    F = secant_ptg(X).fibers[origin(X)]
    assert F.rank == 1 and abs(F.basis[0, 0]) > 0.99
    # secants across the two cusp branches tend to the vertical
    X = cloud("cusp", 0.01)
    assert secant_ptg(X).fibers[origin(X)].rank == 2
    X = cloud("disk", 0.04)
    dims = secant_ptg(X).dims()
    assert np.mean(dims[np.linalg.norm(X, axis=1) < 0.8] == 2) > 0.95


def test_tau1_function_test():
    X = cloud("segment", 0.01)
    x = X[:, 0]
    assert tau1_function_test(X, x ** 2).is_function is True
    v = tau1_function_test(X, np.abs(x))
    assert v.is_function is False and abs(v.witness["point"][0]) < 1e-12


def test_nabla_polynomial_roundtrip(rng):
    X = cloud("segment", 0.02)
    P = Poly(JetSignature(1, 2), [0.0], rng.normal(size=3))
    f = np.array([P(x) for x in X]).ravel()
    nb, v = nabla_p(f, X, DeltaConfig(p=2))
    assert v.is_function is True
    F, rep = field_from_nabla(nb)
    G = WhitneyField.from_polynomial(P, X)
    assert np.max(np.abs(F.jets - G.jets)) < 1e-6
    assert whitney_check(F, geometric_schedule(0.2, 8)).verdict == "pass"
    i = origin(X)
    val, res = nabla_value(nb, i, delta_functional(X[i], nb.sig))
    assert val == pytest.approx(f[i]) and res < 1e-8


def test_nabla_abs_fails():
    X = cloud("segment", 0.01)
    nb, v = nabla_p(np.abs(X[:, 0]), X, DeltaConfig(p=1))
    assert v.is_function is False
    assert abs(v.witness["point"][0]) < 1e-12 and v.witness["jet_part_norm"] < 1e-6


def test_nabla_value_outside_fiber():
    X = cloud("point_sequence", 0.05)
    nb, _ = nabla_p(X[:, 0] ** 2, X, DeltaConfig(p=1), robust=False)
    i1 = int(np.argmax(X[:, 0]))
    with pytest.raises(OutsideFiberError):
        nabla_value(nb, i1, [0.0, 1.0])


def test_vanishing_parabola():
    X = cloud("parabola", 0.01)
    polys, info = vanishing_polys(X, 2)
    assert len(polys) == 1
    c = polys[0].monomial_coeffs()
    want = np.zeros(6)
    want[JetSignature(2, 2).index((0, 1))] = 1.0
    want[JetSignature(2, 2).index((2, 0))] = -1.0
    cos = abs(c @ want) / np.linalg.norm(c) / np.linalg.norm(want)
    assert cos > 1 - 1e-8


def test_zariski_contains_tau():
    for name in ("parabola", "cusp"):
        X = cloud(name, 0.01)
        for p in (1, 2):
            tau = tau_p(X, DeltaConfig(p=p)).bundle
            T, _ = zariski_Tp(X, p)
            assert zariski_containment(tau, T)["contained"], (name, p)


def test_stability_probe_parabola():
    X = cloud("parabola", 0.01)
    pr = stability_probe(X, [0.0, 0.0], 2, 4)
    assert pr["nonincreasing"] and pr["dims"][0] == 5


def test_pushforward_parabola_chart():
    """phi(t) = (t, t^2) carries tau^1 of the segment into tau^1 of the parabola.

    At finite scale the parabola fibers carry an O(delta) direction error
    (about delta / 2 rad at worst), so containment is checked as linear decay.
    """
    worst = []
    for delta in (0.02, 0.01):
        Y = cloud("segment", delta)
        X = np.hstack([Y, Y ** 2])
        sig = JetSignature(1, 2)
        comps = [Poly(sig, [0.0], [0, 1, 0]), Poly(sig, [0.0], [0, 0, 2])]
        maps = [MapJet.of_polynomial_map(comps, y, 1) for y in Y]
        tY = tau_p(Y, DeltaConfig(p=1)).bundle
        tX = tau_p(X, DeltaConfig(p=1)).bundle
        rep = pushforward_bundle(maps, tY, tX, eps_match=1e-9)
        assert rep["max_angle"] < 0.6 * delta
        assert np.median([c["angle"] for c in rep["checks"]]) < 1e-9
        worst.append(rep["max_angle"])
    assert worst[1] < 0.6 * worst[0]


def test_composite_flat():
    sig = JetSignature(1, 2)
    # phi(t) = t^2 folds +-b onto the same point
    comps = [Poly(sig, [0.0], [0, 0, 2])]
    maps = [MapJet.of_polynomial_map(comps, [b], 2) for b in (-0.5, 0.5)]
    G = Poly(JetSignature(1, 2), [0.0], [1.0, 2.0, 0.0])
    even = [Poly(JetSignature(1, 2), [0.0], [1.0, 0.0, 4.0])] * 2   # 1 + 2 t^2
    assert composite_flat_test(even, maps)["feasible"]
    odd = [Poly(JetSignature(1, 2), [0.0], [0.0, 1.0, 0.0])] * 2    # t
    assert not composite_flat_test(odd, maps)["feasible"]
    del G


@given(shift=st.tuples(st.floats(-5, 5), st.floats(-5, 5)))
@settings(max_examples=5)
def test_translation_invariance(shift):
    X = cloud("parabola", 0.05)
    d0 = tau_p(X, DeltaConfig(p=1)).bundle.dims()
    d1 = tau_p(X + np.array(shift), DeltaConfig(p=1)).bundle.dims()
    assert np.array_equal(d0, d1)
