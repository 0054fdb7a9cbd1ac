"""Command-line front end.

Every subcommand reads JSON (or a points CSV), writes JSON, and exits with

    0  the criterion passes
    1  it fails; the witness is printed
    2  inconclusive
    3  input could not be read or validated (message names file and line/field)

Example pipeline::

    whitneyjets gen --scene zigzag -o zz.json
    whitneyjets whitney-check --field zz.json --p 1 -o report.json
    whitneyjets plot --in report.json -o decay.svg
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import __version__
from .bundles import Bundle
from .config import DEFAULT, Tolerances
from .jetalg import JetSignature
from .paratangent import (DeltaConfig, NablaBundle, field_from_nabla, nabla_p, parse_schedule,
                          stability_probe, tau_p, zariski_containment, zariski_Tp)
from .scenes import BUILTINS, Scene, builtin, sample
from .whitney import (ExtensionError, WhitneyField, default_schedule, extend_1d,
                      read_points_csv, whitney_1d_check, whitney_check)

EXIT = {"pass": 0, "fail": 1, "inconclusive": 2}
DEFAULT_SCALE = {"disk": 0.04}


class InputError(Exception):
    """Unreadable or invalid input; reported with exit code 3."""


# ---------------------------------------------------------------- I/O helpers


def _load_json(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(d, dict):
        raise InputError(f"{path}: top level must be a JSON object")
    return d


def _need(d: dict, key: str, path: str):
    if key not in d:
        raise InputError(f"{path}: missing field '{key}'")
    return d[key]


def _array(d: dict, key: str, path: str, ndim: int) -> np.ndarray:
    try:
        a = np.array(_need(d, key, path), dtype=float)
    except (TypeError, ValueError) as e:
        raise InputError(f"{path}: field '{key}': {e}") from None
    if ndim == 2 and a.ndim == 1:
        a = a[:, None]
    if a.ndim != ndim:
        raise InputError(f"{path}: field '{key}' must be a {ndim}-D array")
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0].tolist()
        raise InputError(f"{path}: field '{key}' has a non-finite entry at {bad}")
    return a


def _read_csv(path: str, need_values: bool):
    try:
        return read_points_csv(path, need_values=need_values)
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from None
    except ValueError as e:
        raise InputError(str(e)) from None


def _load_cloud(path: str) -> tuple[np.ndarray, dict]:
    if path.endswith(".csv"):
        pts, _ = _read_csv(path, False)
        return pts, {}
    d = _load_json(path)
    pts = _array(d, "points", path, 2)
    if len(pts) == 0:
        raise InputError(f"{path}: field 'points' is empty")
    return pts, d


def _load_field(path: str) -> tuple[WhitneyField, dict]:
    if path.endswith(".csv"):
        pts, vals = _read_csv(path, True)
        sig = JetSignature(pts.shape[1], 0)
        return WhitneyField(sig, pts, vals[:, None]), {}
    d = _load_json(path)
    src = d.get("field", d)
    for key in ("n", "p", "points", "jets"):
        _need(src, key, path)
    try:
        return WhitneyField.from_json(src), d
    except ValueError as e:
        raise InputError(f"{path}: {e}") from None


def _tolerances(items: list[str] | None) -> Tolerances:
    tol = DEFAULT
    for item in items or []:
        key, _, val = item.partition("=")
        if not hasattr(tol, key):
            raise InputError(f"--tol: unknown tolerance '{key}'")
        try:
            tol = tol.with_(**{key: float(val)})
        except ValueError:
            raise InputError(f"--tol: '{val}' is not a number") from None
    return tol


def _schedule(text: str | None, default: str = "0.2x8") -> tuple[float, ...]:
    try:
        return parse_schedule(text or default)
    except ValueError as e:
        raise InputError(f"--schedule: {e}") from None


def _envelope(config: dict, seed, body: dict) -> dict:
    return {"tool_version": __version__, "config_echo": config, "seed": seed, **body}


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=1)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- subcommands


def cmd_gen(a) -> int:
    if a.scene_file:
        scene = Scene.from_json(_load_json(a.scene_file))
    else:
        if a.scene not in BUILTINS:
            raise InputError(f"--scene: unknown scene '{a.scene}'; choose from {sorted(BUILTINS)}")
        scene = builtin(a.scene, a.p)
    scale = a.scale if a.scale is not None else DEFAULT_SCALE.get(scene.name, 0.01)
    pts = sample(scene, scale, a.seed, a.levels)
    body = {"scene": scene.to_json(), "n": int(pts.shape[1]), "points": pts.tolist()}
    if scene.fixture is not None:
        body["field"] = scene.fixture.to_json()
    cfg = {"scene": scene.name, "p": a.p, "scale": scale, "levels": a.levels}
    _emit(_envelope(cfg, a.seed, body), a.out)
    _say(f"{scene.name}: {len(pts)} points in R^{pts.shape[1]}")
    return 0


def _print_witness(rep) -> None:
    w = rep.witness
    if w is None:
        return
    if "a" in w:
        _say(f"witness pair a={w['a']} b={w['b']} alpha={w['alpha']} value={w['value']:.6g}")
    else:
        _say(f"witness near x={w['location']:.6g}: spread {w['spread']:.6g}")


def cmd_whitney_check(a) -> int:
    F, d = _load_field(a.field)
    p = F.sig.p if a.p is None else a.p
    if p > F.sig.p:
        raise InputError(f"{a.field}: field has order {F.sig.p}, cannot check at p={p}")
    if p < F.sig.p:
        sig = JetSignature(F.sig.n, p)
        F = WhitneyField(sig, F.points, F.jets[:, : sig.dim])
    tol = _tolerances(a.tol)
    sched = _schedule(a.schedule)
    rep = whitney_check(F, sched, tol)
    cfg = {"p": p, "schedule": list(sched), "tolerances": tol.echo()}
    _emit(_envelope(cfg, d.get("seed"), {"report": rep.to_json(), "verdict": rep.verdict}), a.out)
    _say(f"verdict: {rep.verdict}")
    if rep.verdict == "fail":
        _print_witness(rep)
    return EXIT[rep.verdict]


def cmd_check1d(a) -> int:
    pts, vals = _read_csv(a.csv, True)
    if pts.shape[1] != 1:
        raise InputError(f"{a.csv}:1: check1d needs exactly one x column, got {pts.shape[1]}")
    tol = _tolerances(a.tol)
    sched = _schedule(a.schedule)
    try:
        rep = whitney_1d_check(pts[:, 0], vals, a.p, sched, tol)
    except ValueError as e:
        raise InputError(f"{a.csv}: {e}") from None
    cfg = {"p": a.p, "schedule": list(sched), "tolerances": tol.echo()}
    _emit(_envelope(cfg, None, {"report": rep.to_json(), "verdict": rep.verdict}), a.out)
    _say(f"verdict: {rep.verdict}")
    if rep.verdict == "fail":
        _print_witness(rep)
    return EXIT[rep.verdict]


def _delta_config(a, tol) -> DeltaConfig:
    try:
        return DeltaConfig(p=a.p, k=a.k, schedule=_schedule(a.schedule),
                           neighbor_cap=a.neighbor_cap, tol=tol)
    except ValueError as e:
        raise InputError(str(e)) from None


def cmd_tau(a) -> int:
    pts, d = _load_cloud(a.cloud)
    tol = _tolerances(a.tol)
    cfg = _delta_config(a, tol)
    res = tau_p(pts, cfg)
    verdict = "inconclusive" if res.inconclusive else "pass"
    echo = {**cfg.to_json(), "tolerances": tol.echo()}
    _emit(_envelope(echo, d.get("seed"), {**res.to_json(), "verdict": verdict}), a.out)
    counts = np.bincount(res.bundle.dims()).tolist()
    _say(f"{res.trace.iterations} steps; points per fiber dimension {counts}")
    return EXIT[verdict]


def _match_values(pts: np.ndarray, vpts: np.ndarray, vals: np.ndarray, path: str) -> np.ndarray:
    """Values in cloud order, matching CSV rows to cloud points by coordinates."""
    if vpts.shape[1] != pts.shape[1]:
        raise InputError(f"{path}:1: {vpts.shape[1]} x columns for points in R^{pts.shape[1]}")
    if len(vpts) != len(pts):
        raise InputError(f"{path}: {len(vpts)} value rows for {len(pts)} cloud points")
    dist, j = cKDTree(vpts).query(pts)
    scale = max(1.0, float(np.abs(pts).max()))
    bad = np.where(dist > 1e-9 * scale)[0]
    if bad.size:
        raise InputError(f"{path}: no row for cloud point {pts[bad[0]].tolist()}")
    if len(np.unique(j)) != len(j):
        raise InputError(f"{path}: duplicate rows for the same cloud point")
    return vals[j]


def cmd_nabla(a) -> int:
    pts, d = _load_cloud(a.cloud)
    vpts, vals = _read_csv(a.values, True)
    f = _match_values(pts, vpts, vals, a.values)
    tol = _tolerances(a.tol)
    cfg = _delta_config(a, tol)
    nb, v = nabla_p(f, pts, cfg, robust=not a.no_robust)
    echo = {**cfg.to_json(), "tolerances": tol.echo()}
    _emit(_envelope(echo, d.get("seed"), {"verdict": v.label, "criterion": v.to_json(),
                                          "nabla": nb.to_json()}), a.out)
    _say(f"verdict: {v.label}")
    if v.is_function is False and v.witness:
        w = v.witness
        _say(f"vertical witness at {w['point']}: jet part norm {w['jet_part_norm']:.3g}")
    return EXIT[v.label]


def cmd_extract_field(a) -> int:
    d = _load_json(a.verdict)
    nbj = _need(d, "nabla", a.verdict)
    for key in ("n", "p", "values", "points", "fibers", "ambient_dim"):
        _need(nbj, key, f"{a.verdict}: nabla")
    try:
        nb = NablaBundle.from_json(nbj)
    except (ValueError, KeyError, TypeError) as e:
        raise InputError(f"{a.verdict}: nabla: {e}") from None
    verdict = d.get("verdict", "inconclusive")
    if verdict == "fail" and not a.force:
        _say("the graph bundle has a vertical vector; no field to extract (use --force)")
        return 1
    tol = _tolerances(a.tol)
    F, rep = field_from_nabla(nb, tol)
    _emit(_envelope(d.get("config_echo", {}), d.get("seed"),
                    {**F.to_json(), "report": rep, "verdict": verdict}), a.out)
    _say(f"field of order {F.sig.p} at {len(F)} points; {len(rep['filled'])} jets completed")
    return EXIT.get(verdict, 2)


def cmd_zariski(a) -> int:
    pts, d = _load_cloud(a.cloud)
    tol = _tolerances(a.tol)
    q = a.p if a.q is None else a.q
    if q < a.p:
        raise InputError("--q must be >= --p")
    T, info = zariski_Tp(pts, a.p, q, tol)
    body = {"bundle": T.to_json(), "vanishing": info}
    verdict = "pass"
    if info.get("underdetermined"):
        verdict = "inconclusive"
    if a.tau:
        td = _load_json(a.tau)
        try:
            tau = Bundle.from_json(td.get("bundle", td))
        except (ValueError, KeyError, TypeError) as e:
            raise InputError(f"{a.tau}: bundle: {e}") from None
        if tau.points.shape != T.points.shape or not np.allclose(tau.points, T.points):
            raise InputError(f"{a.tau}: bundle points differ from {a.cloud}")
        cont = zariski_containment(tau, T, tol)
        body["containment"] = cont
        if not cont["contained"]:
            verdict = "fail"
    if a.probe_qmax is not None:
        at = np.array(a.at, float) if a.at else None
        if at is None:
            marks = d.get("scene", {}).get("markers") or [[0.0] * pts.shape[1]]
            at = np.array(marks[0], float)
        if at.shape != (pts.shape[1],):
            raise InputError(f"--at needs {pts.shape[1]} coordinates")
        probe = stability_probe(pts, at, a.p, a.probe_qmax, tol)
        body["probe"] = probe
        if probe["first_stable_q"] is None and verdict == "pass":
            verdict = "inconclusive"
        _say(f"probe at {at.tolist()}: dims {probe['dims']} for q = {probe['q']}")
    cfg = {"p": a.p, "q": q, "probe_qmax": a.probe_qmax, "tolerances": tol.echo()}
    _emit(_envelope(cfg, d.get("seed"), {**body, "verdict": verdict}), a.out)
    _say(f"verdict: {verdict}")
    return EXIT[verdict]


def cmd_extend1d(a) -> int:
    F, d = _load_field(a.field)
    if F.sig.n != 1:
        raise InputError(f"{a.field}: extend1d needs a field on R (n = 1)")
    tol = _tolerances(a.tol)
    sched = _schedule(a.schedule) if a.schedule else tuple(default_schedule(F.points))
    verdict = "inconclusive"
    rep = None
    if len(F) >= 2:
        rep = whitney_check(F, sched, tol)
        verdict = rep.verdict
    if verdict == "fail":
        _say("field fails the Whitney check; no extension")
        _print_witness(rep)
        _emit(_envelope({"schedule": list(sched)}, d.get("seed"),
                        {"verdict": verdict, "report": rep.to_json()}), a.out)
        return 1
    try:
        S = extend_1d(F, sched, tol, check=False)
    except (ExtensionError, ValueError) as e:
        raise InputError(f"{a.field}: {e}") from None
    cfg = {"schedule": list(sched), "tolerances": tol.echo()}
    _emit(_envelope(cfg, d.get("seed"), {"verdict": verdict, "spline": S.to_json(),
                                         "report": rep.to_json() if rep else None}), a.out)
    _say(f"C^{F.sig.p} extension with {len(S.pieces)} pieces; check: {verdict}")
    return EXIT[verdict]


def cmd_plot(a) -> int:
    d = _load_json(a.inp)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    rep = d.get("report", d)
    if isinstance(rep, dict) and "bins" in rep:
        his = [b["hi"] for b in rep["bins"] if b["max"] is not None]
        mx = [max(b["max"], 1e-18) for b in rep["bins"] if b["max"] is not None]
        ax.loglog(his, mx, "o-")
        ax.set_xlabel("bin upper edge")
        ax.set_ylabel("max delta quotient")
        ax.set_title(f"modulus decay ({rep.get('verdict')})")
    elif "bundle" in d or "nabla" in d or "fibers" in d:
        B = d.get("bundle") or d.get("nabla") or d
        pts = np.array(_need(B, "points", a.inp), float)
        dims = np.array([f["rank"] for f in _need(B, "fibers", a.inp)])
        if pts.shape[1] == 1:
            ax.plot(pts[:, 0], dims, ".")
            ax.set_xlabel("x1")
            ax.set_ylabel("fiber dimension")
        else:
            sc = ax.scatter(pts[:, 0], pts[:, 1], c=dims, s=6, cmap="viridis")
            fig.colorbar(sc, ax=ax, label="fiber dimension")
            ax.set_aspect("equal")
        ax.set_title("fiber dimensions")
    elif "probe" in d:
        pr = d["probe"]
        ax.plot(pr["q"], pr["dims"], "o-")
        ax.set_xlabel("q")
        ax.set_ylabel("dim T^q_a")
    else:
        plt.close(fig)
        raise InputError(f"{a.inp}: nothing to plot (expected a report, bundle or probe)")
    fig.tight_layout()
    fig.savefig(a.out, format="svg")
    plt.close(fig)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="whitneyjets", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, schedule=True):
        p.add_argument("-o", "--out", help="output JSON (stdout if omitted)")
        p.add_argument("--tol", action="append", metavar="NAME=VALUE",
                       help="override a tolerance, e.g. eps_mod=1e-4")
        if schedule:
            p.add_argument("--schedule", help='scales: "0.2x8" (halving) or a comma list')

    g = sub.add_parser("gen", help="sample a scene")
    g.add_argument("--scene", default="segment")
    g.add_argument("--scene-file", help="scene JSON instead of a builtin")
    g.add_argument("--p", type=int, default=None)
    g.add_argument("--scale", type=float, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--levels", type=int, default=3)
    g.add_argument("-o", "--out")
    g.set_defaults(fn=cmd_gen)

    w = sub.add_parser("whitney-check", help="binned modulus check of a Whitney field")
    w.add_argument("--field", required=True)
    w.add_argument("--p", type=int, default=None)
    common(w)
    w.set_defaults(fn=cmd_whitney_check)

    c = sub.add_parser("check1d", help="divided-difference check of (x, f) data")
    c.add_argument("--csv", required=True)
    c.add_argument("--p", type=int, required=True)
    common(c)
    c.set_defaults(fn=cmd_check1d)

    for name, fn, help_ in (("tau", cmd_tau, "saturated paratangent bundle"),
                            ("nabla", cmd_nabla, "graph bundle of f and the function verdict")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--cloud", required=True)
        t.add_argument("--p", type=int, required=True)
        t.add_argument("--k", type=int, default=1)
        t.add_argument("--neighbor-cap", type=int, default=12)
        if name == "nabla":
            t.add_argument("--values", required=True, help="CSV with x1..xn,f")
            t.add_argument("--no-robust", action="store_true",
                           help="skip the rerun with the finest scale dropped")
        common(t)
        t.set_defaults(fn=fn)

    e = sub.add_parser("extract-field", help="Whitney field from a nabla verdict")
    e.add_argument("--verdict", required=True)
    e.add_argument("--force", action="store_true")
    common(e, schedule=False)
    e.set_defaults(fn=cmd_extract_field)

    z = sub.add_parser("zariski", help="Zariski paratangent surrogate and stability probe")
    z.add_argument("--cloud", required=True)
    z.add_argument("--p", type=int, required=True)
    z.add_argument("--q", type=int, default=None)
    z.add_argument("--probe-qmax", type=int, default=None)
    z.add_argument("--at", type=float, nargs="+", help="probe point (default: first marker)")
    z.add_argument("--tau", help="bundle JSON to test for containment")
    common(z, schedule=False)
    z.set_defaults(fn=cmd_zariski)

    x = sub.add_parser("extend1d", help="C^p Hermite extension of a 1-D field")
    x.add_argument("--field", required=True)
    common(x)
    x.set_defaults(fn=cmd_extend1d)

    pl = sub.add_parser("plot", help="SVG of a report, bundle or probe")
    pl.add_argument("--in", dest="inp", required=True)
    pl.add_argument("-o", "--out", required=True)
    pl.set_defaults(fn=cmd_plot)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as e:
        # argparse uses 2 for usage errors, which would read as "inconclusive"
        return 0 if e.code == 0 else 3
    try:
        return a.fn(a)
    except InputError as e:
        _say(f"error: {e}")
        return 3
    except (ValueError, KeyError) as e:
        _say(f"error: {e}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
