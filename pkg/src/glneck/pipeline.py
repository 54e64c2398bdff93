"""Run-directory stages behind the command line: solve, sweep, neck, spectrum.

Every stage writes its artifacts under one output directory and records them
in ``manifest.json``.  Artifacts are deterministic for a fixed config and
seed; wall-clock times live only in the manifest.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, gl_core, neck, spectral
from .config import ScenarioSpec, parse_config
from .domain import Field, read_glf1, write_glf1
from .solver import initial_guess, solve_at, sweep_epsilons

MANIFEST = "manifest.json"
LOCK = ".glneck.lock"


class NumericalFailure(RuntimeError):
    """A solve or analysis that ran but did not meet its contract (exit 1)."""


class UsageError(ValueError):
    """Bad arguments or missing prerequisites (exit 2)."""


# ---------------------------------------------------------------------------
# deterministic writers

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return float(f"{x:.12g}")
    return obj


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(float(v)) else f"{float(v):.12g}"
    if v is None:
        return ""
    return str(v)


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# run directory

@contextmanager
def locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output directory {out} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def load_manifest(out: Path) -> dict:
    p = out / MANIFEST
    if not p.exists():
        return {}
    return json.loads(p.read_text())


def update_manifest(out: Path, spec: ScenarioSpec, stage: str, artifacts: list[str], seconds: float,
                    **extra) -> dict:
    man = load_manifest(out)
    man.update({
        "scenario_hash": spec.hash,
        "config": spec.to_ini(),
        "version": __version__,
    })
    man.setdefault("artifacts", {})[stage] = sorted(artifacts)
    man.setdefault("wall_clock", {})[stage] = round(seconds, 3)
    man.setdefault("stages", {})[stage] = _clean(extra)
    write_json(out / MANIFEST, man)
    return man


def spec_from_run(out: Path) -> ScenarioSpec:
    man = load_manifest(out)
    if "config" not in man:
        raise UsageError(f"no run manifest in {out}")
    return parse_config(man["config"])


def _energy_json(rep: gl_core.EnergyReport, **extra) -> dict:
    d = rep.to_json()
    d.update(extra)
    return d


# ---------------------------------------------------------------------------
# stages

def _write_step(out: Path, k: int, u: Field, rep, extra: dict) -> list[str]:
    f = f"fields/field_{k:03d}.glf1"
    e = f"energy_{k:03d}.json"
    (out / "fields").mkdir(parents=True, exist_ok=True)
    write_glf1(out / f, u)
    write_json(out / e, _energy_json(rep, **extra))
    return [f, e]


def run_solve(spec: ScenarioSpec, out: Path) -> dict:
    t0 = time.perf_counter()
    out = Path(out)
    grid = spec.build_grid()
    bc = spec.boundary_data(grid)
    s = spec.solver
    eps = spec.epsilon.schedule()[0]
    u0 = initial_guess(grid, bc, spec.target.n_comp, s.seed, s.perturbation)
    gd, nt = solve_at(u0, eps, None if grid.periodic else bc, s.gd_tol, s.max_iter, s.newton_tol,
                      s.newton_max_steps, s.cg_rtol)
    rep = gl_core.energy(nt.field, eps)
    arts = _write_step(out, 0, nt.field, rep, {
        "converged": nt.converged, "flag": nt.flag, "residual": nt.residual,
        "gd_iterations": gd.iterations, "newton_steps": nt.iterations,
    })
    (out / "config.ini").write_text(spec.to_ini())
    arts.append("config.ini")
    man = update_manifest(out, spec, "solve", arts, time.perf_counter() - t0,
                          converged=nt.converged, flag=nt.flag)
    if not nt.converged:
        raise NumericalFailure(f"solve at epsilon {eps} unconverged (residual {nt.residual:.3e})")
    return man


def run_sweep(spec: ScenarioSpec, out: Path) -> dict:
    t0 = time.perf_counter()
    out = Path(out)
    grid = spec.build_grid()
    bc = spec.boundary_data(grid)
    s = spec.solver
    u0 = initial_guess(grid, bc, spec.target.n_comp, s.seed, s.perturbation)
    try:
        rec = sweep_epsilons(u0, None if grid.periodic else bc, spec.epsilon.schedule(), s.gd_tol,
                             s.max_iter, s.newton_tol, s.newton_max_steps, s.cg_rtol)
    except RuntimeError as exc:
        update_manifest(out, spec, "sweep", [], time.perf_counter() - t0, failed=str(exc))
        raise NumericalFailure(str(exc)) from None
    arts = []
    rows = []
    for k, st in enumerate(rec.steps):
        arts += _write_step(out, k, st.field, st.report, {
            "converged": st.converged, "flag": st.flag, "residual": st.residual,
            "gd_iterations": st.gd_iterations, "newton_steps": st.newton_steps,
        })
        row = {"epsilon": st.epsilon, "energy": st.report.total, "rho": None, "rho_over_eps": None}
        try:
            conc = neck.concentration_radius(st.field, st.epsilon, spec.neck.delta0)
        except ValueError:
            conc = None
        if conc is not None:
            if conc.multiple:
                raise NumericalFailure(
                    f"epsilon {st.epsilon}: two disjoint balls reach delta0/2; one concentration point per run")
            st.concentration = conc
            row["rho"] = conc.rho
            row["rho_over_eps"] = conc.ratio_rho_eps
            name = f"concentration_{k:03d}.json"
            write_json(out / name, conc.to_json())
            arts.append(name)
        rows.append(row)
    write_csv(out / "sweep.csv", ["epsilon", "energy", "rho", "rho_over_eps"], rows)
    (out / "config.ini").write_text(spec.to_ini())
    arts += ["sweep.csv", "config.ini"]
    return update_manifest(out, spec, "sweep", arts, time.perf_counter() - t0,
                           truncated=rec.truncated, warnings=rec.warnings, completed=len(rec.steps),
                           Lambda=rec.Lambda)


def load_fields(out: Path) -> list[tuple[float, Field]]:
    """(epsilon, field) pairs of a sweep or solve run, in schedule order."""
    out = Path(out)
    grid = spec_from_run(out).build_grid()
    items = []
    for p in sorted((out / "fields").glob("field_*.glf1")):
        k = p.stem.split("_")[1]
        meta = json.loads((out / f"energy_{k}.json").read_text())
        items.append((float(meta["epsilon"]), read_glf1(p, grid)))
    if not items:
        raise UsageError(f"no field artifacts in {out}")
    return items


def analyse_neck(u: Field, eps: float, spec: ScenarioSpec, eta: float, beta_default: float) -> dict:
    """Full neck pipeline for one field; raises ValueError('no concentration')."""
    conc = neck.concentration_radius(u, eps, spec.neck.delta0)
    ann = neck.annulus_system(u.grid, conc.x, eta, conc.rho, spec.neck.delta0)
    led = neck.annulus_ledger(u, eps, ann)
    split = None
    hodge = {"status": "ok"}
    try:
        split = neck.hodge_decompose(u, ann, n_theta=spec.neck.n_theta)
        hodge.update(split.summary())
        hodge["domain_sensitivity"] = neck.domain_sensitivity(u, ann, n_theta=spec.neck.n_theta)
        hodge["harmonic_residual"] = harmonicity(split)
    except ValueError as exc:
        hodge["status"] = str(exc)
    freq = None
    if split is not None and len(ann.j_range) >= 3:
        freq = neck.harmonic_frequency_decay(split, ann)
        led.h_plus_energy = freq.plus
        led.h_minus_energy = freq.minus
        hodge["h_plus_outer_monotone"] = freq.plus_outer_monotone
        hodge["h_minus_inner_monotone"] = freq.minus_inner_monotone
    fit_ok = led.fit is not None and led.fit.ok and 0 < led.fit.beta < 1
    beta = led.fit.beta if fit_ok else beta_default
    _, pmax = neck.pointwise_profile_check(u, eps, ann, beta)
    led.pointwise_max = pmax
    gamma = neck.gamma_from_alpha()
    mu = neck.mu_from_beta(beta)
    absorb: dict = {"gamma": gamma, "mu": mu, "eps0": 0.1}
    try:
        b = neck.absorption_b_terms(u, eps, ann, led, split, gamma=gamma)
        rep = neck.series_absorption_check(led.a_j, b, gamma, mu, 0.1)
        absorb.update({"holds": rep.holds, "constant": rep.constant, "violated_at": rep.violated_at})
    except ValueError as exc:
        absorb["status"] = str(exc)
    summary = {
        "epsilon": eps,
        "rho": conc.rho,
        "center": list(conc.x),
        "eta": eta,
        "delta": ann.delta,
        "n_annuli": len(ann.j_range),
        "status": led.status,
        "beta": led.fit.beta if led.fit else None,
        "amplitude": led.fit.amplitude if led.fit else None,
        "r2": led.fit.r2 if led.fit else None,
        "fit_ok": fit_ok,
        "beta_used": beta,
        "L21": led.L21,
        "L2": led.L2,
        "neck_energy": led.neck_energy,
        "sum_a_j": float(np.sum(led.a_j)),
        "pointwise_max": pmax,
        "absorption": absorb,
    }
    return {"conc": conc, "ann": ann, "ledger": led, "split": split, "hodge": hodge, "summary": summary}


def harmonicity(split: neck.HodgeSplit) -> float:
    """max |Delta_5 H| / (h ||grad H||_inf) over neck nodes away from the rims."""
    g = split.grid
    X, Y = g.coords()
    r = np.hypot(X - g.center[0], Y - g.center[1])
    h = g.spacing
    mask = (r > split.inner + 3 * h) & (r < split.outer - 3 * h)
    worst = 0.0
    for p in range(split.H.shape[-1]):
        H = split.H[..., p]
        lap = np.zeros_like(H)
        lap[1:-1, 1:-1] = H[2:, 1:-1] + H[:-2, 1:-1] + H[1:-1, 2:] + H[1:-1, :-2] - 4 * H[1:-1, 1:-1]
        gmax = max(float(np.max(np.abs(np.diff(H, axis=0)))), float(np.max(np.abs(np.diff(H, axis=1)))))
        if gmax > 0 and mask.any():
            worst = max(worst, float(np.max(np.abs(lap[mask]))) / gmax)
    return worst


LEDGER_COLUMNS = ["j", "r_inner", "r_outer", "rho_j", "a_j", "h_plus_energy", "h_minus_energy",
                  "profile_bound", "ratio"]


def run_neck(out: Path, eta: float | None = None) -> dict:
    t0 = time.perf_counter()
    out = Path(out)
    spec = spec_from_run(out)
    eta = spec.neck.eta if eta is None else eta
    fields = load_fields(out)
    arts = []
    summaries = []
    status = "ok"
    for k, (eps, u) in enumerate(fields):
        try:
            res = analyse_neck(u, eps, spec, eta, spec.spectral.beta)
        except ValueError as exc:
            msg = str(exc)
            if "no concentration" in msg or "degenerate neck" in msg:
                summaries.append({"epsilon": eps, "status": "no-neck", "reason": msg})
                continue
            if "inradius" in msg:
                raise UsageError(msg) from None
            raise
        if res["conc"].multiple:
            raise NumericalFailure(f"epsilon {eps}: more than one concentration point")
        led = res["ledger"]
        lp = f"neck/ledger_{k:03d}.csv"
        hp = f"neck/hodge_{k:03d}.json"
        write_csv(out / lp, LEDGER_COLUMNS, led.rows(eta, res["ann"].delta))
        write_json(out / hp, res["hodge"])
        arts += [lp, hp]
        summaries.append(res["summary"])
    if all(s.get("status") == "no-neck" for s in summaries):
        status = "no-neck"
    write_json(out / "neck/summary.json", {"status": status, "eta": eta, "records": summaries})
    arts.append("neck/summary.json")
    return update_manifest(out, spec, "neck", arts, time.perf_counter() - t0, status=status, eta=eta)


INDEX_COLUMNS = ["epsilon", "ind_gl", "null_gl", "ind_limit", "null_limit", "ind_bubble",
                 "null_bubble", "upper_ok", "lower_ok"]


def run_spectrum(out: Path, weight: str | None = None, num_eigs: int | None = None,
                 seed: int | None = None) -> dict:
    t0 = time.perf_counter()
    out = Path(out)
    spec = spec_from_run(out)
    weight = spec.spectral.weight if weight is None else weight
    m = spec.spectral.num_eigs if num_eigs is None else num_eigs
    seed = spec.solver.seed if seed is None else seed
    if m < 1:
        raise UsageError("--num-eigs must be at least 1")
    if weight not in spectral.FAMILIES:
        raise UsageError(f"unknown weight family {weight!r}; choose from {', '.join(spectral.FAMILIES)}")
    fields = load_fields(out)
    neck_path = out / "neck/summary.json"
    records = {}
    eta = spec.neck.eta
    if neck_path.exists():
        ns = json.loads(neck_path.read_text())
        eta = ns["eta"]
        records = {float(r["epsilon"]): r for r in ns["records"] if r.get("status") != "no-neck"}
    if weight == "neck_k" and not records:
        raise UsageError("weight neck_k needs neck data; run the neck command first")
    arts = []
    rows = []
    gl_results = []
    lower_checks = []
    bubble_res = None
    limit_res = None
    beta = spec.spectral.beta
    concentrated = bool(records) and all(float(e) in records for e, _ in fields)
    if concentrated:
        last = records[float(fields[-1][0])]
        beta = last["beta_used"]
        u_last = fields[-1][1]
        conc_last = neck.concentration_radius(u_last, fields[-1][0], spec.neck.delta0)
        bu = neck.blow_up(u_last, conc_last.x, conc_last.rho, 4.0, fields[-1][0])
        align = neck.align_bubble(bu.field, 2.0)
        bubble_res = spectral.bubble_spectrum(eta, beta, align.rotation, m=max(m, 24), seed=seed,
                                              half_width=spec.spectral.bubble_half_width,
                                              n=spec.spectral.bubble_n, n_comp=u_last.n_comp)
        write_json(out / "spectrum/bubble.json", {**bubble_res.to_json(), "alignment_error": align.rel_error,
                                                   "oracle": spectral.sphere_jacobi_spectrum(3)})
        arts.append("spectrum/bubble.json")
    for k, (eps, u) in enumerate(fields):
        center = tuple(records[float(eps)]["center"]) if concentrated else u.grid.center
        if weight == "neck_k":
            rec = records.get(float(eps))
            if rec is None:
                raise UsageError(f"no neck data for epsilon {eps}")
            w = spectral.weight_field("neck_k", u.grid, eta, rec["rho"], beta, center)
        elif weight == "limit_sigma":
            w = spectral.weight_field("limit_sigma", u.grid, eta, None, beta, center)
        else:
            w = spectral.weight_field(weight, u.grid, eta, None, beta, center)
        gl = spectral.eigen_solve(spectral.assemble_operator(u, eps, w, form="full"), m, seed)
        q = spectral.eigen_solve(spectral.assemble_operator(u, eps, w, form="q"), m, seed)
        mu = spectral.eigen_lower_bound(u, eps, w)
        lower_checks.append({"epsilon": eps, "mu_bound": mu, "q_min": float(q.eigenvalues[0]),
                             "gl_min": float(gl.eigenvalues[0]),
                             "ok": bool(q.eigenvalues[0] >= -mu - 1e-8)})
        name = f"spectrum/gl_{k:03d}.json"
        write_json(out / name, {**gl.to_json(), "epsilon": eps})
        arts.append(name)
        gl_results.append(gl)
        if concentrated:
            if limit_res is None:
                lim = spectral.normalized(fields[-1][1])
                wl = spectral.weight_field("limit_sigma", lim.grid, eta, None, beta, center)
                limit_res = spectral.eigen_solve(
                    spectral.assemble_operator(lim, None, wl, tangential=True, form="limit"), m, seed)
            row = spectral.IndexRow(eps, gl.index, gl.nullity, limit_res.index, limit_res.nullity,
                                    bubble_res.index, bubble_res.nullity)
        else:
            # no bubble: compare against the same operator family on the renormalised field
            row = spectral.IndexRow(eps, gl.index, gl.nullity, gl.index, gl.nullity, 0, 0)
        rows.append(row.csv_row())
    if limit_res is not None:
        write_json(out / "spectrum/limit.json", limit_res.to_json())
        arts.append("spectrum/limit.json")
    write_csv(out / "spectrum/index.csv", INDEX_COLUMNS, rows)
    write_json(out / "spectrum/lower_bound.json", {"records": lower_checks})
    arts += ["spectrum/index.csv", "spectrum/lower_bound.json"]
    return update_manifest(out, spec, "spectrum", arts, time.perf_counter() - t0, weight=weight, num_eigs=m)
