"""Named experiments over seed ensembles, with CSV/JSON reporting.

Each experiment maps a seed to one or more report rows; `run` executes the
ensemble (optionally over a worker pool), writes `report.csv`,
`summary.json` and `manifest.json` atomically into the output directory,
and returns a process exit status that is zero only when every check of
the experiment passed.  All numeric output is a pure function of
(config hash, seed); the only timestamp lives in the manifest.
"""

from __future__ import annotations

import io
import json
import math
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .boxes import box_dirichlet_solve
from .config import ConfigError, ExperimentConfig
from .corrector import (
    build_corrector_set,
    build_sigma_gauge,
    cz_ratio_scan,
    homogenize,
)
from .fields import (
    CoefficientField,
    moment_report,
    sample_checkerboard,
    sample_laminate,
    sample_lognormal,
    sample_pareto,
)
from .grid import Box, TorusGrid
from .regularity import (
    box_grad,
    caccioppoli_report,
    error_equation_residual,
    excess_decay_experiment,
    homogenization_error,
    make_cutoff,
    sublinearity_scan,
)
from .storage import atomic_write_text, save_coefficient_field, save_corrector_set

__all__ = ["make_field", "run", "summarize", "seed_rows"]


def make_field(config: ExperimentConfig, seed: int) -> CoefficientField:
    grid = TorusGrid(config.d, config.n)
    mp = config.model_params
    if config.model == "lognormal":
        return sample_lognormal(
            grid,
            variance=float(mp.get("variance", 1.0)),
            correlation_length=float(mp.get("correlation_length", 0.1)),
            anisotropy=mp.get("anisotropy"),
            skew=float(mp.get("skew", 0.0)),
            seed=seed,
        )
    if config.model == "laminate":
        return sample_laminate(
            grid,
            alpha=float(mp.get("alpha", 1.0)),
            beta=float(mp.get("beta", 4.0)),
            axis=int(mp.get("axis", 0)),
            stripes=int(mp.get("stripes", 2)),
        )
    if config.model == "checkerboard":
        return sample_checkerboard(
            grid,
            alpha=float(mp.get("alpha", 1.0)),
            beta=float(mp.get("beta", 9.0)),
            tile=int(mp.get("tile", grid.n // 2)),
            seed=seed,
            random=bool(mp.get("random", False)),
        )
    if config.model == "pareto":
        return sample_pareto(
            grid,
            index=float(mp.get("index", 6.0)),
            correlation_length=float(mp.get("correlation_length", 0.1)),
            seed=seed,
            anisotropy=mp.get("anisotropy"),
            skew=float(mp.get("skew", 0.0)),
        )
    if config.model == "constant":
        matrix = np.asarray(mp.get("matrix", np.eye(grid.d).tolist()), dtype=float)
        a = np.ascontiguousarray(np.broadcast_to(matrix, grid.shape + matrix.shape))
        return CoefficientField(grid, a, "constant", seed, {"matrix": matrix.tolist()})
    raise ConfigError(f"unknown model {config.model!r}")


def _smooth_trace_data(box: Box, grid: TorusGrid, seed: int) -> np.ndarray:
    """Seeded low-frequency trigonometric boundary data (smooth at every n)."""
    rng = np.random.default_rng(seed)
    coords = box.cell_centers() * grid.h
    data = np.zeros(box.shape)
    for _ in range(6):
        wave = rng.integers(-2, 3, size=grid.d)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.standard_normal() / (1.0 + float(wave @ wave))
        data += amp * np.sin(2.0 * np.pi * (coords @ wave) + phase)
    return data


# ---------------------------------------------------------------- experiments


def _rows_homogenize(config: ExperimentConfig, seed: int):
    field = make_field(config, seed)
    corr = build_corrector_set(field, config.tol)
    hm = homogenize(field, config.tol, config.p, config.q, corr=corr)
    row = {
        "experiment": config.experiment,
        "seed": seed,
        "n": config.n,
        "model": config.model,
        "p": config.p,
        "q": config.q,
        "K": hm.K,
    }
    d = config.d
    for i in range(d):
        for j in range(d):
            row[f"ahat{i+1}{j+1}"] = float(hm.ahat[i, j])
    row["cert_lower"] = hm.cert_lower
    row["cert_upper"] = hm.cert_upper
    row["lower_slack"] = hm.worst_lower_slack
    row["upper_slack"] = hm.worst_upper_slack
    row["max_residual"] = max(corr.residuals)
    return [row]


def _rows_sigma_check(config: ExperimentConfig, seed: int):
    field = make_field(config, seed)
    corr = build_corrector_set(field, config.tol)
    sigma = build_sigma_gauge(corr)
    gauge = sigma.gauge_residuals(corr)
    fluxdiv = corr.flux_divergence_norms()
    return [
        {
            "experiment": config.experiment,
            "seed": seed,
            "n": config.n,
            "model": config.model,
            "gauge_residual": float(gauge.max()),
            "flux_divergence": float(fluxdiv.max()),
            "construction": sigma.construction_tag,
        }
    ]


def _rows_excess_decay(config: ExperimentConfig, seed: int):
    field = make_field(config, seed)
    solver_tol = min(config.tol, 1e-10)
    corr = build_corrector_set(field, solver_tol)
    sigma = build_sigma_gauge(corr)
    hm = homogenize(field, solver_tol, config.p, config.q, corr=corr)
    ex = config.extra
    R = int(ex.get("R", config.n // 4))
    curve = excess_decay_experiment(
        field,
        corr,
        sigma,
        hm,
        R=R,
        radii_fractions=tuple(ex.get("radii_fractions", (1.0, 0.5, 0.25, 0.125))),
        boundary_model=ex.get("boundary_model", "polynomial"),
        case=ex.get("case", "dirichlet"),
        epsilon=ex.get("epsilon"),
        p=config.p,
        q=config.q,
        C0=float(ex.get("C0", 16.0)),
        tol=solver_tol,
        seed=seed,
        with_companion=bool(ex.get("with_companion", True)),
    )
    rows = []
    for idx, rho in enumerate(curve.radii):
        row = {
            "experiment": config.experiment,
            "seed": seed,
            "n": config.n,
            "model": config.model,
            "p": config.p,
            "q": config.q,
            "K": hm.K,
            "Lambda_check": int(curve.gates.abound_ok),
            "corrsmall_check": int(curve.gates.corrsmall_ok),
            "rho": float(rho),
            "exc": float(curve.exc[idx]),
        }
        for j in range(config.d):
            row[f"xi{j+1}"] = float(curve.xi_star[idx, j])
        row["fitted_alpha"] = curve.fitted_alpha
        rows.append(row)
    return rows


def _rows_caccioppoli(config: ExperimentConfig, seed: int):
    field = make_field(config, seed)
    grid = field.grid
    ex = config.extra
    R = int(ex.get("R", config.n // 4))
    rho = float(ex.get("rho", max(R / 4.0, 2.0)))
    box = Box.centered(grid, R + 3)
    data = _smooth_trace_data(box, grid, seed)
    u = box_dirichlet_solve(field, box, data, grid, min(config.tol, 1e-10))
    rep = caccioppoli_report(u, box, field, grid.center(), float(R), rho, config.p, config.q)
    return [
        {
            "experiment": config.experiment,
            "seed": seed,
            "n": config.n,
            "model": config.model,
            "R": rep.R,
            "rho": rep.rho,
            "Lambda": rep.Lambda,
            "lhs": rep.lhs,
            "mid": rep.mid,
            "rhs": rep.rhs,
            "ratio_lhs_mid": rep.ratio_lhs_mid,
            "ratio_mid_rhs": rep.ratio_mid_rhs,
        }
    ]


def _rows_sublinearity(config: ExperimentConfig, seed: int):
    field = make_field(config, seed)
    ex = config.extra
    component = ex.get("component", "phi")
    corr = build_corrector_set(field, config.tol)
    if component == "phi":
        psi = np.moveaxis(corr.phi, 0, -1)
        exponent = 2.0 * config.p / (config.p - 1.0)
    elif component == "sigma":
        sigma = build_sigma_gauge(corr)
        psi = np.stack(list(sigma.components.values()), axis=-1)
        exponent = 2.0 * config.q / (config.q - 1.0)
    else:
        raise ConfigError("sublinearity component must be 'phi' or 'sigma'")
    radii = ex.get("radii")
    if radii is None:
        radii = []
        r = 16
        while r <= config.n // 4:
            radii.append(r)
            r *= 2
    rows = sublinearity_scan(psi, field.grid, exponent, radii)
    return [
        {
            "experiment": config.experiment,
            "seed": seed,
            "n": config.n,
            "model": config.model,
            "component": component,
            "R": R,
            "M_centered": m_cent,
            "M_uncentered": m_unc,
        }
        for (R, m_cent, m_unc) in rows
    ]


def _refine_field(field: CoefficientField, factor: int) -> CoefficientField:
    """Represent the same piecewise-constant microstructure on a finer grid."""
    a = field.a
    for axis in range(field.grid.d):
        a = np.repeat(a, factor, axis=axis)
    grid = TorusGrid(field.grid.d, field.grid.n * factor)
    return CoefficientField(
        grid, np.ascontiguousarray(a), field.model_tag + "-refined", field.seed, dict(field.params)
    )


def _residual_at_resolution(base: CoefficientField, n: int, tol: float, seed: int):
    factor = n // base.grid.n
    if factor * base.grid.n != n:
        raise ConfigError("refinement sizes must be multiples of the base n")
    field = base if factor == 1 else _refine_field(base, factor)
    grid = field.grid
    corr = build_corrector_set(field, tol)
    sigma = build_sigma_gauge(corr)
    hm = homogenize(field, tol)
    xi = np.array([1.0, 0.5, 0.25][: grid.d])
    half = int(0.35 * grid.n)
    box = Box.centered(grid, half)
    from .boxes import affine_values

    u = affine_values(xi, box, grid) + corr.corrector_for(xi)[box.slices()]
    v = affine_values(xi, box, grid)
    eta = make_cutoff(box, grid, grid.center(), 0.30 * grid.n, 0.06 * grid.n)
    w, _ = homogenization_error(u, v, eta, corr, field)
    stats = error_equation_residual(w, v, eta, field, hm, corr, sigma, 16, seed)
    stats_ablated = error_equation_residual(w, v, eta, field, hm, corr, None, 16, seed)
    return stats["max"], stats_ablated["max"]


def _rows_error_residual(config: ExperimentConfig, seed: int):
    ex = config.extra
    n_list = [int(v) for v in ex.get("n_list", (64, 128, 256))]
    base = make_field(config, seed)
    rows = []
    results = []
    for n in sorted(n_list):
        res, res_ablated = _residual_at_resolution(base, n, min(config.tol, 1e-10), seed)
        results.append((n, res, res_ablated))
    hs = np.array([1.0 / n for n, _, _ in results])
    order = float(np.polyfit(np.log(hs), np.log([r for _, r, _ in results]), 1)[0])
    order_ablated = float(
        np.polyfit(np.log(hs), np.log([r for _, _, r in results]), 1)[0]
    )
    for n, res, res_ablated in results:
        rows.append(
            {
                "experiment": config.experiment,
                "seed": seed,
                "n": n,
                "model": config.model,
                "residual_max": res,
                "residual_max_ablated": res_ablated,
                "order": order,
                "order_ablated": order_ablated,
            }
        )
    return rows


def _rows_cz_scan(config: ExperimentConfig, seed: int):
    field = make_field(config, seed)
    table = cz_ratio_scan([field], float(config.extra.get("r_exponent", 1.5)), config.tol)
    row = table.rows[0]
    return [
        {
            "experiment": config.experiment,
            "seed": seed,
            "n": config.n,
            "model": config.model,
            "r_exponent": table.r_exponent,
            "grad_sigma_norm": row.grad_sigma_norm,
            "flux_fluct_norm": row.flux_fluct_norm,
            "ratio": row.ratio,
        }
    ]


_DRIVERS = {
    "homogenize": _rows_homogenize,
    "sigma-check": _rows_sigma_check,
    "excess-decay": _rows_excess_decay,
    "caccioppoli": _rows_caccioppoli,
    "sublinearity": _rows_sublinearity,
    "error-residual": _rows_error_residual,
    "cz-scan": _rows_cz_scan,
}


def seed_rows(config: ExperimentConfig, seed: int):
    """All report rows produced by one seed of the configured experiment."""
    return _DRIVERS[config.experiment](config, seed)


def _seed_job(payload):
    config_dict, seed = payload
    config = ExperimentConfig.from_dict(config_dict)
    try:
        return seed, seed_rows(config, seed), None
    except Exception as err:  # per-seed failures are recorded, the run continues
        return seed, [], f"{type(err).__name__}: {err}\n{traceback.format_exc(limit=3)}"


# ------------------------------------------------------------------ summaries


def _median(values) -> float:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.median(vals)) if vals else float("nan")


def _grouped(rows, key):
    groups: dict = {}
    for row in rows:
        groups.setdefault(row[key], []).append(row)
    return groups


def summarize(rows) -> dict:
    """Medians, fitted constants and pass/fail checks for one experiment's rows.

    Rejects mixed experiment types; empty input yields an explicit no-data
    summary (non-passing).
    """
    rows = [r for r in rows if not r.get("error")]
    if not rows:
        return {"status": "no-data", "num_rows": 0, "checks": {}}
    kinds = {r["experiment"] for r in rows}
    if len(kinds) > 1:
        raise ValueError(f"mixed experiment types in rows: {sorted(kinds)}")
    kind = kinds.pop()
    summary = {"status": "ok", "experiment": kind, "num_rows": len(rows), "checks": {}}
    checks = summary["checks"]

    if kind == "homogenize":
        summary["median_K"] = _median(r["K"] for r in rows)
        worst_low = min(r["lower_slack"] for r in rows)
        worst_up = min(r["upper_slack"] for r in rows)
        summary["worst_lower_slack"] = worst_low
        summary["worst_upper_slack"] = worst_up
        checks["ellipticity_certificates"] = worst_low >= -1e-9 and worst_up >= -1e-9
    elif kind == "sigma-check":
        worst = max(r["gauge_residual"] for r in rows)
        summary["max_gauge_residual"] = worst
        checks["gauge_identity"] = worst <= 1e-10
    elif kind == "excess-decay":
        monotone = True
        for seed, group in _grouped(rows, "seed").items():
            group = sorted(group, key=lambda r: r["rho"])
            excs = [g["exc"] for g in group]
            if max(excs) > 1e-12 and any(b <= a for a, b in zip(excs, excs[1:])):
                monotone = False
        alphas = {g[0]["seed"]: g[0]["fitted_alpha"] for g in
                  (sorted(v, key=lambda r: r["rho"]) for v in _grouped(rows, "seed").values())}
        summary["median_fitted_alpha"] = _median(alphas.values())
        summary["gates_ok"] = all(r["Lambda_check"] and r["corrsmall_check"] for r in rows)
        checks["excess_monotone_in_radius"] = monotone
        if "alpha_min" in rows[0]:
            checks["median_alpha"] = summary["median_fitted_alpha"] >= rows[0]["alpha_min"]
    elif kind == "caccioppoli":
        c1 = max(r["ratio_lhs_mid"] for r in rows)
        c2 = max(r["ratio_mid_rhs"] for r in rows)
        summary["fitted_C1"] = c1
        summary["fitted_C2"] = c2
        checks["ratios_finite"] = all(
            math.isfinite(r["ratio_lhs_mid"]) and math.isfinite(r["ratio_mid_rhs"])
            and r["lhs"] >= 0 and r["mid"] >= 0 and r["rhs"] >= 0
            for r in rows
        )
    elif kind == "sublinearity":
        by_radius: dict = {}
        for r in rows:
            by_radius.setdefault(r["R"], []).append(r["M_centered"])
        radii = sorted(by_radius)
        medians = [_median(by_radius[R]) for R in radii]
        summary["radii"] = radii
        summary["median_M_centered"] = medians
        checks["median_M_decreasing"] = all(b < a for a, b in zip(medians, medians[1:]))
    elif kind == "error-residual":
        order = _median(r["order"] for r in rows)
        order_ablated = _median(r["order_ablated"] for r in rows)
        summary["median_order"] = order
        summary["median_order_ablated"] = order_ablated
        checks["residual_order"] = order >= 0.9
        checks["ablation_breaks_convergence"] = order_ablated < 0.5
    elif kind == "cz-scan":
        ratios = [r["ratio"] for r in rows]
        finite = [v for v in ratios if not math.isnan(v)]
        summary["max_ratio"] = max(finite) if finite else float("nan")
        summary["undefined_rows"] = len(ratios) - len(finite)
        checks["ratios_finite"] = all(math.isfinite(v) for v in finite)
    return summary


# ------------------------------------------------------------------- running


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_report_csv(path, rows, columns):
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(_format_cell(row.get(col, "")) for col in columns) + "\n")
    atomic_write_text(path, buf.getvalue())


def run(config: ExperimentConfig, save_artifacts: bool = True) -> tuple[int, dict]:
    """Execute the configured experiment over its seed ensemble.

    Writes report.csv, summary.json and manifest.json (plus binary field /
    corrector artifacts for the first seed) into `config.out`.  Returns
    (exit_status, summary); the status is 0 only when every check passed
    and no seed failed.
    """
    config.validate()
    seeds = config.seeds()
    payloads = [(config.to_dict(), seed) for seed in seeds]
    if config.workers > 1 and len(seeds) > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(config.workers) as pool:
            results = pool.map(_seed_job, payloads)
    else:
        results = [_seed_job(p) for p in payloads]
    results.sort(key=lambda item: item[0])  # output ordering is by seed index

    rows, failures = [], {}
    for seed, seed_rows_, error in results:
        if error:
            failures[seed] = error
            rows.append({"experiment": config.experiment, "seed": seed, "error": error.splitlines()[0]})
        else:
            rows.extend(seed_rows_)

    summary = summarize(rows)
    summary["config_hash"] = config.hash()
    summary["code_version"] = __version__
    summary["failed_seeds"] = sorted(failures)

    if config.out:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        ok_rows = [r for r in rows if not r.get("error")]
        columns = list(ok_rows[0].keys()) if ok_rows else ["experiment", "seed"]
        columns += ["config_hash", "code_version", "error"]
        for row in rows:
            row.setdefault("config_hash", config.hash())
            row.setdefault("code_version", __version__)
            row.setdefault("error", "")
        _write_report_csv(out / "report.csv", rows, columns)
        atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=float))
        manifest = {
            "config": config.to_dict(),
            "config_hash": config.hash(),
            "code_version": __version__,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "failures": {str(k): v for k, v in failures.items()},
        }
        atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        if save_artifacts and not failures and config.experiment in ("homogenize", "sigma-check"):
            field = make_field(config, seeds[0])
            save_coefficient_field(out / "artifacts" / f"field-seed{seeds[0]}.fld", field)
            corr = build_corrector_set(field, config.tol)
            save_corrector_set(out / "artifacts" / f"correctors-seed{seeds[0]}", corr)

    all_ok = (
        summary.get("status") == "ok"
        and not failures
        and all(summary["checks"].values())
    )
    return (0 if all_ok else 1), summary
