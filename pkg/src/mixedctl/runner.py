"""Experiment dispatch, output directories and run manifests.

Each experiment writes CSV/JSON artifacts into its own directory and finishes
with ``manifest.json``. The manifest records the resolved config, the package
version, wall time, every hard check and a sha256 inventory of the files.
Numeric outputs depend only on (config, seed); wall time lives in the manifest
alone so CSVs stay byte-identical across reruns.
"""

from __future__ import annotations

import logging
import os
import time
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, sweep_members, validate
from .control import (AdmissibleSet, ControlPair, ControlProblem, CostSpec, SolverOptions,
                      finite_difference_check, projection_formula_residual, solve_control)
from .elliptic import (EllipticData, smooth_test_functions, solve_lifted, solve_very_weak, solve_weak,
                       transposition_residual)
from .expressions import Expression, space_time
from .geometry import Tag, TimeGrid, build_geometry
from .io import read_values, sha256, write_csv, write_grid_function, write_json_atomic, write_trajectory
from .operators import assemble_mixed, export_coo, operator_diagnostics
from .parabolic import ParabolicData, SchemeConfig, ThetaStepper, duality_residual, run_diagnostics
from .spectral import low_spectrum, semigroup_audit

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MIXEDCTL_OUT"
EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_ERROR = 0, 1, 2, 3


@dataclass
class Check:
    name: str
    passed: bool
    value: object = None
    threshold: object = None

    def as_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "value": self.value, "threshold": self.threshold}


@dataclass
class RunManifest:
    kind: str
    out_dir: Path
    config: dict
    seed: int
    checks: list = field(default_factory=list)
    files: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    error: str | None = None
    wall_time: float = 0.0
    children: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.error is None and all(c.passed for c in self.checks) \
            and all(child["exit_code"] == EXIT_OK for child in self.children)

    @property
    def exit_code(self) -> int:
        if self.error is not None:
            return EXIT_ERROR
        return EXIT_OK if self.passed else EXIT_CHECKS

    def as_dict(self) -> dict:
        return {
            "artifact_version": __version__,
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config,
            "wall_time_seconds": self.wall_time,
            "checks": [c.as_dict() for c in self.checks],
            "files": self.files,
            "warnings": self.warnings,
            "summary": self.summary,
            "error": self.error,
            "children": self.children,
            "passed": self.passed,
            "exit_code": self.exit_code,
        }


def default_out_dir(cfg: ExperimentConfig) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / (cfg.name or cfg.kind)


def sub_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for sub-task ``key`` derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


# ---------------------------------------------------------------- data helpers

def _geometry(cfg):
    g = cfg.geometry
    return build_geometry(float(g["x_left"]), float(g["x_right"]), g["n_interior"], float(g["collar_width"]))


def _time_grid(cfg):
    return TimeGrid(float(cfg.time["T"]), cfg.time["n_steps"])


def _stationary(cfg, section, key, x, t=0.0):
    src = cfg.expression(section, key)
    if isinstance(src, Expression):
        return src(x, t)
    return read_values(src, x.size)


def _space_time(cfg, section, key, x, times):
    """Values shaped ``(len(times), len(x))``; CSV input is t-major long format."""
    src = cfg.expression(section, key)
    if isinstance(src, Expression):
        return space_time(src, x, times)
    return read_values(src, times.size * x.size).reshape(times.size, x.size)


def _bounds(pair):
    lo, hi = pair
    return (-np.inf if lo is None else float(lo)), (np.inf if hi is None else float(hi))


# ---------------------------------------------------------------- experiments

def _run_operators(cfg, out, man):
    geom = _geometry(cfg)
    stiff = assemble_mixed(geom, cfg.s)
    diag = operator_diagnostics(stiff)
    man.summary.update(diag)
    write_json_atomic(out / "diagnostics.json", diag)
    write_csv(out / "tail.csv", ["node_index", "x", "tail"],
              ([int(i), geom.x[i], v] for i, v in zip(geom.interior_index, stiff.tail)))
    if cfg.output["export_matrices"]:
        for name in ("A_II", "A_Ib", "A_Ic"):
            export_coo(getattr(stiff, name), out / f"{name}.coo")
    man.checks += [
        Check("symmetry", diag["symmetry_defect"] == 0.0, diag["symmetry_defect"], 0.0),
        Check("m_matrix_sign_pattern", diag["m_matrix_violations"] == 0, diag["m_matrix_violations"], 0),
        Check("row_sum_tail_identity", diag["row_sum_residual_max"] <= 1e-10, diag["row_sum_residual_max"], 1e-10),
        Check("positive_definite", diag["lambda_min"] > 0, diag["lambda_min"], 0.0),
    ]


def _run_elliptic(cfg, out, man):
    geom = _geometry(cfg)
    stiff = assemble_mixed(geom, cfg.s)
    data = EllipticData(_stationary(cfg, "data", "f", geom.nodes(Tag.INTERIOR)),
                        _stationary(cfg, "data", "g1", geom.nodes(Tag.BOUNDARY)),
                        _stationary(cfg, "data", "g2", geom.nodes(Tag.COLLAR)))
    if data.is_homogeneous:
        mode, w = "weak", solve_weak(data, stiff)
    elif data.compatible(geom):
        mode, w = "lifted", solve_lifted(data, stiff)
    else:
        mode = "very_weak"
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            w = solve_very_weak(data, stiff)
        man.warnings += [str(c.message) for c in caught]
    write_grid_function(w, out / "solution.csv")
    interior = w.values[geom.interior_index]
    tests = smooth_test_functions(geom, 8, sub_rng(cfg.seed, 0))
    residual = transposition_residual(w, data, stiff, tests=tests)
    man.summary.update({"mode": mode, "transposition_residual": residual,
                        "min": float(interior.min()), "max": float(interior.max())})
    rhs = data.f - stiff.A_Ib @ data.g1 - stiff.A_Ic @ data.g2
    lin_res = float(np.linalg.norm(stiff.A_II @ interior - rhs) / max(np.linalg.norm(rhs), 1e-300))
    man.checks.append(Check("linear_residual", lin_res <= 1e-10, lin_res, 1e-10))
    exterior = np.concatenate([data.g1, data.g2])
    if np.all(data.f >= 0) and np.all(exterior >= 0):
        man.checks.append(Check("max_principle_nonnegative", interior.min() >= -1e-12, float(interior.min()), 0.0))
    if not np.any(data.f):
        bound = float(max(exterior.max(), 0.0))
        man.checks.append(Check("max_principle_upper", interior.max() <= bound + 1e-12, float(interior.max()), bound))
    write_json_atomic(out / "diagnostics.json", man.summary)


def _parabolic_data(cfg, geom, tg):
    times = tg.times
    return ParabolicData(
        tg,
        _space_time(cfg, "data", "g1", geom.nodes(Tag.BOUNDARY), times),
        _space_time(cfg, "data", "g2", geom.nodes(Tag.COLLAR), times),
        f=_space_time(cfg, "data", "f", geom.nodes(Tag.INTERIOR), times),
        psi0=_stationary(cfg, "data", "psi0", geom.nodes(Tag.INTERIOR)),
    )


def _run_parabolic(cfg, out, man):
    geom, tg = _geometry(cfg), _time_grid(cfg)
    stiff = assemble_mixed(geom, cfg.s)
    scheme = SchemeConfig(theta=float(cfg.scheme["theta"]))
    data = _parabolic_data(cfg, geom, tg)
    stepper = ThetaStepper(stiff, scheme, tg)
    psi = stepper.forward(data)
    traj = stepper.trajectory(psi, data.u1, data.u2)
    write_trajectory(traj, out / ("trajectory.csv" if cfg.output["trajectory_layout"] == "long" else "frames"),
                     cfg.output["trajectory_layout"])
    hist = run_diagnostics(traj)
    write_csv(out / "history.csv", ["t", "mass", "energy", "min", "sup"],
              zip(hist["time"], hist["mass"], hist["energy"], hist["min"], hist["sup"]))
    man.summary.update({"final_mass": float(hist["mass"][-1]), "final_energy": float(hist["energy"][-1]),
                        "min_value": float(hist["min"].min()), "max_sup": float(hist["sup"].max())})
    man.checks.append(Check("finite_solution", bool(np.all(np.isfinite(psi))), None, None))
    nonneg = all(np.all(a >= 0) for a in (data.u1, data.u2, data.f, data.psi0))
    if scheme.theta == 1.0 and nonneg:
        man.checks.append(Check("positivity", hist["min"].min() >= -1e-12, float(hist["min"].min()), 0.0))
    if cfg.data["eta"] is not None:
        eta = _space_time(cfg, "data", "eta", geom.nodes(Tag.INTERIOR), tg.times)
        zero_start = ParabolicData(tg, data.u1, data.u2, f=data.f)
        man.summary["duality_residual"] = duality_residual(zero_start, eta, stiff, scheme)
    write_json_atomic(out / "diagnostics.json", man.summary)


def _run_spectrum(cfg, out, man):
    geom, tg = _geometry(cfg), _time_grid(cfg)
    stiff = assemble_mixed(geom, cfg.s)
    k = min(cfg.spectrum["k"], stiff.n_unknowns)
    rep = low_spectrum(stiff, k=k)
    write_csv(out / "spectrum.csv", ["j", "lambda", "residual"], rep.table())
    man.summary.update({"lambda1": float(rep.eigenvalues[0]), "lambda1_local": rep.lambda1_local,
                        "max_residual": float(rep.residuals.max())})
    man.checks += [
        Check("lambda1_positive", rep.eigenvalues[0] > 0, float(rep.eigenvalues[0]), 0.0),
        Check("lambda1_above_local", rep.eigenvalues[0] > rep.lambda1_local,
              float(rep.eigenvalues[0]), rep.lambda1_local),
        Check("eigen_residuals", rep.residuals.max() <= 1e-8, float(rep.residuals.max()), 1e-8),
    ]
    scheme = SchemeConfig(theta=float(cfg.scheme["theta"]))
    audit_seed = int(np.random.SeedSequence(cfg.seed, spawn_key=(1,)).generate_state(1)[0])  # audit spawns its own trials
    audit = semigroup_audit(stiff, scheme, tg, cfg.spectrum["trials"], seed=audit_seed)
    man.summary["semigroup_audit"] = audit.as_dict()
    write_json_atomic(out / "audit.json", audit.as_dict())
    if scheme.theta == 1.0 and cfg.spectrum["trials"] > 0:
        for name, res in audit.results.items():
            man.checks.append(Check(f"audit_{name}", res.passed, res.worst_margin, 1e-12))


def _control_setup(cfg, geom, tg, variant, beta):
    times, x = tg.times, geom.nodes(Tag.INTERIOR)
    if variant == "j1":
        target = _space_time(cfg, "cost", "target", x, times)
    else:
        target = _stationary(cfg, "cost", "target", x, tg.T)
    return CostSpec(variant, beta, target)


def _run_control(cfg, out, man):
    geom, tg = _geometry(cfg), _time_grid(cfg)
    stiff = assemble_mixed(geom, cfg.s)
    scheme = SchemeConfig(theta=float(cfg.scheme["theta"]))
    spec = _control_setup(cfg, geom, tg, cfg.cost["variant"], float(cfg.cost["beta"]))
    a1, b1 = _bounds(cfg.bounds["u1"])
    a2, b2 = _bounds(cfg.bounds["u2"])
    adm = AdmissibleSet(a1, b1, a2, b2)
    if cfg.solver["init"] == "random":
        init = ControlPair.random(geom, tg, sub_rng(cfg.seed, 0))
    else:
        init = ControlPair.zeros(geom, tg)
    opts = SolverOptions(tol=float(cfg.solver["tol"]), max_iters=cfg.solver["max_iters"])
    res = solve_control(spec, adm, init, stiff, scheme, opts)
    h = geom.h
    proj = projection_formula_residual(res.controls, res.flux, adm, spec.beta, h)

    write_csv(out / "convergence.csv", ["iter", "cost", "grad_norm", "step"],
              zip(range(len(res.cost_history)), res.cost_history, res.grad_norm_history, res.step_history))
    times = tg.times
    write_csv(out / "controls_u1.csv", ["t", "left", "right"],
              ([t, u[0], u[1]] for t, u in zip(times, res.controls.u1)))
    xc = geom.nodes(Tag.COLLAR)
    write_csv(out / "controls_u2.csv", ["t", "x", "value"],
              ([t, xi, v] for t, row in zip(times, res.controls.u2) for xi, v in zip(xc, row)))
    layout = cfg.output["trajectory_layout"]
    suffix = ".csv" if layout == "long" else ""
    write_trajectory(res.state, out / f"state{suffix}", layout)
    write_trajectory(res.adjoint, out / f"adjoint{suffix}", layout)

    costs = res.cost_history
    monotone = bool(np.all(np.diff(costs) <= 1e-12 * max(1.0, abs(costs[0]))))
    man.summary.update({
        "variant": spec.variant.value, "beta": spec.beta, "iterations": res.iterations,
        "converged": res.converged, "final_cost": float(costs[-1]), "vi_residual": res.vi_residual,
        "projection_residual": proj, "control_norm": res.controls.norm(h), "clamped_fraction": res.clamped,
    })
    write_json_atomic(out / "summary.json", man.summary)
    man.checks += [
        Check("converged", res.converged, res.iterations, cfg.solver["max_iters"]),
        Check("vi_residual", res.vi_residual <= opts.tol, res.vi_residual, opts.tol),
        Check("projection_formula", proj <= 1e-6, proj, 1e-6),
        Check("cost_monotone", monotone, float(costs[-1]), float(costs[0])),
    ]


def _run_gradcheck(cfg, out, man):
    geom, tg = _geometry(cfg), _time_grid(cfg)
    scheme = SchemeConfig(theta=float(cfg.scheme["theta"]))
    gc = cfg.gradcheck
    n = geom.size(Tag.INTERIOR)
    rows, worst = [], 0.0
    for vi, variant in enumerate(gc["variants"]):
        for si, s in enumerate(gc["s_values"]):
            stiff = assemble_mixed(geom, s)
            for probe in range(gc["probes"]):
                rng = sub_rng(cfg.seed, vi, si, probe)
                shape = (tg.n_steps + 1, n) if variant == "j1" else (n,)
                spec = CostSpec(variant, float(cfg.cost["beta"]), rng.standard_normal(shape))
                prob = ControlProblem(spec, stiff, tg, scheme)
                u = ControlPair.random(geom, tg, rng)
                d = ControlPair.random(geom, tg, rng)
                fd, ad, rel = finite_difference_check(prob, u, d, eps=float(gc["eps"]))
                rows.append([variant, s, probe, fd, ad, rel])
                worst = max(worst, rel)
    write_csv(out / "gradcheck.csv", ["variant", "s", "probe", "finite_difference", "adjoint", "rel_error"], rows)
    man.summary.update({"max_relative_error": worst, "probes": len(rows)})
    man.checks.append(Check("gradient_agreement", worst <= gc["threshold"], worst, gc["threshold"]))


def _child(args):
    raw, base_dir, out = args
    cfg = validate(raw, base_dir)
    return run(cfg, out).as_dict()


def _run_sweep(cfg, out, man, workers=None):
    members = sweep_members(cfg)
    jobs = []
    for i, raw in enumerate(members):
        # Counter-based child seed: identical for a given (master seed, position).
        raw["seed"] = int(np.random.SeedSequence(cfg.seed, spawn_key=(i,)).generate_state(1)[0])
        jobs.append((raw, cfg.base_dir, str(out / raw["name"])))
    cap = max(1, min(workers or cfg.sweep["workers"], len(jobs)))
    if cap == 1:
        results = [_child(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=cap) as pool:
            results = list(pool.map(_child, jobs))
    for raw, res in zip(members, results):
        man.children.append({"name": raw["name"], "kind": res["kind"], "exit_code": res["exit_code"],
                             "seed": res["seed"], "dir": raw["name"]})
    man.summary["members"] = len(members)


_DISPATCH = {
    "operators": _run_operators,
    "elliptic": _run_elliptic,
    "parabolic": _run_parabolic,
    "spectrum": _run_spectrum,
    "control": _run_control,
    "gradcheck": _run_gradcheck,
}


def run(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> RunManifest:
    """Execute one experiment (or a sweep) and write its artifacts plus ``manifest.json``.

    Module errors do not propagate: they are recorded verbatim in the manifest
    and reflected in the exit code.
    """
    out = Path(out_dir or cfg.out or default_out_dir(cfg))
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(cfg.kind, out, cfg.to_dict(), cfg.seed, warnings=list(cfg.warnings))
    start = time.perf_counter()
    try:
        if cfg.kind == "sweep":
            _run_sweep(cfg, out, man, workers)
        else:
            _DISPATCH[cfg.kind](cfg, out, man)
    except Exception as exc:  # recorded, not raised: the manifest is the report
        man.error = f"{type(exc).__name__}: {exc}"
        man.summary["traceback"] = traceback.format_exc()
        log.error("%s run failed: %s", cfg.kind, man.error)
    man.wall_time = time.perf_counter() - start
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"):
        man.files.append({"path": path.relative_to(out).as_posix(), "sha256": sha256(path),
                          "bytes": path.stat().st_size})
    write_json_atomic(out / "manifest.json", man.as_dict())
    return man


__all__ = ["Check", "ConfigError", "RunManifest", "default_out_dir", "run", "sub_rng"]
