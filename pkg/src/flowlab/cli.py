"""flowlab command line: wires JSON manifests to experiment drivers.

    flowlab <subcommand> --manifest <path> [--seed-override N] [--jobs W] [--out DIR]

Subcommands: check-conditions, lyapunov, clt-npoint, clt-measure, mixing,
stopping, energy, equidistribution, occupation, dissipative, and suite
(run every experiment block in the manifest).

Outputs are a JSON verdict report plus plot-ready CSV curves per
subcommand; every file header carries the manifest hash, and everything
except the generated_at stamp is a pure function of the manifest.  Exit
codes: 0 all verdicts consistent/underpowered, 1 any inconsistent,
2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import analysis, experiments, measures
from .analysis import CONSISTENT, INCONSISTENT, UNDERPOWERED
from .dissipative import make_dissipative_set
from .fields import VectorFieldSet, make_field_set
from .flow import FunctionalSpec, center_functional, displacement_functional
from .measures import ParticleMeasure
from .noise import make_path
from .trig import TrigPoly

MANIFEST_VERSION = 1
DEGENERATE = "degenerate: point mass"
OK_VERDICTS = {CONSISTENT, UNDERPOWERED, DEGENERATE}

SUBCOMMANDS = ["check-conditions", "lyapunov", "clt-npoint", "clt-measure",
               "mixing", "stopping", "energy", "equidistribution",
               "occupation", "dissipative"]


class ManifestError(ValueError):
    pass


# -- strict schema validation ----------------------------------------------------

def _check_keys(obj: dict, allowed: set, required: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ManifestError(f"unknown keys {sorted(unknown)} in {where}")
    missing = required - set(obj)
    if missing:
        raise ManifestError(f"missing keys {sorted(missing)} in {where}")


_EXPERIMENT_KEYS = {
    "check-conditions": {"n_configs", "depth", "projective_depth", "n_point"},
    "lyapunov": {"T", "dt", "segments", "qr_every", "x0", "carverhill_T",
                 "sample_every"},
    "clt-npoint": {"t_list", "reps", "dt", "z0", "functional", "skew_tol",
                   "kurt_tol"},
    "clt-measure": {"t", "reps", "dt", "measure", "n_pairs"},
    "mixing": {"T", "reps", "dt", "separations", "observables", "sample_every",
               "r2_gate"},
    "stopping": {"r", "delta", "horizon", "n_samples", "dt",
                 "escape_separations", "escape_reps", "escape_horizon",
                 "functional"},
    "energy": {"p", "t_grid", "reps", "dt", "measure"},
    "equidistribution": {"t_grid", "reps", "dt", "observable", "measures"},
    "occupation": {"r", "horizons", "reps", "threshold", "dt", "z0"},
    "dissipative": {"epsilons", "depths", "t_pullback", "pullback_reps",
                    "pullback_measure_size", "observable", "clt", "dt",
                    "perturbation_seed"},
}


def validate_manifest(m: dict) -> None:
    _check_keys(m, {"manifest_version", "name", "field_set", "noise", "jobs",
                    "out_dir", "experiments"},
                {"manifest_version", "name", "field_set", "noise",
                 "experiments"}, "manifest")
    if m["manifest_version"] != MANIFEST_VERSION:
        raise ManifestError(f"manifest_version must be {MANIFEST_VERSION}")
    fs = m["field_set"]
    _check_keys(fs, {"random", "file", "inline", "zero"}, set(), "field_set")
    if len(fs) != 1:
        raise ManifestError("field_set needs exactly one of random/file/inline/zero")
    if "random" in fs:
        _check_keys(fs["random"],
                    {"dim", "d", "bandwidth", "seed", "divergence_free",
                     "amplitude", "decay", "include_constant"},
                    {"dim", "d", "seed"}, "field_set.random")
    if "zero" in fs:
        _check_keys(fs["zero"], {"dim", "d"}, {"dim", "d"}, "field_set.zero")
    _check_keys(m["noise"], {"seed", "dt"}, {"seed", "dt"}, "noise")
    for name, params in m["experiments"].items():
        if name not in _EXPERIMENT_KEYS:
            raise ManifestError(f"unknown experiment {name!r}")
        variants = params if isinstance(params, list) else [params]
        for v in variants:
            _check_keys(v, _EXPERIMENT_KEYS[name], set(), f"experiments.{name}")


def load_manifest(path: str) -> dict:
    try:
        with open(path) as fh:
            m = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    validate_manifest(m)
    return m


def manifest_hash(m: dict) -> str:
    return hashlib.sha256(
        json.dumps(m, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# -- manifest -> objects -----------------------------------------------------------

def build_field_set(fs: dict) -> VectorFieldSet:
    if "random" in fs:
        kw = dict(fs["random"])
        dim, d = kw.pop("dim"), kw.pop("d")
        return make_field_set(dim, d, **kw)
    if "zero" in fs:
        z = fs["zero"]
        return make_field_set(z["dim"], z["d"],
                              coefficients=[[] for _ in range(z["d"] + 1)])
    if "file" in fs:
        return VectorFieldSet.load(fs["file"])
    return VectorFieldSet.from_dict(fs["inline"])


def build_trigpoly(spec: dict, dim: int) -> TrigPoly:
    _check_keys(spec, {"modes", "cos", "sin"}, {"modes", "cos"}, "trig polynomial")
    modes = np.asarray(spec["modes"], dtype=np.int64)
    if modes.ndim != 2 or modes.shape[1] != dim:
        raise ManifestError(f"modes must be (M, {dim})")
    cos = np.asarray(spec["cos"], dtype=np.float64)
    sin = np.asarray(spec.get("sin", np.zeros_like(cos)), dtype=np.float64)
    return TrigPoly(modes, cos.reshape(len(modes), -1), sin.reshape(len(modes), -1))


def build_measure(spec: dict, dim: int) -> ParticleMeasure:
    _check_keys(spec, {"kind", "per_axis", "center", "radius", "n", "seed"},
                {"kind"}, "measure")
    kind = spec["kind"]
    if kind == "grid":
        return measures.grid_measure(dim, spec.get("per_axis", 16))
    if kind == "ball":
        return measures.ball_measure(spec.get("center", [0.5] * dim),
                                     spec.get("radius", 0.2),
                                     spec.get("n", 1024), spec.get("seed", 0))
    if kind == "curve":
        return measures.curve_measure(dim, spec.get("n", 1024),
                                      center=spec.get("center"),
                                      radius=spec.get("radius", 0.25))
    raise ManifestError(f"unknown measure kind {kind!r}")


def build_functional(spec, F: VectorFieldSet, arity: int) -> FunctionalSpec:
    if spec == "displacement":
        fn = displacement_functional(F)
    else:
        _check_keys(spec, {"alphas", "drift", "center"}, {"alphas", "drift"},
                    "functional")
        dim = arity * F.dim
        alphas = tuple(build_trigpoly(a, dim) for a in spec["alphas"])
        if len(alphas) != F.d:
            raise ManifestError(f"functional needs {F.d} alpha coefficients")
        fn = FunctionalSpec(arity=arity, alphas=alphas,
                            drift=build_trigpoly(spec["drift"], dim))
    if spec == "displacement" or spec.get("center", True):
        fn = center_functional(F, fn)
    return fn


# -- report output ------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if dataclasses.is_dataclass(x) and not isinstance(x, type):
        return _jsonable(dataclasses.asdict(x))
    if isinstance(x, float) and not np.isfinite(x):
        return repr(x)
    return x


class Reporter:
    def __init__(self, out_dir: str, mhash: str, manifest_name: str):
        self.out_dir = out_dir
        self.mhash = mhash
        self.name = manifest_name
        self.verdicts: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def write_report(self, check: str, title: str, verdict: str,
                     details: dict, seed, dt) -> None:
        self.verdicts.append(verdict)
        payload = {
            "check": check,
            "title": title,
            "verdict": verdict,
            "details": _jsonable(details),
            "seed": seed,
            "dt": dt,
            "manifest_name": self.name,
            "manifest_hash": self.mhash,
            "generated_at": datetime.now(timezone.utc).isoformat(),
        }
        path = os.path.join(self.out_dir, f"{check}-report.json")
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"[{verdict:>12}] {check}: {title}")

    def write_curve(self, check: str, tag: str, columns: dict) -> None:
        path = os.path.join(self.out_dir, f"{check}-curve-{tag}.csv")
        keys = list(columns)
        rows = np.column_stack([np.asarray(columns[k], dtype=np.float64)
                                for k in keys])
        with open(path, "w") as fh:
            fh.write(f"# manifest_hash: {self.mhash}\n")
            fh.write(f"# generated_at: "
                     f"{datetime.now(timezone.utc).isoformat()}\n")
            fh.write(",".join(keys) + "\n")
            for row in rows:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


# -- experiment runners ----------------------------------------------------------------

def run_check_conditions(F, params, noise, jobs, rep: Reporter,
        check_name: str = "check-conditions"):
    rpt = experiments.check_conditions(
        F, seed=noise["seed"], n_configs=params.get("n_configs", 20),
        depth=params.get("depth", 3),
        n_point=params.get("n_point"),
        projective_depth=params.get("projective_depth", 2))
    all_pass = rpt.all_pass()
    details = {
        "divergence_max": rpt.divergence_max,
        "one_point_pass": sum(r.passed for r in rpt.rank_one_point),
        "two_point_pass": sum(r.passed for r in rpt.rank_two_point),
        "n_point_pass": sum(r.passed for r in rpt.rank_n_point),
        "projective_pass": sum(r.passed for r in rpt.rank_projective),
        "n_configs": rpt.n_configs,
        "depth": rpt.depth,
        "notes": [str(r) for r in rpt.rank_one_point + rpt.rank_two_point
                  + rpt.rank_projective if not r.passed],
    }
    verdict = CONSISTENT if all_pass else UNDERPOWERED
    rep.write_report(check_name,
                     "measure preservation and bracket-span nondegeneracy "
                     "(driving fields, two-point motion, tangent bundle)",
                     verdict, details, noise["seed"], None)
    return verdict


def run_lyapunov(F, params, noise, jobs, rep: Reporter,
        check_name: str = "lyapunov"):
    dt = params.get("dt", noise["dt"])
    T = params.get("T", 1000.0)
    segments = params.get("segments", 20)
    x0 = np.asarray(params.get("x0", [0.3] * F.dim), dtype=np.float64)
    path = make_path(noise["seed"], 0, F.d, dt, (0, round(T / dt) + 1))
    spec = analysis.lyapunov_spectrum(F, path, x0, T, segments=segments,
                                      qr_every=params.get("qr_every", 10))
    zero_sum_ok = abs(spec.sum_estimate) <= 3 * spec.sum_se
    positive = spec.ci[0, 0] > 0
    sum_identity = (spec.log_det_rate is None
                    or abs(spec.sum_estimate - spec.log_det_rate) <= 1e-8)

    carv_T = params.get("carverhill_T", min(T, 400.0))
    path_c = make_path(noise["seed"] + 1, 0, F.d, dt,
                       (0, round(carv_T / dt) + 1))
    u0 = np.zeros(F.dim)
    u0[0] = 1.0
    carv = analysis.carverhill_check(F, path_c, x0, u0, carv_T,
                                     segments=segments,
                                     sample_every=params.get("sample_every", 10))
    checks = {
        "zero_sum_ok": bool(zero_sum_ok),
        "top_positive_95": bool(positive),
        "sum_identity_1e-8": bool(sum_identity),
        "carverhill_agrees": bool(carv.agree),
    }
    details = {
        "exponents": spec.exponents, "ci": spec.ci,
        "sum": spec.sum_estimate, "sum_se": spec.sum_se,
        "log_det_rate": spec.log_det_rate, "T": spec.T, "segments": segments,
        "carverhill": dataclasses.asdict(carv), **checks,
    }
    verdict = CONSISTENT if all(checks.values()) else INCONSISTENT
    rep.write_report(check_name,
                     "Lyapunov spectrum: zero sum, positive top exponent, "
                     "unit-tangent stationary-average cross-check",
                     verdict, details, noise["seed"], dt)
    return verdict


def _default_joint_functional(F, n_points: int) -> dict:
    """A scalar arity-n functional with one low mode per factor."""
    N = F.dim
    def emb(mode, where):
        m = [0] * (n_points * N)
        m[where * N: where * N + len(mode)] = mode
        return m
    modes = [emb([1] + [0] * (N - 1), j % n_points) for j in range(3)]
    if N >= 2:
        modes[1] = emb([0, 1] + [0] * (N - 2), 1 % n_points)
    return {"alphas": [{"modes": [modes[0]], "cos": [[1.0]], "sin": [[0.5]]}]
            + [{"modes": [modes[k % 3]], "cos": [[0.7]], "sin": [[-0.3]]}
               for k in range(1, F.d)],
            "drift": {"modes": [modes[2]], "cos": [[0.4]], "sin": [[0.8]]}}


def run_clt_npoint(F, params, noise, jobs, rep: Reporter,
        check_name: str = "clt-npoint"):
    dt = params.get("dt", noise["dt"])
    z0 = np.asarray(params.get("z0", [[0.2, 0.3], [0.6, 0.8]]), dtype=np.float64)
    n_points = z0.shape[0]
    fn_spec = params.get("functional", _default_joint_functional(F, n_points))
    spec = build_functional(fn_spec, F, n_points)
    t_list = params.get("t_list", [50.0, 100.0])
    res = experiments.npoint_clt_experiment(
        F, spec, z0, seed=noise["seed"], dt=dt, t_list=t_list,
        reps=params.get("reps", 10000), jobs=jobs,
        skew_tol=params.get("skew_tol", 0.1),
        kurt_tol=params.get("kurt_tol", 0.2))
    final = res.reports[-1]
    checks = {
        "ks_all_t": all(r.passed_ks for r in res.reports),
        "moments_final_t": final.passed_moments,
        "cross_independence": res.cross_independence_ok(),
    }
    details = {
        "t_list": t_list,
        "reports": [dataclasses.asdict(r) for r in res.reports],
        "drift_estimate": res.drift_estimate,
        "cross_cov": res.cross_cov, "cross_cov_se": res.cross_cov_se,
        **checks,
    }
    verdict = CONSISTENT if all(checks.values()) else INCONSISTENT
    rep.write_report(check_name,
                     f"normalized additive functionals of the {n_points}-point "
                     "motion approach a Gaussian law; distinct-point "
                     "displacement components decorrelate",
                     verdict, details, noise["seed"], dt)
    hist, edges = np.histogram(res.samples_final, bins=64, density=True)
    rep.write_curve(check_name, "final-hist",
                    {"bin_left": edges[:-1], "density": hist})
    return verdict


def run_clt_measure(F, params, noise, jobs, rep: Reporter,
        check_name: str = "clt-measure"):
    dt = params.get("dt", noise["dt"])
    nu = build_measure(params.get("measure", {"kind": "ball", "n": 10000}), F.dim)
    res = experiments.measure_clt_experiment(
        F, nu, seed=noise["seed"], dt=dt, t=params.get("t", 100.0),
        reps=params.get("reps", 10), jobs=jobs,
        n_pairs=params.get("n_pairs", 4096))
    if res.degenerate:
        rep.write_report(check_name,
                         "displacement law induced by the initial measure "
                         "(degenerate flow: all particles translate together)",
                         DEGENERATE,
                         {"drift_estimate": res.drift_estimate,
                          "warning": "zero displacement variance"},
                         noise["seed"], dt)
        return DEGENERATE
    checks = {
        "ks_all_realizations": res.all_ks_pass(),
        "variance_deterministic": res.variances_consistent(),
        "cross_particle_independence": res.cross_independence_ok(),
    }
    details = {
        "variances": res.variances, "variance_se": res.variance_se,
        "cross_cov_mean": res.cross_cov_mean, "cross_cov_se": res.cross_cov_se,
        "drift_estimate": res.drift_estimate,
        "reports": [[dataclasses.asdict(c) for c in r.per_coordinate]
                    for r in res.per_realization],
        **checks,
    }
    verdict = CONSISTENT if all(checks.values()) else INCONSISTENT
    rep.write_report(check_name,
                     "per-realization displacement measures are Gaussian "
                     "with a deterministic variance",
                     verdict, details, noise["seed"], dt)
    return verdict


def run_mixing(F, params, noise, jobs, rep: Reporter,
        check_name: str = "mixing"):
    dt = params.get("dt", noise["dt"])
    obs_specs = params.get("observables") or _default_mixing_observables(F.dim)
    observables = [build_trigpoly(o, 2 * F.dim) for o in obs_specs]
    for o in observables:
        if float(np.abs(o.mean()).max()) > 0:
            raise ManifestError("mixing observables must have zero mean")
    seps = params.get("separations", [0.05, 0.1, 0.2, 0.4])
    res = experiments.mixing_experiment(
        F, observables, seps, seed=noise["seed"], dt=dt,
        T=params.get("T", 10.0), reps=params.get("reps", 1500),
        sample_every=params.get("sample_every", 20), jobs=jobs,
        r2_gate=params.get("r2_gate", 0.9))
    n_obs = len(observables)
    checks = {
        "base_fits_consistent": res.base_all_consistent(),
        "separation_exponent_decreasing": res.p_decreases_with_separation(),
    }
    details = {
        "separations": seps,
        "base_fits": [None if f is None else dataclasses.asdict(f)
                      for f in res.base_fits],
        "base_verdicts": res.base_verdicts,
        "per_separation": [{"separation": c.separation, "verdict": c.verdict,
                            "rate": None if c.fit is None else c.fit.rate,
                            "r_squared": None if c.fit is None
                            else c.fit.r_squared}
                           for c in res.curves],
        "amplitudes": res.amplitudes, "ref_rates": res.ref_rates,
        "p_fits": res.p_fits, "p_local": res.p_local,
        "p_halves": res.p_halves, **checks,
    }
    if all(checks.values()):
        verdict = CONSISTENT
    elif any(v == UNDERPOWERED for v in res.base_verdicts):
        verdict = UNDERPOWERED
    else:
        verdict = INCONSISTENT
    rep.write_report(check_name,
                     "two-point correlations decay exponentially with a "
                     "separation-dependent amplitude",
                     verdict, details, noise["seed"], dt)
    for idx, c in enumerate(res.curves):
        rep.write_curve(check_name, f"obs{idx % n_obs}-sep{c.separation}",
                        {"t": c.times, "rho": c.values, "stderr": c.stderr})
    return verdict


def _default_mixing_observables(N: int):
    """Relative cosine modes cos 2 pi m.(x - y): the two-point-specific
    decorrelation channels, with O(1) starting values at small separation."""
    def rel(mode):
        return list(mode) + [-v for v in mode]
    first = [1] + [0] * (N - 1)
    second = [0, 1] + [0] * (N - 2) if N >= 2 else first
    diff = [1, -1] + [0] * (N - 2) if N >= 2 else first
    return [
        {"modes": [rel(first)], "cos": [[1.0]], "sin": [[0.0]]},
        {"modes": [rel(second)], "cos": [[1.0]], "sin": [[0.0]]},
        {"modes": [rel(diff)], "cos": [[1.0]], "sin": [[0.0]]},
    ]


def run_stopping(F, params, noise, jobs, rep: Reporter,
        check_name: str = "stopping"):
    dt = params.get("dt", noise["dt"])
    fn_spec = params.get("functional", _default_joint_functional(F, 2))
    spec = build_functional(fn_spec, F, 2)
    res = experiments.stopping_experiment(
        F, seed=noise["seed"], dt=dt, r=params.get("r", 0.2),
        delta=params.get("delta", 0.1), horizon=params.get("horizon", 300.0),
        n_samples=params.get("n_samples", 1200), jobs=jobs, spec=spec,
        escape_separations=params.get("escape_separations", [0.01, 0.02, 0.04]),
        escape_reps=params.get("escape_reps", 400),
        escape_horizon=params.get("escape_horizon"))
    checks = {
        "tail_r2": res.tail.r_squared >= 0.95,
        "tail_rate_positive_95": res.tail.rate_positive_95(),
        "n_samples_1e3": len(res.tau1_samples) >= 1000,
        "exp_moment_finite": np.isfinite(res.exp_moment),
        "escape_slope_negative": res.escape_slope_ci[1] < 0,
        "a_tau_tail_r2": (res.A_tau_tail is None
                          or res.A_tau_tail.r_squared >= 0.9),
    }
    details = {
        "tail": dataclasses.asdict(res.tail),
        "n_samples": len(res.tau1_samples),
        "truncated_fraction": res.truncated_fraction,
        "exp_moment_alpha": res.exp_moment_alpha,
        "exp_moment": res.exp_moment, "exp_moment_ci": res.exp_moment_ci,
        "escape_separations": res.escape_separations,
        "escape_moments": res.escape_moments,
        "escape_slope": res.escape_slope,
        "escape_slope_ci": res.escape_slope_ci,
        "A_tau_tail": None if res.A_tau_tail is None
        else dataclasses.asdict(res.A_tau_tail),
        **checks,
    }
    verdict = CONSISTENT if all(checks.values()) else INCONSISTENT
    rep.write_report(check_name,
                     "diagonal escape times have exponential tails and "
                     "exponential moments growing as a power of the initial "
                     "separation",
                     verdict, details, noise["seed"], dt)
    s = np.sort(res.tau1_samples)
    surv = 1.0 - np.arange(1, len(s) + 1) / len(s)
    rep.write_curve(check_name, "tau1-survival", {"tau": s, "survival": surv})
    return verdict


def run_energy(F, params, noise, jobs, rep: Reporter,
        check_name: str = "energy"):
    dt = params.get("dt", noise["dt"])
    nu = build_measure(params.get("measure", {"kind": "ball", "n": 256}), F.dim)
    res = experiments.energy_experiment(
        F, nu, seed=noise["seed"], dt=dt,
        t_grid=params.get("t_grid", list(np.arange(1.0, 21.0))),
        p=params.get("p", 0.1), reps=params.get("reps", 200), jobs=jobs)
    details = {
        "initial_energy": res.initial_energy, "times": res.times,
        "mean_energy": res.mean_energy, "se": res.se,
        "trend_slope": res.trend_slope, "trend_slope_ci": res.trend_slope_ci,
        "c_fit": res.c_fit,
    }
    rep.write_report(check_name,
                     "mean p-energy of the evolved cloud stays bounded "
                     "(no positive trend)",
                     res.verdict, details, noise["seed"], dt)
    rep.write_curve(check_name, "mean",
                    {"t": res.times, "I_p": res.mean_energy, "stderr": res.se})
    return res.verdict


def run_equidistribution(F, params, noise, jobs, rep: Reporter,
        check_name: str = "equidistribution"):
    dt = params.get("dt", noise["dt"])
    obs = params.get("observable")
    b = (build_trigpoly(obs, F.dim) if obs
         else TrigPoly(np.eye(1, F.dim, dtype=np.int64), [[1.0]], [[0.0]]))
    m_specs = params.get("measures", [{"kind": "curve", "n": 512},
                                      {"kind": "ball", "n": 512}])
    verdicts, all_details = [], {}
    for mi, mspec in enumerate(m_specs):
        nu = build_measure(mspec, F.dim)
        res = experiments.equidistribution_experiment(
            F, nu, b, seed=noise["seed"] + mi, dt=dt,
            t_grid=params.get("t_grid", list(0.5 * np.arange(1, 17))),
            reps=params.get("reps", 400), jobs=jobs)
        verdicts.append(res.verdict)
        all_details[mspec["kind"]] = {
            "fit": None if res.fit is None else dataclasses.asdict(res.fit),
            "verdict": res.verdict,
        }
        rep.write_curve(check_name, mspec["kind"],
                        {"t": res.times, "mean_abs": res.mean_abs,
                         "stderr": res.se})
    if all(v == CONSISTENT for v in verdicts):
        verdict = CONSISTENT
    elif any(v == UNDERPOWERED for v in verdicts):
        verdict = UNDERPOWERED
    else:
        verdict = INCONSISTENT
    rep.write_report(check_name,
                     "cloud averages of zero-mean observables decay "
                     "exponentially (images equidistribute)",
                     verdict, all_details, noise["seed"], dt)
    return verdict


def run_occupation(F, params, noise, jobs, rep: Reporter,
        check_name: str = "occupation"):
    dt = params.get("dt", noise["dt"])
    z0 = params.get("z0", [[0.2, 0.3], [0.6, 0.8], [0.45, 0.15]])
    res = experiments.occupation_experiment(
        F, np.asarray(z0, dtype=np.float64), seed=noise["seed"], dt=dt,
        r=params.get("r", 0.1), horizons=params.get("horizons", [5, 10, 20, 40]),
        reps=params.get("reps", 400),
        threshold=params.get("threshold", 1.0 / len(z0) ** 2), jobs=jobs)
    details = {
        "horizons": res.horizons, "exceedance": res.exceedance, "se": res.se,
        "threshold": res.threshold,
        "monotone_decreasing": res.monotone_decreasing,
        "tail_fit": None if res.fit is None else dataclasses.asdict(res.fit),
    }
    verdict = CONSISTENT if res.monotone_decreasing else INCONSISTENT
    rep.write_report(check_name,
                     "time fraction near the generalized diagonal: "
                     "exceedance probability decreases with the horizon",
                     verdict, details, noise["seed"], dt)
    rep.write_curve(check_name, "exceedance",
                    {"T": res.horizons, "p_exceed": res.exceedance,
                     "stderr": res.se})
    return verdict


def run_dissipative(F, params, noise, jobs, rep: Reporter,
        check_name: str = "dissipative"):
    dt = params.get("dt", noise["dt"])
    if not F.divergence_free:
        raise ManifestError("dissipative suite expects a divergence-free base set")
    epsilons = params.get("epsilons", [0.1, 0.03, 0.01])
    depths = params.get("depths", [0, 1, 2, 3, 4, 5, 6, 8])
    obs = params.get("observable")
    A = (build_trigpoly(obs, F.dim) if obs
         else TrigPoly(np.eye(1, F.dim, dtype=np.int64), [[1.0]], [[0.3]]))
    clt_params = params.get("clt", {})
    _check_keys(clt_params, {"depth", "t", "reps", "functional", "da_horizon",
                             "da_reps"}, set(), "experiments.dissipative.clt")
    nu1 = measures.ball_measure([0.3] * F.dim, 0.15, params.get(
        "pullback_measure_size", 128), seed=1)
    nu2 = measures.ball_measure([0.7] * F.dim, 0.15, params.get(
        "pullback_measure_size", 128), seed=2)

    fn_spec = clt_params.get("functional")
    first_mode = np.eye(1, F.dim, dtype=np.int64)   # e_1 frequency
    base_spec = (build_functional(fn_spec, F, 1) if fn_spec
                 else center_functional(F, FunctionalSpec(
                     arity=1,
                     alphas=tuple(TrigPoly(first_mode, [[0.9 / (k + 1)]], [[0.2]])
                                  for k in range(F.d)),
                     drift=TrigPoly(first_mode, [[0.5]], [[-0.4]]))))

    da = experiments.estimate_DA(
        F, base_spec, seed=noise["seed"] + 90, dt=dt,
        horizon=clt_params.get("da_horizon", clt_params.get("t", 30.0)),
        reps=clt_params.get("da_reps", 200), jobs=jobs)

    per_eps = {}
    ok_rho, resid_max, dd_list, dp_list = [], 0.0, [], []
    for ei, eps in enumerate(epsilons):
        Fe = make_dissipative_set(F, eps,
                                  seed=params.get("perturbation_seed", 1234))
        conv = experiments.pullback_convergence(
            Fe, nu1, nu2, A, depths, params.get("t_pullback", 2.0),
            seed=noise["seed"] + 7 * ei, dt=dt,
            reps=params.get("pullback_reps", 40))
        # m-cloud for centering w.r.t. the perturbed invariant measure
        m_path = make_path(noise["seed"] + 40 + ei, 0, F.d, dt,
                           (0, round(400.0 / dt) + 1))
        from .dissipative import occupation_measure
        m_cloud = occupation_measure(Fe, m_path, t_burn=20.0, t_end=400.0,
                                     sample_every=25, x0=[0.4] * F.dim)
        spec_eps = center_functional(Fe, FunctionalSpec(
            arity=1, alphas=base_spec.alphas, drift=base_spec.drift),
            measure=m_cloud, tol=0.05)
        clt = experiments.dissipative_clt_experiment(
            Fe, spec_eps, nu1, seed=noise["seed"] + 11 * ei + 3, dt=dt,
            depth=clt_params.get("depth", 6.0), t=clt_params.get("t", 30.0),
            reps=clt_params.get("reps", 48), jobs=jobs)
        rho_ok = (conv.rho is not None and conv.rho_ci is not None
                  and conv.rho_ci[1] < 1.0)
        ok_rho.append(rho_ok)
        resid_max = max(resid_max, clt.decomposition_residual)
        dd_list.append(clt.d_double)
        dp_list.append((clt.d_prime, clt.d_prime_ci))
        per_eps[str(eps)] = {
            "rho": conv.rho, "rho_ci": conv.rho_ci,
            "r_squared": conv.r_squared,
            "gaps": conv.gaps, "cauchy_gaps": conv.cauchy_gaps,
            "depths": conv.depths,
            "d_prime": clt.d_prime, "d_prime_ci": clt.d_prime_ci,
            "d_double": clt.d_double, "d_double_ci": clt.d_double_ci,
            "decomposition_residual": clt.decomposition_residual,
        }
        rep.write_curve(check_name, f"pullback-eps{eps}",
                        {"depth": conv.depths, "gap": conv.gaps,
                         "gap_se": conv.gap_se})

    smallest = dp_list[-1]
    # like-for-like: the per-measure D(A) statistic at the same horizon
    da_lo, da_hi = da.per_measure_ci
    dprime_matches_da = (max(smallest[1][0], da_lo) <= min(smallest[1][1], da_hi))
    dd_shrinks = all(b <= a or b <= dd_list[-1] * 4
                     for a, b in zip(dd_list, dd_list[1:])) \
        and dd_list[-1] <= dd_list[0]
    checks = {
        "pullback_rho_lt_1": all(ok_rho),
        "decomposition_identity_1e-10": resid_max <= 1e-10,
        "d_double_shrinks_with_eps": bool(dd_shrinks),
        "d_prime_matches_DA_at_smallest_eps": bool(dprime_matches_da),
    }
    details = {"per_epsilon": per_eps, "DA_conservative": dataclasses.asdict(da),
               **checks}
    verdict = CONSISTENT if all(checks.values()) else INCONSISTENT
    rep.write_report(check_name,
                     "pullback measures converge geometrically; additive "
                     "functionals split into a random drift plus Gaussian "
                     "fluctuations, reducing to the conservative law as the "
                     "dissipation knob vanishes",
                     verdict, details, noise["seed"], dt)
    return verdict


RUNNERS = {
    "check-conditions": run_check_conditions,
    "lyapunov": run_lyapunov,
    "clt-npoint": run_clt_npoint,
    "clt-measure": run_clt_measure,
    "mixing": run_mixing,
    "stopping": run_stopping,
    "energy": run_energy,
    "equidistribution": run_equidistribution,
    "occupation": run_occupation,
    "dissipative": run_dissipative,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flowlab",
        description="simulation and statistical verification of stochastic "
                    "flows on the torus")
    parser.add_argument("subcommand", choices=SUBCOMMANDS + ["suite"])
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--seed-override", type=int, default=None)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    try:
        manifest = load_manifest(args.manifest)
        if args.seed_override is not None:
            manifest["noise"]["seed"] = args.seed_override
        out_dir = (args.out or os.environ.get("FLOWLAB_OUT")
                   or manifest.get("out_dir", "reports"))
        F = build_field_set(manifest["field_set"])
        noise = manifest["noise"]
        jobs = args.jobs if args.jobs else manifest.get("jobs", 1)

        if args.subcommand == "suite":
            todo = list(manifest["experiments"])
        else:
            if args.subcommand not in manifest["experiments"]:
                raise ManifestError(
                    f"manifest has no experiments.{args.subcommand!r} block")
            todo = [args.subcommand]

        rep = Reporter(out_dir, manifest_hash(manifest), manifest["name"])
        for name in todo:
            params = manifest["experiments"][name]
            variants = params if isinstance(params, list) else [params]
            for vi, v in enumerate(variants):
                tag = name if vi == 0 else f"{name}-v{vi}"
                RUNNERS[name](F, v, noise, jobs, rep, check_name=tag)
        bad = [v for v in rep.verdicts if v not in OK_VERDICTS]
        return 1 if bad else 0
    except ManifestError as exc:
        print(f"flowlab: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"flowlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
