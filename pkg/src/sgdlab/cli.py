"""Command line front end: ``sgdlab <experiment> --config cfg.json [--seed N] [--out DIR]``.

Each run validates the JSON config against a strict schema, writes the
resolved config, CSV data files and a ``report.json`` carrying the config
hash, tool version and per-claim verdicts. Outputs depend only on the
resolved config, never on the output directory or the thread count.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, jsonio, snapshot
from .asymptotics import (entropy_decay_rate, entropy_trace, fit_rate, gaussian_w2,
                          mass_partition, product_w2_bound)
from .concentration import CutoffSpec, concentration_report
from .domain import Ball, Box
from .exit_time import (barrier_height, barrier_slope, kramers_estimate, met_bounds,
                        saddle_scan_1d)
from .fokker_planck import (FokkerPlanckSolver, GaussianState, ProductDatum,
                            degenerate_product_solution, gibbs_steady_state, init_grid,
                            lyapunov_solve, ou_closed_form, steady_state_probe_delta_to_zero)
from .model import (ConfigError, DiffusionField, Hyperparams, catalog, CATALOG,
                    lambda_convexity, load_dataset_csv, locate_minima)
from .simulate import gaussian_ensemble, run_ensemble, sample_exit_times, weak_error_curve

EXPERIMENTS = ("simulate", "fokker-planck", "exit-time", "concentration", "entropy",
               "wasserstein", "kramers", "weak-order", "steady-probe", "partition")

SATISFIED, VIOLATED, PROBE_FAILED, UNRESOLVED = "satisfied", "violated", "probe_failed", "unresolved"

# ----------------------------------------------------------------------------
# schema

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_count = {"type": "integer", "minimum": 1}
_vec = {"type": "array", "items": _num, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}
_cells = {"oneOf": [_count, {"type": "array", "items": _count, "minItems": 1}]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_gauss = _obj({"mean": _vec, "cov": _mat}, ["mean", "cov"])
_start = {"oneOf": [_vec, _gauss]}
_box = _obj({"lo": _vec, "hi": _vec}, ["lo", "hi"])
_ball = _obj({"center": _vec, "radius": _pos}, ["center", "radius"])
_domain = {"oneOf": [_obj({"ball": _ball}, ["ball"]), _obj({"box": _box}, ["box"])]}

_model = {
    "type": "object",
    "properties": {
        "catalog": {"type": "string", "enum": sorted(CATALOG)},
        "params": {"type": "object"},
        "dataset": {"type": "string"},
        "covariance": _mat,
    },
    "additionalProperties": False,
    "oneOf": [{"required": ["catalog"], "not": {"required": ["dataset"]}},
              {"required": ["dataset"], "not": {"required": ["catalog"]}}],
}

_hyper = _obj({"eta": _pos, "batch_size": _count, "delta": _nonneg, "epsilon_squared": _pos},
              ["eta", "batch_size"])

TOP_SCHEMA = _obj({
    "experiment": {"type": "string", "enum": list(EXPERIMENTS)},
    "model": _model,
    "hyperparams": _hyper,
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string"},
    "setup": {"type": "object"},
}, ["setup"])

SETUP_SCHEMAS = {
    "simulate": _obj({
        "scheme": {"enum": ["sgd", "nsgd", "em"]}, "n_steps": _count, "M": _count,
        "dt": _pos, "stride": _count, "x0": _start,
    }, ["scheme", "n_steps", "M", "x0"]),
    "fokker-planck": _obj({
        "box": _box, "cells": _cells, "t_end": _pos, "dt": _pos, "record_every": _pos,
        "rho0": _gauss, "oracle": {"enum": ["none", "ou"]},
    }, ["box", "cells", "t_end", "rho0"]),
    "exit-time": _obj({
        "domain": _domain, "x0": _vec, "minimizer": _vec, "sigma": _pos, "v": _vec,
        "beta": _pos, "Lambda": _nonneg, "M": _count, "dt": _pos, "horizon": _pos,
        "n_probes": _count, "kramers": _obj({"x1": _vec, "z": _vec}, ["x1", "z"]),
    }, ["domain", "x0", "minimizer", "sigma", "v", "beta", "Lambda", "M", "dt", "horizon"]),
    "concentration": _obj({
        "center": _vec, "R0": _pos, "cutoff_width": _pos, "lam": _pos,
        "lam_haircut": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "a": _pos, "alpha": _pos, "beta": _pos, "sigma": _pos, "M": _count, "dt": _pos,
        "x0": _start,
    }, ["center", "R0", "cutoff_width", "a", "alpha", "beta", "sigma", "M", "dt", "x0"]),
    "entropy": _obj({
        "box": _box, "cells": _cells, "t_end": _pos, "record_every": _pos, "dt": _pos,
        "rho0": _gauss, "window": {"type": "array", "items": _nonneg, "minItems": 2,
                                    "maxItems": 2},
    }, ["box", "cells", "t_end", "record_every", "rho0"]),
    "wasserstein": _obj({
        "Q0": _mat, "C0": _mat, "C3": _mat, "x_mean": _vec, "x_cov": _mat,
        "y_mean": _vec, "y_cov": _mat, "t_end": _pos, "n_points": {"type": "integer",
                                                                   "minimum": 3},
        "tol": _pos,
    }, ["Q0", "C0", "C3", "x_mean", "x_cov", "y_mean", "y_cov", "t_end"]),
    "kramers": _obj({
        "x1": _vec, "x2": _vec, "epsilon_squared_values": {"type": "array", "items": _pos,
                                                           "minItems": 1},
        "monte_carlo": _obj({"M": _count, "dt": _pos, "horizon": _pos, "left": _num},
                            ["M", "dt", "horizon"]),
    }, ["x1", "x2", "epsilon_squared_values"]),
    "weak-order": _obj({
        "etas": {"type": "array", "items": _pos, "minItems": 2}, "horizon": _pos,
        "M": _count, "x0": _vec, "observable": {"enum": ["squared_norm", "first_coordinate"]},
        "substeps": _count,
    }, ["etas", "horizon", "M", "x0"]),
    "steady-probe": _obj({
        "deltas": {"type": "array", "items": _pos, "minItems": 1}, "box": _box,
        "cells": _cells, "horizon": _pos, "radii": {"type": "array", "items": _pos},
        "center": _vec, "rho0": _gauss, "drift_tol": _pos,
    }, ["deltas", "box", "cells", "horizon", "radii"]),
    "partition": _obj({
        "scheme": {"enum": ["sgd", "nsgd", "em"]}, "n_steps": _count, "M": _count,
        "dt": _pos, "x0": _start, "search_box": _box, "n_starts": _count,
    }, ["scheme", "n_steps", "M", "x0", "search_box"]),
}

# optional keys without a default stay absent so the resolved config re-validates
SETUP_DEFAULTS = {
    "simulate": {},
    "fokker-planck": {"oracle": "none"},
    "exit-time": {"n_probes": 512},
    "concentration": {"lam_haircut": 0.95},
    "entropy": {},
    "wasserstein": {"n_points": 101, "tol": 1e-3},
    "kramers": {},
    "weak-order": {"observable": "squared_norm", "substeps": 50},
    "steady-probe": {"drift_tol": 1e-3},
    "partition": {"n_starts": 32},
}

NEEDS_MODEL = set(EXPERIMENTS) - {"wasserstein"}
NEEDS_HYPER = {"simulate", "fokker-planck", "exit-time", "concentration", "entropy",
               "steady-probe", "partition"}


class SchemaError(Exception):
    def __init__(self, message, path=""):
        super().__init__(message)
        self.path = path


def _validate(instance, schema, prefix=""):
    v = jsonschema.Draft202012Validator(schema)
    errs = sorted(v.iter_errors(instance), key=lambda e: list(e.absolute_path))
    if errs:
        e = errs[0]
        path = "/".join([prefix] * bool(prefix) + [str(p) for p in e.absolute_path])
        raise SchemaError(e.message, path)


def resolve_config(raw: dict, experiment: str, seed: int | None = None) -> dict:
    """Validate ``raw`` for ``experiment`` and fill defaults (the output directory is dropped)."""
    if not isinstance(raw, dict):
        raise SchemaError("config must be a JSON object")
    _validate(raw, TOP_SCHEMA)
    if raw.get("experiment", experiment) != experiment:
        raise SchemaError(f"config is for {raw['experiment']!r}, not {experiment!r}", "experiment")
    _validate(raw["setup"], SETUP_SCHEMAS[experiment], "setup")
    if experiment in NEEDS_MODEL and "model" not in raw:
        raise SchemaError("this experiment needs a model", "model")
    if experiment in NEEDS_HYPER and "hyperparams" not in raw:
        raise SchemaError("this experiment needs hyperparams", "hyperparams")
    cfg = copy.deepcopy(raw)
    cfg.pop("output_dir", None)
    cfg["experiment"] = experiment
    cfg["seed"] = int(seed if seed is not None else raw.get("seed", 0))
    if "catalog" in cfg.get("model", {}):
        cfg["model"].setdefault("params", {})
    if "hyperparams" in cfg:
        cfg["hyperparams"].setdefault("delta", 0.0)
    for k, v in SETUP_DEFAULTS[experiment].items():
        cfg["setup"].setdefault(k, v)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(jsonio.dumps(cfg).encode()).hexdigest()


# ----------------------------------------------------------------------------
# building blocks


def _build_model(spec: dict, base: Path):
    if "dataset" in spec:
        p = Path(spec["dataset"])
        return load_dataset_csv(p if p.is_absolute() else base / p)
    try:
        return catalog(spec["catalog"], **spec.get("params", {}))
    except TypeError as exc:
        raise ConfigError(f"bad catalog parameters: {exc}") from None


def _field(model, cfg):
    hp = cfg.get("hyperparams") or {}
    return DiffusionField(model, delta=hp.get("delta", 0.0), batch_size=hp.get("batch_size", 1),
                          covariance=cfg["model"].get("covariance"))


def _hyper(model, cfg):
    h = cfg["hyperparams"]
    hp = Hyperparams(h["eta"], h["batch_size"])
    hp.validate(model)
    eps2 = h["epsilon_squared"] if h.get("epsilon_squared") is not None else hp.epsilon_squared
    return hp, float(np.sqrt(eps2))


def _gaussian(g):
    return GaussianState(np.asarray(g["mean"], float), np.asarray(g["cov"], float))


def _start(x0, M, seed):
    if isinstance(x0, dict):
        return gaussian_ensemble(x0["mean"], x0["cov"], M, seed)
    return np.asarray(x0, float)


def _domain(spec):
    if "ball" in spec:
        return Ball(spec["ball"]["center"], spec["ball"]["radius"])
    return Box(spec["box"]["lo"], spec["box"]["hi"])


def _box(spec):
    return Box(spec["lo"], spec["hi"])


def _cells(c, d):
    return [c] * d if isinstance(c, int) else list(c)


def _verdict(ok):
    return SATISFIED if ok else VIOLATED


def _is_constant_hessian(model):
    H0 = model.hessian(np.zeros(model.dim))
    H1 = model.hessian(np.full(model.dim, 0.37))
    return np.allclose(H0, H1, rtol=0, atol=1e-12), H0


# ----------------------------------------------------------------------------
# experiments; each returns (report, {filename: writer})


def exp_simulate(cfg, model, out):
    s = cfg["setup"]
    hp, eps = _hyper(model, cfg)
    f = _field(model, cfg)
    x0 = _start(s["x0"], s["M"], cfg["seed"])
    stride = s.get("stride") or max(1, s["n_steps"] // 100)
    tr = run_ensemble(model, f, x0, s["scheme"], s["n_steps"], s["M"], cfg["seed"], hp,
                      dt=s.get("dt"), stride=stride, eps=eps)
    tr.to_csv(out / "trajectories.csv")
    X = tr.final
    r2 = np.sum(X * X, axis=1)
    n_div = int(np.sum(tr.diverged >= 0))
    rep = {"epsilon_squared": eps * eps, "final_time": float(tr.times[-1]),
           "final_mean": X.mean(axis=0).tolist(), "final_second_moment": float(r2.mean()),
           "final_second_moment_se": float(r2.std(ddof=1) / np.sqrt(r2.size)) if r2.size > 1
           else None,
           "diverged": n_div, "verdicts": {"no_divergence": _verdict(n_div == 0)}}
    return rep


def exp_fokker_planck(cfg, model, out):
    s = cfg["setup"]
    _, eps = _hyper(model, cfg)
    f = _field(model, cfg)
    box = _box(s["box"])
    g0 = init_grid(box, _cells(s["cells"], model.dim), _gaussian(s.get("rho0")))
    solver = FokkerPlanckSolver(model, f, eps, g0.axes)
    every = s.get("record_every") or s["t_end"] / 20
    gT, snaps = solver.evolve(g0, s["t_end"], dt=s.get("dt"), record_every=every)
    gT.to_csv(out / "density.csv")
    rows = np.array([[g.t, g.mass(), g.second_moment()] for g in snaps])
    snapshot.write_csv(out / "moments.csv", ["t", "mass", "m2"], rows)
    mass_err = float(np.max(np.abs(rows[:, 1] - 1.0)))
    rep = {"epsilon": eps, "cfl_limit": solver.cfl_limit, "clipped_mass": solver.clipped_mass,
           "final_mass": float(gT.mass()), "final_second_moment": float(gT.second_moment()),
           "max_mass_error": mass_err,
           "verdicts": {"positivity": _verdict(solver.clipped_mass <= 1e-8),
                        "mass_conservation": _verdict(mass_err <= 1e-6)}}
    if s["oracle"] == "ou":
        const, C = _is_constant_hessian(model)
        if not (const and f.is_constant):
            raise ConfigError("the OU oracle needs a quadratic loss and constant covariance")
        Q0 = eps * eps * f.effective(np.zeros(model.dim))
        exact = ou_closed_form(Q0, C, _gaussian(s.get("rho0")), s["t_end"])
        err = gT.l1_distance(exact.pdf)
        rep["oracle_l1"] = err
        rep["verdicts"]["oracle_agreement"] = _verdict(err <= 0.02)
    return rep


def exp_exit_time(cfg, model, out):
    s = cfg["setup"]
    _, eps = _hyper(model, cfg)
    f = _field(model, cfg)
    dom = _domain(s["domain"])
    mb = met_bounds(model, f, eps, dom, s["x0"], s["minimizer"], s["sigma"], s["v"],
                    s["beta"], s["Lambda"], n_probes=s["n_probes"])
    st = sample_exit_times(model, f, eps, dom, s["x0"], s["M"], s.get("dt"), s["horizon"],
                           cfg["seed"])
    st.to_csv(out / "exit_times.csv")
    pr = mb.probe
    kp = None
    if "kramers" in s:
        kp = kramers_estimate(model, s["kramers"]["x1"], s["kramers"]["z"], eps)
    lo_ok = mb.lower is None or st.mean >= mb.lower - 3 * st.se
    if st.lower_bound_only or st.censored_fraction >= 0.01:
        sandwich = UNRESOLVED
    elif mb.upper is None:
        sandwich = PROBE_FAILED
    else:
        sandwich = _verdict(lo_ok and st.mean <= mb.upper + 3 * st.se)
    rep = {"lower": mb.lower, "upper": mb.upper,
           "probe": {"noise_ok": pr.noise_ok, "drift_ok": pr.drift_ok, "min_vQv": pr.min_vQv,
                     "max_drift_excess": pr.max_drift_excess, "n_probes": pr.n_probes,
                     "witness": None if pr.witness is None else pr.witness.tolist()},
           "mc_mean": st.mean, "mc_se": st.se, "censoring": st.censored_fraction,
           "lower_bound_only": st.lower_bound_only, "kramers_prediction": kp,
           "constants": mb.constants,
           "verdicts": {"sandwich": sandwich,
                        "upper_hypotheses": SATISFIED if pr.holds else PROBE_FAILED,
                        "lower_bound": _verdict(lo_ok) if mb.lower is not None else UNRESOLVED}}
    return rep


def exp_concentration(cfg, model, out):
    s = cfg["setup"]
    hp, eps = _hyper(model, cfg)
    f = _field(model, cfg)
    c = np.asarray(s.get("center"), float)
    lam_src = "config"
    lam = s.get("lam")
    if lam is None:
        lam = s["lam_haircut"] * lambda_convexity(model, c, (1 + s["cutoff_width"]) * s["R0"])
        lam_src = "probe"
    if not lam > 0:
        raise ConfigError("the loss is not convex on the cut-off ball")
    spec = CutoffSpec(c, s["R0"], s["cutoff_width"], lam)
    T = 2.0 / lam * np.log(s["R0"] / (s["a"] * eps ** s["alpha"]))
    if T <= 0:
        raise ConfigError("R0 is already below a eps^alpha")
    n = max(1, int(np.ceil(T / s.get("dt") - 1e-9)))
    X0 = _start(s["x0"], s["M"], cfg["seed"])
    tr = run_ensemble(model, f, X0, "em", n, s["M"], cfg["seed"], hp, dt=T / n,
                      stride=max(1, n // 100), eps=eps)
    rep = concentration_report(tr, spec, s["a"], s["alpha"], s["beta"], eps, s["sigma"])
    rep.to_csv(out / "concentration.csv")
    d = rep.summary()
    d.update(lam_source=lam_src, verdicts={"mass_retained": _verdict(rep.passed)})
    return d


def exp_entropy(cfg, model, out):
    s = cfg["setup"]
    _, eps = _hyper(model, cfg)
    f = _field(model, cfg)
    if not f.is_constant:
        raise ConfigError("entropy runs need a constant diffusion")
    Q = f.effective(np.zeros(model.dim))
    sigma = float(Q[0, 0])
    if not np.allclose(Q, sigma * np.eye(model.dim), rtol=0, atol=1e-12) or sigma <= 0:
        raise ConfigError("entropy runs need an isotropic diffusion sigma I")
    box = _box(s["box"])
    cells = _cells(s["cells"], model.dim)
    rho_inf = gibbs_steady_state(model, eps, sigma, box, cells)
    g0 = init_grid(box, cells, _gaussian(s.get("rho0")))
    solver = FokkerPlanckSolver(model, f, eps, g0.axes)
    tr = entropy_trace(solver, g0, rho_inf, f, s["t_end"], s.get("record_every"), dt=s.get("dt"))
    tr.to_csv(out / "entropy.csv")
    rate = entropy_decay_rate(tr, None if s.get("window") is None else tuple(s["window"]))
    t0 = tr.times[0] + 0.1 * (tr.times[-1] - tr.times[0])
    resid = tr.production_residual(eps, (t0, tr.times[-1]))
    v = {"decay_fit": _verdict(not tr.flags), "production_identity": _verdict(resid <= 0.05)}
    rep = {"rate": rate, "window": list(tr.window), "fit_rms": tr.residual,
           "production_residual": resid, "flags": list(tr.flags), "sigma": sigma,
           "clipped_mass": solver.clipped_mass}
    const, C = _is_constant_hessian(model)
    if const:
        gamma = float(np.min(np.linalg.eigvalsh(0.5 * (C + C.T))))
        rep["rate_target"] = 2 * gamma * 0.85
        v["rate"] = _verdict(rate >= rep["rate_target"])
    rep["verdicts"] = v
    return rep


def exp_wasserstein(cfg, model, out):
    s = cfg["setup"]
    Q0, C0, C3 = (np.atleast_2d(np.asarray(s[k], float)) for k in ("Q0", "C0", "C3"))
    rho0 = ProductDatum(GaussianState(np.asarray(s["x_mean"], float),
                                      np.asarray(s["x_cov"], float)),
                        np.asarray(s["y_mean"], float), np.asarray(s["y_cov"], float))
    ts = np.linspace(0.0, s["t_end"], s["n_points"])
    sols = [degenerate_product_solution({"Q0": Q0, "C0": C0}, {"C3": C3}, rho0, t) for t in ts]
    K = lyapunov_solve(Q0, C0).K
    g_inf = GaussianState(np.zeros(C0.shape[0]), K)
    m2_inf = float(np.trace(K))
    dx = np.array([gaussian_w2(u.x, g_inf) for u in sols])
    my = np.array([u.y_second_moment() for u in sols])
    bound = np.array([product_w2_bound(a, b) for a, b in zip(dx, my)])
    gap = np.abs(np.array([u.second_moment() for u in sols]) - m2_inf)
    snapshot.write_csv(out / "wasserstein.csv", ["t", "dx", "m_y", "bound", "m2_gap"],
                       np.column_stack([ts, dx, my, bound, gap]))
    gamma = float(np.min(np.linalg.eigvals(C0).real))
    lam = min(2 * gamma, 2 * float(np.max(np.linalg.eigvals(C3).real)))
    window = (0.5 * s["t_end"], s["t_end"])
    ok = gap > 1e-300
    rate = fit_rate(ts[ok], gap[ok], window)
    rep = {"rate": rate, "rate_target": lam, "window": list(window), "final_bound": bound[-1],
           "second_moment_limit": m2_inf,
           "verdicts": {"rate": _verdict(abs(rate - lam) <= 0.15 * lam),
                        "bound_monotone": _verdict(bool(np.all(np.diff(bound) < 0))),
                        "bound_small": _verdict(bound[-1] < s["tol"])}}
    return rep


def exp_kramers(cfg, model, out):
    s = cfg["setup"]
    if model.dim != 1:
        raise ConfigError("the kramers experiment is one-dimensional")
    x1, x2 = np.asarray(s["x1"], float), np.asarray(s["x2"], float)
    z, degenerate = saddle_scan_1d(model, x1, x2, return_flag=True)
    dL = barrier_height(model, x1, z)
    eps2 = np.asarray(s["epsilon_squared_values"], float)
    pred = np.array([kramers_estimate(model, x1, z, np.sqrt(e)) for e in eps2])
    rep = {"saddle": np.atleast_1d(z).tolist(), "saddle_degenerate": bool(degenerate),
           "barrier": dL, "epsilon_squared": eps2.tolist(), "prediction": pred.tolist()}
    rows = [eps2, pred]
    cols = ["epsilon_squared", "prediction"]
    mc = s.get("monte_carlo")
    v = {}
    if mc is not None:
        f = DiffusionField(model, covariance=np.eye(1)) if cfg["model"].get("covariance") is None \
            else _field(model, cfg)
        left = mc.get("left", float(x1[0]) - 5.0)
        lo, hi = sorted([left, float(x2[0])])
        dom = Box([lo], [hi])
        means, ses, cens = [], [], []
        for e in eps2:
            st = sample_exit_times(model, f, np.sqrt(e), dom, x1, mc["M"], mc["dt"],
                                   mc["horizon"], cfg["seed"])
            means.append(st.mean)
            ses.append(st.se)
            cens.append(st.censored_fraction)
        means, ses = np.array(means), np.array(ses)
        ratio = means / pred
        expo = eps2 * np.log(means)
        rows += [means, ses, np.array(cens), ratio, expo]
        cols += ["mc_mean", "mc_se", "censoring", "ratio", "exponent"]
        rep.update(mc_mean=means.tolist(), mc_se=ses.tolist(), censoring=cens,
                   ratio=ratio.tolist(), exponent=expo.tolist())
        if eps2.size > 1:
            rep["barrier_slope"] = barrier_slope(eps2, means)
        v["ratio_band"] = _verdict(bool(np.all((ratio >= 0.5) & (ratio <= 2.0))))
        v["exponent"] = _verdict(bool(np.all(np.abs(expo - dL) <= 0.15 * dL)))
        if max(cens) > 0.5:
            v["ratio_band"] = v["exponent"] = UNRESOLVED
    snapshot.write_csv(out / "kramers.csv", cols, np.column_stack(rows))
    rep["verdicts"] = v
    return rep


def exp_weak_order(cfg, model, out):
    s = cfg["setup"]
    hp = cfg.get("hyperparams") or {}
    f = _field(model, cfg)
    g = (lambda X: np.sum(X * X, axis=-1)) if s["observable"] == "squared_norm" \
        else (lambda X: X[..., 0])
    c = weak_error_curve(model, f, g, s["etas"], s["horizon"], s["M"], cfg["seed"],
                         np.asarray(s["x0"], float), batch_size=hp.get("batch_size", 1),
                         substeps=s["substeps"])
    c.to_csv(out / "weak_order.csv")
    slope = c.slope
    v = _verdict(0.7 <= slope <= 1.3) if c.resolved.all() else UNRESOLVED
    return {"slope": slope, "errors": c.errors.tolist(), "se": c.se.tolist(),
            "resolved": c.resolved.tolist(), "etas": c.etas.tolist(),
            "verdicts": {"weak_order_one": v}}


def exp_steady_probe(cfg, model, out):
    s = cfg["setup"]
    _, eps = _hyper(model, cfg)
    f = _field(model, cfg)
    deltas = sorted(s["deltas"], reverse=True)
    rho0 = None if s.get("rho0") is None else _gaussian(s.get("rho0"))
    probes = steady_state_probe_delta_to_zero(
        model, f, eps, deltas, _box(s["box"]), _cells(s["cells"], model.dim), s["horizon"],
        s["radii"], s.get("center"), rho0, s["drift_tol"])
    rows = [[p.delta, *p.tail_masses, *p.variances, p.drift] for p in probes]
    cols = (["delta"] + [f"tail_r{i + 1}" for i in range(len(s["radii"]))]
            + [f"var_{i + 1}" for i in range(model.dim)] + ["drift"])
    snapshot.write_csv(out / "steady_probe.csv", cols, np.array(rows))
    total = np.array([p.variances.sum() for p in probes])
    return {"deltas": deltas, "total_variance": total.tolist(),
            "tail_masses": [p.tail_masses.tolist() for p in probes],
            "verdicts": {"variance_ordering": _verdict(bool(np.all(np.diff(total) <= 1e-12)))}}


def exp_partition(cfg, model, out):
    s = cfg["setup"]
    hp, eps = _hyper(model, cfg)
    f = _field(model, cfg)
    minima = locate_minima(model, _box(s["search_box"]), n_starts=s["n_starts"])
    x0 = _start(s["x0"], s["M"], cfg["seed"])
    tr = run_ensemble(model, f, x0, s["scheme"], s["n_steps"], s["M"], cfg["seed"], hp,
                      dt=s.get("dt"), stride=s["n_steps"], eps=eps)
    mp = mass_partition(tr.final, minima, model)
    pts = np.array([np.asarray(getattr(m, "x", m), float) for m in minima])
    snapshot.write_csv(out / "partition.csv",
                       ["minimum"] + [f"x_{i + 1}" for i in range(model.dim)] + ["weight", "se"],
                       np.column_stack([np.arange(len(pts)), pts, mp.weights, mp.se]))
    return {"minima": pts.tolist(), "weights": mp.weights.tolist(), "se": mp.se.tolist(),
            "unassigned": mp.unassigned, "reliable": mp.reliable,
            "verdicts": {"partition_reliable": _verdict(mp.reliable)}}


RUNNERS = {
    "simulate": exp_simulate, "fokker-planck": exp_fokker_planck, "exit-time": exp_exit_time,
    "concentration": exp_concentration, "entropy": exp_entropy, "wasserstein": exp_wasserstein,
    "kramers": exp_kramers, "weak-order": exp_weak_order, "steady-probe": exp_steady_probe,
    "partition": exp_partition,
}


# ----------------------------------------------------------------------------
# entry point


def run_experiment(cfg: dict, out: Path, base: Path | None = None) -> dict:
    """Run a resolved config, writing all artifacts into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = Path(".") if base is None else Path(base)
    model = _build_model(cfg["model"], base) if "model" in cfg else None
    if model is not None and "hyperparams" in cfg:
        Hyperparams(cfg["hyperparams"]["eta"], cfg["hyperparams"]["batch_size"]).validate(model)
    jsonio.dump(cfg, out / "config.resolved.json")
    body = RUNNERS[cfg["experiment"]](cfg, model, out)
    report = {"experiment": cfg["experiment"], "version": __version__,
              "config_hash": config_hash(cfg), "seed": cfg["seed"], **body}
    jsonio.dump(report, out / "report.json")
    return report


def _fail(kind, message, code, **extra):
    sys.stdout.write(jsonio.dumps({"error": kind, "message": str(message), **extra}) + "\n")
    return code


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="sgdlab", description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on BLAS threads; never changes results")
    a = p.parse_args(argv)
    if a.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(a.threads)
    try:
        with open(a.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail("config", exc, 2)
    try:
        cfg = resolve_config(raw, a.experiment, a.seed)
    except SchemaError as exc:
        return _fail("schema", exc, 2, path=exc.path)
    out = Path(a.out or raw.get("output_dir") or f"sgdlab-{a.experiment}")
    try:
        report = run_experiment(cfg, out, Path(a.config).resolve().parent)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except Exception as exc:  # numerical failures surface with their module
        return _fail("numerical", exc, 3, type=type(exc).__name__,
                     module=type(exc).__module__)
    sys.stdout.write(jsonio.dumps({"report": str(out / "report.json"),
                                   "verdicts": report.get("verdicts", {})}) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
