"""Parameter-sweep engine: config parsing, grid execution, CSV/JSON emission.

A sweep is described by a small YAML document::

    mode: theory            # theory | simulate | decompose | ensemble | compare
    grid:                   # parameter name -> list of values (cartesian product)
      psi1: [0.5, 1.0, 2.0]
      lambda: [1.0e-5, 1.0e-1]
    fixed:                  # scalar parameters shared by every point
      snr: 1
      K: 1
    seeds: [0, 1]           # simulation modes run one row per (point, seed)
    output: out.csv

Rows carry the full parameter point plus the outputs of the requested mode;
failed points are flagged ``converged: false`` instead of aborting the sweep.
"""
from __future__ import annotations

import concurrent.futures
import itertools
import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Sequence

import yaml

from . import simulation, theory

__all__ = [
    "ConfigError",
    "SweepSpec",
    "parse_config",
    "load_preset",
    "PRESETS",
    "run_sweep",
    "emit",
]


class ConfigError(ValueError):
    """Invalid sweep configuration; message names the offending field."""


MODES = ("theory", "simulate", "decompose", "ensemble", "compare")

# Parameters that may appear in grid or fixed, with validators.
_INT = ("K", "D", "n_X", "n_Theta", "n_eps", "n_test", "n_seeds", "n_reps")
_POS_REAL = ("psi1", "psi2", "lambda", "snr")
_CHOICES = {
    "activation": ("relu", "linear"),
    "model": ("true_rf", "gaussian_covariate"),
    "variant": ("ensemble", "divide_conquer"),
    # derived-column studies (theory mode only)
    "study": ("ens_vs_over", "ens_vs_reg", "divide_vs_ensemble"),
}
_DEFAULTS = {
    "lambda": 1e-5,
    "psi2": 1.0,
    "snr": 1.0,
    "K": 1,
    "activation": "relu",
    "model": "gaussian_covariate",
    "variant": "ensemble",
    "D": 200,
    "n_X": 10,
    "n_Theta": 10,
    "n_eps": 10,
    "n_test": 10_000,
    "n_seeds": 20,
    "n_reps": 10,
}
_KNOWN = set(_INT) | set(_POS_REAL) | set(_CHOICES) | {"psi1"}


@dataclass(frozen=True)
class SweepSpec:
    mode: str
    grid: Dict[str, List[Any]]
    fixed: Dict[str, Any] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=lambda: [0])
    output_path: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if not self.grid:
            raise ConfigError("grid: must name at least one parameter")
        for name, values in self.grid.items():
            if name in self.fixed:
                raise ConfigError(f"{name}: appears in both grid and fixed")
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"grid.{name}: must be a non-empty list")
            for v in values:
                _check_value(f"grid.{name}", name, v)
        for name, v in self.fixed.items():
            _check_value(f"fixed.{name}", name, v)
        if not self.seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in self.seeds
        ):
            raise ConfigError("seeds: must be a non-empty list of integers")
        if self.mode != "theory":
            k_vals = list(self.grid.get("K", [])) + [self.fixed.get("K")]
            if math.inf in k_vals:
                raise ConfigError("K: inf is only allowed in theory mode")

    def value(self, name: str, point: Dict[str, Any]):
        if name in point:
            return point[name]
        if name in self.fixed:
            return self.fixed[name]
        return _DEFAULTS.get(name)


def _check_value(where: str, name: str, v) -> None:
    if name not in _KNOWN:
        raise ConfigError(f"{where}: unknown parameter {name!r}")
    if name in _CHOICES:
        if v not in _CHOICES[name]:
            raise ConfigError(f"{where}: must be one of {_CHOICES[name]}, got {v!r}")
        return
    if name == "K" and v == math.inf:
        return  # theory-only limit; simulation modes reject it at run time
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: must be a number, got {v!r}")
    if name in _INT and int(v) != v:
        raise ConfigError(f"{where}: must be an integer, got {v!r}")
    if name == "lambda" and v <= 0:
        raise ConfigError(f"{where}: lambda must be > 0")
    if name in _POS_REAL and v <= 0:
        raise ConfigError(f"{where}: must be > 0")
    if name in _INT and v < 1:
        raise ConfigError(f"{where}: must be >= 1")
    if name == "D" and v < 2:
        raise ConfigError(f"{where}: D must be >= 2")


def parse_config(text: str) -> SweepSpec:
    """Parse and validate a YAML sweep config, applying defaults."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping with keys mode/grid/fixed/seeds/output")
    unknown = set(doc) - {"mode", "grid", "fixed", "seeds", "output"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "mode" not in doc:
        raise ConfigError("mode: required")
    if "grid" not in doc or not isinstance(doc.get("grid"), dict):
        raise ConfigError("grid: required mapping of parameter -> list of values")
    grid = {k: list(v) if isinstance(v, (list, tuple)) else [v] for k, v in doc["grid"].items()}
    fixed = doc.get("fixed") or {}
    if not isinstance(fixed, dict):
        raise ConfigError("fixed: must be a mapping")
    seeds = doc.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    fixed = dict(fixed)
    if "K" in fixed and fixed["K"] == "inf":
        fixed["K"] = math.inf
    for k, vals in grid.items():
        if k == "K":
            grid[k] = [math.inf if v == "inf" else v for v in vals]
    return SweepSpec(
        mode=doc["mode"],
        grid=grid,
        fixed=fixed,
        seeds=list(seeds),
        output_path=doc.get("output"),
    )


# ---------------------------------------------------------------------------
# Figure presets
# ---------------------------------------------------------------------------


def _log_grid(lo: float, hi: float, n: int) -> List[float]:
    ratio = (hi / lo) ** (1.0 / (n - 1))
    return [lo * ratio ** i for i in range(n)]


PRESETS: Dict[str, Dict[str, Any]] = {
    # theory vs finite-size trace estimates, both regularizations
    "fig2": {
        "mode": "compare",
        "grid": {"psi1": [0.2, 0.5, 0.8, 1.5, 2.0, 5.0], "lambda": [1e-2, 1e-5]},
        "fixed": {"D": 200, "n_seeds": 20},
    },
    # bias/variance decomposition across the interpolation threshold
    "fig3_low_reg": {
        "mode": "theory",
        "grid": {"psi1": _log_grid(0.1, 10.0, 50)},
        "fixed": {"lambda": 1e-5, "snr": 1.0},
    },
    "fig3_high_reg": {
        "mode": "theory",
        "grid": {"psi1": _log_grid(0.1, 10.0, 50)},
        "fixed": {"lambda": 1e-1, "snr": 1.0},
    },
    # ensembling suppresses the interpolation peak
    "fig5": {
        "mode": "theory",
        "grid": {"psi1": _log_grid(0.1, 10.0, 50), "K": [1, 10]},
        "fixed": {"lambda": 1e-5, "snr": 1.0},
    },
    # K=2 ensembling vs doubling the width, as a function of sample ratio
    "fig_ens_vs_over": {
        "mode": "theory",
        "grid": {"psi2": _log_grid(0.5, 50.0, 20), "psi1": [0.5, 5.0]},
        "fixed": {"lambda": 1e-5, "snr": 10.0, "study": "ens_vs_over"},
    },
    # infinite ensembling at vanishing ridge vs optimal ridge at K=1
    "fig_ens_vs_reg": {
        "mode": "theory",
        "grid": {"lambda": _log_grid(1e-5, 1e2, 50), "psi1": [0.5, 1.0, 2.0, 5.0]},
        "fixed": {"snr": 10.0, "study": "ens_vs_reg"},
    },
    # inverse scaling laws of the divergent variances
    "figA_scalings": {
        "mode": "theory",
        "grid": {"psi1": _log_grid(1.01, 1.1, 12) + _log_grid(10.0, 100.0, 12)},
        "fixed": {"lambda": 1e-5, "snr": 1.0},
    },
    # divide-and-conquer vs ensembling plateaus at high/low SNR
    "figA_divide": {
        "mode": "theory",
        "grid": {"psi2": _log_grid(0.2, 100.0, 25), "snr": [1.0, 10.0]},
        "fixed": {"psi1": 2.0, "K": 2, "lambda": 1e-5, "study": "divide_vs_ensemble"},
    },
    # empirical decomposition spanning under- and over-parametrized regimes
    "figA_under_over": {
        "mode": "decompose",
        "grid": {"psi1": [0.3, 0.6, 0.9, 1.5, 2.5, 5.0]},
        "fixed": {"lambda": 1e-2, "snr": 1.0, "D": 200},
    },
}


def load_preset(name: str) -> SweepSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    doc = PRESETS[name]
    return SweepSpec(
        mode=doc["mode"],
        grid={k: list(v) for k, v in doc["grid"].items()},
        fixed=dict(doc.get("fixed", {})),
        seeds=list(doc.get("seeds", [0])),
    )


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _model_params(spec: SweepSpec, point: Dict[str, Any]) -> theory.ModelParams:
    snr = float(spec.value("snr", point))
    return theory.ModelParams(
        psi1=float(spec.value("psi1", point)),
        psi2=float(spec.value("psi2", point)),
        lam=float(spec.value("lambda", point)),
        moments=_moments(spec, point),
        F=1.0,
        tau=1.0 / snr,
    )


def _moments(spec: SweepSpec, point) -> theory.ActivationMoments:
    act = spec.value("activation", point)
    if act == "relu":
        return theory.relu_moments()
    return theory.ActivationMoments(mu0=0.0, mu1=1.0, mu_star_sq=0.0)


def _sim_config(spec: SweepSpec, point: Dict[str, Any], seed: int) -> simulation.SimConfig:
    D = int(spec.value("D", point))
    snr = float(spec.value("snr", point))
    return simulation.SimConfig(
        D=D,
        P=max(1, round(float(spec.value("psi1", point)) * D)),
        N=max(1, round(float(spec.value("psi2", point)) * D)),
        lam=float(spec.value("lambda", point)),
        F=1.0,
        tau=1.0 / snr,
        activation=spec.value("activation", point),
        model=spec.value("model", point),
        seed=seed,
    )


def _theory_row(spec: SweepSpec, point: Dict[str, Any]) -> Dict[str, Any]:
    params = _model_params(spec, point)
    K = spec.value("K", point)
    variant = spec.value("variant", point)
    sp = theory.solve_saddle(params)
    psis = theory.psi_terms(params)
    dec = theory.decompose_error(psis, params, K)
    row = {
        "psi1_term": psis.psi1_term,
        "psi2_v": psis.psi2_v,
        "psi3_v": psis.psi3_v,
        "psi2_e": psis.psi2_e,
        "psi3_e": psis.psi3_e,
        "psi2_d": psis.psi2_d,
        "noise": dec.noise,
        "init": dec.init,
        "samp": dec.samp,
        "bias": dec.bias,
        "total": dec.total,
        "q_star": sp.q,
        "r_star": sp.r,
    }
    if variant == "divide_conquer":
        row["mean"] = theory.divide_conquer_error(params, K)
    else:
        row["mean"] = theory.ensemble_error(psis, params, K)
    row["std_error"] = 0.0

    study = spec.fixed.get("study")
    if study == "ens_vs_over":
        import dataclasses

        doubled = dataclasses.replace(params, psi1=2.0 * params.psi1)
        row["err_k1"] = theory.ensemble_error(psis, params, 1)
        row["err_k2"] = theory.ensemble_error(psis, params, 2)
        row["err_k1_doubled"] = theory.ensemble_error(
            theory.psi_terms(doubled), doubled, 1
        )
    elif study == "ens_vs_reg":
        import dataclasses

        low = dataclasses.replace(params, lam=1e-5)
        row["err_k1"] = theory.ensemble_error(psis, params, 1)
        row["err_kinf_lowreg"] = theory.ensemble_error(
            theory.psi_terms(low), low, math.inf
        )
    elif study == "divide_vs_ensemble":
        row["err_ensemble"] = theory.ensemble_error(psis, params, K)
        row["err_divide"] = theory.divide_conquer_error(params, K)
    return row


def _compare_row(spec: SweepSpec, point: Dict[str, Any], seed: int) -> Dict[str, Any]:
    params = _model_params(spec, point)
    psis = theory.psi_terms(params)
    cfg = _sim_config(spec, point, seed)
    est = simulation.estimate_psi_traces(cfg, n_seeds=int(spec.value("n_seeds", point)))
    row: Dict[str, Any] = {}
    max_z = 0.0
    for name in ("psi1_term", "psi2_v", "psi3_v", "psi2_e", "psi3_e", "psi2_d"):
        t = getattr(psis, name)
        e = est[name]
        z = (t - e.mean) / e.std_error if e.std_error > 0 else math.inf
        row[name] = t
        row[f"{name}_sim"] = e.mean
        row[f"{name}_se"] = e.std_error
        row[f"{name}_z"] = z
        max_z = max(max_z, abs(z))
    row["max_abs_z"] = max_z
    return row


def _sim_row(spec: SweepSpec, point: Dict[str, Any], seed: int) -> Dict[str, Any]:
    cfg = _sim_config(spec, point, seed)
    K = spec.value("K", point)
    if K == math.inf:
        raise ConfigError("K: inf is only meaningful in theory mode")
    est = simulation.ensemble_run(
        cfg,
        K=int(K),
        mode=spec.value("variant", point),
        n_reps=int(spec.value("n_reps", point)),
        n_test=int(spec.value("n_test", point)),
    )
    return {"mean": est.mean, "std_error": est.std_error, "n_reps": est.n_outer}


def _decompose_row(spec: SweepSpec, point: Dict[str, Any], seed: int) -> Dict[str, Any]:
    cfg = _sim_config(spec, point, seed)
    est = simulation.empirical_decomposition(
        cfg,
        n_X=int(spec.value("n_X", point)),
        n_Theta=int(spec.value("n_Theta", point)),
        n_eps=int(spec.value("n_eps", point)),
    )
    row = {
        "noise": est.means.noise,
        "init": est.means.init,
        "samp": est.means.samp,
        "bias": est.means.bias,
        "total": est.means.total,
        "mean": est.means.total,
        "std_error": est.std_errors["total"],
    }
    for k in ("noise", "init", "samp", "bias"):
        row[f"{k}_se"] = est.std_errors[k]
    return row


def evaluate_point(spec: SweepSpec, point: Dict[str, Any], seed: int) -> Dict[str, Any]:
    """One result row; failures are captured as converged=False."""
    base: Dict[str, Any] = dict(point)
    if spec.mode in ("simulate", "decompose", "ensemble", "compare"):
        base["seed"] = seed
    try:
        if spec.mode == "theory":
            out = _theory_row(spec, point)
        elif spec.mode == "compare":
            out = _compare_row(spec, point, seed)
        elif spec.mode == "decompose":
            out = _decompose_row(spec, point, seed)
        else:  # simulate / ensemble
            out = _sim_row(spec, point, seed)
        base.update(out)
        base["converged"] = True
    except (RuntimeError, ValueError, FloatingPointError) as exc:
        base["converged"] = False
        base["error"] = str(exc)
    return base


def _tasks(spec: SweepSpec):
    names = sorted(spec.grid)
    seeds = spec.seeds if spec.mode != "theory" else [spec.seeds[0]]
    for combo in itertools.product(*(spec.grid[n] for n in names)):
        point = dict(zip(names, combo))
        for seed in seeds:
            yield point, seed


def _run_one(args):
    spec, point, seed = args
    return evaluate_point(spec, point, seed)


def run_sweep(spec: SweepSpec, jobs: int = 1) -> List[Dict[str, Any]]:
    """Evaluate every (grid point, seed); rows sorted by grid coordinates."""
    tasks = [(spec, point, seed) for point, seed in _tasks(spec)]
    if jobs > 1 and len(tasks) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_one, tasks))
    else:
        rows = [_run_one(t) for t in tasks]
    names = sorted(spec.grid)
    rows.sort(key=lambda r: tuple(r[n] for n in names) + (r.get("seed", 0),))
    return rows


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def emit(rows: Sequence[Dict[str, Any]], format: str = "csv", path: Optional[str] = None) -> str:
    """Serialize rows; writes to ``path`` if given, returns the text either way.

    CSV uses 17 significant digits and LF endings so deterministic sweeps are
    byte-identical across runs.
    """
    if not rows:
        raise ValueError("no rows to emit")
    if format not in ("csv", "json"):
        raise ValueError(f"format must be csv or json, got {format!r}")
    columns: List[str] = []
    for row in rows:
        for k in row:
            if k not in columns:
                columns.append(k)
    if format == "csv":
        lines = [",".join(columns)]
        for row in rows:
            lines.append(",".join(_fmt(row.get(k, "")) for k in columns))
        text = "\n".join(lines) + "\n"
    else:
        norm = [{k: row.get(k) for k in columns} for row in rows]
        text = json.dumps(norm, indent=1, sort_keys=False) + "\n"
    if path is not None:
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as exc:
            raise IOError(f"cannot write {path}: {exc}") from exc
    return text
