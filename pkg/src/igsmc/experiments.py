"""Reproducible experiment runner with CSV/JSON/SVG outputs.

Each experiment resolves a fully-populated configuration document (defaults
merged with a user config and CLI overrides), writes a manifest before any
work starts, runs its replicates (optionally across processes), and emits:

* ``diagnostics.csv``  -- population, phi, ess, acceptance_rate, resampled,
                          jitter_events
* ``particles.csv``    -- population, particle_index, weight, one column per
                          parameter
* ``summary.json``     -- weighted means/sds, correlation matrix (row-major),
                          per-population diagnostics, config echo, seed
* best-effort SVG plots (ESS traces, marginal histograms).

Available experiments: geodesic-ess, uni-infer, uni-drift, fn-infer,
fn-drift, lv-infer, kernel-robustness, ess-trace.
"""

from __future__ import annotations

import copy
import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import ConfigurationError, SingularMetricError, data_rng, geometric_schedule
from .geodesic import GaussianPoint, geodesic_between, straight_line_path, two_stage_path
from .kernels import AdaptiveMVNKernel, MmalaKernel, UniformRWKernel, mmala_drift_rate
from .metric import NoiseModel, PriorSpec
from .models import OdeModel, UnivariateGaussianModel
from .ode import fitzhugh_nagumo_system, lotka_volterra_system
from .smc import GaussianPathSequence, SmcConfig, SmcResult, TemperedSequence, run, summarize

EXPERIMENT_NAMES = (
    "geodesic-ess",
    "uni-infer",
    "uni-drift",
    "fn-infer",
    "fn-drift",
    "lv-infer",
    "kernel-robustness",
    "ess-trace",
)

_UNI_PARAMS = {
    "n_data": 60,
    "true_mu": 50.0,
    "true_sigma": 10.0,
    "u1": 50.0,
    "v1": 20.0,
    "u2": 10.0,
    "v2": 2.5,
    "n_populations": 45,
    "phi2": 5e-4,
}

_FN_PARAMS = {
    "x0": [-1.0, 1.0],
    "truth": [0.2, 0.2, 3.0],
    "noise_var": 0.05,
    "n_obs": 25,
    "horizon": 10.0,
    "prior": "mvn",
    "prior_sd": [0.3, 0.3, 1.5],
    "uniform_limits": [[0.0, 1.0], [0.0, 1.0], [0.0, 7.0]],
    "n_populations": 50,
    "phi2": 5e-4,
}

_LV_PARAMS = {
    "x0": [15.0, 30.0],
    "truth": [8.0, 0.5, 0.2, 0.01],
    "noise_var": 0.4,
    "n_obs": 25,
    "horizon": 2.0,
    "prior": "mvn",
    "prior_sd": [2.0, 0.1, 0.05, 0.004],
    "uniform_limits": [[0.0, 16.0], [0.0, 1.0], [0.0, 0.4], [0.0, 0.02]],
    "n_populations": 30,
    "phi2": 5e-4,
}

_DEFAULTS = {
    "geodesic-ess": {
        "replicates": 10,
        "params": {
            "start": [0.0, 1.0],
            "target": [5.0, 3.0],
            "n_distributions": 25,
            "rw_width": 0.8,
            "pairing": "diagonal",
            "paths": ["geodesic", "straight", "two_stage"],
        },
        "smc": {"n_particles": 500, "ess_fraction": 0.0, "weight_mode": "full_kernel"},
        "kernel": {"type": "rw_uniform"},
    },
    "uni-infer": {
        "replicates": 1,
        "params": dict(_UNI_PARAMS),
        "smc": {"n_particles": 1500, "ess_fraction": 0.3},
        "kernel": {"type": "mmala", "epsilon": 0.4, "variant": "euler", "drift_form": "expanded"},
    },
    "uni-drift": {
        "replicates": 1,
        "params": dict(
            _UNI_PARAMS,
            combos=[[10, 0.4], [45, 0.4], [500, 0.4], [45, 0.1], [45, 0.7]],
            grid_mu=[38.0, 62.0, 6],
            grid_sigma=[5.0, 15.0, 4],
            drift_form="expanded",
        ),
        "smc": {"n_particles": 24},
        "kernel": {"type": "mmala", "epsilon": 0.4, "variant": "euler", "drift_form": "expanded"},
    },
    "fn-infer": {
        "replicates": 1,
        "params": dict(_FN_PARAMS),
        "smc": {"n_particles": 1000, "ess_fraction": 0.3},
        "kernel": {"type": "mmala", "epsilon": 0.6, "variant": "euler", "drift_form": "expanded"},
    },
    "fn-drift": {
        "replicates": 1,
        "params": dict(
            _FN_PARAMS,
            priors=["mvn", "uniform"],
            grid_a=[0.05, 0.4, 4],
            grid_b=[0.05, 0.4, 3],
            grid_c=[2.0, 4.0, 2],
            drift_form="expanded",
        ),
        "smc": {"n_particles": 24},
        "kernel": {"type": "mmala", "epsilon": 0.6, "variant": "euler", "drift_form": "expanded"},
    },
    "lv-infer": {
        "replicates": 1,
        "params": dict(_LV_PARAMS),
        "smc": {"n_particles": 1000, "ess_fraction": 0.3},
        "kernel": {"type": "mmala", "epsilon": 0.5, "variant": "euler", "drift_form": "expanded"},
    },
    "kernel-robustness": {
        "replicates": 27,
        "params": dict(_LV_PARAMS, populations=[15, 30], kernels=["mmala", "adaptive"]),
        "smc": {"n_particles": 1000, "ess_fraction": 0.3},
        "kernel": {"type": "mmala", "epsilon": 0.5, "variant": "euler", "drift_form": "expanded"},
    },
    "ess-trace": {
        "replicates": 1,
        "params": dict(_LV_PARAMS, kernels=["mmala", "adaptive"]),
        "smc": {"n_particles": 1000, "ess_fraction": 0.3},
        "kernel": {"type": "mmala", "epsilon": 0.5, "variant": "euler", "drift_form": "expanded"},
    },
}


@dataclass
class ExperimentSpec:
    """A fully resolved experiment description."""

    name: str
    seed: int
    out_dir: str
    replicates: int
    threads: int
    params: dict
    smc: dict
    kernel: dict

    def to_dict(self) -> dict:
        return {
            "experiment": self.name,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "replicates": self.replicates,
            "threads": self.threads,
            "params": copy.deepcopy(self.params),
            "smc": copy.deepcopy(self.smc),
            "kernel": copy.deepcopy(self.kernel),
        }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_spec(config=None, *, experiment=None, seed=None, out_dir=None,
              replicates=None, threads=None) -> ExperimentSpec:
    """Resolve an experiment spec from defaults, a config document and overrides.

    Args:
        config: Path to a JSON document, or an already-parsed dict, or None.
        experiment, seed, out_dir, replicates, threads: Explicit overrides
            (these win over the config document).
    """
    doc = {}
    if config is not None:
        if isinstance(config, (str, Path)):
            with open(config, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        else:
            doc = copy.deepcopy(dict(config))
    name = experiment or doc.get("experiment")
    if name not in EXPERIMENT_NAMES:
        raise ConfigurationError(
            f"unknown experiment {name!r}; choose one of {', '.join(EXPERIMENT_NAMES)}"
        )
    base = {
        "experiment": name,
        "seed": 0,
        "out_dir": f"runs/{name}",
        "threads": 1,
        "replicates": _DEFAULTS[name]["replicates"],
        "params": _DEFAULTS[name]["params"],
        "smc": _DEFAULTS[name]["smc"],
        "kernel": _DEFAULTS[name]["kernel"],
    }
    doc = _merge(base, doc)
    if seed is not None:
        doc["seed"] = int(seed)
    if out_dir is not None:
        doc["out_dir"] = str(out_dir)
    if replicates is not None:
        doc["replicates"] = int(replicates)
    if threads is not None:
        doc["threads"] = int(threads)
    if doc["replicates"] < 1:
        raise ConfigurationError("replicates must be >= 1")
    return ExperimentSpec(
        name=name,
        seed=int(doc["seed"]),
        out_dir=doc["out_dir"],
        replicates=int(doc["replicates"]),
        threads=max(1, int(doc["threads"])),
        params=doc["params"],
        smc=doc["smc"],
        kernel=doc["kernel"],
    )


def replicate_seed(seed: int, replicate: int, salt: int = 0) -> int:
    """Deterministic per-replicate seed independent of scheduling order."""
    ss = np.random.SeedSequence((int(seed), 7919, int(salt), int(replicate)))
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Output emission
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def emit_diagnostics_csv(path, diagnostics) -> None:
    """Per-population diagnostics with the fixed column contract."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["population", "phi", "ess", "acceptance_rate", "resampled",
                         "jitter_events"])
        for d in diagnostics:
            writer.writerow([
                d.population, _fmt(d.phi), _fmt(d.ess), _fmt(d.acceptance_rate),
                _fmt(d.resampled), d.jitter_events,
            ])


def emit_particles_csv(path, history, labels) -> None:
    """Every population's weighted particles, one row per particle."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["population", "particle_index", "weight", *labels])
        for a, (positions, weights) in enumerate(history, start=1):
            for idx in range(positions.shape[0]):
                writer.writerow([
                    a, idx, _fmt(weights[idx]),
                    *(_fmt(v) for v in np.atleast_1d(positions[idx])),
                ])


def emit_summary_json(path, result: SmcResult, spec_echo: dict, labels, extra=None) -> None:
    stats = summarize(result)
    payload = {
        "parameters": list(labels),
        "mean": [float(v) for v in stats["mean"]],
        "sd": [float(v) for v in stats["sd"]],
        "correlation_row_major": [float(v) for v in stats["correlation"].ravel()],
        "diagnostics": [
            {
                "population": d.population,
                "phi": None if np.isnan(d.phi) else float(d.phi),
                "ess": float(d.ess),
                "acceptance_rate": None if np.isnan(d.acceptance_rate) else float(d.acceptance_rate),
                "resampled": bool(d.resampled),
                "jitter_events": int(d.jitter_events),
                "integration_failures": int(d.integration_failures),
            }
            for d in result.diagnostics
        ],
        "config": spec_echo,
        "seed": int(result.seed),
    }
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _plot_ess_traces(path, traces: dict) -> None:
    """Best-effort SVG of ESS against population index (one line per label)."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 4))
        for label, trace in traces.items():
            ax.plot(range(1, len(trace) + 1), trace, marker="o", ms=3, label=label)
        ax.set_xlabel("population")
        ax.set_ylabel("ESS")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    except Exception:
        pass  # plots never affect the run outcome


def _plot_marginals(path, positions, weights, labels) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        k = len(labels)
        fig, axes = plt.subplots(1, k, figsize=(3.2 * k, 3))
        axes = np.atleast_1d(axes)
        for j, label in enumerate(labels):
            axes[j].hist(positions[:, j], bins=40, weights=weights, color="tab:red")
            axes[j].set_xlabel(label)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    except Exception:
        pass


# ---------------------------------------------------------------------------
# Model and kernel builders
# ---------------------------------------------------------------------------

def build_univariate_model(params: dict, seed: int) -> UnivariateGaussianModel:
    """Univariate normal inference model with freshly simulated observations."""
    rng = data_rng(seed)
    data = rng.normal(params["true_mu"], params["true_sigma"], size=int(params["n_data"]))
    return UnivariateGaussianModel(data, params["u1"], params["v1"], params["u2"], params["v2"])


def _ode_prior(params: dict, truth) -> PriorSpec:
    if params.get("prior", "mvn") == "uniform":
        limits = np.asarray(params["uniform_limits"], dtype=float)
        return PriorSpec.uniform(limits[:, 0], limits[:, 1])
    sd = np.asarray(params["prior_sd"], dtype=float)
    return PriorSpec.mvn(np.asarray(truth, dtype=float), np.diag(sd * sd))


def _build_ode_model(system, params: dict, seed: int) -> OdeModel:
    truth = np.asarray(params["truth"], dtype=float)
    horizon = float(params["horizon"])
    n_obs = int(params["n_obs"])
    times = np.linspace(horizon / n_obs, horizon, n_obs)
    noise = NoiseModel(sigma=np.full(system.n_states, np.sqrt(params["noise_var"])))
    model = OdeModel(
        system, params["x0"], times, np.zeros((n_obs, system.n_states)), noise,
        _ode_prior(params, truth), t0=0.0, positivity=True,
    )
    model.data = model.simulate_data(truth, data_rng(seed))
    return model


def build_fn_model(params: dict, seed: int) -> OdeModel:
    """Fitzhugh-Nagumo inference model with simulated observations."""
    return _build_ode_model(fitzhugh_nagumo_system(), params, seed)


def build_lv_model(params: dict, seed: int) -> OdeModel:
    """Lotka-Volterra inference model with simulated observations."""
    return _build_ode_model(lotka_volterra_system(), params, seed)


def build_kernel(kernel_cfg: dict, steps: int = 1):
    kind = kernel_cfg.get("type", "mmala")
    if kind == "mmala":
        return MmalaKernel(
            epsilon=float(kernel_cfg.get("epsilon", 0.5)),
            variant=kernel_cfg.get("variant", "euler"),
            drift_form=kernel_cfg.get("drift_form", "expanded"),
            steps=steps,
        )
    if kind == "adaptive":
        return AdaptiveMVNKernel(steps=steps)
    if kind == "rw_uniform":
        return UniformRWKernel(width=float(kernel_cfg.get("width", 1.0)), steps=steps)
    raise ConfigurationError(f"unknown kernel type {kind!r}")


def _smc_config(spec: ExperimentSpec, seed: int, **overrides) -> SmcConfig:
    merged = dict(spec.smc)
    merged.update(overrides)
    merged["seed"] = seed
    merged.setdefault("mcmc_steps", 1)
    return SmcConfig(**merged)


# ---------------------------------------------------------------------------
# Drift-only runs (deterministic natural-gradient flow along the schedule)
# ---------------------------------------------------------------------------

def drift_only_run(model, schedule, epsilon: float, starts, drift_form: str = "expanded"):
    """Iterate the mMALA drift with the diffusion zeroed and no MH step.

    Every particle follows xi <- xi + eps^2 b(xi, phi_a) through the schedule.
    A particle whose metric turns singular (or whose trajectory integration
    fails) is frozen in place and its truncation population recorded.

    Returns:
        (paths, truncated_at): paths has shape (p, n_particles, D);
        truncated_at[i] is the 1-based population where particle i froze,
        or 0 if it never did.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    n, d = starts.shape
    p = len(schedule)
    paths = np.empty((p, n, d))
    paths[0] = starts
    truncated_at = np.zeros(n, dtype=int)
    positions = starts.copy()
    for a in range(1, p):
        phi = float(schedule.phis[a])
        for i in range(n):
            if truncated_at[i]:
                continue
            try:
                prep = model.prepare(positions[i], order=2)
                b, _, _ = mmala_drift_rate(model, positions[i], phi,
                                           drift_form=drift_form, prep=prep)
                step = epsilon * epsilon * b
                new = positions[i] + step
                if not np.all(np.isfinite(new)):
                    raise SingularMetricError("drift diverged")
                positions[i] = new
            except Exception:
                truncated_at[i] = a + 1
        paths[a] = positions
    return paths, truncated_at


def _drift_csv(path, paths, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["population", "particle_index", *labels])
        for a in range(paths.shape[0]):
            for i in range(paths.shape[1]):
                writer.writerow([a + 1, i, *(_fmt(v) for v in paths[a, i])])


# ---------------------------------------------------------------------------
# Experiment implementations
# ---------------------------------------------------------------------------

def _uni_grid(params) -> np.ndarray:
    mu_lo, mu_hi, mu_n = params["grid_mu"]
    sd_lo, sd_hi, sd_n = params["grid_sigma"]
    mus = np.linspace(mu_lo, mu_hi, int(mu_n))
    sds = np.linspace(sd_lo, sd_hi, int(sd_n))
    return np.array([(m, s) for m in mus for s in sds])


def _geodesic_paths(params) -> dict:
    p1 = GaussianPoint(*params["start"])
    p2 = GaussianPoint(*params["target"])
    n = int(params["n_distributions"])
    builders = {
        "geodesic": geodesic_between,
        "straight": straight_line_path,
        "two_stage": two_stage_path,
    }
    return {name: builders[name](p1, p2, n) for name in params["paths"]}


def _run_geodesic_ess_replicate(spec_dict: dict, rep: int) -> dict:
    spec = _spec_from_dict(spec_dict)
    out = Path(spec.out_dir)
    kernel = UniformRWKernel(width=float(spec.params["rw_width"]))
    traces = {}
    for path_name, points in _geodesic_paths(spec.params).items():
        seq = GaussianPathSequence(points)
        cfg = _smc_config(spec, replicate_seed(spec.seed, rep),
                          full_kernel_pairing=spec.params.get("pairing", "diagonal"))
        result = run(cfg, seq, kernel)
        rep_dir = out / path_name / f"rep{rep:03d}"
        rep_dir.mkdir(parents=True, exist_ok=True)
        emit_diagnostics_csv(rep_dir / "diagnostics.csv", result.diagnostics)
        emit_particles_csv(rep_dir / "particles.csv", result.history, ["x"])
        emit_summary_json(rep_dir / "summary.json", result, spec.to_dict(), ["x"])
        traces[path_name] = [d.ess for d in result.diagnostics]
    return {"replicate": rep, "traces": traces}


def _run_geodesic_ess(spec: ExperimentSpec) -> list[dict]:
    results = _map_replicates(spec, _run_geodesic_ess_replicate)
    out = Path(spec.out_dir)
    mean_traces = {}
    for path_name in spec.params["paths"]:
        stack = np.array([r["traces"][path_name] for r in results])
        mean_traces[path_name] = stack.mean(axis=0)
        with open(out / f"ess_trace_{path_name}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["population", "mean_ess",
                             *(f"rep{r:03d}" for r in range(stack.shape[0]))])
            for a in range(stack.shape[1]):
                writer.writerow([a + 1, _fmt(stack[:, a].mean()),
                                 *(_fmt(v) for v in stack[:, a])])
    _plot_ess_traces(out / "ess_traces.svg", mean_traces)
    return results


def _run_inference_replicate(spec_dict: dict, rep: int) -> dict:
    spec = _spec_from_dict(spec_dict)
    if spec.name == "uni-infer":
        model = build_univariate_model(spec.params, spec.seed)
        labels = ["mu", "sigma"]
    elif spec.name == "fn-infer":
        model = build_fn_model(spec.params, spec.seed)
        labels = list(model.system.param_names)
    else:
        model = build_lv_model(spec.params, spec.seed)
        labels = list(model.system.param_names)
    schedule = geometric_schedule(int(spec.params["n_populations"]), float(spec.params["phi2"]))
    seq = TemperedSequence(model, schedule)
    kernel = build_kernel(spec.kernel, steps=int(spec.smc.get("mcmc_steps", 1)))
    cfg = _smc_config(spec, replicate_seed(spec.seed, rep))
    result = run(cfg, seq, kernel)

    rep_dir = Path(spec.out_dir) / f"rep{rep:03d}"
    rep_dir.mkdir(parents=True, exist_ok=True)
    emit_diagnostics_csv(rep_dir / "diagnostics.csv", result.diagnostics)
    emit_particles_csv(rep_dir / "particles.csv", result.history, labels)
    emit_summary_json(rep_dir / "summary.json", result, spec.to_dict(), labels)
    final_positions = result.history[-1][0]
    final_weights = result.history[-1][1]
    _plot_marginals(rep_dir / "marginals.svg", final_positions, final_weights, labels)
    _plot_ess_traces(rep_dir / "ess_trace.svg",
                     {"ess": [d.ess for d in result.diagnostics]})
    stats = summarize(result)
    return {"replicate": rep, "mean": stats["mean"].tolist(), "sd": stats["sd"].tolist()}


def _run_uni_drift(spec: ExperimentSpec) -> list[dict]:
    model = build_univariate_model(spec.params, spec.seed)
    grid = _uni_grid(spec.params)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for p, eps in spec.params["combos"]:
        schedule = geometric_schedule(int(p), float(spec.params["phi2"]))
        paths, truncated = drift_only_run(model, schedule, float(eps), grid,
                                          drift_form=spec.params.get("drift_form", "expanded"))
        tag = f"p{int(p)}_eps{eps}"
        _drift_csv(out / f"drift_{tag}.csv", paths, ["mu", "sigma"])
        records.append({
            "populations": int(p),
            "epsilon": float(eps),
            "file": f"drift_{tag}.csv",
            "truncated": int(np.count_nonzero(truncated)),
            "final_mean": paths[-1].mean(axis=0).tolist(),
        })
    with open(out / "drift_summary.json", "w", encoding="utf-8") as fh:
        json.dump({"config": spec.to_dict(), "runs": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return records


def _fn_grid(params) -> np.ndarray:
    a_lo, a_hi, a_n = params["grid_a"]
    b_lo, b_hi, b_n = params["grid_b"]
    c_lo, c_hi, c_n = params["grid_c"]
    pts = [
        (a, b, c)
        for a in np.linspace(a_lo, a_hi, int(a_n))
        for b in np.linspace(b_lo, b_hi, int(b_n))
        for c in np.linspace(c_lo, c_hi, int(c_n))
    ]
    return np.array(pts)


def _run_fn_drift(spec: ExperimentSpec) -> list[dict]:
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = _fn_grid(spec.params)
    schedule = geometric_schedule(int(spec.params["n_populations"]), float(spec.params["phi2"]))
    eps = float(spec.kernel.get("epsilon", 0.6))
    records = []
    for prior_kind in spec.params["priors"]:
        params = dict(spec.params, prior=prior_kind)
        model = build_fn_model(params, spec.seed)
        paths, truncated = drift_only_run(model, schedule, eps, grid,
                                          drift_form=spec.params.get("drift_form", "expanded"))
        _drift_csv(out / f"drift_{prior_kind}.csv", paths, ["a", "b", "c"])
        records.append({
            "prior": prior_kind,
            "file": f"drift_{prior_kind}.csv",
            "truncated": int(np.count_nonzero(truncated)),
        })
    with open(out / "drift_summary.json", "w", encoding="utf-8") as fh:
        json.dump({"config": spec.to_dict(), "runs": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return records


def _run_robustness_case(spec_dict: dict, case: tuple) -> dict:
    kernel_name, n_pops, rep = case
    spec = _spec_from_dict(spec_dict)
    model = build_lv_model(spec.params, spec.seed)
    schedule = geometric_schedule(int(n_pops), float(spec.params["phi2"]))
    seq = TemperedSequence(model, schedule)
    if kernel_name == "mmala":
        kernel = build_kernel(spec.kernel, steps=int(spec.smc.get("mcmc_steps", 1)))
    else:
        kernel = AdaptiveMVNKernel(steps=int(spec.smc.get("mcmc_steps", 1)))
    cfg = _smc_config(spec, replicate_seed(spec.seed, rep, salt=int(n_pops)),
                      store_history=False)
    result = run(cfg, seq, kernel)
    stats = summarize(result)
    return {
        "kernel": kernel_name,
        "populations": int(n_pops),
        "replicate": int(rep),
        "mean": stats["mean"].tolist(),
        "sd": stats["sd"].tolist(),
        "ess": [d.ess for d in result.diagnostics],
        "acceptance": [d.acceptance_rate for d in result.diagnostics],
        "resampled": [bool(d.resampled) for d in result.diagnostics],
    }


def _run_kernel_robustness(spec: ExperimentSpec) -> list[dict]:
    cases = [
        (kernel_name, n_pops, rep)
        for kernel_name in spec.params["kernels"]
        for n_pops in spec.params["populations"]
        for rep in range(spec.replicates)
    ]
    results = _map_cases(spec, _run_robustness_case, cases)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = ("alpha", "beta", "gamma", "delta")
    with open(out / "robustness.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kernel", "populations", "replicate",
                         *(f"mean_{l}" for l in labels)])
        for r in sorted(results, key=lambda r: (r["kernel"], r["populations"], r["replicate"])):
            writer.writerow([r["kernel"], r["populations"], r["replicate"],
                             *(_fmt(v) for v in r["mean"])])
    variances = {}
    for kernel_name in spec.params["kernels"]:
        for n_pops in spec.params["populations"]:
            sel = [r["mean"][0] for r in results
                   if r["kernel"] == kernel_name and r["populations"] == n_pops]
            variances[f"{kernel_name}_p{n_pops}"] = float(np.var(sel, ddof=1)) if len(sel) > 1 else None
    with open(out / "robustness_summary.json", "w", encoding="utf-8") as fh:
        json.dump({"config": spec.to_dict(), "alpha_mean_variance": variances},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return results


def _run_ess_trace(spec: ExperimentSpec) -> list[dict]:
    cases = [(k, int(spec.params["n_populations"]), rep)
             for k in spec.params["kernels"] for rep in range(spec.replicates)]
    results = _map_cases(spec, _run_robustness_case, cases)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ess_acceptance.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kernel", "replicate", "population", "ess", "acceptance_rate",
                         "resampled"])
        for r in sorted(results, key=lambda r: (r["kernel"], r["replicate"])):
            for a, (e, acc, rs) in enumerate(zip(r["ess"], r["acceptance"], r["resampled"])):
                writer.writerow([r["kernel"], r["replicate"], a + 1, _fmt(e), _fmt(acc),
                                 _fmt(rs)])
    _plot_ess_traces(out / "ess_traces.svg",
                     {r["kernel"]: r["ess"] for r in results if r["replicate"] == 0})
    return results


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def _spec_from_dict(doc: dict) -> ExperimentSpec:
    return ExperimentSpec(
        name=doc["experiment"], seed=doc["seed"], out_dir=doc["out_dir"],
        replicates=doc["replicates"], threads=doc["threads"],
        params=doc["params"], smc=doc["smc"], kernel=doc["kernel"],
    )


def _map_replicates(spec: ExperimentSpec, fn) -> list:
    cases = list(range(spec.replicates))
    return _map_cases(spec, fn, cases)


def _map_cases(spec: ExperimentSpec, fn, cases) -> list:
    doc = spec.to_dict()
    if spec.threads > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=spec.threads) as pool:
            return list(pool.map(fn, [doc] * len(cases), cases))
    return [fn(doc, case) for case in cases]


def run_experiment(spec: ExperimentSpec) -> dict:
    """Execute an experiment end to end; returns the manifest.

    The manifest is written before any replicate starts, so a crashed run
    still identifies what was planned; completed work is appended at the end.
    """
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "experiment": spec.name,
        "version": __version__,
        "seed": spec.seed,
        "config": spec.to_dict(),
        "planned_replicates": spec.replicates,
        "completed": [],
    }
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    runner = {
        "geodesic-ess": _run_geodesic_ess,
        "uni-infer": lambda s: _map_replicates(s, _run_inference_replicate),
        "fn-infer": lambda s: _map_replicates(s, _run_inference_replicate),
        "lv-infer": lambda s: _map_replicates(s, _run_inference_replicate),
        "uni-drift": _run_uni_drift,
        "fn-drift": _run_fn_drift,
        "kernel-robustness": _run_kernel_robustness,
        "ess-trace": _run_ess_trace,
    }[spec.name]
    results = runner(spec)

    manifest["completed"] = [
        r.get("replicate", i) if isinstance(r, dict) else i for i, r in enumerate(results)
    ]
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
