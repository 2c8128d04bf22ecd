"""Config-driven experiment runner.

A plain-text key=value document describes one experiment end to end: the
velocity model, acquisition, solver, prior, method and its knobs, seed, and
output directory.  ``run_experiment`` synthesizes observations, runs the
requested inversion, and persists every artifact (arrays, metrics, trace,
renders) plus a manifest with content hashes.  The written config snapshot
is fully resolved, so re-running from it reproduces the experiment byte for
byte.

Config grammar (one statement per line):

    # comment                 blank lines and #-to-end-of-line are skipped
    key = value               whitespace around key and value is trimmed

Values are parsed per key: int, float, bool (true/false/yes/no/1/0), or
string.  Unknown keys are validation errors, and validation reports every
failing field at once.  All randomness flows from the single ``seed`` through
named sub-streams (noise, init, sampler).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import arrayio
from .baselines import ITERATE_HEADER, DescentConfig, otwe_tv_descent, w2_tv_descent
from .diffusion import FieldScaler, gaussian_score, make_schedule, scale_to_model
from .geometry import Grid, VelocityField, ricker_wavelet, surface_acquisition
from .metrics import psnr, rel_l2_error, ssim
from .misfit import MisfitKind, MisfitSpec
from .samplers import GuidanceConfig, SamplerTrace, dps_sample, otwepdps_sample
from .scorenet import NetConfig, dsm_train, load_checkpoint, save_checkpoint
from .wavesim import SolverConfig, add_noise, forward_operator

__all__ = [
    "ConfigError",
    "ExperimentError",
    "ExperimentConfig",
    "parse_config_text",
    "run_experiment",
    "simulate_observations",
    "train_prior",
]

_METHODS = ("dps", "otwepdps", "w2tv", "otwetv")


class ConfigError(ValueError):
    """Invalid configuration; message lists every failing field."""


class ExperimentError(RuntimeError):
    """A validated experiment failed at runtime; manifest records the cause."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default); None default means required (per verb, see below)
_SCHEMA = {
    "method": (str, None),
    "model": (str, None),
    "model_index": (int, 0),
    "output": (str, None),
    "seed": (int, 0),
    "noise_sigma": (float, 0.0),
    "dx": (float, 10.0),
    "dz": (float, 10.0),
    "n_sources": (int, 3),
    "source_stride": (int, 1),
    "depth_offset": (int, 0),
    "nt": (int, None),
    "dt": (float, None),
    "peak_frequency": (float, 15.0),
    "wavelet_delay": (float, -1.0),  # negative means the wavelet default
    "pml_width": (int, 6),
    "pml_reflection": (float, 1e-3),
    "cfl_safety": (float, 0.9),
    "absorber_speed": (float, 4500.0),
    "jobs": (int, 1),
    "prior": (str, "gaussian"),
    "checkpoint": (str, ""),
    "v_min": (float, 0.0),
    "v_max": (float, 0.0),
    "prior_mu": (float, 0.0),  # 0 means bracket midpoint
    "prior_s2": (float, 0.25),
    "n_steps": (int, 1000),
    "beta_start": (float, 1e-4),
    "beta_end": (float, 0.02),
    "rho0": (float, 1.0),
    "c": (float, 0.1),
    "tau": (float, 0.0),
    "gamma": (float, 0.5),
    "eps": (float, 1e-6),
    "kappa_max": (float, 1e3),
    "zeta": (float, 1.0),
    "chain_rule": (str, "exact_vjp"),
    "misfit_k": (float, 100.0),
    "n_quantile": (int, 1000),
    "sigma_weight": (float, 1.0),
    "tv_weight": (float, 0.0),
    "max_iters": (int, 50),
    "preconditioned": (_parse_bool, False),
    "v_floor": (float, 300.0),
    "v_ceil": (float, 6000.0),
    "init_velocity": (float, 0.0),  # 0 means bracket midpoint
    "init_jitter": (float, 0.0),
}

_ALWAYS_REQUIRED = ("model", "output", "nt", "dt")


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key=value extraction; duplicate keys keep the last assignment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved, typed experiment settings."""

    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def from_mapping(cls, raw: dict[str, str], overrides: dict[str, str] | None = None,
                     need_method: bool = True) -> "ExperimentConfig":
        merged = dict(raw)
        if overrides:
            merged.update(overrides)
        problems = []
        values = {}
        for key, text in merged.items():
            if key not in _SCHEMA:
                problems.append(f"{key}: unknown key")
                continue
            parser, _ = _SCHEMA[key]
            try:
                values[key] = parser(text) if isinstance(text, str) else text
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
        for key, (_, default) in _SCHEMA.items():
            values.setdefault(key, default)
        problems.extend(_validate(values, need_method))
        if problems:
            raise ConfigError("invalid config: " + "; ".join(sorted(problems)))
        return cls(values)

    @classmethod
    def from_file(cls, path, overrides: dict[str, str] | None = None,
                  need_method: bool = True) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_mapping(parse_config_text(text), overrides, need_method)

    def snapshot_text(self) -> str:
        lines = [f"{key} = {self.values[key]}" for key in sorted(self.values) if self.values[key] is not None]
        return "\n".join(lines) + "\n"

    def seed_for(self, stream: str) -> int:
        order = {"noise": 0, "init": 1, "sampler": 2}
        child = np.random.SeedSequence(entropy=self.seed, spawn_key=(order[stream],))
        return int(child.generate_state(1)[0])


def _validate(v: dict, need_method: bool) -> list[str]:
    problems = []
    for key in _ALWAYS_REQUIRED:
        if v.get(key) is None:
            problems.append(f"{key}: required")
    method = v.get("method")
    if need_method:
        if method is None:
            problems.append("method: required")
        elif method not in _METHODS:
            problems.append(f"method: must be one of {_METHODS}")
    if v["model"] is not None and not Path(v["model"]).exists():
        problems.append(f"model: file {v['model']} does not exist")
    for key in ("dx", "dz"):
        if v[key] <= 0:
            problems.append(f"{key}: must be positive")
    if v["dt"] is not None and v["dt"] <= 0:
        problems.append("dt: must be positive")
    if v["nt"] is not None and v["nt"] < 1:
        problems.append("nt: must be >= 1")
    if v["noise_sigma"] < 0:
        problems.append("noise_sigma: must be >= 0")
    if v["jobs"] < 1:
        problems.append("jobs: must be >= 1")
    if method in ("dps", "otwepdps"):
        if v["prior"] not in ("gaussian", "checkpoint"):
            problems.append("prior: must be gaussian or checkpoint")
        elif v["prior"] == "checkpoint":
            if not v["checkpoint"]:
                problems.append("checkpoint: required when prior = checkpoint")
            elif not Path(v["checkpoint"]).exists():
                problems.append(f"checkpoint: file {v['checkpoint']} does not exist")
        else:
            if not (0 < v["v_min"] < v["v_max"]):
                problems.append("v_min/v_max: need 0 < v_min < v_max for the gaussian prior")
    if method in ("w2tv", "otwetv"):
        if not (0 < v["v_floor"] < v["v_ceil"]):
            problems.append("v_floor/v_ceil: need 0 < v_floor < v_ceil")
        if v["rho0"] <= 0:
            problems.append("rho0: must be positive for descent methods")
        if v["max_iters"] < 1:
            problems.append("max_iters: must be >= 1")
    return problems


def _load_model(config) -> np.ndarray:
    arr = arrayio.npy_read(config.model)
    if arr.ndim == 3:
        if not (0 <= config.model_index < arr.shape[0]):
            raise ConfigError(f"model_index: {config.model_index} outside stack of {arr.shape[0]}")
        arr = arr[config.model_index]
    return np.asarray(arr, dtype=np.float64)


def _output_dir(config) -> Path:
    out = Path(config.output)
    if not out.is_absolute():
        out = Path(os.environ.get("OTFWI_OUTPUT_ROOT", ".")) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _solver_config(config) -> SolverConfig:
    return SolverConfig(
        pml_width=config.pml_width,
        pml_reflection_target=config.pml_reflection,
        cfl_safety=config.cfl_safety,
        absorber_reference_speed=config.absorber_speed,
    )


def _acquisition(config, grid: Grid):
    geometry = surface_acquisition(
        grid, config.n_sources, config.source_stride, config.depth_offset,
        nt=config.nt, dt=config.dt,
    )
    delay = None if config.wavelet_delay < 0 else config.wavelet_delay
    wavelet = ricker_wavelet(config.peak_frequency, config.nt, config.dt, delay)
    return geometry, wavelet


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(outdir: Path, status: str, method, error: str | None) -> dict:
    artifacts = {
        p.name: _sha256(p)
        for p in sorted(outdir.iterdir())
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {"status": status, "method": method, "error": error, "artifacts": artifacts}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _render_triple(outdir: Path, v_true: np.ndarray, v_rec: np.ndarray) -> None:
    lo, hi = float(v_true.min()), float(v_true.max())
    if lo == hi:
        hi = lo + 1.0
    arrayio.render_field(v_true, outdir / "v_true.pgm", (lo, hi))
    arrayio.render_field(v_rec, outdir / "v_rec.pgm", (lo, hi))
    diff = v_rec - v_true
    span = max(float(np.abs(diff).max()), 1e-12)
    arrayio.render_field(diff, outdir / "v_diff.pgm", (-span, span))


def simulate_observations(config: ExperimentConfig, outdir: Path | None = None):
    """Forward-model the configured truth and write v_true / d_obs arrays."""
    v_arr = _load_model(config)
    grid = Grid(v_arr.shape[0], v_arr.shape[1], config.dx, config.dz)
    v_true = VelocityField(grid, v_arr)
    geometry, wavelet = _acquisition(config, grid)
    solver = _solver_config(config)
    gather = forward_operator(v_true, geometry, wavelet, solver, jobs=config.jobs)
    if config.noise_sigma > 0:
        gather = add_noise(gather, config.noise_sigma, config.seed_for("noise"))
    if outdir is not None:
        arrayio.npy_write(outdir / "v_true.npy", v_arr)
        arrayio.npy_write(outdir / "d_obs.npy", gather.values)
    return v_true, gather, geometry, wavelet, solver


def _build_prior(config, v_arr):
    if config.prior == "checkpoint":
        model, scaler = load_checkpoint(config.checkpoint)
        return model, scaler, model.schedule
    scaler = FieldScaler(config.v_min, config.v_max)
    schedule = make_schedule(config.n_steps, config.beta_start, config.beta_end)
    mu_phys = config.prior_mu if config.prior_mu > 0 else 0.5 * (config.v_min + config.v_max)
    mu_model = scale_to_model(np.full(v_arr.shape, mu_phys), scaler)
    return gaussian_score(mu_model, config.prior_s2, schedule), scaler, schedule


def _misfit_spec(config, kind: MisfitKind) -> MisfitSpec:
    return MisfitSpec(kind=kind, k=config.misfit_k, n_quantile=config.n_quantile,
                      sigma_weight=config.sigma_weight)


def _guidance_config(config, kind: MisfitKind) -> GuidanceConfig:
    return GuidanceConfig(
        rho0=config.rho0, c=config.c, tau=config.tau, gamma=config.gamma,
        eps=config.eps, kappa_max=config.kappa_max, zeta=config.zeta,
        misfit=_misfit_spec(config, kind), chain_rule=config.chain_rule,
    )


def _descent_config(config) -> DescentConfig:
    return DescentConfig(
        rho0=config.rho0, tv_weight=config.tv_weight, max_iters=config.max_iters,
        preconditioned=config.preconditioned, gamma=config.gamma, eps=config.eps,
        kappa_max=config.kappa_max, c=config.c, tau=config.tau,
        v_floor=config.v_floor, v_ceil=config.v_ceil, k=config.misfit_k,
        n_quantile=config.n_quantile,
    )


def _descent_init(config, grid) -> VelocityField:
    base = config.init_velocity if config.init_velocity > 0 else 0.5 * (config.v_floor + config.v_ceil)
    values = np.full(grid.shape, base)
    if config.init_jitter > 0:
        rng = np.random.default_rng(config.seed_for("init"))
        values = values + config.init_jitter * rng.uniform(-1.0, 1.0, grid.shape)
    return VelocityField(grid, np.clip(values, config.v_floor, config.v_ceil))


def _write_trace(outdir: Path, header, rows) -> None:
    arrayio.write_csv(outdir / "trace.csv", header, rows)


def run_experiment(config: ExperimentConfig) -> dict:
    """Run one configured inversion; returns the manifest dict.

    Artifacts land in the output directory as they are produced, so a runtime
    failure still leaves the config snapshot, observations, and an error
    manifest behind (and raises ExperimentError).
    """
    outdir = _output_dir(config)
    (outdir / "config.txt").write_text(config.snapshot_text())
    try:
        v_true, gather, geometry, wavelet, solver = simulate_observations(config, outdir)
        grid = geometry.grid
        method = config.method
        if method in ("dps", "otwepdps"):
            model, scaler, schedule = _build_prior(config, v_true.values)
            if method == "dps":
                guidance = _guidance_config(config, MisfitKind.MSE)
                v_rec, trace = dps_sample(
                    gather, model, schedule, geometry, wavelet, solver, guidance,
                    config.seed_for("sampler"), scaler=scaler, v_true=v_true,
                    jobs=config.jobs,
                )
            else:
                guidance = _guidance_config(config, MisfitKind.OT_ENHANCED)
                v_rec, trace = otwepdps_sample(
                    gather, model, schedule, geometry, wavelet, solver, guidance,
                    config.seed_for("sampler"), scaler=scaler, v_true=v_true,
                    jobs=config.jobs,
                )
            _write_trace(outdir, SamplerTrace.HEADER, trace.columns())
        else:
            v_init = _descent_init(config, grid)
            descent = _descent_config(config)
            runner = w2_tv_descent if method == "w2tv" else otwe_tv_descent
            v_rec, log = runner(
                v_init, gather, geometry, wavelet, solver, descent,
                v_true=v_true, jobs=config.jobs,
            )
            _write_trace(outdir, ITERATE_HEADER,
                         [[r.step, r.objective, r.misfit, r.tv, r.e_l2, r.psnr, r.ssim]
                          for r in log])

        arrayio.npy_write(outdir / "v_rec.npy", v_rec.values)
        record = [
            rel_l2_error(v_rec.values, v_true.values),
            psnr(v_rec.values, v_true.values),
            ssim(v_rec.values, v_true.values) if min(grid.shape) >= 11 else float("nan"),
        ]
        arrayio.write_csv(outdir / "metrics.csv", ("e_l2", "psnr", "ssim"), [record])
        _render_triple(outdir, v_true.values, v_rec.values)
    except ConfigError:
        raise
    except Exception as exc:
        _write_manifest(outdir, "error", config.values.get("method"), f"{type(exc).__name__}: {exc}")
        raise ExperimentError(f"experiment failed: {exc}") from exc
    return _write_manifest(outdir, "ok", config.method, None)


def train_prior(
    dataset: str | Path,
    output: str | Path,
    *,
    epochs: int = 200,
    seed: int = 0,
    net: NetConfig = NetConfig(),
    n_steps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> Path:
    """Fit a score checkpoint on a directory of 2D NPY models or one 3D stack.

    The scaler bracket is the dataset's min/max; samples are normalized with
    it before training.
    """
    path = Path(dataset)
    if path.is_dir():
        files = sorted(path.glob("*.npy"))
        if not files:
            raise ConfigError(f"dataset: no .npy files under {path}")
        stacks = [arrayio.npy_read(f) for f in files]
        fields = []
        for f, arr in zip(files, stacks):
            if arr.ndim == 2:
                fields.append(arr)
            else:
                fields.extend(arr[i] for i in range(arr.shape[0]))
        del stacks
    else:
        arr = arrayio.npy_read(path)
        if arr.ndim != 3:
            raise ConfigError("dataset: a single file must be a 3D stack")
        fields = [arr[i] for i in range(arr.shape[0])]
    shapes = {f.shape for f in fields}
    if len(shapes) != 1:
        raise ConfigError(f"dataset: inconsistent model shapes {sorted(shapes)}")
    if len(fields) < 2:
        raise ConfigError("dataset: need at least 2 models")
    data = np.asarray(fields, dtype=np.float64)
    scaler = FieldScaler(float(data.min()), float(data.max()))
    normalized = scale_to_model(data, scaler)
    schedule = make_schedule(n_steps, beta_start, beta_end)
    model = dsm_train(normalized, schedule, net, epochs, seed)
    out = Path(output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model, scaler)
    return out
