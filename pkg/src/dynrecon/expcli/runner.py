"""Pipeline orchestration: system -> embed -> learn -> forecast -> cocycle, plus reports."""
from __future__ import annotations

import csv
import fnmatch
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import tomli

from ..cocycle import (CocycleDivergenceError, growth_rate, lyapunov_spectrum,
                       reconstructed_generator, tangent_generator)
from ..dynsys import DivergenceError, generate_trajectory
from ..embed import DelayParams, delay_embed, drive, reservoir_init
from ..forecast import (ReconstructedSystem, autocorrelation, decorrelation_time, direct_bound,
                        error_direct, error_iterative, guard_ball, mixed_spectrum_diagnostic)
from ..learn import build_feature_map, fit_horizon_models
from .config import ConfigError, ExperimentConfig, stage_seed

MAX_RECONSTRUCTED_DIM = 64      # reservoir cocycles beyond this size are skipped


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def numeric(self) -> bool:
        return isinstance(self.cause, (DivergenceError, CocycleDivergenceError, FloatingPointError))


@dataclass
class RunReport:
    config: dict
    artifacts: list
    timings: dict
    summary: dict
    out_dir: str = ""
    failed_stage: Optional[str] = None

    def to_dict(self) -> dict:
        return {"config": self.config, "artifacts": self.artifacts, "timings": self.timings,
                "summary": self.summary, "failed_stage": self.failed_stage}

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


class _Run:
    def __init__(self, cfg: ExperimentConfig, threads: int):
        self.cfg = cfg
        self.threads = threads
        self.out = Path(cfg.run.out)
        self.artifacts = []
        self.timings = {}
        self.summary = {}

    def stage(self, name, fn, *args):
        t0 = time.perf_counter()
        try:
            return fn(*args)
        except StageError:
            raise
        except Exception as exc:        # re-raised with the stage name attached
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 6)

    def record(self, path: Path):
        self.artifacts.append(str(path.relative_to(self.out)))


def _hyp_params(h, orbit_train):
    kw = {}
    if h.kind == "poly":
        kw["degree"] = h.degree
    elif h.kind == "rbf":
        kw.update(n_centers=h.n_centers, linear=h.linear)
        if h.bandwidth != "auto":
            kw["bandwidth"] = float(h.bandwidth)
    elif h.kind == "fourier":
        kw.update(frequencies=list(h.frequencies), angles=h.angles)
    return kw


def _system_stage(cfg: ExperimentConfig):
    spec = cfg.system.spec()
    obs = cfg.observation.obs()
    seed = stage_seed(cfg.run.seed, "system")
    bundle = generate_trajectory(spec, n_steps=cfg.system.steps, n_transient=cfg.system.transient,
                                 obs=obs, seed=seed)
    if cfg.observation.normalize:
        bundle = bundle.with_observation(obs.normalized(bundle.states))
    return bundle.subsample(cfg.system.lag)


def _ensemble(cfg: ExperimentConfig, n_samples: int) -> np.ndarray:
    """Bundle indices of the evaluation members, shared by all paradigms."""
    fc = cfg.forecast
    lo = max(cfg.embedding.offset(p) for p in cfg.embedding.paradigm) + fc.train
    hi = n_samples - fc.horizon - 1
    rng = np.random.default_rng(stage_seed(cfg.run.seed, "ensemble"))
    return np.sort(rng.choice(np.arange(lo, hi), size=fc.ensemble, replace=False))


def _saturation(values) -> float:
    v = np.asarray(values)
    tail = v[int(0.8 * len(v)):]
    tail = tail[np.isfinite(tail)]
    return float(np.mean(tail)) if len(tail) else float("nan")


def _paradigm_pipeline(run: _Run, p: str, bundle, ens_bundle):
    cfg = run.cfg
    fc, emb = cfg.forecast, cfg.embedding
    d = bundle.observations.shape[1]
    N = fc.horizon
    res = {}

    def embed():
        if p == "delay":
            return delay_embed(bundle, DelayParams(emb.Q, d))
        params = reservoir_init(emb.L, d, emb.lam, seed=stage_seed(cfg.run.seed, "reservoir"))
        return drive(params, bundle.observations, washout=emb.washout)

    orbit = run.stage(f"embed:{p}", embed)
    train = type(orbit)(orbit.paradigm, orbit.states[:fc.train].copy(), orbit.offset,
                        orbit.washout, orbit.params)
    h = cfg.hypothesis[p]
    ens = ens_bundle - orbit.offset

    def learn():
        fmap = build_feature_map(h.kind, orbit.L, train, **_hyp_params(h, train))
        models = {}
        if "iterative" in fc.modes:
            models["iterative"] = fit_horizon_models(bundle, train, fmap, [1], h.ridge_value(),
                                                     fc.holdout)[0]
        if "direct" in fc.modes:
            models["direct"] = fit_horizon_models(bundle, train, fmap, range(N + 1), h.ridge_value(),
                                                  fc.holdout)
        return fmap, models

    fmap, models = run.stage(f"learn:{p}", learn)
    meta = {"paradigm": p, "seeds": _seeds(cfg), "hypothesis_space": {"kind": fmap.kind, "M": fmap.M},
            "normalization": {"offset": list(bundle.obs.offset or ()), "scale": bundle.obs.scale}}
    curves = {}

    def forecast():
        if "iterative" in fc.modes:
            m1 = models["iterative"]
            system = ReconstructedSystem(orbit.params, m1)
            guard = guard_ball(bundle, orbit, fc.guard_factor)
            c = error_iterative(system, bundle, orbit, ens, N, guard=guard, threads=run.threads)
            c.meta.update(meta, delta=m1.delta)
            curves["iterative"] = (c, system)
        if "direct" in fc.modes:
            ms = models["direct"]
            c = error_direct(ms, bundle, orbit, ens, N)
            c.meta.update(meta, delta=ms[1].delta if len(ms) > 1 else ms[0].delta)
            if cfg.analyses.bounds:
                ac = autocorrelation(bundle, N, indices=ens_bundle)
                c.bound = direct_bound(ac, ac.norm)
            curves["direct"] = (c, None)

    run.stage(f"forecast:{p}", forecast)
    for mode, (c, _) in curves.items():
        if cfg.analyses.error_curves:
            path = run.out / "curves" / f"{mode}_{p}.csv"
            c.to_csv(path, str(path) + ".json")
            res[f"{mode}_{p}_files"] = [path, Path(str(path) + ".json")]
        res[f"{mode}.{p}.saturation"] = _saturation(c.values)
        res[f"{mode}.{p}.delta"] = c.meta["delta"]
        res[f"{mode}.{p}.n_diverged"] = int(c.n_diverged[-1])
        if mode == "iterative" and cfg.analyses.slopes:
            fit = growth_rate(c.values[:np.flatnonzero(np.isfinite(c.values))[-1] + 1])
            res[f"iterative.{p}.slope_per_step"] = fit.rate
            res[f"iterative.{p}.slope_window"] = list(fit.window)
        if mode == "direct" and cfg.analyses.diagnostics:
            rho = cfg.system.spec().rho[0] * bundle.stride if cfg.system.kind != "lorenz63" else None
            ac = autocorrelation(bundle, min(N, len(bundle) - 1))
            tau = decorrelation_time(ac) or 0
            start = min(3 * tau, N // 4)
            try:
                rep = mixed_spectrum_diagnostic(c, rho, start=start)
                for k, v in rep.to_dict().items():
                    res[f"diagnostic.{p}.{k}"] = v
            except ValueError as exc:
                res[f"diagnostic.{p}.error"] = str(exc)
    if cfg.analyses.spectra and "iterative" in curves:
        system = curves["iterative"][1]
        if system.d + system.L <= MAX_RECONSTRUCTED_DIM:
            def spectra():
                n = min(cfg.analyses.spectrum_steps, len(orbit))
                gen = reconstructed_generator(system, orbit, bundle, 0, n)
                return lyapunov_spectrum(gen, refactor_every=cfg.analyses.refactor_every)
            sp = run.stage(f"spectra:{p}", spectra)
            path = run.out / "spectra" / f"reconstructed_{p}.csv"
            sp.to_csv(path)
            sp.to_json(run.out / "spectra" / f"reconstructed_{p}.json")
            res[f"reconstructed_{p}_files"] = [path, run.out / "spectra" / f"reconstructed_{p}.json"]
            res[f"spectrum.{p}.per_time"] = sp.per_time.tolist()
    return res


def _seeds(cfg: ExperimentConfig) -> dict:
    return {"master": cfg.run.seed, **{s: stage_seed(cfg.run.seed, s)
                                       for s in ("system", "reservoir", "ensemble")}}


def run_experiment(cfg: ExperimentConfig, threads: Optional[int] = None) -> RunReport:
    """Execute the configured stages and write curves, spectra and ``report.json``.

    Outputs depend only on the config (including its master seed), never on
    the thread count.  A failing stage raises :class:`StageError` after the
    partial report has been written.
    """
    threads = threads or cfg.run.threads
    run = _Run(cfg, threads)
    for sub in ("curves", "spectra"):
        (run.out / sub).mkdir(parents=True, exist_ok=True)
    echo = run.out / "config.toml"
    echo.write_text(cfg.to_toml())
    run.record(echo)
    failed = None
    try:
        bundle = run.stage("system", _system_stage, cfg)
        ens = _ensemble(cfg, len(bundle))
        paradigms = list(cfg.embedding.paradigm)
        if threads > 1 and len(paradigms) > 1:
            with ThreadPoolExecutor(max_workers=min(threads, len(paradigms))) as ex:
                results = list(ex.map(lambda p: _paradigm_pipeline(run, p, bundle, ens), paradigms))
        else:
            results = [_paradigm_pipeline(run, p, bundle, ens) for p in paradigms]
        if cfg.analyses.spectra:
            def base_spectrum():
                n = min(cfg.analyses.spectrum_steps, len(bundle))
                return lyapunov_spectrum(tangent_generator(bundle, n),
                                         refactor_every=cfg.analyses.refactor_every)
            sp = run.stage("spectra:base", base_spectrum)
            sp.to_csv(run.out / "spectra" / "base.csv")
            sp.to_json(run.out / "spectra" / "base.json")
            run.record(run.out / "spectra" / "base.csv")
            run.record(run.out / "spectra" / "base.json")
            run.summary["spectrum.base.per_time"] = sp.per_time.tolist()
            lam1 = float(sp.exponents[0])
            for p in paradigms:
                key = f"iterative.{p}.slope_per_step"
                for r in results:
                    if key in r and lam1 > 0:
                        r[f"iterative.{p}.slope_ratio"] = r[key] / lam1
        for r in results:
            for k, v in r.items():
                if k.endswith("_files"):
                    for pth in v:
                        run.record(pth)
                else:
                    run.summary[k] = v
    except StageError as exc:
        failed = exc
    run.artifacts.sort()
    report = RunReport(cfg.to_dict(), run.artifacts, dict(sorted(run.timings.items())),
                       _jsonable(dict(sorted(run.summary.items()))), str(run.out),
                       None if failed is None else failed.stage)
    report.write(run.out / "report.json")
    if failed is not None:
        raise failed
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# comparison

class IncompatibleReports(ValueError):
    pass


@dataclass
class Comparison:
    diffs: dict
    tolerances: dict
    structural: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"ok": self.ok, "diffs": self.diffs, "structural": self.structural,
                "failures": self.failures}


def load_tolerances(path) -> dict:
    """TOML with an optional ``default`` and a ``[metrics]`` table of glob -> tolerance."""
    try:
        raw = tomli.loads(Path(path).read_text())
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read tolerances {path}: {exc}") from None
    unknown = set(raw) - {"default", "metrics"}
    if unknown:
        raise ConfigError(f"unknown tolerance keys {sorted(unknown)}")
    return {"default": float(raw.get("default", 0.0)), "metrics": dict(raw.get("metrics", {}))}


def _rel(a, b) -> float:
    a, b = float(a), float(b)
    if a == b:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def _read_curve(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([float(r["rms_error"]) for r in csv.DictReader(fh)])


def _flatten(summary: dict) -> dict:
    out = {}
    for k, v in summary.items():
        if isinstance(v, list) and all(isinstance(x, (int, float)) for x in v):
            for i, x in enumerate(v):
                out[f"{k}[{i}]"] = x
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out[k] = v
    return out


def compare_runs(report_a, report_b, tolerances: Optional[dict] = None) -> Comparison:
    """Relative differences of summary metrics and of shared error curves.

    Reports must come from the same system, observation and forecast settings;
    different paradigm sets are flagged as structural differences and only the
    shared paradigms are compared numerically.
    """
    tol = tolerances or {"default": 0.0, "metrics": {}}
    pa, pb = Path(report_a), Path(report_b)
    A, B = (json.loads(p.read_text()) for p in (pa, pb))
    for sec in ("system", "observation"):
        if A["config"][sec] != B["config"][sec]:
            raise IncompatibleReports(f"reports differ in [{sec}]; not comparable")
    fa, fb = A["config"]["forecast"], B["config"]["forecast"]
    if fa["horizon"] != fb["horizon"]:
        raise IncompatibleReports("reports use different forecast horizons")
    structural = []
    para_a = set(A["config"]["embedding"]["paradigm"])
    para_b = set(B["config"]["embedding"]["paradigm"])
    if para_a != para_b:
        structural.append(f"paradigms differ: {sorted(para_a)} vs {sorted(para_b)}")
    shared = para_a & para_b
    diffs = {}
    sa, sb = _flatten(A["summary"]), _flatten(B["summary"])
    for k in sorted(set(sa) & set(sb)):
        parts = k.split(".")
        if len(parts) > 1 and parts[1].split("[")[0] in ("delay", "reservoir") and parts[1].split("[")[0] not in shared:
            continue
        diffs[k] = _rel(sa[k], sb[k])
    for art in sorted(set(A["artifacts"]) & set(B["artifacts"])):
        if art.startswith("curves/") and art.endswith(".csv"):
            ca, cb = _read_curve(pa.parent / art), _read_curve(pb.parent / art)
            if len(ca) != len(cb):
                structural.append(f"{art}: curve lengths differ")
                continue
            name = Path(art).stem
            diffs[f"curve.{name}.saturation"] = _rel(_saturation(ca), _saturation(cb))
            fin = np.isfinite(ca) & np.isfinite(cb)
            scale = np.maximum(np.maximum(np.abs(ca), np.abs(cb)), 1e-300)
            diffs[f"curve.{name}.max_rel"] = float(np.max(np.where(fin, np.abs(ca - cb) / scale, 0.0))) \
                if fin.any() else 0.0
    failures = []
    for k, v in diffs.items():
        limit = tol["default"]
        for pat, t in tol.get("metrics", {}).items():
            if fnmatch.fnmatch(k, pat):
                limit = float(t)
        if not v <= limit:
            failures.append(k)
    return Comparison(diffs, tol, structural, failures)
