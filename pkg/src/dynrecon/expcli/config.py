"""Experiment configuration: a TOML file with one section per pipeline stage.

Every key is validated before any computation; unknown keys are rejected with
a suggestion, and all defaults are filled into the resolved config, which is
echoed next to the run outputs.
"""
from __future__ import annotations

import difflib
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import tomli
import tomli_w

from ..dynsys import OBS_KINDS, SYSTEM_KINDS, ObservationMap, SystemSpec
from ..learn import FEATURE_KINDS

PARADIGMS = ("delay", "reservoir")
MODES = ("iterative", "direct")

# counter ids for seed substreams; new stages get new ids so existing streams never move
STAGE_IDS = {"system": 0, "reservoir": 1, "ensemble": 2}


class ConfigError(ValueError):
    pass


def stage_seed(master: int, stage: str, *extra: int) -> int:
    """Deterministic 32-bit seed for ``stage`` derived from the master seed."""
    ss = np.random.SeedSequence(int(master), spawn_key=(STAGE_IDS[stage],) + tuple(extra))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# typed sections

@dataclass(frozen=True)
class RunConfig:
    seed: int
    name: str = "experiment"
    out: str = ""
    threads: int = 1


@dataclass(frozen=True)
class SystemConfig:
    kind: str
    dt: float = 0.01
    h: float = 0.0              # 0 means "same as dt"
    sigma: float = 10.0
    rho_l: float = 28.0
    beta: float = 8.0 / 3.0
    rho: tuple = ()
    steps: int = 20_000
    transient: int = 10_000
    lag: int = 1

    def spec(self) -> SystemSpec:
        kw = dict(dt=self.dt, h=self.h or self.dt, sigma=self.sigma, rho_l=self.rho_l, beta=self.beta)
        if self.rho:
            kw["rho"] = tuple(self.rho)
        return SystemSpec(self.kind, **kw)


@dataclass(frozen=True)
class ObservationConfig:
    kind: str = "full-state"
    coords: tuple = ()
    name: str = ""
    harmonics: tuple = (1.0,)
    normalize: bool = True

    def obs(self) -> ObservationMap:
        return ObservationMap(self.kind, self.coords, self.name or None, self.harmonics)


@dataclass(frozen=True)
class EmbeddingConfig:
    paradigm: tuple = ("delay",)
    Q: int = 2
    L: int = 300
    lam: float = 0.9
    washout: int = 500

    def offset(self, paradigm: str) -> int:
        return self.Q if paradigm == "delay" else self.washout


@dataclass(frozen=True)
class HypothesisConfig:
    kind: str = "affine"
    degree: int = 2
    n_centers: int = 200
    linear: bool = False
    frequencies: tuple = (1,)
    angles: str = "raw"
    bandwidth: object = "auto"
    ridge: object = "auto"

    def ridge_value(self) -> Optional[float]:
        return None if self.ridge == "auto" else float(self.ridge)


@dataclass(frozen=True)
class ForecastConfig:
    modes: tuple = MODES
    horizon: int = 200
    ensemble: int = 100
    train: int = 0              # 0 means half of the available samples
    holdout: float = 0.2
    guard_factor: float = 1000.0


@dataclass(frozen=True)
class AnalysesConfig:
    error_curves: bool = True
    bounds: bool = False
    slopes: bool = False
    spectra: bool = False
    diagnostics: bool = False
    spectrum_steps: int = 20_000
    refactor_every: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig
    system: SystemConfig
    observation: ObservationConfig
    embedding: EmbeddingConfig
    hypothesis: dict            # paradigm -> HypothesisConfig
    forecast: ForecastConfig
    analyses: AnalysesConfig
    source: Optional[str] = field(default=None, compare=False)

    def to_dict(self) -> dict:
        emb = asdict(self.embedding)
        emb["lambda"] = emb.pop("lam")
        hyp = {p: _clean(asdict(h)) for p, h in self.hypothesis.items()}
        first = self.embedding.paradigm[0]
        out = {
            "run": _clean(asdict(self.run)),
            "system": _clean(asdict(self.system)),
            "observation": _clean(asdict(self.observation)),
            "embedding": _clean(emb),
            "hypothesis": dict(hyp[first]),
            "forecast": _clean(asdict(self.forecast)),
            "analyses": _clean(asdict(self.analyses)),
        }
        for p, h in hyp.items():
            if p != first and h != hyp[first]:
                out["hypothesis"][p] = h
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _clean(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# schema: key -> (kind, validator message or None)

def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


SCHEMA = {
    "run": {
        "seed": ("int", _nonneg, "master seed must be a non-negative integer"),
        "name": ("str", lambda v: bool(v), "run name must be non-empty"),
        "out": ("str", None, None),
        "threads": ("int", lambda v: v >= 1, "threads must be >= 1"),
    },
    "system": {
        "kind": ("str", lambda v: v in SYSTEM_KINDS, f"system kind must be one of {SYSTEM_KINDS}"),
        "dt": ("float", _pos, "dt must be positive"),
        "h": ("float", _nonneg, "h must be positive (or 0 for h = dt)"),
        "sigma": ("float", None, None),
        "rho_l": ("float", None, None),
        "beta": ("float", None, None),
        "rho": ("floats", lambda v: all(0 <= r < 2 * math.pi for r in v),
                "rotation numbers must lie in [0, 2 pi)"),
        "steps": ("int", lambda v: v >= 10, "steps must be >= 10"),
        "transient": ("int", _nonneg, "transient must be >= 0"),
        "lag": ("int", lambda v: v >= 1, "lag must be >= 1"),
    },
    "observation": {
        "kind": ("str", lambda v: v in OBS_KINDS, f"observation kind must be one of {OBS_KINDS}"),
        "coords": ("ints", lambda v: all(c >= 0 for c in v), "coordinates must be >= 0"),
        "name": ("str", None, None),
        "harmonics": ("floats", None, None),
        "normalize": ("bool", None, None),
    },
    "embedding": {
        "paradigm": ("strs", lambda v: len(v) > 0 and all(p in PARADIGMS for p in v)
                     and len(set(v)) == len(v), f"paradigm must be drawn from {PARADIGMS}"),
        "Q": ("int", lambda v: v >= 1, "number of delays Q must be >= 1"),
        "L": ("int", lambda v: v >= 1, "reservoir size L must be >= 1"),
        "lambda": ("float", lambda v: 0 < v < 1, "contraction factor must be in (0,1)"),
        "washout": ("int", _nonneg, "washout must be >= 0"),
    },
    "hypothesis": {
        "kind": ("str", lambda v: v in FEATURE_KINDS, f"hypothesis kind must be one of {FEATURE_KINDS}"),
        "degree": ("int", _nonneg, "degree must be >= 0"),
        "n_centers": ("int", lambda v: v >= 1, "n_centers must be >= 1"),
        "linear": ("bool", None, None),
        "frequencies": ("ints", lambda v: len(v) > 0, "frequency set must be non-empty"),
        "angles": ("str", lambda v: v in ("raw", "pairs"), "angles must be 'raw' or 'pairs'"),
        "bandwidth": ("auto_float", lambda v: v == "auto" or v > 0, "bandwidth must be positive or 'auto'"),
        "ridge": ("auto_float", lambda v: v == "auto" or v >= 0, "ridge must be >= 0 or 'auto'"),
    },
    "forecast": {
        "modes": ("strs", lambda v: len(v) > 0 and all(m in MODES for m in v),
                  f"modes must be drawn from {MODES}"),
        "horizon": ("int", lambda v: v >= 1, "horizon must be >= 1"),
        "ensemble": ("int", lambda v: v >= 1, "ensemble size must be >= 1"),
        "train": ("int", _nonneg, "train must be >= 0 (0 selects half the samples)"),
        "holdout": ("float", lambda v: 0 <= v < 1, "holdout fraction must be in [0, 1)"),
        "guard_factor": ("float", _pos, "guard_factor must be positive"),
    },
    "analyses": {
        "error_curves": ("bool", None, None),
        "bounds": ("bool", None, None),
        "slopes": ("bool", None, None),
        "spectra": ("bool", None, None),
        "diagnostics": ("bool", None, None),
        "spectrum_steps": ("int", lambda v: v >= 10, "spectrum_steps must be >= 10"),
        "refactor_every": ("int", lambda v: v >= 1, "refactor_every must be >= 1"),
    },
}
REQUIRED = {("run", "seed"), ("system", "kind")}


def _locate(text: str, section: str, key: Optional[str]) -> Optional[int]:
    """Line number (1-based) of ``key`` inside ``[section]``, or of the header."""
    current = None
    header = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]")
    for i, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None:
            if re.match(rf"^\s*\"?{re.escape(key)}\"?\s*=", line):
                return i
    return None


def _err(text, section, key, msg):
    line = _locate(text, section, key) if text is not None else None
    where = f"line {line}: " if line else ""
    label = f"[{section}]" if key is None else f"[{section}] {key}"
    return ConfigError(f"{where}{label}: {msg}")


def _coerce(kind, value):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expected an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("expected a number")
        return float(value)
    if kind == "auto_float":
        if value == "auto":
            return value
        return _coerce("float", value)
    if kind == "str":
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise TypeError("expected true or false")
        return value
    if kind in ("ints", "floats", "strs"):
        if kind == "strs" and isinstance(value, str):
            value = [value]
        if not isinstance(value, list):
            raise TypeError("expected a list")
        return tuple(_coerce(kind[:-1] if kind != "floats" else "float", v) for v in value)
    raise AssertionError(kind)


def _suggest(name, options):
    close = difflib.get_close_matches(name, list(options), n=1, cutoff=0.4)
    if not close:
        close = [o for o in options if o.lower() in name.lower() or name.lower() in o.lower()]
    return f"; did you mean {close[0]!r}?" if close else ""


def _parse_section(text, section, raw: dict, allow_sub=()) -> dict:
    schema = SCHEMA[section]
    out = {}
    for key, value in raw.items():
        if key in allow_sub and isinstance(value, dict):
            continue
        if key not in schema:
            opts = list(schema) + list(allow_sub)
            raise _err(text, section, key, f"unknown key {key!r}{_suggest(key, opts)}")
        kind, check, msg = schema[key]
        try:
            v = _coerce(kind, value)
        except TypeError as exc:
            raise _err(text, section, key, f"{exc}, got {value!r}") from None
        if check is not None and not check(v):
            raise _err(text, section, key, f"{msg} (got {value!r})")
        out[key] = v
    return out


def parse_config_text(text: str, source: Optional[str] = None) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    for sec in raw:
        if sec not in SCHEMA:
            raise _err(text, sec, None, f"unknown section{_suggest(sec, SCHEMA)}")
        if not isinstance(raw[sec], dict):
            raise ConfigError(f"{sec!r} must be a [section]")
    parsed = {}
    for sec in SCHEMA:
        sub = PARADIGMS if sec == "hypothesis" else ()
        parsed[sec] = _parse_section(text, sec, raw.get(sec, {}), sub)
    for sec, key in sorted(REQUIRED):
        if key not in parsed[sec]:
            raise _err(text, sec, None, f"missing required key {key!r}")

    run = dict(parsed["run"])
    run.setdefault("name", "experiment")
    if not run.get("out"):
        run["out"] = f"runs/{run['name']}"
    runc = RunConfig(**run)

    syscfg = SystemConfig(**parsed["system"])
    try:
        spec = syscfg.spec()
    except ValueError as exc:
        raise _err(text, "system", None, str(exc)) from None
    syscfg = SystemConfig(**{**asdict(syscfg), "h": spec.h, "rho": tuple(spec.rho)})

    obsc = ObservationConfig(**parsed["observation"])
    try:
        obs = obsc.obs()
        if obs.coords and max(obs.coords) >= spec.state_dim:
            raise ValueError(f"coordinate {max(obs.coords)} out of range for a "
                             f"{spec.state_dim}-dimensional state")
        d = obs.dim(spec.state_dim)
    except ValueError as exc:
        raise _err(text, "observation", None, str(exc)) from None

    emb = dict(parsed["embedding"])
    if "lambda" in emb:
        emb["lam"] = emb.pop("lambda")
    embc = EmbeddingConfig(**emb)

    base = parsed["hypothesis"]
    hyp = {}
    for p in embc.paradigm:
        over = raw.get("hypothesis", {}).get(p, {})
        if over:
            over = _parse_section(text, "hypothesis", over)
        hyp[p] = HypothesisConfig(**{**base, **over})
        if hyp[p].kind == "fourier" and hyp[p].angles == "pairs":
            L = embc.Q * d if p == "delay" else embc.L
            if L % 2:
                raise _err(text, "hypothesis", "angles", "'pairs' needs an even embedding dimension")
    for p in raw.get("hypothesis", {}):
        if p in PARADIGMS and p not in embc.paradigm and isinstance(raw["hypothesis"][p], dict):
            raise _err(text, "hypothesis", None, f"override for unused paradigm {p!r}")

    fc = dict(parsed["forecast"])
    n_samples = syscfg.steps // syscfg.lag
    available = n_samples - max(embc.offset(p) for p in embc.paradigm)
    if available < 4:
        raise _err(text, "system", "steps", f"too few samples after embedding ({available})")
    if not fc.get("train"):
        fc["train"] = available // 2
    fcc = ForecastConfig(**fc)
    need = fcc.train + fcc.horizon + fcc.ensemble + 1
    if need > available:
        raise _err(text, "forecast", None,
                   f"train + horizon + ensemble + 1 = {need} exceeds the {available} embedded samples; "
                   f"increase system.steps or shrink the forecast settings")
    ac = AnalysesConfig(**parsed["analyses"])
    return ExperimentConfig(runc, syscfg, obsc, embc, hyp, fcc, ac, source)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def with_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, out: Optional[str] = None,
                   threads: Optional[int] = None) -> ExperimentConfig:
    run = asdict(cfg.run)
    if seed is not None:
        if seed < 0:
            raise ConfigError("master seed must be a non-negative integer")
        run["seed"] = seed
    if out is not None:
        run["out"] = out
    if threads is not None:
        if threads < 1:
            raise ConfigError("threads must be >= 1")
        run["threads"] = threads
    return ExperimentConfig(RunConfig(**run), cfg.system, cfg.observation, cfg.embedding,
                            cfg.hypothesis, cfg.forecast, cfg.analyses, cfg.source)
