"""Benchmark systems, trajectories and observations.

Three discrete-time systems are provided: a rotation on the 2-torus, the
time-``dt`` map of the Lorenz-63 flow (fixed-step RK4), and the product of
Lorenz-63 with a circle rotation ("l63rot").  State layouts:

* ``torus``:    ``(theta1, theta2)``
* ``lorenz63``: ``(x, y, z)``
* ``l63rot``:   ``(x, y, z, theta)``

Every stepping routine accepts a single state of shape ``(m,)`` or a batch of
shape ``(n, m)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

SYSTEM_KINDS = ("torus", "lorenz63", "l63rot")


class DivergenceError(FloatingPointError):
    """Raised when a trajectory leaves the finite range."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class SystemSpec:
    kind: str = "lorenz63"
    rho: tuple = (0.6180339887498949, 0.7071067811865476)
    sigma: float = 10.0
    rho_l: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.01
    h: Optional[float] = None

    def __post_init__(self):
        if self.kind not in SYSTEM_KINDS:
            raise ValueError(f"unknown system kind {self.kind!r}; expected one of {SYSTEM_KINDS}")
        rho = tuple(float(r) for r in np.atleast_1d(self.rho))
        object.__setattr__(self, "rho", rho)
        n_rot = {"torus": 2, "lorenz63": None, "l63rot": 1}[self.kind]
        if n_rot is not None and len(rho) != n_rot:
            raise ValueError(f"{self.kind} needs {n_rot} rotation component(s), got {len(rho)}")
        if n_rot is not None and not all(0.0 <= r < TWO_PI for r in rho):
            raise ValueError(f"rotation components must lie in [0, 2*pi), got {rho}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        h = self.dt if self.h is None else float(self.h)
        object.__setattr__(self, "h", h)
        if self.kind != "torus":
            if not 0 < h <= self.dt:
                raise ValueError(f"need 0 < h <= dt, got h={h}, dt={self.dt}")
            ratio = self.dt / h
            if abs(ratio - round(ratio)) > 1e-9 * ratio:
                raise ValueError(f"dt/h must be a positive integer, got {ratio}")

    @property
    def n_substeps(self) -> int:
        return int(round(self.dt / self.h))

    @property
    def state_dim(self) -> int:
        return {"torus": 2, "lorenz63": 3, "l63rot": 4}[self.kind]

    @property
    def angle_coords(self) -> tuple:
        return {"torus": (0, 1), "lorenz63": (), "l63rot": (3,)}[self.kind]

    def equilibria(self) -> list:
        """Equilibria of the Lorenz vector field (empty for the torus)."""
        if self.kind == "torus":
            return []
        c = math.sqrt(self.beta * (self.rho_l - 1.0))
        return [np.zeros(3), np.array([c, c, self.rho_l - 1.0]), np.array([-c, -c, self.rho_l - 1.0])]

    def default_x0(self) -> np.ndarray:
        l63 = [1.0, 1.0, 1.0]
        return np.array({"torus": [0.0, 0.0], "lorenz63": l63, "l63rot": l63 + [0.0]}[self.kind])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rho": list(self.rho), "sigma": self.sigma,
                "rho_l": self.rho_l, "beta": self.beta, "dt": self.dt, "h": self.h}


# ---------------------------------------------------------------------------
# one-step maps

def step_torus(state, rho) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    return np.mod(state + np.asarray(rho, dtype=float), TWO_PI)


def _l63_field(x, y, z, s, r, b):
    # works on python floats and on numpy arrays alike, with identical rounding
    return s * (y - x), x * (r - z) - y, x * y - b * z


def _l63_rk4(x, y, z, h, s, r, b):
    h2 = 0.5 * h
    a1, a2, a3 = _l63_field(x, y, z, s, r, b)
    b1, b2, b3 = _l63_field(x + h2 * a1, y + h2 * a2, z + h2 * a3, s, r, b)
    c1, c2, c3 = _l63_field(x + h2 * b1, y + h2 * b2, z + h2 * b3, s, r, b)
    d1, d2, d3 = _l63_field(x + h * c1, y + h * c2, z + h * c3, s, r, b)
    h6 = h / 6.0
    return (x + h6 * (a1 + 2.0 * b1 + 2.0 * c1 + d1),
            y + h6 * (a2 + 2.0 * b2 + 2.0 * c2 + d2),
            z + h6 * (a3 + 2.0 * b3 + 2.0 * c3 + d3))


def flow_l63(state, spec: SystemSpec) -> np.ndarray:
    """Advance Lorenz-63 states by ``spec.dt`` using ``spec.n_substeps`` RK4 substeps."""
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise DivergenceError("non-finite Lorenz-63 state")
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    for _ in range(spec.n_substeps):
        x, y, z = _l63_rk4(x, y, z, spec.h, spec.sigma, spec.rho_l, spec.beta)
    return np.stack([x, y, z], axis=-1)


def step_system(state, spec: SystemSpec) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    if spec.kind == "torus":
        return step_torus(state, spec.rho)
    if spec.kind == "lorenz63":
        return flow_l63(state, spec)
    out = np.empty_like(state)
    out[..., :3] = flow_l63(state[..., :3], spec)
    out[..., 3] = np.mod(state[..., 3] + spec.rho[0], TWO_PI)
    return out


def _l63_field_jacobian(x, y, z, s, r, b) -> np.ndarray:
    shape = np.shape(x)
    A = np.zeros(shape + (3, 3))
    A[..., 0, 0] = -s
    A[..., 0, 1] = s
    A[..., 1, 0] = r - z
    A[..., 1, 1] = -1.0
    A[..., 1, 2] = -x
    A[..., 2, 0] = y
    A[..., 2, 1] = x
    A[..., 2, 2] = -b
    return A


def _l63_rk4_with_tangent(x, y, z, J, h, s, r, b):
    """One RK4 substep together with its exact derivative applied to ``J``."""
    h2 = 0.5 * h
    eye = np.eye(3)
    a = _l63_field(x, y, z, s, r, b)
    K1 = _l63_field_jacobian(x, y, z, s, r, b)
    p2 = (x + h2 * a[0], y + h2 * a[1], z + h2 * a[2])
    bb = _l63_field(*p2, s, r, b)
    K2 = _l63_field_jacobian(*p2, s, r, b) @ (eye + h2 * K1)
    p3 = (x + h2 * bb[0], y + h2 * bb[1], z + h2 * bb[2])
    c = _l63_field(*p3, s, r, b)
    K3 = _l63_field_jacobian(*p3, s, r, b) @ (eye + h2 * K2)
    p4 = (x + h * c[0], y + h * c[1], z + h * c[2])
    K4 = _l63_field_jacobian(*p4, s, r, b) @ (eye + h * K3)
    step_jac = eye + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
    nxt = _l63_rk4(x, y, z, h, s, r, b)
    return nxt, step_jac @ J


def jacobian(state, spec: SystemSpec) -> np.ndarray:
    """Derivative of one ``dt`` step at ``state`` (batched over leading axes).

    For the Lorenz factor this is the exact derivative of the RK4 substeps,
    i.e. the tangent equations discretised with the same stages.
    """
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise DivergenceError("non-finite state passed to jacobian")
    lead = state.shape[:-1]
    m = spec.state_dim
    if spec.kind == "torus":
        return np.broadcast_to(np.eye(2), lead + (2, 2)).copy()
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    J = np.broadcast_to(np.eye(3), lead + (3, 3)).copy()
    for _ in range(spec.n_substeps):
        (x, y, z), J = _l63_rk4_with_tangent(x, y, z, J, spec.h, spec.sigma, spec.rho_l, spec.beta)
    if spec.kind == "lorenz63":
        return J
    out = np.zeros(lead + (m, m))
    out[..., :3, :3] = J
    out[..., 3, 3] = 1.0
    return out


# ---------------------------------------------------------------------------
# observations

OBS_KINDS = ("coordinate-projection", "full-state", "custom-smooth")
CUSTOM_OBS = ("trig", "mixed")


@dataclass(frozen=True)
class ObservationMap:
    """A smooth observable ``phi: state -> R^d``.

    ``coordinate-projection`` picks ``coords``; ``full-state`` returns the
    whole state.  ``custom-smooth`` supports two named maps:

    * ``trig``: ``(cos s_i, sin s_i)`` for each ``i`` in ``coords``;
    * ``mixed``: ``s[coords[0]] + sum_k harmonics[k] * cos((k+1) * s[coords[1]])``,
      a scalar mixing a chaotic coordinate with a periodic one.

    The raw value is then affinely normalised, ``(raw - offset) / scale``.
    """

    kind: str = "full-state"
    coords: tuple = ()
    name: Optional[str] = None
    harmonics: tuple = (1.0,)
    offset: Optional[tuple] = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in OBS_KINDS:
            raise ValueError(f"unknown observation kind {self.kind!r}")
        object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))
        object.__setattr__(self, "harmonics", tuple(float(a) for a in self.harmonics))
        if self.offset is not None:
            object.__setattr__(self, "offset", tuple(float(o) for o in np.atleast_1d(self.offset)))
        if self.kind == "coordinate-projection" and not self.coords:
            raise ValueError("coordinate-projection needs at least one coordinate")
        if self.kind == "custom-smooth":
            if self.name not in CUSTOM_OBS:
                raise ValueError(f"custom-smooth observation name must be one of {CUSTOM_OBS}")
            if self.name == "mixed" and len(self.coords) != 2:
                raise ValueError("'mixed' observation needs coords=(chaotic, angle)")
            if self.name == "trig" and not self.coords:
                raise ValueError("'trig' observation needs angle coordinates")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("observation scale must be positive")

    def dim(self, state_dim: int) -> int:
        if self.kind == "full-state":
            return state_dim
        if self.kind == "coordinate-projection":
            return len(self.coords)
        return 2 * len(self.coords) if self.name == "trig" else 1

    def raw(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        if self.kind == "full-state":
            return s.copy()
        if self.kind == "coordinate-projection":
            return s[..., list(self.coords)]
        if self.name == "trig":
            ang = s[..., list(self.coords)]
            out = np.empty(ang.shape[:-1] + (2 * len(self.coords),))
            out[..., 0::2] = np.cos(ang)
            out[..., 1::2] = np.sin(ang)
            return out
        base = s[..., self.coords[0]].copy()
        theta = s[..., self.coords[1]]
        for k, amp in enumerate(self.harmonics, start=1):
            base = base + amp * np.cos(k * theta)
        return base[..., None]

    def __call__(self, states) -> np.ndarray:
        out = self.raw(states)
        if self.offset is not None:
            out = out - np.asarray(self.offset)
        return out / self.scale

    def jacobian(self, states) -> np.ndarray:
        """``D phi`` at each state, shape ``(..., d, m)``."""
        s = np.asarray(states, dtype=float)
        lead, m = s.shape[:-1], s.shape[-1]
        d = self.dim(m)
        J = np.zeros(lead + (d, m))
        if self.kind == "full-state":
            J[...] = np.eye(m)
        elif self.kind == "coordinate-projection":
            for i, c in enumerate(self.coords):
                J[..., i, c] = 1.0
        elif self.name == "trig":
            for i, c in enumerate(self.coords):
                J[..., 2 * i, c] = -np.sin(s[..., c])
                J[..., 2 * i + 1, c] = np.cos(s[..., c])
        else:
            c0, c1 = self.coords
            J[..., 0, c0] = 1.0
            theta = s[..., c1]
            for k, amp in enumerate(self.harmonics, start=1):
                J[..., 0, c1] -= amp * k * np.sin(k * theta)
        return J / self.scale

    def normalized(self, states) -> "ObservationMap":
        """Copy whose output is centred with unit empirical L2 norm on ``states``."""
        raw = self.raw(states)
        mean = raw.mean(axis=0)
        norm = math.sqrt(float(np.mean(np.sum((raw - mean) ** 2, axis=-1))))
        if norm == 0:
            raise ValueError("observation is constant on the sample; cannot normalise")
        return ObservationMap(self.kind, self.coords, self.name, self.harmonics,
                              tuple(mean.tolist()), norm)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "coords": list(self.coords), "name": self.name,
                "harmonics": list(self.harmonics),
                "offset": None if self.offset is None else list(self.offset),
                "scale": self.scale}


# ---------------------------------------------------------------------------
# trajectories

@dataclass(frozen=True)
class TrajectoryBundle:
    spec: SystemSpec
    obs: ObservationMap
    states: np.ndarray
    observations: np.ndarray
    transient_discarded: int = 0
    seed: Optional[int] = None
    stride: int = 1

    def __post_init__(self):
        if len(self.states) != len(self.observations):
            raise ValueError("states and observations must have equal length")
        for arr in (self.states, self.observations):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def dt(self) -> float:
        return self.spec.dt * self.stride

    def subsample(self, lag: int) -> "TrajectoryBundle":
        """Keep every ``lag``-th sample; the base map becomes the ``lag``-fold step."""
        if lag < 1:
            raise ValueError("lag must be >= 1")
        if lag == 1:
            return self
        return TrajectoryBundle(self.spec, self.obs, self.states[::lag].copy(),
                                self.observations[::lag].copy(),
                                self.transient_discarded, self.seed, self.stride * lag)

    def with_observation(self, obs: ObservationMap) -> "TrajectoryBundle":
        return TrajectoryBundle(self.spec, obs, self.states, obs(self.states),
                                self.transient_discarded, self.seed, self.stride)

    def to_csv(self, path) -> None:
        """Write ``step,t,state_*,obs_*`` rows with 17 significant digits."""
        m, d = self.states.shape[1], self.observations.shape[1]
        header = ["step", "t"] + [f"state_{i}" for i in range(m)] + [f"obs_{i}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for n, (s, o) in enumerate(zip(self.states, self.observations)):
                w.writerow([n, f"{n * self.dt:.17g}"] + [f"{v:.17g}" for v in s]
                           + [f"{v:.17g}" for v in o])


def _iterate(spec: SystemSpec, x0: np.ndarray, n_total: int) -> np.ndarray:
    out = np.empty((n_total, spec.state_dim))
    if spec.kind == "torus":
        t1, t2 = float(x0[0]), float(x0[1])
        r1, r2 = spec.rho
        for n in range(n_total):
            out[n] = t1, t2
            t1, t2 = (t1 + r1) % TWO_PI, (t2 + r2) % TWO_PI
        return out
    x, y, z = (float(v) for v in x0[:3])
    theta = float(x0[3]) if spec.kind == "l63rot" else 0.0
    h, s, r, b = spec.h, spec.sigma, spec.rho_l, spec.beta
    nsub = spec.n_substeps
    for n in range(n_total):
        if spec.kind == "l63rot":
            out[n] = x, y, z, theta
            theta = (theta + spec.rho[0]) % TWO_PI
        else:
            out[n] = x, y, z
        for _ in range(nsub):
            x, y, z = _l63_rk4(x, y, z, h, s, r, b)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            raise DivergenceError(f"trajectory diverged at step {n + 1}", step=n + 1)
    return out


def generate_trajectory(spec: SystemSpec, x0=None, n_steps: int = 1, n_transient: int = 10_000,
                        obs: Optional[ObservationMap] = None, seed: Optional[int] = None
                        ) -> TrajectoryBundle:
    """Iterate ``n_transient + n_steps`` states from ``x0`` and keep the last ``n_steps``.

    When ``x0`` is None the default initial point is perturbed with a draw
    from ``seed`` (uniform in [-1, 1] on Lorenz coordinates, uniform angles).
    """
    if n_steps < 1 or n_transient < 0:
        raise ValueError("need n_steps >= 1 and n_transient >= 0")
    obs = obs or ObservationMap("full-state")
    if x0 is None:
        x0 = spec.default_x0()
        if seed is not None:
            rng = np.random.default_rng(seed)
            noise = rng.uniform(-1.0, 1.0, size=spec.state_dim)
            for c in spec.angle_coords:
                noise[c] = rng.uniform(0.0, TWO_PI)
            x0 = x0 + noise
            for c in spec.angle_coords:
                x0[c] = x0[c] % TWO_PI
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (spec.state_dim,):
        raise ValueError(f"x0 must have shape ({spec.state_dim},)")
    if not np.all(np.isfinite(x0)):
        raise DivergenceError("non-finite initial state", step=0)
    states = _iterate(spec, x0, n_transient + n_steps)[n_transient:]
    return TrajectoryBundle(spec, obs, states, obs(states), n_transient, seed)


def sample_mu(bundle: TrajectoryBundle, k: int, seed, max_index: Optional[int] = None):
    """Draw ``k`` distinct orbit indices uniformly (an empirical sample of mu).

    Returns ``(states, indices)``.  ``max_index`` caps the admissible indices
    (exclusive), e.g. to leave room for a forecast horizon.
    """
    n = len(bundle) if max_index is None else min(int(max_index), len(bundle))
    if k > n or k < 0:
        raise ValueError(f"cannot draw {k} samples from {n} admissible indices")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=k, replace=False)
    return bundle.states[idx], idx


def attractor_diameter(points) -> float:
    points = np.asarray(points, dtype=float)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
