"""Ground-truth simulators, parameter sampling, excitation, dataset plumbing.

Two plant families are supported:

* ``vdp`` — a Van der Pol oscillator, x1' = x2, x2' = theta*x2*(1-x1^2) - x1 + u,
  integrated with classical RK4 under zero-order-hold input; both states are
  measured (y = x).
* ``pendulum`` — the standard benchmark pendulum with angle measured from
  upright, phi'' = (3g/2l) sin(phi) + 3/(m l^2) tau, semi-implicit Euler,
  torque clipped to [-2, 2], rate clipped to |phi'| <= 8, angle wrapped to
  (-pi, pi]; only the angle is measured.

Recorded trajectories use the convention that y[k] is the measurement after
input u[k] has acted for one sample interval, matching the model's
one-step-ahead rollout alignment.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

PENDULUM_G = 10.0
PENDULUM_LENGTH = 1.0
PENDULUM_TORQUE_MAX = 2.0
PENDULUM_RATE_MAX = 8.0

# hard cap on state magnitude; beyond this the trajectory is useless anyway
_BLOWUP_LIMIT = 1e6


class PlantInstabilityError(ArithmeticError):
    """The simulated state left the finite range (stiff blow-up)."""


@dataclass(frozen=True)
class PlantParams:
    kind: str
    theta: float = 0.0
    mass: float = 1.0
    dt: float = 0.05

    def __post_init__(self):
        if self.kind not in ("vdp", "pendulum"):
            raise ValueError(f"unknown plant kind {self.kind!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.kind == "pendulum" and self.mass <= 0:
            raise ValueError("pendulum mass must be positive")

    @property
    def n_u(self) -> int:
        return 1

    @property
    def n_y(self) -> int:
        return 2 if self.kind == "vdp" else 1

    @property
    def n_x(self) -> int:
        return 2

    def default_x0(self) -> np.ndarray:
        if self.kind == "vdp":
            return np.zeros(2)
        return np.array([np.pi, 0.0])  # hanging at rest


def _vdp_rhs(x: np.ndarray, u: float, theta: float) -> np.ndarray:
    return np.array([x[1], theta * x[1] * (1.0 - x[0] ** 2) - x[0] + u])


def vdp_step(x: np.ndarray, u: float, theta: float, dt: float) -> np.ndarray:
    """One classical RK4 step with the input held constant over the step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = _vdp_rhs(x, u, theta)
    k2 = _vdp_rhs(x + 0.5 * dt * k1, u, theta)
    k3 = _vdp_rhs(x + 0.5 * dt * k2, u, theta)
    k4 = _vdp_rhs(x + dt * k3, u, theta)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)) or np.max(np.abs(out)) > _BLOWUP_LIMIT:
        raise PlantInstabilityError(
            f"van der Pol state diverged (theta={theta}, |x|={np.max(np.abs(out)):.3g})"
        )
    return out


def wrap_angle(phi: float) -> float:
    """Map an angle to the half-open interval (-pi, pi]."""
    return phi - 2.0 * np.pi * np.ceil((phi - np.pi) / (2.0 * np.pi))


def pendulum_step(x: np.ndarray, tau: float, mass: float, dt: float) -> np.ndarray:
    """Semi-implicit Euler; torque and rate clipping make this unconditionally stable."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    phi, rate = float(x[0]), float(x[1])
    tau = float(np.clip(tau, -PENDULUM_TORQUE_MAX, PENDULUM_TORQUE_MAX))
    accel = (1.5 * PENDULUM_G / PENDULUM_LENGTH) * np.sin(phi) + (
        3.0 / (mass * PENDULUM_LENGTH**2)
    ) * tau
    rate = float(np.clip(rate + dt * accel, -PENDULUM_RATE_MAX, PENDULUM_RATE_MAX))
    phi = wrap_angle(phi + dt * rate)
    return np.array([phi, rate])


def plant_step(params: PlantParams, x: np.ndarray, u: float) -> np.ndarray:
    if params.kind == "vdp":
        return vdp_step(x, u, params.theta, params.dt)
    return pendulum_step(x, u, params.mass, params.dt)


def plant_output(params: PlantParams, x: np.ndarray) -> np.ndarray:
    if params.kind == "vdp":
        return np.asarray(x, dtype=float).copy()
    return np.array([x[0]])


def sample_params(kind: str, count: int, rng_seed) -> list[PlantParams]:
    """theta ~ N(0,1) for vdp; mass ~ Uniform[0.5, 1.5] for the pendulum."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    out = []
    for _ in range(count):
        if kind == "vdp":
            out.append(PlantParams(kind="vdp", theta=float(rng.normal())))
        elif kind == "pendulum":
            out.append(PlantParams(kind="pendulum", mass=float(rng.uniform(0.5, 1.5))))
        else:
            raise ValueError(f"unknown plant kind {kind!r}")
    return out


def excitation(length: int, n_u: int, amplitude: float, rng_seed) -> np.ndarray:
    """Piecewise-constant levels in [-amplitude, amplitude], dwell uniform on 5..20 steps."""
    if length < 0:
        raise ValueError("length must be nonnegative")
    if amplitude < 0:
        raise ValueError("amplitude must be nonnegative")
    rng = np.random.default_rng(rng_seed)
    u = np.empty((length, n_u))
    t = 0
    while t < length:
        dwell = int(rng.integers(5, 21))
        level = rng.uniform(-amplitude, amplitude, size=n_u) if amplitude > 0 else np.zeros(n_u)
        u[t : t + dwell] = level
        t += dwell
    return u


@dataclass(frozen=True)
class TrajectoryDataset:
    """One recorded run; ``meta`` keeps the hidden plant parameters for bookkeeping."""

    u: np.ndarray  # (L, n_u)
    y: np.ndarray  # (L, n_y)
    meta: PlantParams
    x_final: np.ndarray | None = None  # state after the last step, for continuation

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if u.shape[0] != y.shape[0]:
            raise ValueError(f"length mismatch: u has {u.shape[0]} rows, y has {y.shape[0]}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValueError("trajectory contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.u.shape[0]


def generate_trajectory(
    params: PlantParams,
    u: np.ndarray,
    x0: np.ndarray | None = None,
    noise_std: float = 0.0,
    rng_seed=None,
) -> TrajectoryDataset:
    """Simulate under the given input; noise is added to recorded outputs only."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[1] != params.n_u:
        raise ValueError(f"input has {u.shape[1]} channels, plant expects {params.n_u}")
    x = params.default_x0() if x0 is None else np.asarray(x0, dtype=float).copy()
    ys = np.empty((u.shape[0], params.n_y))
    for k in range(u.shape[0]):
        x = plant_step(params, x, float(u[k, 0]))
        ys[k] = plant_output(params, x)
    if noise_std > 0.0:
        rng = np.random.default_rng(rng_seed)
        ys = ys + rng.normal(0.0, noise_std, size=ys.shape)
    return TrajectoryDataset(u=u, y=ys, meta=params, x_final=x)


# -- standardization ----------------------------------------------------------

_VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class Scaler:
    """Per-channel affine map x -> (x - mean) / scale with an exact inverse."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))
        if np.any(self.scale <= 0):
            raise ValueError("scale factors must be positive")

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @staticmethod
    def from_dict(doc: dict) -> "Scaler":
        return Scaler(np.asarray(doc["mean"]), np.asarray(doc["scale"]))


def fit_scaler(rows: np.ndarray) -> Scaler:
    """Zero-mean unit-variance per channel; constant channels get scale 1."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    scale = np.where(std < _VARIANCE_FLOOR, 1.0, std)
    return Scaler(mean, scale)


def standardize(
    datasets: TrajectoryDataset | list[TrajectoryDataset],
    scalers: tuple[Scaler, Scaler] | None = None,
) -> tuple[list[TrajectoryDataset], tuple[Scaler, Scaler]]:
    """Fit (or reuse) per-channel scalers and return rescaled copies.

    When ``scalers`` is None they are fit on the pooled rows of all given
    datasets; pass the stored pair to put later data on the same scale.
    """
    single = isinstance(datasets, TrajectoryDataset)
    collection = [datasets] if single else list(datasets)
    if not collection:
        raise ValueError("no datasets to standardize")
    if scalers is None:
        u_scaler = fit_scaler(np.concatenate([d.u for d in collection]))
        y_scaler = fit_scaler(np.concatenate([d.y for d in collection]))
    else:
        u_scaler, y_scaler = scalers
    scaled = [
        TrajectoryDataset(
            u=u_scaler.transform(d.u),
            y=y_scaler.transform(d.y),
            meta=d.meta,
            x_final=d.x_final,
        )
        for d in collection
    ]
    return scaled, (u_scaler, y_scaler)


# -- file formats --------------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_dataset(
    path: str | Path,
    dataset: TrajectoryDataset,
    scalers: tuple[Scaler, Scaler] | None = None,
) -> None:
    """CSV with header t,u_0..,y_0.. plus a JSON sidecar with plant and scaler info."""
    path = Path(path)
    n_u, n_y = dataset.u.shape[1], dataset.y.shape[1]
    header = ["t"] + [f"u_{i}" for i in range(n_u)] + [f"y_{i}" for i in range(n_y)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(len(dataset)):
            row = (
                [t]
                + [repr(float(v)) for v in dataset.u[t]]
                + [repr(float(v)) for v in dataset.y[t]]
            )
            writer.writerow(row)
    sidecar = {
        "plant": asdict(dataset.meta),
        "length": len(dataset),
        "x_final": None if dataset.x_final is None else list(map(float, dataset.x_final)),
        "scaler": None
        if scalers is None
        else {"u": scalers[0].to_dict(), "y": scalers[1].to_dict()},
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> tuple[TrajectoryDataset, tuple[Scaler, Scaler] | None]:
    path = Path(path)
    sidecar = json.loads(_sidecar_path(path).read_text())
    params = PlantParams(**sidecar["plant"])
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    n_u = sum(1 for col in header if col.startswith("u_"))
    n_y = sum(1 for col in header if col.startswith("y_"))
    if len(rows) != sidecar["length"]:
        raise ValueError(
            f"{path}: sidecar says {sidecar['length']} rows, CSV has {len(rows)}"
        )
    u = np.array([[float(r[1 + i]) for i in range(n_u)] for r in rows])
    v = np.array([[float(r[1 + n_u + i]) for i in range(n_y)] for r in rows])
    if len(rows) == 0:
        u = u.reshape(0, n_u)
        v = v.reshape(0, n_y)
    x_final = None if sidecar["x_final"] is None else np.asarray(sidecar["x_final"])
    dataset = TrajectoryDataset(u=u, y=v, meta=params, x_final=x_final)
    scalers = None
    if sidecar["scaler"] is not None:
        scalers = (
            Scaler.from_dict(sidecar["scaler"]["u"]),
            Scaler.from_dict(sidecar["scaler"]["y"]),
        )
    return dataset, scalers
