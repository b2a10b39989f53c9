"""Experiment configuration: one JSON file drives every command.

Loading is strict (unknown keys anywhere are rejected, values are
type-checked) and saving materializes every field, so a stored config is a
complete record of the run.  load(save(cfg)) == cfg holds exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .meta import MetaConfig
from .nssm import NssmConfig


class ConfigError(ValueError):
    """Bad configuration file or inconsistent settings."""


_PLANT_OUTPUTS = {"vdp": 2, "pendulum": 1}


def _default_nssm(plant_kind: str) -> NssmConfig:
    return NssmConfig(n_u=1, n_y=_PLANT_OUTPUTS[plant_kind], n_z=8, H=10, T=20)


@dataclass(frozen=True)
class ExperimentConfig:
    plant_kind: str = "vdp"
    plant_dt: float = 0.05
    n_source: int = 32
    source_len: int = 500
    target_count: int = 1
    target_len: int = 300
    noise_std: float = 0.01
    excitation_amplitude: float = 2.0
    # Targets may need gentler excitation than sources (e.g. staying near the
    # pendulum's upright operating point); None means "same as sources".
    target_excitation_amplitude: float | None = None
    # Zero-input hold at the start of every generated trajectory.  Regulation
    # studies need the operating point itself represented in the data; without
    # it the model is unconstrained at the setpoint the controller steers to.
    excitation_settle: int = 0
    # Per-step uniform noise riding on the piecewise-constant levels.  Dwelled
    # inputs are constant across whole training windows, which leaves the
    # step-by-step timing of the input response unidentified; the jitter puts
    # within-window input variation back so one-step gains are pinned down.
    excitation_jitter: float = 0.0
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs_out"
    nssm: NssmConfig = field(default_factory=lambda: _default_nssm("vdp"))
    meta: MetaConfig = field(default_factory=MetaConfig)
    mpc_horizon: int = 20
    mpc_q: float = 1.0
    mpc_r: float = 0.1
    mpc_u_max: float = 5.0
    track_len: int = 250
    ref_omega0: float = 0.5
    # When set, tracking episodes start from a hold-and-release perturbation of
    # the operating point (first state component offset by this many physical
    # units, zero rate) instead of continuing from the dataset's final state.
    track_start_offset: float | None = None
    adapt_steps: tuple[int, ...] = (0, 10, 100, 1000, 3000)
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.plant_kind not in _PLANT_OUTPUTS:
            raise ConfigError(f"unknown plant_kind {self.plant_kind!r}")
        if self.nssm.n_u != 1:
            raise ConfigError("plants are single-input; nssm.n_u must be 1")
        expected_ny = _PLANT_OUTPUTS[self.plant_kind]
        if self.nssm.n_y != expected_ny:
            raise ConfigError(
                f"{self.plant_kind} has {expected_ny} outputs; nssm.n_y is {self.nssm.n_y}"
            )
        if self.plant_dt <= 0:
            raise ConfigError("plant_dt must be positive")
        if self.n_source < 1 or self.target_count < 1:
            raise ConfigError("need at least one source and one target system")
        window = self.nssm.H + self.nssm.T
        if self.source_len < window or self.target_len < window:
            raise ConfigError(f"trajectories must be at least H+T={window} steps long")
        if self.meta.batch_size > self.n_source:
            raise ConfigError(
                f"meta.batch_size {self.meta.batch_size} exceeds n_source {self.n_source}"
            )
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.excitation_amplitude <= 0:
            raise ConfigError("excitation_amplitude must be positive")
        if self.target_excitation_amplitude is not None and self.target_excitation_amplitude <= 0:
            raise ConfigError("target_excitation_amplitude must be positive when set")
        if self.excitation_settle < 0:
            raise ConfigError("excitation_settle must be nonnegative")
        if self.excitation_settle >= min(self.source_len, self.target_len):
            raise ConfigError("excitation_settle must leave room for excited steps")
        if self.excitation_jitter < 0:
            raise ConfigError("excitation_jitter must be nonnegative")
        if not self.seeds:
            raise ConfigError("seeds list must be nonempty")
        if self.mpc_horizon < 1 or self.mpc_q <= 0 or self.mpc_r <= 0 or self.mpc_u_max <= 0:
            raise ConfigError("mpc_horizon, mpc_q, mpc_r, mpc_u_max must be positive")
        # Negative ref_omega0 traverses the circle clockwise, the orientation a
        # plant with y2 = dy1/dt can actually follow.
        if self.track_len < 0 or self.ref_omega0 == 0:
            raise ConfigError("track_len must be >= 0 and ref_omega0 nonzero")
        if self.track_start_offset is not None and self.track_start_offset <= 0:
            raise ConfigError("track_start_offset must be positive when set")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be nonnegative")
        steps = self.adapt_steps
        if not steps or any(s < 0 for s in steps) or list(steps) != sorted(set(steps)):
            raise ConfigError("adapt_steps must be nonempty, nonnegative, strictly increasing")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["seeds"] = list(self.seeds)
        doc["adapt_steps"] = list(self.adapt_steps)
        return doc


def _coerce(name: str, value, kind: type):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{name}: unsupported field type")


def _int_tuple(name: str, value) -> tuple[int, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{name}: expected a list of integers, got {value!r}")
    return tuple(_coerce(f"{name}[{i}]", v, int) for i, v in enumerate(value))


def _sub_config(name: str, cls, defaults, doc: dict):
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected an object")
    spec = {f.name: f.type for f in fields(cls)}
    merged = asdict(defaults)
    for key, value in doc.items():
        if key not in spec:
            raise ConfigError(f"unknown key {name}.{key}")
        kind = float if "float" in str(spec[key]) else int
        if value is None and "None" in str(spec[key]):
            merged[key] = None
        else:
            merged[key] = _coerce(f"{name}.{key}", value, kind)
    try:
        return cls(**merged)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    plant_kind = _coerce("plant_kind", doc.get("plant_kind", "vdp"), str)
    if plant_kind not in _PLANT_OUTPUTS:
        raise ConfigError(f"unknown plant_kind {plant_kind!r}")

    kw: dict = {"plant_kind": plant_kind}
    kw["nssm"] = _sub_config("nssm", NssmConfig, _default_nssm(plant_kind), doc.get("nssm", {}))
    kw["meta"] = _sub_config("meta", MetaConfig, MetaConfig(), doc.get("meta", {}))
    for f in fields(ExperimentConfig):
        if f.name in ("plant_kind", "nssm", "meta") or f.name not in doc:
            continue
        if f.name in ("seeds", "adapt_steps"):
            kw[f.name] = _int_tuple(f.name, doc[f.name])
        elif f.name == "out_dir":
            kw[f.name] = _coerce(f.name, doc[f.name], str)
        elif f.name in ("target_excitation_amplitude", "track_start_offset"):
            if doc[f.name] is not None:
                kw[f.name] = _coerce(f.name, doc[f.name], float)
        elif f.name in ("plant_dt", "noise_std", "excitation_amplitude", "excitation_jitter", "mpc_q", "mpc_r", "mpc_u_max", "ref_omega0"):
            kw[f.name] = _coerce(f.name, doc[f.name], float)
        else:
            kw[f.name] = _coerce(f.name, doc[f.name], int)
    try:
        return ExperimentConfig(**kw)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def default_experiment_config(plant_kind: str) -> ExperimentConfig:
    """Paper-scale defaults for the given plant family."""
    if plant_kind not in _PLANT_OUTPUTS:
        raise ConfigError(f"unknown plant_kind {plant_kind!r}")
    u_max = 5.0 if plant_kind == "vdp" else 2.0
    return ExperimentConfig(
        plant_kind=plant_kind, nssm=_default_nssm(plant_kind), mpc_u_max=u_max
    )
