"""Experiment commands: source generation, meta-training, few-shot adaptation,
closed-loop tracking, and cross-seed aggregation.

Each command is a pure function of (config, seed, input files) writing only
under the given output directory, so re-runs are byte-identical.  Directory
layout under <out>:

    sources/seed<k>/source_###.csv(+.json)   standardized source trajectories
    sources/seed<k>/target_<j>.csv(+.json)   scarce target data, source scaling
    runs/seed<k>/<algorithm>/metrics.csv     per-iteration training metrics
    runs/seed<k>/<algorithm>/checkpoint_*.json
    runs/seed<k>/<algorithm>/adapt/          adaptation losses + checkpoints
    runs/seed<k>/<algorithm>/track/          tracking traces + summaries
    report.csv                               mean/std grouped by (algorithm, steps)
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .meta import (
    STREAM_DATA,
    STREAM_INIT,
    SourceTask,
    run_meta_training,
    supervised_train,
    seeded_rng,
)
from .mpc import MpcSpec, meta_inference, receding_horizon_track, save_trace
from .nssm import (
    BatchObjective,
    Nssm,
    WindowBatch,
    load_checkpoint,
    save_checkpoint,
)
from .plants import (
    TrajectoryDataset,
    excitation,
    generate_trajectory,
    load_dataset,
    plant_output,
    sample_params,
    save_dataset,
    standardize,
)

logger = logging.getLogger("metanssm")

STREAM_TRACK = 40

ALGORITHMS = ("imaml", "maml", "supervised")
TRAIN_ALGORITHMS = ("imaml", "maml")

METRICS_HEADER = ["outer_iter", "algorithm", "mean_test_loss", "grad_norm", "wall_ms"]


def sources_dir(out_dir: str | Path, seed: int) -> Path:
    return Path(out_dir) / "sources" / f"seed{seed}"


def run_dir(out_dir: str | Path, seed: int, algorithm: str) -> Path:
    return Path(out_dir) / "runs" / f"seed{seed}" / algorithm


def mpc_spec_for(config: ExperimentConfig) -> MpcSpec:
    n_y = config.nssm.n_y
    return MpcSpec(
        N=config.mpc_horizon,
        Q=config.mpc_q * np.eye(n_y),
        R=config.mpc_r * np.eye(1),
        u_min=np.array([-config.mpc_u_max]),
        u_max=np.array([config.mpc_u_max]),
    )


def build_reference(config: ExperimentConfig) -> np.ndarray:
    """Tracking target: radius-2 circle for the oscillator, upright (zero) for
    the pendulum."""
    t = np.arange(config.track_len)
    if config.plant_kind == "vdp":
        angle = config.ref_omega0 * t * config.plant_dt
        return 2.0 * np.column_stack([np.cos(angle), np.sin(angle)])
    return np.zeros((config.track_len, 1))


def all_windows(dataset: TrajectoryDataset, H: int, T: int) -> WindowBatch:
    """Every contiguous window of the dataset, in order; the full-dataset loss."""
    n_starts = len(dataset) - (H + T) + 1
    if n_starts < 1:
        raise ConfigError(f"dataset of {len(dataset)} rows has no full H+T={H + T} window")
    return WindowBatch(
        history_u=np.stack([dataset.u[s : s + H] for s in range(n_starts)]),
        history_y=np.stack([dataset.y[s : s + H] for s in range(n_starts)]),
        future_u=np.stack([dataset.u[s + H : s + H + T] for s in range(n_starts)]),
        future_y=np.stack([dataset.y[s + H : s + H + T] for s in range(n_starts)]),
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [repr(float(v)) if isinstance(v, float) else str(v) for v in row]
            )


# -- make-source ------------------------------------------------------------------


def _with_jitter(u: np.ndarray, jitter: float, rng_seed) -> np.ndarray:
    if jitter <= 0:
        return u
    rng = np.random.default_rng(rng_seed)
    return u + rng.uniform(-jitter, jitter, size=u.shape)


def cmd_make_source(config: ExperimentConfig, seed: int, out_dir: str | Path) -> Path:
    """Sample source/target systems, excite them, standardize, persist."""
    sdir = sources_dir(out_dir, seed)
    sdir.mkdir(parents=True, exist_ok=True)
    kind, amp = config.plant_kind, config.excitation_amplitude

    # Data is collected around the operating point of each study: the origin for
    # the oscillator, upright balance for the pendulum (which otherwise starts
    # hanging and never visits the regime the controller must hold).
    x0 = np.zeros(2) if kind == "pendulum" else None

    plants = sample_params(kind, config.n_source, seeded_rng(seed, STREAM_DATA, 0))
    raws = []
    for k, plant in enumerate(plants):
        plant = _with_dt(plant, config.plant_dt)
        u = excitation(config.source_len, 1, amp, seeded_rng(seed, STREAM_DATA, 1, k))
        u = _with_jitter(u, config.excitation_jitter, seeded_rng(seed, STREAM_DATA, 6, k))
        u[: config.excitation_settle] = 0.0
        raws.append(
            generate_trajectory(
                plant, u, x0=x0,
                noise_std=config.noise_std, rng_seed=seeded_rng(seed, STREAM_DATA, 2, k)
            )
        )
    scaled, scalers = standardize(raws)
    for k, ds in enumerate(scaled):
        save_dataset(sdir / f"source_{k:03d}.csv", ds, scalers)

    t_amp = config.target_excitation_amplitude
    if t_amp is None:
        t_amp = amp
    targets = sample_params(kind, config.target_count, seeded_rng(seed, STREAM_DATA, 3))
    for j, plant in enumerate(targets):
        plant = _with_dt(plant, config.plant_dt)
        u = excitation(config.target_len, 1, t_amp, seeded_rng(seed, STREAM_DATA, 4, j))
        u = _with_jitter(u, config.excitation_jitter, seeded_rng(seed, STREAM_DATA, 7, j))
        u[: config.excitation_settle] = 0.0
        raw = generate_trajectory(
            plant, u, x0=x0,
            noise_std=config.noise_std, rng_seed=seeded_rng(seed, STREAM_DATA, 5, j)
        )
        ds = standardize(raw, scalers=scalers)[0][0]
        save_dataset(sdir / f"target_{j}.csv", ds, scalers)
    logger.info("make-source: wrote %d sources, %d targets under %s",
                len(plants), len(targets), sdir)
    return sdir


def _with_dt(plant, dt: float):
    return plant if plant.dt == dt else dataclasses.replace(plant, dt=dt)


def load_source_tasks(config: ExperimentConfig, seed: int, out_dir: str | Path) -> list[SourceTask]:
    sdir = sources_dir(out_dir, seed)
    files = sorted(sdir.glob("source_*.csv"))
    if len(files) != config.n_source:
        raise ConfigError(
            f"{sdir} holds {len(files)} source files, config expects {config.n_source}; "
            "run make-source first"
        )
    spec = mpc_spec_for(config)
    # Collection episodes are exploratory: bound them to the input envelope the
    # scalers (and initial datasets) were built from, and keep the lookahead
    # short.  Deployment tracking uses the full box and horizon.
    amp = config.excitation_amplitude
    if 0.0 < amp < config.mpc_u_max:
        spec = dataclasses.replace(spec, u_min=np.array([-amp]), u_max=np.array([amp]))
    if spec.N > 5:
        spec = dataclasses.replace(spec, N=5)
    tasks = []
    for path in files:
        ds, scalers = load_dataset(path)
        if scalers is None:
            raise ConfigError(f"{path}: missing scaler sidecar")
        tasks.append(
            SourceTask(
                plant=ds.meta,
                dataset=ds,
                scalers=scalers,
                mpc_spec=spec,
                noise_std=config.noise_std,
            )
        )
    return tasks


def load_target(config: ExperimentConfig, seed: int, out_dir: str | Path, index: int):
    path = sources_dir(out_dir, seed) / f"target_{index}.csv"
    if not path.exists():
        raise ConfigError(f"missing target dataset {path}; run make-source first")
    ds, scalers = load_dataset(path)
    if scalers is None:
        raise ConfigError(f"{path}: missing scaler sidecar")
    return ds, scalers


# -- meta-train --------------------------------------------------------------------


def cmd_meta_train(
    config: ExperimentConfig, seed: int, out_dir: str | Path, algorithm: str
) -> Path:
    """Run the outer loop to budget; write metrics CSV and checkpoints."""
    if algorithm not in TRAIN_ALGORITHMS:
        raise ConfigError(f"meta-train supports {TRAIN_ALGORITHMS}, got {algorithm!r}")
    tasks = load_source_tasks(config, seed, out_dir)
    model = Nssm(config.nssm)
    rdir = run_dir(out_dir, seed, algorithm)
    rdir.mkdir(parents=True, exist_ok=True)

    rows: list[list] = []
    started = time.perf_counter()
    last = [started]

    def on_step(omega, metrics):
        now = time.perf_counter()
        logger.info(
            "meta-train %s iter %d: mean_test_loss=%.6g grad_norm=%.3g (%.0f ms)",
            algorithm, metrics.outer_iter, metrics.mean_test_loss,
            metrics.grad_norm, 1e3 * (now - last[0]),
        )
        last[0] = now
        log_loss = (
            math.log(metrics.mean_test_loss) if metrics.mean_test_loss > 0 else float("-inf")
        )
        # wall time is logged above but written as 0 so re-runs are byte-identical
        rows.append([metrics.outer_iter, algorithm, log_loss, metrics.grad_norm, 0.0])
        completed = metrics.outer_iter + 1
        every = config.checkpoint_every
        if every and completed % every == 0 and completed < config.meta.outer_iters:
            save_checkpoint(rdir / f"checkpoint_{completed:06d}.json", config.nssm, omega)
            state = rdir / f"state_{completed:06d}"
            state.mkdir(exist_ok=True)
            for k, task in enumerate(tasks):
                save_dataset(state / f"task_{k:03d}.csv", task.dataset, task.scalers)

    omega, _ = run_meta_training(
        model, tasks, config.meta, master_seed=seed, algorithm=algorithm, on_step=on_step
    )
    _write_csv(rdir / "metrics.csv", METRICS_HEADER, rows)
    save_checkpoint(rdir / "checkpoint_final.json", config.nssm, omega)
    logger.info("meta-train %s done in %.1f s", algorithm, time.perf_counter() - started)
    return rdir


# -- adapt -------------------------------------------------------------------------


def _initial_params(config: ExperimentConfig, seed: int, out_dir, algorithm: str, model: Nssm):
    if algorithm == "supervised":
        return model.init_params(seeded_rng(seed, STREAM_INIT))
    ckpt = run_dir(out_dir, seed, algorithm) / "checkpoint_final.json"
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}; run meta-train first")
    ckpt_config, params = load_checkpoint(ckpt)
    if ckpt_config != config.nssm:
        raise ConfigError(f"{ckpt}: checkpoint architecture differs from config")
    return params


def cmd_adapt(config: ExperimentConfig, seed: int, out_dir: str | Path, algorithm: str) -> Path:
    """Adapt to each target dataset, logging loss at the configured step counts.

    iMAML uses proximal descent anchored at the meta-trained weights; MAML
    continues with plain descent from its meta-trained weights; the supervised
    baseline descends from a random initialization.
    """
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    model = Nssm(config.nssm)
    anchor = _initial_params(config, seed, out_dir, algorithm, model)
    adir = run_dir(out_dir, seed, algorithm) / "adapt"
    adir.mkdir(parents=True, exist_ok=True)

    rows: list[list] = []
    for j in range(config.target_count):
        ds, _ = load_target(config, seed, out_dir, j)
        objective = BatchObjective(model, all_windows(ds, config.nssm.H, config.nssm.T))
        psi, prev = anchor, 0
        for step in config.adapt_steps:
            delta = step - prev
            if delta:
                if algorithm == "imaml":
                    gamma = config.meta.adapt_gamma
                    if gamma is None:
                        gamma = config.meta.gamma
                    psi = meta_inference(
                        objective, anchor, gamma=gamma,
                        steps=delta, lr=config.meta.beta_in, start=psi,
                    )
                else:
                    psi = supervised_train(objective, psi, delta, config.meta.beta_in)
            rows.append([j, step, objective.value(psi)])
            save_checkpoint(adir / f"{algorithm}_target{j}_step{step}.json", config.nssm, psi)
            prev = step
        logger.info("adapt %s target %d: final loss %.6g", algorithm, j, rows[-1][2])
    _write_csv(adir / f"{algorithm}_loss.csv", ["target", "step", "loss"], rows)
    return adir


# -- track -------------------------------------------------------------------------


def cmd_track(config: ExperimentConfig, seed: int, out_dir: str | Path, algorithm: str) -> Path:
    """Run reference tracking with every adapted checkpoint of the algorithm."""
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    model = Nssm(config.nssm)
    spec = mpc_spec_for(config)
    reference = build_reference(config)
    adir = run_dir(out_dir, seed, algorithm) / "adapt"
    tdir = run_dir(out_dir, seed, algorithm) / "track"
    tdir.mkdir(parents=True, exist_ok=True)

    H = config.nssm.H
    for j in range(config.target_count):
        ds, scalers = load_target(config, seed, out_dir, j)
        if config.track_start_offset is not None:
            # Hold-and-release episode: the plant is released from a small
            # offset and observed passively for H steps before the controller
            # engages.  The encoder then sees a dynamically consistent history
            # (a real zero-torque fall) instead of an impossible constant hold,
            # which would make it hallucinate a rate at the moment of handoff.
            x = np.zeros(ds.meta.n_x)
            x[0] = config.track_start_offset
            history_u = np.zeros((H, 1))
            history_y = np.empty((H, ds.meta.n_y))
            for i in range(H):
                x = plant_step(ds.meta, x, 0.0)
                history_y[i] = plant_output(ds.meta, x)
            x0 = x
        else:
            x0 = ds.x_final
            history_u = scalers[0].inverse(ds.u[-H:])
            history_y = scalers[1].inverse(ds.y[-H:])
        for step in config.adapt_steps:
            ckpt = adir / f"{algorithm}_target{j}_step{step}.json"
            if not ckpt.exists():
                raise ConfigError(f"missing adapted checkpoint {ckpt}; run adapt first")
            _, params = load_checkpoint(ckpt)
            result = receding_horizon_track(
                model, params, ds.meta, spec, reference,
                history_u=history_u, history_y=history_y, x0=x0,
                noise_std=config.noise_std, explore_std=0.0,
                rng_seed=seeded_rng(seed, STREAM_TRACK, j, step),
                scalers=scalers,
            )
            save_trace(tdir / f"{algorithm}_target{j}_step{step}_trace.csv", result)
            logger.info(
                "track %s target %d step %d: mean_err=%.4g final_err=%.4g",
                algorithm, j, step, result.mean_err, result.final_err,
            )
    return tdir


# -- report ------------------------------------------------------------------------


def _parse_trace_name(name: str) -> tuple[str, int] | None:
    # <algorithm>_target<j>_step<s>_trace.csv
    if not name.endswith("_trace.csv") or "_step" not in name or "_target" not in name:
        return None
    algorithm = name.split("_target")[0]
    step = name.rsplit("_step", 1)[1].split("_trace")[0]
    return algorithm, int(step)


def cmd_report(out_dir: str | Path) -> Path:
    """Aggregate adaptation losses and tracking errors across all runs."""
    out = Path(out_dir)
    groups: dict[tuple[str, int, str], list[float]] = {}

    def add(algorithm: str, step: int, metric: str, value: float):
        groups.setdefault((algorithm, step, metric), []).append(value)

    for loss_csv in sorted(out.glob("runs/seed*/*/adapt/*_loss.csv")):
        algorithm = loss_csv.name[: -len("_loss.csv")]
        with loss_csv.open(newline="") as fh:
            for row in csv.DictReader(fh):
                add(algorithm, int(row["step"]), "adapt_loss", float(row["loss"]))
    for trace_csv in sorted(out.glob("runs/seed*/*/track/*_trace.csv")):
        parsed = _parse_trace_name(trace_csv.name)
        if parsed is None:
            continue
        algorithm, step = parsed
        summary = json.loads(
            trace_csv.with_suffix(trace_csv.suffix + ".json").read_text()
        )
        add(algorithm, step, "track_mean_err", float(summary["mean_err"]))
        add(algorithm, step, "track_final_err", float(summary["final_err"]))

    rows = []
    for (algorithm, step, metric) in sorted(groups):
        values = np.asarray(groups[(algorithm, step, metric)])
        std = 0.0 if len(values) == 1 else float(np.std(values, ddof=1))
        rows.append([algorithm, step, metric, float(np.mean(values)), std])
    path = out / "report.csv"
    _write_csv(path, ["algorithm", "steps", "metric", "mean", "std"], rows)
    return path
