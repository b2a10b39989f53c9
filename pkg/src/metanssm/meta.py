"""Bilevel meta-training: proximal inner adaptation, CG implicit gradients,
first-order baseline, closed-loop source-data growth.

The outer problem minimizes the average post-adaptation test loss over source
tasks.  For the implicit variant each task solves

    omega_b = argmin_psi  l(D_tr; psi) + (gamma/2) ||psi - omega||^2

by a few gradient steps, and the meta-gradient is g_b = (Q_b)^{-1} P_b with
Q_b = I + (1/gamma) H_tr(omega_b) and P_b the test-set gradient at omega_b,
obtained matrix-free by conjugate gradient on Q_b phi = P_b.  The first-order
baseline adapts by plain descent and uses P_b itself as the meta-gradient.

Randomness is path-addressed: every stochastic choice draws from a generator
seeded by (master_seed, stream, outer_iteration, task_index, substream), so
any iteration can be reproduced or resumed without replaying history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mpc import MpcSpec, receding_horizon_track
from .nssm import BatchObjective, Nssm, WindowBatch
from .paramvec import ParamVector
from .plants import PlantParams, Scaler, TrajectoryDataset


class OuterStepError(RuntimeError):
    """A task inside an outer step failed; carries the offending task index."""

    def __init__(self, task_index: int, message: str):
        super().__init__(f"task {task_index}: {message}")
        self.task_index = task_index


class NegativeCurvatureError(RuntimeError):
    """CG met a direction of nonpositive curvature in Q_b."""


def seeded_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Generator addressed by an integer path under one master seed."""
    entropy = (int(master_seed),) + tuple(int(x) for x in path)
    return np.random.default_rng(np.random.SeedSequence(entropy))


# stream labels for seeded_rng paths
STREAM_INIT = 0
STREAM_SELECT = 1
STREAM_TASK = 2
STREAM_DATA = 10


@dataclass(frozen=True)
class MetaConfig:
    gamma: float = 1.0
    # Anchor weight for deployment-time adaptation; None reuses gamma.  The
    # meta-inference phase takes its own regularizer, and the value the outer
    # loop needs for curvature control can be far stiffer than what few-shot
    # adaptation tolerates before the anchor freezes all descent.
    adapt_gamma: float | None = None
    beta_out: float = 1e-3
    beta_in: float = 1e-3
    M: int = 10
    cg_iters: int = 20
    cg_tol: float = 1e-6
    batch_size: int = 16
    outer_iters: int = 500
    explore_std: float = 0.1
    windows_per_task: int = 32
    train_fraction: float = 0.5
    episode_len: int = 50

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.adapt_gamma is not None and self.adapt_gamma <= 0:
            raise ValueError("adapt_gamma must be positive when set")
        if self.beta_out <= 0 or self.beta_in <= 0:
            raise ValueError("learning rates must be positive")
        if self.M < 1:
            raise ValueError("inner step count M must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.cg_iters < 1 or self.cg_tol <= 0:
            raise ValueError("cg_iters must be >= 1 and cg_tol positive")
        if self.explore_std < 0 or self.windows_per_task < 1 or self.episode_len < 0:
            raise ValueError("bad sampling sizes")


# -- windows and splits ---------------------------------------------------------

def sample_windows(dataset: TrajectoryDataset, H: int, T: int, count: int, rng_seed) -> WindowBatch:
    """Contiguous (H history, T future) windows at uniformly random start rows.

    Starts are drawn without replacement whenever the dataset offers enough
    distinct positions, otherwise with replacement.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n_starts = len(dataset) - (H + T) + 1
    if n_starts < 1:
        raise ValueError(f"dataset length {len(dataset)} is shorter than one window H+T={H + T}")
    rng = np.random.default_rng(rng_seed)
    starts = rng.choice(n_starts, size=count, replace=count > n_starts)
    hu = np.stack([dataset.u[s : s + H] for s in starts])
    hy = np.stack([dataset.y[s : s + H] for s in starts])
    fu = np.stack([dataset.u[s + H : s + H + T] for s in starts])
    fy = np.stack([dataset.y[s + H : s + H + T] for s in starts])
    return WindowBatch(history_u=hu, history_y=hy, future_u=fu, future_y=fy)


@dataclass(frozen=True)
class TaskSplit:
    train: WindowBatch
    test: WindowBatch


def _index_batch(batch: WindowBatch, idx: np.ndarray) -> WindowBatch:
    return WindowBatch(
        history_u=batch.history_u[idx],
        history_y=batch.history_y[idx],
        future_u=batch.future_u[idx],
        future_y=batch.future_y[idx],
    )


def partition(batch: WindowBatch, train_fraction: float, rng_seed) -> TaskSplit:
    """Random disjoint split into ceil(f*B) training and remaining test windows."""
    b = batch.size
    if b < 2:
        raise ValueError("need at least 2 windows to split")
    n_train = math.ceil(train_fraction * b)
    if n_train >= b:
        raise ValueError(f"train_fraction={train_fraction} leaves an empty test split for {b} windows")
    perm = np.random.default_rng(rng_seed).permutation(b)
    return TaskSplit(
        train=_index_batch(batch, np.sort(perm[:n_train])),
        test=_index_batch(batch, np.sort(perm[n_train:])),
    )


# -- inner adaptation --------------------------------------------------------------

def _check_finite(value: float, grad: ParamVector, step: int) -> None:
    if not (np.isfinite(value) and np.all(np.isfinite(grad.values))):
        raise ArithmeticError(f"non-finite inner loss or gradient at step {step}")


def inner_adapt_imaml(objective, omega: ParamVector, cfg: MetaConfig) -> ParamVector:
    """M proximal gradient-descent steps from omega on loss + (gamma/2)||psi-omega||^2."""
    psi = omega
    for m in range(cfg.M):
        value, grad = objective.value_and_grad(psi)
        _check_finite(value, grad, m)
        psi = psi - cfg.beta_in * (grad + cfg.gamma * (psi - omega))
    if not np.all(np.isfinite(psi.values)):
        raise ArithmeticError(f"non-finite iterate after step {cfg.M - 1}")
    return psi


def inner_adapt_maml(objective, omega: ParamVector, cfg: MetaConfig) -> ParamVector:
    """M plain gradient-descent steps from omega (no proximal pull)."""
    psi = omega
    for m in range(cfg.M):
        value, grad = objective.value_and_grad(psi)
        _check_finite(value, grad, m)
        psi = psi - cfg.beta_in * grad
    if not np.all(np.isfinite(psi.values)):
        raise ArithmeticError(f"non-finite iterate after step {cfg.M - 1}")
    return psi


def supervised_train(objective, omega0: ParamVector, steps: int, beta_in: float) -> ParamVector:
    """Plain descent on one dataset's loss; the no-meta-knowledge baseline."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    psi = omega0
    for m in range(steps):
        value, grad = objective.value_and_grad(psi)
        _check_finite(value, grad, m)
        psi = psi - beta_in * grad
    return psi


# -- implicit meta-gradient ----------------------------------------------------------

def cg_solve_meta_gradient(train_obj, test_obj, omega_b: ParamVector, cfg: MetaConfig) -> ParamVector:
    """Approximate (I + H_tr/gamma)^{-1} grad_test via conjugate gradient.

    Matrix-free: each iteration costs one training-set HVP at omega_b.  Stops
    at cg_iters or when the residual drops below cg_tol times the right-hand
    side norm.
    """
    p_b = test_obj.gradient(omega_b)
    rhs_norm = p_b.norm()
    if rhs_norm == 0.0:
        return p_b
    phi = p_b.zeros_like()
    r = p_b
    d = r
    rs = r.dot(r)
    for _ in range(cfg.cg_iters):
        qd = d + (1.0 / cfg.gamma) * train_obj.hvp(omega_b, d)
        dqd = d.dot(qd)
        if dqd <= 0.0:
            raise NegativeCurvatureError(
                f"Q^b not positive definite (curvature {dqd:.3e}); increase gamma"
            )
        alpha = rs / dqd
        phi = phi + alpha * d
        r = r - alpha * qd
        rs_next = r.dot(r)
        if np.sqrt(rs_next) <= cfg.cg_tol * rhs_norm:
            break
        d = r + (rs_next / rs) * d
        rs = rs_next
    return phi


# -- closed-loop data growth -----------------------------------------------------------

def collect_closed_loop(
    model: Nssm,
    omega_b: ParamVector,
    plant: PlantParams,
    dataset: TrajectoryDataset,
    mpc_spec: MpcSpec,
    cfg: MetaConfig,
    scalers: tuple[Scaler, Scaler],
    rng_seed,
    reference: np.ndarray | None = None,
    noise_std: float = 0.0,
) -> TrajectoryDataset:
    """Run the tracking controller on the adapted model and append the episode.

    The dataset is in standardized units and must carry the plant state it
    ended in; the episode continues from there.  Exploration noise of standard
    deviation cfg.explore_std (standardized input units) is added to every
    command, clipped to the input box.
    """
    H = model.config.H
    if len(dataset) < H:
        raise ValueError(f"dataset must provide at least H={H} recent steps")
    if dataset.x_final is None:
        raise ValueError("dataset lacks the continuation state x_final")
    if cfg.episode_len == 0:
        return dataset
    u_sc, y_sc = scalers
    reference = (
        np.zeros((cfg.episode_len, plant.n_y)) if reference is None else reference
    )
    # Exploration noise dominates fine solver accuracy here, so the QP budget
    # is kept small; deployment tracking uses the tight defaults.
    result = receding_horizon_track(
        model,
        omega_b,
        plant,
        mpc_spec,
        reference,
        history_u=u_sc.inverse(dataset.u[-H:]),
        history_y=y_sc.inverse(dataset.y[-H:]),
        x0=dataset.x_final,
        noise_std=noise_std,
        explore_std=cfg.explore_std,
        rng_seed=rng_seed,
        scalers=scalers,
        qp_iters=120,
        qp_tol=1e-6,
    )
    return TrajectoryDataset(
        u=np.vstack([dataset.u, u_sc.transform(result.u)]),
        y=np.vstack([dataset.y, y_sc.transform(result.y_measured)]),
        meta=dataset.meta,
        x_final=result.x_final,
    )


# -- tasks ------------------------------------------------------------------------------

@dataclass
class SourceTask:
    """One source system: its simulator, its growing standardized dataset, scalers.

    The dataset field is replaced (not mutated) after each collection episode,
    so snapshots of a task are cheap and safe.
    """

    plant: PlantParams
    dataset: TrajectoryDataset
    scalers: tuple[Scaler, Scaler]
    mpc_spec: MpcSpec
    noise_std: float = 0.0
    reference: np.ndarray | None = None

    def split_objectives(self, model: Nssm, cfg: MetaConfig, rng_windows, rng_partition):
        batch = sample_windows(
            self.dataset, model.config.H, model.config.T, cfg.windows_per_task, rng_windows
        )
        split = partition(batch, cfg.train_fraction, rng_partition)
        return BatchObjective(model, split.train), BatchObjective(model, split.test)

    def collect(self, model: Nssm, omega_b: ParamVector, cfg: MetaConfig, rng_seed) -> None:
        self.dataset = collect_closed_loop(
            model,
            omega_b,
            self.plant,
            self.dataset,
            self.mpc_spec,
            cfg,
            self.scalers,
            rng_seed,
            reference=self.reference,
            noise_std=self.noise_std,
        )


# -- outer loop ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepMetrics:
    outer_iter: int
    algorithm: str
    mean_test_loss: float
    grad_norm: float
    wall_ms: float = 0.0


def _select_tasks(n_tasks: int, cfg: MetaConfig, master_seed: int, outer_iter: int) -> np.ndarray:
    if cfg.batch_size > n_tasks:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds task count {n_tasks}")
    rng = seeded_rng(master_seed, STREAM_SELECT, outer_iter)
    return np.sort(rng.choice(n_tasks, size=cfg.batch_size, replace=False))


def _outer_step(
    model: Nssm | None,
    omega: ParamVector,
    tasks: list,
    cfg: MetaConfig,
    master_seed: int,
    outer_iter: int,
    adapt,
    task_gradient,
    algorithm: str,
    collect: bool,
) -> tuple[ParamVector, StepMetrics]:
    indices = _select_tasks(len(tasks), cfg, master_seed, outer_iter)
    g_sum = omega.zeros_like()
    loss_sum = 0.0
    for ti in indices:
        try:
            train_obj, test_obj = tasks[ti].split_objectives(
                model,
                cfg,
                seeded_rng(master_seed, STREAM_TASK, outer_iter, ti, 0),
                seeded_rng(master_seed, STREAM_TASK, outer_iter, ti, 1),
            )
            omega_b = adapt(train_obj, omega, cfg)
            g_b = task_gradient(train_obj, test_obj, omega_b, cfg)
            loss_sum += test_obj.value(omega_b)
            if collect:
                tasks[ti].collect(
                    model, omega_b, cfg, seeded_rng(master_seed, STREAM_TASK, outer_iter, ti, 2)
                )
        except Exception as exc:
            raise OuterStepError(int(ti), str(exc)) from exc
        g_sum = g_sum + g_b
    g_mean = (1.0 / cfg.batch_size) * g_sum
    new_omega = omega - cfg.beta_out * g_mean
    metrics = StepMetrics(
        outer_iter=outer_iter,
        algorithm=algorithm,
        mean_test_loss=loss_sum / cfg.batch_size,
        grad_norm=g_mean.norm(),
    )
    return new_omega, metrics


def outer_step_imaml(
    model, omega, tasks, cfg, master_seed, outer_iter, collect: bool = True
) -> tuple[ParamVector, StepMetrics]:
    return _outer_step(
        model, omega, tasks, cfg, master_seed, outer_iter,
        adapt=inner_adapt_imaml,
        task_gradient=cg_solve_meta_gradient,
        algorithm="imaml",
        collect=collect,
    )


def outer_step_maml(
    model, omega, tasks, cfg, master_seed, outer_iter, collect: bool = True
) -> tuple[ParamVector, StepMetrics]:
    def first_order_gradient(train_obj, test_obj, omega_b, _cfg):
        return test_obj.gradient(omega_b)

    return _outer_step(
        model, omega, tasks, cfg, master_seed, outer_iter,
        adapt=inner_adapt_maml,
        task_gradient=first_order_gradient,
        algorithm="maml",
        collect=collect,
    )


_OUTER_STEPS = {"imaml": outer_step_imaml, "maml": outer_step_maml}


def run_meta_training(
    model: Nssm,
    tasks: list,
    cfg: MetaConfig,
    master_seed: int,
    algorithm: str = "imaml",
    omega: ParamVector | None = None,
    start_iteration: int = 0,
    collect: bool = True,
    on_step=None,
) -> tuple[ParamVector, list[StepMetrics]]:
    """Outer loop to the configured budget; resumable from (omega, iteration, tasks).

    Because randomness is path-addressed, restarting from a saved omega and the
    tasks' saved datasets at start_iteration reproduces the original run bit
    for bit.
    """
    if algorithm not in _OUTER_STEPS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    step = _OUTER_STEPS[algorithm]
    if omega is None:
        omega = model.init_params(seeded_rng(master_seed, STREAM_INIT))
    history = []
    for it in range(start_iteration, cfg.outer_iters):
        omega, metrics = step(model, omega, tasks, cfg, master_seed, it, collect=collect)
        history.append(metrics)
        if on_step is not None:
            on_step(omega, metrics)
    return omega, history
