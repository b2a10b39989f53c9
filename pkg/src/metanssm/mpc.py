"""Lifted linear model, DARE terminal cost, box-constrained tracking MPC.

The trained model's latent matrices define a lifted linear system in
s = [z; y_hat]:

    A = [[A_z,     0],      B = [[B_z],
         [C_z A_z, 0]],          [C_z B_z]]

with the measured quantity recovered by selecting the last m components of s.
The tracking controller minimizes, over the input plan U = (u_1, ..., u_N),

    sum_{k=1}^{N-1} (y_k - ybar_k)' Q (y_k - ybar_k)
      + (y_N - ybar_N)' P (y_N - ybar_N)
      + sum_{k=0}^{N-1} (u_{k+1} - u_k)' R (u_{k+1} - u_k)

subject to a per-channel input box, with the input-increment chain anchored
at the previously applied input.  P defaults to the output-output block of the
s-space DARE solution with lifted weight S'QS.  The condensed problem is a
dense convex QP solved by accelerated projected gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nssm import Nssm
from .paramvec import ParamVector
from .plants import PlantParams, Scaler, plant_output, plant_step


class DareNonConvergenceError(RuntimeError):
    """Riccati fixed-point iteration failed; the lifted pair may be unstabilizable."""


@dataclass(frozen=True)
class CompactModel:
    a: np.ndarray  # (n_z + m, n_z + m)
    b: np.ndarray  # (n_z + m, p)
    n_z: int
    n_y: int

    @property
    def n_s(self) -> int:
        return self.n_z + self.n_y

    @property
    def n_u(self) -> int:
        return self.b.shape[1]

    def selector(self) -> np.ndarray:
        """Output selector picking the last n_y components of s."""
        s = np.zeros((self.n_y, self.n_s))
        s[:, self.n_z :] = np.eye(self.n_y)
        return s


def lift(params: ParamVector) -> CompactModel:
    """Assemble the lifted pair block-wise from the latent matrices."""
    w = params.unflatten()
    a_z, b_z, c_z = w["a_z"], w["b_z"], w["c_z"]
    n_z, n_y = a_z.shape[0], c_z.shape[0]
    a = np.zeros((n_z + n_y, n_z + n_y))
    a[:n_z, :n_z] = a_z
    a[n_z:, :n_z] = c_z @ a_z
    b = np.vstack([b_z, c_z @ b_z])
    return CompactModel(a=a, b=b, n_z=n_z, n_y=n_y)


def solve_dare(
    a: np.ndarray,
    b: np.ndarray,
    q_s: np.ndarray,
    r: np.ndarray,
    tol: float = 1e-10,
    max_iters: int = 20_000,
) -> np.ndarray:
    """Fixed-point Riccati iteration from P_0 = Q_s; returns a symmetric PSD solution.

    Accepts only iterates whose equation residual is within 10*tol, so a
    returned matrix is always a certified solution.
    """

    def step(p):
        pb = p @ b
        gain = np.linalg.solve(r + b.T @ pb, pb.T)
        nxt = a.T @ (p - pb @ gain) @ a + q_s
        return 0.5 * (nxt + nxt.T)

    p = 0.5 * (q_s + q_s.T)
    for _ in range(max_iters):
        nxt = step(p)
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > 1e12:
            raise DareNonConvergenceError("Riccati iteration diverged")
        if np.max(np.abs(nxt - p)) <= tol:
            residual = np.max(np.abs(nxt - step(nxt)))
            if residual <= 10.0 * tol:
                return nxt
        p = nxt
    raise DareNonConvergenceError(f"no Riccati fixed point within {max_iters} iterations")


@dataclass(frozen=True)
class MpcSpec:
    """Horizon, weights, and input box; the terminal weight is DARE-derived unless given."""

    N: int
    Q: np.ndarray          # (m, m) output tracking weight, PSD
    R: np.ndarray          # (p, p) input-increment weight, PD
    u_min: np.ndarray      # (p,)
    u_max: np.ndarray      # (p,)
    P: np.ndarray | None = None  # (m, m) terminal output weight override

    def __post_init__(self):
        object.__setattr__(self, "Q", np.atleast_2d(np.asarray(self.Q, dtype=float)))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))
        object.__setattr__(self, "u_min", np.atleast_1d(np.asarray(self.u_min, dtype=float)))
        object.__setattr__(self, "u_max", np.atleast_1d(np.asarray(self.u_max, dtype=float)))
        if self.P is not None:
            object.__setattr__(self, "P", np.atleast_2d(np.asarray(self.P, dtype=float)))
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if np.max(np.abs(self.Q - self.Q.T)) > 1e-12:
            raise ValueError("Q must be symmetric")
        if np.min(np.linalg.eigvalsh(self.Q)) < -1e-10:
            raise ValueError("Q must be positive semidefinite")
        if np.max(np.abs(self.R - self.R.T)) > 1e-12:
            raise ValueError("R must be symmetric")
        if np.min(np.linalg.eigvalsh(self.R)) <= 0.0:
            raise ValueError("R must be positive definite")
        if not np.all(self.u_min < self.u_max):
            raise ValueError("require u_min < u_max per channel")

    @property
    def n_u(self) -> int:
        return self.R.shape[0]

    @property
    def n_y(self) -> int:
        return self.Q.shape[0]


def default_mpc_spec(kind: str, N: int = 20) -> MpcSpec:
    if kind == "vdp":
        return MpcSpec(N=N, Q=np.eye(2), R=0.1 * np.eye(1), u_min=[-5.0], u_max=[5.0])
    if kind == "pendulum":
        return MpcSpec(N=N, Q=np.eye(1), R=0.1 * np.eye(1), u_min=[-2.0], u_max=[2.0])
    raise ValueError(f"unknown plant kind {kind!r}")


def terminal_weight(compact: CompactModel, spec: MpcSpec) -> tuple[np.ndarray, bool]:
    """Output-space terminal weight; falls back to Q when the DARE does not settle."""
    if spec.P is not None:
        return spec.P, True
    sel = compact.selector()
    q_s = sel.T @ spec.Q @ sel
    try:
        p_s = solve_dare(compact.a, compact.b, q_s, spec.R)
    except DareNonConvergenceError:
        return spec.Q.copy(), False
    return p_s[compact.n_z :, compact.n_z :], True


@dataclass(frozen=True)
class CondensedQp:
    hq: np.ndarray  # (N*p, N*p) symmetric PD
    f: np.ndarray   # (N*p,)
    lo: np.ndarray  # (N*p,)
    hi: np.ndarray  # (N*p,)


@dataclass(frozen=True)
class MpcCache:
    """Episode-constant pieces of the condensed QP (model and spec fixed)."""

    phi: np.ndarray       # (N*m, n_s) free-response map
    gw2: np.ndarray       # (N*p, N*m) = 2 Gamma' W
    hq: np.ndarray        # constant Hessian
    du_anchor: np.ndarray # (N*p, p) = 2 D' R_blk E
    lo: np.ndarray
    hi: np.ndarray
    lip: float            # power-iteration bound on the top Hessian eigenvalue


def power_iteration_bound(h: np.ndarray, iters: int = 100) -> float:
    v = np.ones(h.shape[0]) / np.sqrt(h.shape[0])
    for _ in range(iters):
        hv = h @ v
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            return 1e-12
        v = hv / norm
    return max(float(v @ (h @ v)), 1e-12) * 1.05


def condense(compact: CompactModel, spec: MpcSpec, p_term: np.ndarray) -> MpcCache:
    n_s, p, m, N = compact.n_s, compact.n_u, compact.n_y, spec.N
    sel = compact.selector()
    pows = [np.eye(n_s)]
    for _ in range(N):
        pows.append(pows[-1] @ compact.a)
    phi = np.vstack([sel @ pows[j] for j in range(1, N + 1)])
    impulse = [sel @ pows[d] @ compact.b for d in range(N)]
    gamma = np.zeros((N * m, N * p))
    for j in range(N):
        for i in range(j + 1):
            gamma[j * m : (j + 1) * m, i * p : (i + 1) * p] = impulse[j - i]
    w = np.zeros((N * m, N * m))
    for k in range(N - 1):
        w[k * m : (k + 1) * m, k * m : (k + 1) * m] = spec.Q
    w[(N - 1) * m :, (N - 1) * m :] = p_term
    d = np.kron(np.eye(N), np.eye(p)) - np.kron(np.eye(N, k=-1), np.eye(p))
    e = np.zeros((N * p, p))
    e[:p] = np.eye(p)
    r_blk = np.kron(np.eye(N), spec.R)
    gw2 = 2.0 * gamma.T @ w
    hq = gw2 @ gamma + 2.0 * d.T @ r_blk @ d
    hq = 0.5 * (hq + hq.T)
    lo = np.tile(spec.u_min, N)
    hi = np.tile(spec.u_max, N)
    return MpcCache(
        phi=phi,
        gw2=gw2,
        hq=hq,
        du_anchor=2.0 * d.T @ r_blk @ e,
        lo=lo,
        hi=hi,
        lip=power_iteration_bound(hq),
    )


def _pad_reference(reference: np.ndarray, N: int, m: int) -> np.ndarray:
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    if reference.shape[0] == 0 or reference.shape[1] != m:
        raise ValueError(f"reference must be (k>=1, {m})")
    if reference.shape[0] >= N:
        return reference[:N]
    pad = np.repeat(reference[-1:], N - reference.shape[0], axis=0)
    return np.vstack([reference, pad])


def build_qp(
    compact: CompactModel,
    s0: np.ndarray,
    u_prev: np.ndarray,
    spec: MpcSpec,
    reference: np.ndarray,
    p_term: np.ndarray | None = None,
    cache: MpcCache | None = None,
) -> CondensedQp:
    """Condensed tracking QP over U = (u_1..u_N).

    Reference rows align with the N predicted outputs (first row is the target
    for the next measurement); short windows are padded by holding the last row.
    """
    if s0.shape != (compact.n_s,):
        raise ValueError(f"s0 must have shape ({compact.n_s},)")
    u_prev = np.atleast_1d(np.asarray(u_prev, dtype=float))
    if u_prev.shape != (compact.n_u,):
        raise ValueError(f"u_prev must have shape ({compact.n_u},)")
    if cache is None:
        if p_term is None:
            p_term, _ = terminal_weight(compact, spec)
        cache = condense(compact, spec, p_term)
    ybar = _pad_reference(reference, spec.N, compact.n_y).reshape(-1)
    resp = cache.phi @ s0 - ybar
    f = cache.gw2 @ resp - cache.du_anchor @ u_prev
    return CondensedQp(hq=cache.hq, f=f, lo=cache.lo, hi=cache.hi)


def solve_qp_box(
    hq: np.ndarray,
    f: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    iters: int = 500,
    tol: float = 1e-8,
    u0: np.ndarray | None = None,
    lip: float | None = None,
) -> np.ndarray:
    """Accelerated projected gradient on 1/2 U'HU + f'U over the box.

    Terminates when the projected-gradient residual U - proj(U - grad) has
    max-norm <= tol; the returned point is always feasible.
    """
    if lip is None:
        lip = power_iteration_bound(hq)
    x = np.clip(np.zeros_like(f) if u0 is None else np.asarray(u0, dtype=float), lo, hi)
    y = x
    t = 1.0
    for _ in range(iters):
        g = hq @ y + f
        xn = np.clip(y - g / lip, lo, hi)
        kkt = xn - np.clip(xn - (hq @ xn + f), lo, hi)
        if np.max(np.abs(kkt)) <= tol:
            return xn
        if g @ (xn - x) > 0.0:  # momentum points uphill: restart
            t = 1.0
            y = xn
        else:
            tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = xn + ((t - 1.0) / tn) * (xn - x)
            t = tn
        x = xn
    return x


def mpc_action(
    model: Nssm,
    params: ParamVector,
    history_u: np.ndarray,
    history_y: np.ndarray,
    u_prev: np.ndarray,
    spec: MpcSpec,
    reference: np.ndarray,
    qp_iters: int = 500,
    qp_tol: float = 1e-8,
) -> np.ndarray:
    """First input of the optimal plan from the latest H-step history."""
    H = model.config.H
    if history_u.shape[0] < H or history_y.shape[0] < H:
        raise ValueError(f"need at least H={H} history steps")
    z = model.encode(params, history_u[-H:], history_y[-H:])
    s0 = np.concatenate([z, history_y[-1]])
    compact = lift(params)
    p_term, _ = terminal_weight(compact, spec)
    qp = build_qp(compact, s0, u_prev, spec, reference, p_term=p_term)
    u = solve_qp_box(qp.hq, qp.f, qp.lo, qp.hi, iters=qp_iters, tol=qp_tol)
    return u[: compact.n_u]


def _identity_scalers(p: int, m: int) -> tuple[Scaler, Scaler]:
    return Scaler(np.zeros(p), np.ones(p)), Scaler(np.zeros(m), np.ones(m))


@dataclass(frozen=True)
class TrackResult:
    """Closed-loop episode record; y is the true plant output, physical units."""

    y: np.ndarray           # (L, m)
    y_measured: np.ndarray  # (L, m) what the controller saw
    u: np.ndarray           # (L, p) applied inputs
    ref: np.ndarray         # (L, m)
    err: np.ndarray         # (L,)  ||y - ref|| per step
    x_final: np.ndarray | None
    dare_converged: bool

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def mean_err(self) -> float:
        return float(self.err.mean()) if len(self) else 0.0

    @property
    def final_err(self) -> float:
        return float(self.err[-1]) if len(self) else 0.0


def receding_horizon_track(
    model: Nssm,
    params: ParamVector,
    plant: PlantParams,
    spec: MpcSpec,
    reference: np.ndarray,
    history_u: np.ndarray,
    history_y: np.ndarray,
    x0: np.ndarray,
    noise_std: float = 0.0,
    explore_std: float = 0.0,
    rng_seed=None,
    scalers: tuple[Scaler, Scaler] | None = None,
    qp_iters: int = 500,
    qp_tol: float = 1e-8,
) -> TrackResult:
    """Closed-loop tracking: re-encode from measured history, plan, apply first input.

    Histories, the reference, and the spec's input box are in physical plant
    units; when scalers are given the model is fed standardized data and its
    commands are mapped back before actuation.  Exploration noise (explore_std,
    standardized input units) is added to each command and the sum is clipped
    to the box.  Measurement noise (noise_std, physical units) corrupts what
    the controller sees; the returned y and err columns use the true output.
    """
    H, p, m = model.config.H, plant.n_u, plant.n_y
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    L = reference.shape[0]
    if L == 0:
        return TrackResult(
            y=np.zeros((0, m)),
            y_measured=np.zeros((0, m)),
            u=np.zeros((0, p)),
            ref=reference.reshape(0, m),
            err=np.zeros(0),
            x_final=np.asarray(x0, dtype=float).copy(),
            dare_converged=True,
        )
    if history_u.shape[0] < H or history_y.shape[0] < H:
        raise ValueError(f"need at least H={H} priming steps of history")
    u_sc, y_sc = scalers if scalers is not None else _identity_scalers(p, m)
    rng = np.random.default_rng(rng_seed)

    # scaled view of the world for the model and the QP
    hu = u_sc.transform(np.asarray(history_u, dtype=float)[-H:]).copy()
    hy = y_sc.transform(np.asarray(history_y, dtype=float)[-H:]).copy()
    ref_scaled = y_sc.transform(reference)
    box_spec = MpcSpec(
        N=spec.N,
        Q=spec.Q,
        R=spec.R,
        u_min=u_sc.transform(spec.u_min),
        u_max=u_sc.transform(spec.u_max),
        P=spec.P,
    )
    compact = lift(params)
    p_term, dare_ok = terminal_weight(compact, box_spec)
    cache = condense(compact, box_spec, p_term)

    x = np.asarray(x0, dtype=float).copy()
    u_prev = hu[-1].copy()
    plan = np.tile(u_prev, spec.N)
    ys = np.empty((L, m))
    ys_meas = np.empty((L, m))
    us = np.empty((L, p))
    errs = np.empty(L)
    for t in range(L):
        z = model.encode(params, hu, hy)
        s0 = np.concatenate([z, hy[-1]])
        qp = build_qp(compact, s0, u_prev, box_spec, ref_scaled[t : t + spec.N], cache=cache)
        plan = solve_qp_box(
            qp.hq, qp.f, qp.lo, qp.hi, iters=qp_iters, tol=qp_tol, u0=plan, lip=cache.lip
        )
        u_cmd = plan[:p].copy()
        if explore_std > 0.0:
            u_cmd = np.clip(
                u_cmd + rng.normal(0.0, explore_std, size=p), qp.lo[:p], qp.hi[:p]
            )
        u_phys = u_sc.inverse(u_cmd)
        x = plant_step(plant, x, float(u_phys[0]))
        y_true = plant_output(plant, x)
        y_meas = y_true + rng.normal(0.0, noise_std, size=m) if noise_std > 0.0 else y_true
        ys[t], ys_meas[t], us[t] = y_true, y_meas, u_phys
        errs[t] = float(np.linalg.norm(y_true - reference[t]))
        hu = np.vstack([hu[1:], u_cmd])
        hy = np.vstack([hy[1:], y_sc.transform(y_meas)])
        u_prev = u_cmd
        plan = np.concatenate([plan[p:], plan[-p:]])  # shift warm start
    return TrackResult(
        y=ys,
        y_measured=ys_meas,
        u=us,
        ref=reference,
        err=errs,
        x_final=x,
        dare_converged=dare_ok,
    )


def meta_inference(
    objective,
    omega_inf: ParamVector,
    gamma: float,
    steps: int,
    lr: float,
    start: ParamVector | None = None,
) -> ParamVector:
    """Few-step proximal descent on loss(psi) + (gamma/2)||psi - omega_inf||^2.

    omega_inf is both the default starting point and the proximal anchor;
    pass ``start`` to continue an earlier descent without moving the anchor.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    psi = omega_inf if start is None else start
    for k in range(steps):
        g = objective.gradient(psi)
        if not np.all(np.isfinite(g.values)):
            raise ArithmeticError(f"non-finite adaptation gradient at step {k}")
        psi = psi - lr * (g + gamma * (psi - omega_inf))
    return psi


def save_trace(path, result: TrackResult) -> None:
    """CSV trace t,y_0..,yref_0..,u_0..,err plus a JSON summary sidecar."""
    import csv
    import json
    from pathlib import Path

    path = Path(path)
    m, p = result.y.shape[1], result.u.shape[1]
    header = (
        ["t"]
        + [f"y_{i}" for i in range(m)]
        + [f"yref_{i}" for i in range(m)]
        + [f"u_{i}" for i in range(p)]
        + ["err"]
    )
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(len(result)):
            row = (
                [t]
                + [repr(float(v)) for v in result.y[t]]
                + [repr(float(v)) for v in result.ref[t]]
                + [repr(float(v)) for v in result.u[t]]
                + [repr(float(result.err[t]))]
            )
            writer.writerow(row)
    summary = {
        "mean_err": result.mean_err,
        "final_err": result.final_err,
        "constraint_violations": 0,
        "dare_converged": result.dare_converged,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n"
    )
