"""Neural state-space model: encoder, linear latent rollout, multi-step loss.

The model maps an H-step input/output history through a rectified-linear
encoder to a latent state z, advances z with a linear recurrence driven by
future inputs, and decodes predicted outputs:

    z_t     = f_enc(u_{t-H+1..t}, y_{t-H+1..t})
    z_{k+1} = A_z z_k + B_z u_{k+1}
    y_hat_k = C_z z_k

The training loss is the mean over windows of (1/T) * sum_k ||y_k - y_hat_k||^2.
Gradient and Hessian-vector product are computed analytically: reverse mode
for the gradient, forward-over-reverse for the HVP (the Hessian is never
materialized).  Everything is float64 numpy; parameters travel as one flat
:class:`~metanssm.paramvec.ParamVector`.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .paramvec import Layout, ParamVector


@dataclass(frozen=True)
class NssmConfig:
    n_u: int
    n_y: int
    n_z: int
    H: int
    T: int
    hidden_width: int = 128
    hidden_layers: int = 2

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"NssmConfig.{name} must be >= 1, got {value}")

    @property
    def encoder_input(self) -> int:
        return self.H * (self.n_u + self.n_y)


@dataclass(frozen=True)
class WindowBatch:
    """(history, future) window pairs; all arrays share the leading batch axis."""

    history_u: np.ndarray  # (B, H, n_u)
    history_y: np.ndarray  # (B, H, n_y)
    future_u: np.ndarray   # (B, T, n_u)
    future_y: np.ndarray   # (B, T, n_y)

    def __post_init__(self):
        arrays = (self.history_u, self.history_y, self.future_u, self.future_y)
        if any(a.ndim != 3 for a in arrays):
            raise ValueError("window batch tensors must be 3-d (batch, time, channel)")
        b = self.history_u.shape[0]
        if any(a.shape[0] != b for a in arrays):
            raise ValueError("window batch tensors must share the batch axis")
        if b < 1:
            raise ValueError("window batch must be nonempty")
        if self.history_u.shape[1] != self.history_y.shape[1]:
            raise ValueError("history_u and history_y must share the time axis")
        if self.future_u.shape[1] != self.future_y.shape[1]:
            raise ValueError("future_u and future_y must share the time axis")

    @property
    def size(self) -> int:
        return self.history_u.shape[0]


def make_layout(config: NssmConfig) -> Layout:
    segs = []
    fan_in = config.encoder_input
    for l in range(config.hidden_layers):
        segs.append((f"enc_w{l}", (config.hidden_width, fan_in)))
        segs.append((f"enc_b{l}", (config.hidden_width,)))
        fan_in = config.hidden_width
    segs.append(("enc_wz", (config.n_z, fan_in)))
    segs.append(("enc_bz", (config.n_z,)))
    segs.append(("a_z", (config.n_z, config.n_z)))
    segs.append(("b_z", (config.n_z, config.n_u)))
    segs.append(("c_z", (config.n_y, config.n_z)))
    return Layout.of(segs)


class Nssm:
    """Stateless model object: shapes and the computation graph, no weights."""

    def __init__(self, config: NssmConfig):
        self.config = config
        self.layout = make_layout(config)

    # -- parameters -----------------------------------------------------
    def init_params(self, rng: np.random.Generator, latent_std: float = 0.1) -> ParamVector:
        """Glorot-uniform encoder weights, zero biases, Gaussian latent matrices.

        The small ``latent_std`` keeps the spectral radius of A_z below one
        with high probability, so early rollouts stay bounded.
        """
        c = self.config
        tensors = {}
        fan_in = c.encoder_input
        for l in range(c.hidden_layers):
            bound = np.sqrt(6.0 / (fan_in + c.hidden_width))
            tensors[f"enc_w{l}"] = rng.uniform(-bound, bound, (c.hidden_width, fan_in))
            tensors[f"enc_b{l}"] = np.zeros(c.hidden_width)
            fan_in = c.hidden_width
        bound = np.sqrt(6.0 / (fan_in + c.n_z))
        tensors["enc_wz"] = rng.uniform(-bound, bound, (c.n_z, fan_in))
        tensors["enc_bz"] = np.zeros(c.n_z)
        tensors["a_z"] = rng.normal(0.0, latent_std, (c.n_z, c.n_z))
        tensors["b_z"] = rng.normal(0.0, latent_std, (c.n_z, c.n_u))
        tensors["c_z"] = rng.normal(0.0, latent_std, (c.n_y, c.n_z))
        return ParamVector(self.layout.pack(tensors), self.layout)

    def _views(self, params: ParamVector) -> dict[str, np.ndarray]:
        if params.layout != self.layout:
            raise ValueError("parameter layout does not match this model")
        return params.unflatten()

    # -- forward ----------------------------------------------------------
    def _encoder_input(self, history_u: np.ndarray, history_y: np.ndarray) -> np.ndarray:
        c = self.config
        if history_u.shape[1:] != (c.H, c.n_u) or history_y.shape[1:] != (c.H, c.n_y):
            raise ValueError(
                f"history shapes {history_u.shape}, {history_y.shape} do not match "
                f"H={c.H}, n_u={c.n_u}, n_y={c.n_y}"
            )
        # interleave by time step: (u_k, y_k) pairs, flattened time-major
        return np.concatenate([history_u, history_y], axis=2).reshape(history_u.shape[0], -1)

    def encode(self, params: ParamVector, history_u: np.ndarray, history_y: np.ndarray) -> np.ndarray:
        """Latent state for each history window; accepts one window or a batch."""
        single = history_u.ndim == 2
        if single:
            history_u = history_u[None]
            history_y = history_y[None]
        w = self._views(params)
        a = self._encoder_input(history_u, history_y)
        for l in range(self.config.hidden_layers):
            a = np.maximum(a @ w[f"enc_w{l}"].T + w[f"enc_b{l}"], 0.0)
        z = a @ w["enc_wz"].T + w["enc_bz"]
        return z[0] if single else z

    def rollout(self, params: ParamVector, z0: np.ndarray, future_u: np.ndarray) -> np.ndarray:
        """Predicted outputs for T steps after the history window."""
        single = z0.ndim == 1
        if single:
            z0 = z0[None]
            future_u = future_u[None]
        c = self.config
        if future_u.shape[1:] != (future_u.shape[1], c.n_u):
            raise ValueError("future_u has wrong channel count")
        w = self._views(params)
        T = future_u.shape[1]
        z = np.empty((z0.shape[0], T + 1, c.n_z))
        z[:, 0] = z0
        a_t, b_t = w["a_z"].T, w["b_z"].T
        for k in range(T):
            z[:, k + 1] = z[:, k] @ a_t + future_u[:, k] @ b_t
        yhat = z[:, 1:] @ w["c_z"].T
        return yhat[0] if single else yhat

    def predict(self, params: ParamVector, batch: WindowBatch) -> np.ndarray:
        z0 = self.encode(params, batch.history_u, batch.history_y)
        return self.rollout(params, z0, batch.future_u)

    def _forward(self, w: dict[str, np.ndarray], batch: WindowBatch):
        c = self.config
        if batch.future_u.shape[1] != c.T:
            raise ValueError(f"batch horizon {batch.future_u.shape[1]} != config T={c.T}")
        acts = [self._encoder_input(batch.history_u, batch.history_y)]
        pres = []
        for l in range(c.hidden_layers):
            s = acts[-1] @ w[f"enc_w{l}"].T + w[f"enc_b{l}"]
            pres.append(s)
            acts.append(np.maximum(s, 0.0))
        z = np.empty((batch.size, c.T + 1, c.n_z))
        z[:, 0] = acts[-1] @ w["enc_wz"].T + w["enc_bz"]
        a_t, b_t = w["a_z"].T, w["b_z"].T
        for k in range(c.T):
            z[:, k + 1] = z[:, k] @ a_t + batch.future_u[:, k] @ b_t
        yhat = z[:, 1:] @ w["c_z"].T
        resid = yhat - batch.future_y
        value = float(np.sum(resid * resid)) / (batch.size * c.T)
        return value, acts, pres, z, resid

    def loss(self, params: ParamVector, batch: WindowBatch) -> float:
        value, *_ = self._forward(self._views(params), batch)
        return value

    # -- reverse mode -----------------------------------------------------
    def _reverse(self, w, batch: WindowBatch, acts, pres, z, resid):
        """Backpropagate the loss; returns (grad tensors, reverse-pass cache)."""
        c = self.config
        scale = 2.0 / (batch.size * c.T)
        g_out = scale * resid                      # dL/dyhat, (B, T, m)
        grads = {"c_z": np.einsum("btm,btn->mn", g_out, z[:, 1:])}
        gy = g_out @ w["c_z"]                      # output pullback onto z_k
        acc = np.empty((batch.size, c.T, c.n_z))
        carry = np.zeros((batch.size, c.n_z))
        a_z = w["a_z"]
        for k in range(c.T - 1, -1, -1):
            carry = gy[:, k] + carry
            acc[:, k] = carry
            carry = carry @ a_z
        grads["a_z"] = np.einsum("btn,btq->nq", acc, z[:, :-1])
        grads["b_z"] = np.einsum("btn,btp->np", acc, batch.future_u)
        dz0 = carry
        grads["enc_wz"] = dz0.T @ acts[-1]
        grads["enc_bz"] = dz0.sum(axis=0)
        da = dz0 @ w["enc_wz"]
        dpres = []
        for l in range(c.hidden_layers - 1, -1, -1):
            ds = np.where(pres[l] > 0.0, da, 0.0)
            dpres.append(ds)
            grads[f"enc_w{l}"] = ds.T @ acts[l]
            grads[f"enc_b{l}"] = ds.sum(axis=0)
            da = ds @ w[f"enc_w{l}"]
        dpres.reverse()
        cache = {"g_out": g_out, "acc": acc, "dz0": dz0, "dpres": dpres, "scale": scale}
        return grads, cache

    def loss_and_grad(self, params: ParamVector, batch: WindowBatch) -> tuple[float, ParamVector]:
        w = self._views(params)
        value, acts, pres, z, resid = self._forward(w, batch)
        grads, _ = self._reverse(w, batch, acts, pres, z, resid)
        return value, ParamVector(self.layout.pack(grads), self.layout)

    def loss_grad(self, params: ParamVector, batch: WindowBatch) -> ParamVector:
        return self.loss_and_grad(params, batch)[1]

    # -- forward-over-reverse ----------------------------------------------
    def loss_hvp(self, params: ParamVector, batch: WindowBatch, v: ParamVector) -> ParamVector:
        """Exact Hessian-vector product via a tangent sweep over both passes.

        The tangent of the ReLU derivative is zero almost everywhere, so the
        activation pattern is treated as locally constant.
        """
        c = self.config
        w = self._views(params)
        if v.layout != self.layout:
            raise ValueError("direction layout does not match this model")
        t = v.unflatten()

        _, acts, pres, z, resid = self._forward(w, batch)
        grads, cache = self._reverse(w, batch, acts, pres, z, resid)
        del grads  # only the reverse-pass cache is needed here

        # tangent forward: directional derivative of every intermediate
        tacts = [np.zeros_like(acts[0])]
        for l in range(c.hidden_layers):
            ts = acts[l] @ t[f"enc_w{l}"].T + tacts[l] @ w[f"enc_w{l}"].T + t[f"enc_b{l}"]
            tacts.append(np.where(pres[l] > 0.0, ts, 0.0))
        tz = np.empty_like(z)
        tz[:, 0] = acts[-1] @ t["enc_wz"].T + tacts[-1] @ w["enc_wz"].T + t["enc_bz"]
        a_t, b_t = w["a_z"].T, w["b_z"].T
        ta_t, tb_t = t["a_z"].T, t["b_z"].T
        for k in range(c.T):
            tz[:, k + 1] = tz[:, k] @ a_t + z[:, k] @ ta_t + batch.future_u[:, k] @ tb_t
        tyhat = tz[:, 1:] @ w["c_z"].T + z[:, 1:] @ t["c_z"].T
        tg_out = cache["scale"] * tyhat

        # tangent reverse: product rule through the adjoint recursion
        g_out, acc = cache["g_out"], cache["acc"]
        hv = {
            "c_z": np.einsum("btm,btn->mn", tg_out, z[:, 1:])
            + np.einsum("btm,btn->mn", g_out, tz[:, 1:])
        }
        tgy = tg_out @ w["c_z"] + g_out @ t["c_z"]
        tacc = np.empty_like(acc)
        tcarry = np.zeros((batch.size, c.n_z))
        for k in range(c.T - 1, -1, -1):
            tcarry = tgy[:, k] + tcarry
            tacc[:, k] = tcarry
            tcarry = tcarry @ w["a_z"] + acc[:, k] @ t["a_z"]
        hv["a_z"] = np.einsum("btn,btq->nq", tacc, z[:, :-1]) + np.einsum(
            "btn,btq->nq", acc, tz[:, :-1]
        )
        hv["b_z"] = np.einsum("btn,btp->np", tacc, batch.future_u)
        tdz0 = tcarry
        dz0 = cache["dz0"]
        hv["enc_wz"] = tdz0.T @ acts[-1] + dz0.T @ tacts[-1]
        hv["enc_bz"] = tdz0.sum(axis=0)
        tda = tdz0 @ w["enc_wz"] + dz0 @ t["enc_wz"]
        for l in range(c.hidden_layers - 1, -1, -1):
            tds = np.where(pres[l] > 0.0, tda, 0.0)
            ds = cache["dpres"][l]
            hv[f"enc_w{l}"] = tds.T @ acts[l] + ds.T @ tacts[l]
            hv[f"enc_b{l}"] = tds.sum(axis=0)
            tda = tds @ w[f"enc_w{l}"] + ds @ t[f"enc_w{l}"]
        return ParamVector(self.layout.pack(hv), self.layout)


class BatchObjective:
    """Loss surface of one model on one fixed window batch.

    Adapts the (model, batch) pair to the small objective surface the
    optimization layers expect: ``value``, ``gradient``, ``value_and_grad``,
    ``hvp``. Test suites substitute hand-made quadratic surrogates with the
    same surface.
    """

    def __init__(self, model: Nssm, batch: WindowBatch):
        self.model = model
        self.batch = batch
        self.layout = model.layout

    def value(self, params: ParamVector) -> float:
        return self.model.loss(params, self.batch)

    def gradient(self, params: ParamVector) -> ParamVector:
        return self.model.loss_grad(params, self.batch)

    def value_and_grad(self, params: ParamVector) -> tuple[float, ParamVector]:
        return self.model.loss_and_grad(params, self.batch)

    def hvp(self, params: ParamVector, v: ParamVector) -> ParamVector:
        return self.model.loss_hvp(params, self.batch, v)


# -- checkpointing ----------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, config: NssmConfig, params: ParamVector) -> None:
    """Write a versioned JSON checkpoint; float64 payload round-trips bit-exactly."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "layout": [[name, list(shape)] for name, shape in params.layout.segments],
        "values": base64.b64encode(
            np.ascontiguousarray(params.values, dtype="<f8").tobytes()
        ).decode("ascii"),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[NssmConfig, ParamVector]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    config = NssmConfig(**doc["config"])
    layout = Layout.of([(name, tuple(shape)) for name, shape in doc["layout"]])
    expected = make_layout(config)
    if layout != expected:
        raise ValueError("checkpoint layout does not match its config")
    values = np.frombuffer(base64.b64decode(doc["values"]), dtype="<f8").astype(
        np.float64, copy=True
    )
    return config, ParamVector(values, layout)
