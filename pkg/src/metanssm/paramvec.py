"""Flat parameter vectors with a named layout, plus finite-difference oracles.

Every trainable object in this project (encoder weights, latent matrices)
lives in a single flat float64 vector whose segments are described by an
ordered layout of ``(name, shape)`` pairs.  Optimizers, conjugate-gradient
solves and checkpointing all operate on these flat vectors; the named views
are only materialized where the model math needs tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class LayoutMismatchError(ValueError):
    """Two vectors with incompatible layouts were combined."""


class NonFiniteEvaluationError(ArithmeticError):
    """A probed function evaluation returned a non-finite value."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class Layout:
    """Ordered mapping from segment names to tensor shapes."""

    segments: tuple[tuple[str, tuple[int, ...]], ...]
    _offsets: dict[str, tuple[int, int, tuple[int, ...]]] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self):
        offsets = {}
        pos = 0
        for name, shape in self.segments:
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if name in offsets:
                raise ValueError(f"duplicate segment name {name!r}")
            offsets[name] = (pos, pos + size, tuple(shape))
            pos += size
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "size", pos)

    size: int = field(init=False, compare=False)

    @staticmethod
    def of(segments: Sequence[tuple[str, Sequence[int]]]) -> "Layout":
        return Layout(tuple((name, tuple(shape)) for name, shape in segments))

    def views(self, values: np.ndarray) -> dict[str, np.ndarray]:
        """Named tensor views into ``values`` (no copies)."""
        if values.shape != (self.size,):
            raise LayoutMismatchError(
                f"expected flat vector of length {self.size}, got shape {values.shape}"
            )
        return {
            name: values[lo:hi].reshape(shape)
            for name, (lo, hi, shape) in self._offsets.items()
        }

    def pack(self, tensors: dict[str, np.ndarray]) -> np.ndarray:
        """Inverse of :meth:`views`: flatten named tensors back into one vector."""
        out = np.empty(self.size, dtype=np.float64)
        for name, (lo, hi, shape) in self._offsets.items():
            t = np.asarray(tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise LayoutMismatchError(
                    f"segment {name!r}: expected shape {shape}, got {t.shape}"
                )
            out[lo:hi] = t.reshape(-1)
        return out

    def first_difference(self, other: "Layout") -> str | None:
        """Name of the first segment on which the two layouts disagree."""
        for (na, sa), (nb, sb) in zip(self.segments, other.segments):
            if na != nb or sa != sb:
                return na
        if len(self.segments) != len(other.segments):
            longer = self if len(self.segments) > len(other.segments) else other
            return longer.segments[min(len(self.segments), len(other.segments))][0]
        return None


@dataclass(frozen=True)
class ParamVector:
    """Immutable flat float64 vector tied to a :class:`Layout`."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.layout.size,):
            raise LayoutMismatchError(
                f"values of length {v.shape} do not match layout size {self.layout.size}"
            )
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    # -- algebra ------------------------------------------------------------
    def _check(self, other: "ParamVector"):
        if self.layout != other.layout:
            mine = self.layout.first_difference(other.layout)
            theirs = other.layout.first_difference(self.layout)
            msg = f"layouts differ at segment {mine!r}"
            if theirs != mine:
                msg += f" (other side has {theirs!r})"
            raise LayoutMismatchError(msg)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, a: float) -> "ParamVector":
        return ParamVector(self.values * float(a), self.layout)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.values, self.layout)

    def dot(self, other: "ParamVector") -> float:
        self._check(other)
        return float(self.values @ other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    # -- structure ----------------------------------------------------------
    def unflatten(self) -> dict[str, np.ndarray]:
        """Named (read-only) tensor views of the vector."""
        return self.layout.views(self.values)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros(self.layout.size), self.layout)


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``a * x + y`` (layouts must match)."""
    x._check(y)
    return ParamVector(float(a) * x.values + y.values, x.layout)


def fd_gradient(
    f: Callable[[ParamVector], float], w: ParamVector, h: float = 1e-5
) -> ParamVector:
    """Central-difference gradient of a scalar function, one probe pair per component.

    Independent oracle for analytic gradients; never used inside solvers.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    base = w.values
    g = np.empty_like(base)
    probe = base.copy()
    for i in range(base.size):
        probe[i] = base[i] + h
        fp = float(f(w.with_values(probe)))
        probe[i] = base[i] - h
        fm = float(f(w.with_values(probe)))
        probe[i] = base[i]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteEvaluationError(
                f"non-finite function value while probing component {i}", i
            )
        g[i] = (fp - fm) / (2.0 * h)
    return w.with_values(g)


def fd_hvp(
    g: Callable[[ParamVector], ParamVector],
    w: ParamVector,
    v: ParamVector,
    h: float = 1e-4,
) -> ParamVector:
    """Central-difference Hessian-vector product ``(g(w + h v) - g(w - h v)) / 2h``."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    w._check(v)
    gp = g(axpy(h, v, w)).values
    gm = g(axpy(-h, v, w)).values
    bad = np.flatnonzero(~(np.isfinite(gp) & np.isfinite(gm)))
    if bad.size:
        raise NonFiniteEvaluationError(
            f"non-finite gradient component {int(bad[0])} while probing", int(bad[0])
        )
    return w.with_values((gp - gm) / (2.0 * h))
