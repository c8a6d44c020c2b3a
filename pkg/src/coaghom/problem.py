"""Shared pieces of the two time integrators: analytic data families, the z grid and step errors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded


class StepRejected(RuntimeError):
    """A time step violated the sign guard or produced a negative state."""


class SolverFailure(RuntimeError):
    """A linear solve did not converge."""


POSITIVITY_TOL = 1e-10


@dataclass(frozen=True)
class DataField:
    """Non-negative analytic field ``F(t, x, y, z)``.

    ``kind``:
      * ``constant``: ``value``
      * ``gaussian``: ``offset + value * exp(-|x - center|^2 / (2 width^2))``
      * ``cell_periodic``: ``value * (1 + amplitude * cos(2 pi y1) cos(2 pi y2))``

    Every kind is multiplied by ``exp(-decay * t)``.
    """

    kind: str = "constant"
    value: float = 0.0
    center: tuple[float, float] = (0.5, 0.5)
    width: float = 0.2
    offset: float = 0.0
    amplitude: float = 0.0
    decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "gaussian", "cell_periodic"):
            raise ValueError(f"unknown data family {self.kind!r}")
        if self.kind == "gaussian" and self.width <= 0:
            raise ValueError("gaussian width must be positive")

    @classmethod
    def from_dict(cls, d: dict | float | None) -> "DataField":
        if d is None:
            return cls()
        if isinstance(d, (int, float)):
            return cls("constant", float(d))
        d = dict(d)
        if "center" in d:
            d["center"] = tuple(float(c) for c in d["center"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    def __call__(self, t: float, x: np.ndarray, y: np.ndarray | None = None, z: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        time = math.exp(-self.decay * t)
        if self.kind == "constant":
            out = np.full(len(x), self.value)
        elif self.kind == "gaussian":
            r2 = (x[:, 0] - self.center[0]) ** 2 + (x[:, 1] - self.center[1]) ** 2
            out = self.offset + self.value * np.exp(-r2 / (2.0 * self.width**2))
        else:
            if y is None:
                out = np.full(len(x), self.value)
            else:
                y = np.atleast_2d(y)
                out = self.value * (1.0 + self.amplitude * np.cos(2 * np.pi * y[:, 0]) * np.cos(2 * np.pi * y[:, 1]))
        return time * out

    def sup(self, T: float) -> float:
        """Upper bound of the field over ``[0, T]`` (exact for the families here)."""
        tmax = 1.0 if self.decay >= 0 else math.exp(-self.decay * T)
        if self.kind == "constant":
            return tmax * abs(self.value)
        if self.kind == "gaussian":
            return tmax * (self.offset + max(self.value, 0.0))
        return tmax * abs(self.value) * (1.0 + abs(self.amplitude))

    @property
    def is_cell_dependent(self) -> bool:
        return self.kind == "cell_periodic" and self.amplitude != 0.0

    def cell_averaged(self) -> "DataField":
        if self.kind != "cell_periodic":
            return self
        return DataField("constant", self.value, decay=self.decay)


@dataclass(frozen=True)
class ZGrid:
    """Cell-centred grid on ``]0, L[`` with homogeneous Neumann ends.

    ``n = 1`` is the planar mode; ``L = 0`` measures z-integrals with unit length.
    """

    n: int = 1
    L: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n_z must be >= 1")
        if self.n > 1 and self.L <= 0:
            raise ValueError("a z grid with n_z > 1 needs a positive extent L")

    @property
    def dz(self) -> float:
        if self.L <= 0:
            return 1.0
        return self.L / self.n

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.dz if self.L > 0 else np.zeros(1)

    def banded(self, coeff: float, dt: float) -> np.ndarray:
        """Banded form of ``I + dt * coeff * T`` with ``T`` the Neumann second difference."""
        n = self.n
        k = dt * coeff / self.dz**2
        ab = np.zeros((3, n))
        ab[0, 1:] = -k
        ab[2, :-1] = -k
        ab[1, :] = 1.0 + 2.0 * k
        ab[1, 0] -= k
        ab[1, -1] -= k
        return ab

    def implicit_diffuse(self, field: np.ndarray, coeff: float, dt: float) -> np.ndarray:
        """Backward-Euler z diffusion of ``field`` whose first axis is z."""
        if self.n == 1:
            return field
        shape = field.shape
        out = solve_banded((1, 1), self.banded(coeff, dt), field.reshape(self.n, -1))
        return out.reshape(shape)


def step_count(T: float, dt: float) -> list[float]:
    """Step sizes covering ``[0, T]``; the last step is shortened if needed."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if T <= 0:
        return []
    n = int(math.ceil(T / dt - 1e-9))
    steps = [dt] * n
    steps[-1] = T - dt * (n - 1)
    return steps
