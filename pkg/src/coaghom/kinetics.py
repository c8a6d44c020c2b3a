"""Discrete coagulation operators with a capped top size class.

Cluster sizes run 1..M; the class M collects every aggregate of M or more
monomers, so M-clusters only gain.  All operators act on arrays of shape
``(M, ...)`` with the species axis first.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class KineticsError(ValueError):
    pass


def kernel_matrix(spec, M: int, scale: float = 1.0) -> np.ndarray:
    """Build an ``M x M`` kernel from a name (``constant``, ``sum``, ``product``) or a dense matrix."""
    if isinstance(spec, str):
        i = np.arange(1, M + 1, dtype=float)
        if spec == "constant":
            k = np.ones((M, M))
        elif spec == "sum":
            k = i[:, None] + i[None, :]
        elif spec == "product":
            k = i[:, None] * i[None, :]
        else:
            raise KineticsError(f"unknown kernel generator {spec!r}")
        return scale * k
    k = np.asarray(spec, dtype=float)
    if k.shape != (M, M):
        raise KineticsError(f"kernel must be {M}x{M}, got shape {k.shape}")
    return scale * k


@dataclass(frozen=True)
class KineticParams:
    """Cluster count, coagulation kernels, diffusivities and transmission coefficients.

    ``c`` holds per-species transmission magnitudes; ``c_profile`` optionally
    maps ``(x, z)`` arrays to a non-negative spatial multiplier.
    """

    M: int
    a: np.ndarray
    b: np.ndarray
    D: np.ndarray
    D_tilde: np.ndarray
    d: np.ndarray
    c: np.ndarray
    truncation: float | None = None
    allow_nonpaper: bool = False
    c_profile: object = field(default=None, compare=False)

    def __post_init__(self):
        if self.M < 2:
            raise KineticsError("M must be at least 2")
        for name in ("a", "b"):
            k = getattr(self, name)
            if k.shape != (self.M, self.M):
                raise KineticsError(f"kernel {name} must be {self.M}x{self.M}")
            if not np.allclose(k, k.T, rtol=0, atol=1e-14 * max(1.0, np.abs(k).max())):
                raise KineticsError(f"kernel {name} must be symmetric")
            bad = np.argwhere(k < 0) if self.allow_nonpaper else np.argwhere(k <= 0)
            if len(bad):
                i, j = bad[0]
                raise KineticsError(f"kernel entry {name}[{i + 1},{j + 1}] = {k[i, j]} must be positive")
        for name in ("D", "D_tilde", "d"):
            v = getattr(self, name)
            if v.shape != (self.M,) or np.any(v <= 0):
                raise KineticsError(f"diffusion coefficients {name} must be {self.M} positive values")
        if self.c.shape != (self.M,) or np.any(self.c < 0):
            raise KineticsError(f"transmission coefficients c must be {self.M} non-negative values")
        if self.truncation is not None and self.truncation <= 0:
            raise KineticsError("truncation threshold must be positive")

    @classmethod
    def build(
        cls,
        M: int,
        a="constant",
        b="constant",
        D=1.0,
        D_tilde=1.0,
        d=1.0,
        c=1.0,
        a_scale: float = 1.0,
        b_scale: float = 1.0,
        truncation: float | None = None,
        allow_nonpaper: bool = False,
        c_profile=None,
    ) -> "KineticParams":
        def per_species(v):
            v = np.asarray(v, dtype=float)
            return np.full(M, float(v)) if v.ndim == 0 else v

        return cls(
            M=M,
            a=kernel_matrix(a, M, a_scale),
            b=kernel_matrix(b, M, b_scale),
            D=per_species(D),
            D_tilde=per_species(D_tilde),
            d=per_species(d),
            c=per_species(c),
            truncation=truncation,
            allow_nonpaper=allow_nonpaper,
            c_profile=c_profile,
        )

    @property
    def nonpaper_flags(self) -> list[str]:
        flags = []
        if np.any(self.a == 0) or np.any(self.b == 0):
            flags.append("zero coagulation kernel entries")
        if np.any(self.c == 0):
            flags.append("zero transmission coefficient")
        return flags

    def transmission(self, m: int, x: np.ndarray, z) -> np.ndarray:
        """``c_m(x, z)`` at points ``x`` of shape ``(n, 2)`` and height ``z``."""
        base = np.full(len(x), self.c[m])
        if self.c_profile is None:
            return base
        return base * np.asarray(self.c_profile(x, z), dtype=float)


def truncate(s, threshold: float):
    """Clamp to ``[0, threshold]``."""
    if threshold <= 0:
        raise KineticsError("truncation threshold must be positive")
    return np.clip(s, 0.0, threshold)


def coagulation(u: np.ndarray, kernel: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Coagulation rates for concentrations ``u`` of shape ``(M, ...)``.

    ``R_1 = -u_1 sum_j k_1j u_j``; ``R_m = 1/2 sum_{j<m} k_{j,m-j} u_j u_{m-j} - u_m sum_j k_mj u_j``
    for ``1 < m < M``; ``R_M = 1/2 sum_{j,k<M, j+k>=M} k_jk u_j u_k``.
    """
    u = np.asarray(u, dtype=float)
    if threshold is not None:
        u = truncate(u, threshold)
    M = u.shape[0]
    flat = u.reshape(M, -1)
    out = np.zeros_like(flat)
    # gains: ordered pairs (j, k), both < M, landing in min(j + k, M)
    for j in range(M - 1):
        prod = 0.5 * kernel[j, : M - 1, None] * flat[j] * flat[: M - 1]
        # 0-based target index min(j + k + 1, M - 1)
        split = M - 2 - j
        out[j + 1 : M - 1] += prod[:split]
        out[M - 1] += prod[split:].sum(axis=0)
    loss = flat[: M - 1] * (kernel[: M - 1] @ flat)
    out[: M - 1] -= loss
    return out.reshape(u.shape)


def eval_L(u: np.ndarray, params: KineticParams, truncated: bool = False) -> np.ndarray:
    """Coagulation inside the inclusions (kernel ``a``)."""
    return coagulation(u, params.a, params.truncation if truncated else None)


def eval_N(v: np.ndarray, params: KineticParams, truncated: bool = False) -> np.ndarray:
    """Coagulation in the perforated bulk (kernel ``b``)."""
    return coagulation(v, params.b, params.truncation if truncated else None)


def loss_rate(u: np.ndarray, kernel: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Per-unit-concentration loss ``sum_j k_mj u_j`` (zero for the top class)."""
    u = np.asarray(u, dtype=float)
    if threshold is not None:
        u = truncate(u, threshold)
    M = u.shape[0]
    rate = np.tensordot(kernel, u, axes=([1], [0]))
    rate[M - 1] = 0.0
    return rate


def ode_oracle(
    u0,
    params: KineticParams,
    T: float,
    dt: float,
    source: float = 0.0,
    truncated: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Well-mixed reference: classical RK4 for ``u' = L(u) + source * e_1``.

    Returns ``(times, trajectory)`` with trajectory shape ``(n_steps + 1, M)``.
    The final step is shortened to land on ``T``.
    """
    if dt <= 0:
        raise KineticsError("dt must be positive")
    u = np.asarray(u0, dtype=float).copy()
    if u.shape != (params.M,):
        raise KineticsError(f"initial state must have {params.M} components")
    f = np.zeros(params.M)
    f[0] = source

    def rhs(x):
        return eval_L(x, params, truncated) + f

    n = int(np.ceil(T / dt - 1e-12)) if T > 0 else 0
    times = [0.0]
    traj = [u.copy()]
    t = 0.0
    for _ in range(n):
        h = min(dt, T - t)
        k1 = rhs(u)
        k2 = rhs(u + 0.5 * h * k1)
        k3 = rhs(u + 0.5 * h * k2)
        k4 = rhs(u + h * k3)
        u = u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
        if np.any(u < -1e-12):
            raise KineticsError(f"step rejected at t={t:.6g}: negative component, dt too large")
        times.append(t)
        traj.append(u.copy())
    return np.asarray(times), np.asarray(traj)
