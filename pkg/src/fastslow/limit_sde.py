"""Euler-Maruyama integration of the limit diffusion and its transformed form."""

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalAbort, SpecError
from .rng import LaneStreams, Purpose
from .slow_motion import Path

_CHUNK_STEPS = 1024


@dataclass(frozen=True, eq=False)
class SdeSpec:
    """``dXi = drift(Xi) dt + diffusion(Xi) dW`` on ``[0, T]`` with step ``dt``.

    ``diffusion`` is either a callable returning ``(P, d, d)`` or a constant
    ``(d, d)`` matrix.
    """

    d: int
    drift: object
    diffusion: object
    dt: float
    T: float

    def __post_init__(self):
        if self.dt <= 0 or self.T <= 0:
            raise SpecError("dt and T must be positive")
        if self.dt > 1e-2 * self.T * (1 + 1e-12):
            raise SpecError(f"dt = {self.dt} exceeds 1e-2 T = {1e-2 * self.T}")
        steps = round(self.T / self.dt)
        if abs(steps * self.dt - self.T) > 1e-9 * self.T:
            raise SpecError("T must be an integer multiple of dt")

    @property
    def steps(self):
        return int(round(self.T / self.dt))

    @property
    def constant_diffusion(self):
        return not callable(self.diffusion)

    def drift_at(self, x):
        if self.drift is None:
            return np.zeros_like(x)
        return self.drift(x)

    def noise_term(self, x, dw):
        if self.constant_diffusion:
            return dw @ np.asarray(self.diffusion).T
        return np.einsum("pij,pj->pi", self.diffusion(x), dw)


def lipschitz_estimate(spec, grid):
    """Largest difference quotient of drift and diffusion between neighbouring grid points."""
    grid = np.asarray(grid, dtype=float)
    step = np.linalg.norm(np.diff(grid, axis=0), axis=1)
    drift = spec.drift_at(grid)
    out = float((np.linalg.norm(np.diff(drift, axis=0), axis=1) / step).max())
    if not spec.constant_diffusion:
        diff = spec.diffusion(grid).reshape(grid.shape[0], -1)
        out = max(out, float((np.linalg.norm(np.diff(diff, axis=0), axis=1) / step).max()))
    if not np.isfinite(out):
        raise SpecError("SDE coefficients are not finite on the test grid")
    return out


def sde_from_coefficients(coeffs, dt, T, with_correction=True):
    """Limit SDE ``b_bar + c`` / ``Sigma sigma^{1/2}``; ``with_correction=False`` drops ``c``."""
    model = coeffs.model
    drift = coeffs.drift if with_correction else coeffs.b_bar
    if not with_correction and not model.has_drift:
        drift = None
    if model.constant_sigma:
        diffusion = model.Sigma(np.zeros((1, model.d)))[0] @ coeffs.sigma_root
    else:
        def diffusion(x):
            return model.Sigma(x) @ coeffs.sigma_root
    return SdeSpec(model.d, drift, diffusion, dt, T)


def transformed_sde(coeffs, transform, dt, T):
    """SDE for ``Psi = r(Xi)``: unit-Sigma diffusion ``sigma^{1/2}`` and Itô-transformed drift.

    ``drift_i = Sinv_ij (b_bar + c)_j + 1/2 d^2 r_i / dx_j dx_k a_jk`` with
    ``d Sinv / dx_k = -Sinv dSigma/dx_k Sinv``.
    """
    model = coeffs.model

    def drift(y):
        x = transform.r_inv(y)
        inv = model.Sigma_inv(x)
        hess = -np.einsum("pab,pbck,pcj->pajk", inv, model.gradient(x), inv)
        first = np.einsum("pij,pj->pi", inv, coeffs.drift(x))
        return first + 0.5 * np.einsum("pijk,pjk->pi", hess, coeffs.a(x))

    return SdeSpec(model.d, drift, coeffs.sigma_root.copy(), dt, T)


def _initial(x0, paths, d):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = np.full(d, float(x0))
    return np.broadcast_to(x0, (paths, d)).copy()


def euler_maruyama(spec, x0, increments=None, seed=None, paths=1, first=0, threads=1, keep="path"):
    """``Xi_{k+1} = Xi_k + drift(Xi_k) dt + diffusion(Xi_k) dW_k``.

    ``increments`` (shape ``(P, steps, d)``, variance ``dt``) makes the run
    share noise with another computation; otherwise standard normals are drawn
    from ``seed`` for members ``[first, first + paths)``.
    """
    n = spec.steps
    if increments is not None:
        increments = np.asarray(increments, dtype=float)
        if increments.ndim != 3 or increments.shape[1:] != (n, spec.d):
            raise SpecError(f"increments must have shape (P, {n}, {spec.d})")
        paths = increments.shape[0]
        lanes = None
    elif seed is None:
        raise SpecError("supply either Brownian increments or a seed")
    else:
        lanes = LaneStreams(seed, Purpose.SDE, first, paths, threads)
    x = _initial(x0, paths, spec.d)
    values = np.empty((paths, n + 1, spec.d)) if keep == "path" else None
    if values is not None:
        values[:, 0] = x
    start = x.copy()
    root_dt = np.sqrt(spec.dt)
    k = 0
    while k < n:
        block = min(max(1, (1 << 22) // (paths * spec.d)), _CHUNK_STEPS, n - k)
        dw = increments[:, k:k + block] if lanes is None else root_dt * lanes.normal(block, spec.d)
        for j in range(block):
            x = x + spec.drift_at(x) * spec.dt + spec.noise_term(x, dw[:, j])
            if values is not None:
                values[:, k + j + 1] = x
        if not np.all(np.isfinite(x)):
            raise NumericalAbort("SDE state left the finite range", step=k + block)
        k += block
    if values is None:
        return Path(np.array([0.0, n * spec.dt]), np.stack([start, x], axis=1))
    return Path(np.arange(n + 1) * spec.dt, values)


def time_changed_path(p, mean_roof):
    """``t -> p(t / mean_roof)`` on the grid of ``p`` (piecewise-constant lookup)."""
    if mean_roof <= 0:
        raise SpecError("mean roof must be positive")
    horizon = p.grid[-1]
    if horizon / mean_roof > horizon * (1 + 1e-12):
        raise SpecError("time change reaches beyond the path horizon")
    if mean_roof == 1.0:
        return Path(p.grid.copy(), p.values.copy())
    return Path(p.grid.copy(), p.at(p.grid / mean_roof))


def time_changed_terminal(spec, x0, mean_roof, seed, paths=1, first=0, threads=1):
    """``Xi(T / mean_roof)`` on the Euler grid without storing whole paths.

    Equals ``time_changed_path(euler_maruyama(spec, ...), mean_roof).terminal``:
    member draws are time-major, so stopping early leaves earlier steps unchanged.
    """
    if mean_roof < 1.0 - 1e-12:
        raise SpecError("time change reaches beyond the path horizon")
    steps = int(np.floor(spec.steps / mean_roof + 1e-9))
    if steps == 0:
        return _initial(x0, paths, spec.d)
    short = replace(spec, T=steps * spec.dt)
    return euler_maruyama(short, x0, seed=seed, paths=paths, first=first, threads=threads, keep="terminal").terminal
