"""Slow-motion recursions, the flow ODE, and the Sigma^{-1} transform.

Model fields are vectorized over an ensemble: ``x`` has shape ``(P, d)``,
``Sigma(x)`` returns ``(P, d, d)``, ``b(x, zeta)`` returns ``(P, d)`` and
``gradient(x)[p, i, j, k]`` is ``dSigma_ij / dx_k``.
"""

import importlib
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from .errors import NumericalAbort, SpecError
from .fast_process import SuspensionStream, _CHUNK

_FD_STEP = 1e-5
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
_GL3_NODES, _GL3_WEIGHTS = np.polynomial.legendre.leggauss(3)


def steps_for(T, N):
    """Number of recursion steps ``floor(T N)``, robust to binary rounding of ``T``."""
    return int(np.floor(T * N + 1e-9))


@dataclass(frozen=True, eq=False)
class Path:
    """Ensemble of piecewise-constant paths: ``values[p, k]`` holds on ``[grid[k], grid[k+1])``."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.grid.ndim != 1 or self.values.shape[1] != self.grid.size:
            raise SpecError("path grid and values disagree")
        if self.grid[0] != 0.0 or np.any(np.diff(self.grid) <= 0):
            raise SpecError("path grid must start at 0 and increase")

    @property
    def terminal(self):
        return self.values[:, -1]

    def at(self, t):
        """Values at times ``t`` under the piecewise-constant convention."""
        idx = np.searchsorted(self.grid, np.asarray(t, dtype=float), side="right") - 1
        return self.values[:, np.clip(idx, 0, self.grid.size - 1)]


class SlowModel:
    """Coefficient fields of a slow motion with uniform bound ``L``."""

    def __init__(self, d, Sigma, b=None, L=1.0, Sigma_grad=None, invertible=True,
                 symmetric_inverse=None, r=None, r_inv=None, constant_sigma=False,
                 drift_depends_on_state=True, name="custom", params=None):
        if d < 1:
            raise SpecError("model dimension must be at least 1")
        if L < 1:
            raise SpecError("the bound L must be at least 1")
        self.d = int(d)
        self.Sigma = Sigma
        self._b = b
        self.L = float(L)
        self.Sigma_grad = Sigma_grad
        self.invertible = invertible
        self.symmetric_inverse = (d == 1) if symmetric_inverse is None else symmetric_inverse
        self.r = r
        self.r_inv = r_inv
        self.constant_sigma = constant_sigma
        self.drift_depends_on_state = drift_depends_on_state and b is not None
        self.name = name
        self.params = dict(params or {})

    @property
    def has_drift(self):
        return self._b is not None

    @property
    def state_independent(self):
        return self.constant_sigma and not self.drift_depends_on_state

    def b(self, x, zeta):
        if self._b is None:
            return np.zeros_like(np.asarray(x, dtype=float))
        return self._b(x, zeta)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.constant_sigma:
            return np.zeros(x.shape[:1] + (self.d,) * 3)
        if self.Sigma_grad is not None:
            return self.Sigma_grad(x)
        out = np.empty(x.shape[:1] + (self.d,) * 3)
        for k in range(self.d):
            e = np.zeros(self.d)
            e[k] = _FD_STEP
            out[..., k] = (self.Sigma(x + e) - self.Sigma(x - e)) / (2 * _FD_STEP)
        return out

    def Sigma_inv(self, x):
        return np.linalg.inv(self.Sigma(x))

    def describe(self):
        return {"name": self.name, "d": self.d, "L": self.L, "params": self.params}


def check_model(model, grid, zetas):
    """Validate bounds, invertibility and the curl-free condition on test points.

    ``grid`` is ``(P, d)``; ``zetas`` is ``(Z, d)``.  Returns the measured maxima.
    """
    L = model.L
    S = model.Sigma(grid)
    G = model.gradient(grid)
    report = {"Sigma": float(np.abs(S).max()), "grad": float(np.abs(G).max())}
    bmax = 0.0
    for z in zetas:
        bmax = max(bmax, float(np.abs(model.b(grid, np.broadcast_to(z, grid.shape))).max()))
    report["b"] = bmax
    for key in ("Sigma", "grad", "b"):
        if report[key] > L * (1 + 1e-9):
            raise SpecError(f"model bound violated: |{key}| = {report[key]:.6g} > L = {L}")
    if model.invertible:
        inv = np.linalg.inv(S)
        report["Sigma_inv"] = float(np.abs(inv).max())
        if report["Sigma_inv"] > L * (1 + 1e-9):
            raise SpecError(f"model bound violated: |Sigma^-1| = {report['Sigma_inv']:.6g} > L = {L}")
    if model.symmetric_inverse:
        report["curl"] = curl_residual(model, grid)[0]
        if report["curl"] > 1e-6:
            raise SpecError(f"inverse symmetry condition fails by {report['curl']:.3g}")
    return report


def curl_residual(model, grid):
    """Largest ``|d Sinv_ij/dx_k - d Sinv_ik/dx_j|`` and its location ``(i, j, k, x)``."""
    inv = np.linalg.inv(model.Sigma(grid))
    dinv = -np.einsum("pab,pbck,pcd->padk", inv, model.gradient(grid), inv)
    diff = np.abs(dinv - dinv.transpose(0, 1, 3, 2))
    flat = int(np.argmax(diff))
    p, i, j, k = np.unravel_index(flat, diff.shape)
    return float(diff.max()), (int(i), int(j), int(k), grid[p].tolist())


# ----------------------------------------------------------------------------
# Registry models
# ----------------------------------------------------------------------------

def _as_matrix(value, d):
    m = np.asarray(value, dtype=float)
    if m.ndim == 0:
        m = m * np.eye(d)
    if m.shape != (d, d):
        raise SpecError(f"expected a {d}x{d} matrix")
    return m


def constant_model(value=1.0, d=1, b=None, L=None, name="constant"):
    """Constant ``Sigma``; ``b`` optional and state-independent unless stated."""
    S = _as_matrix(value, d)
    inv = np.linalg.inv(S)
    bound = L if L is not None else max(1.0, float(np.abs(S).max()), float(np.abs(inv).max()))
    return SlowModel(
        d, lambda x: np.broadcast_to(S, (np.shape(x)[0], d, d)), b=b, L=bound, symmetric_inverse=True,
        r=lambda x: np.asarray(x) @ inv.T, r_inv=lambda y, guess=None: np.asarray(y) @ S.T,
        constant_sigma=True, drift_depends_on_state=False, name=name,
        params={"Sigma": S.tolist()},
    )


def affine_model(sigma=1.0, drift_matrix=-1.0, drift_offset=0.0, noise_drift=0.0, d=1, L=None):
    """Constant ``Sigma`` with ``b(x, zeta) = A x + c + k zeta``."""
    A = _as_matrix(drift_matrix, d)
    c = np.broadcast_to(np.asarray(drift_offset, dtype=float), (d,)).copy()
    k = float(noise_drift)

    def b(x, zeta):
        return np.asarray(x) @ A.T + c + k * np.asarray(zeta)

    model = constant_model(sigma, d, b=b, L=L, name="affine")
    model.drift_depends_on_state = bool(np.any(A != 0))
    model.params.update({"drift_matrix": A.tolist(), "drift_offset": c.tolist(), "noise_drift": k})
    return model


_S3 = np.sqrt(3.0)


def _sin_antiderivative(x, base=2.0):
    """Closed form of ``int_0^x du / (base + sin u)`` for ``base > 1``."""
    x = np.asarray(x, dtype=float)
    root = np.sqrt(base * base - 1.0)
    k = np.round(x / (2 * np.pi))
    xp = x - 2 * np.pi * k
    core = (2 / root) * np.arctan((base * np.tan(xp / 2) + 1) / root)
    zero = (2 / root) * np.arctan(1 / root)
    return core - zero + (2 * np.pi / root) * k


def two_plus_sin_model(base=2.0, b=None, name="two_plus_sin"):
    """``Sigma(x) = base + sin x`` for ``d = 1``."""
    if base <= 1:
        raise SpecError("base must exceed 1 so that Sigma stays invertible")
    L = max(1.0, base + 1.0, 1.0 / (base - 1.0))

    def Sigma(x):
        return (base + np.sin(np.asarray(x)))[..., None]

    def grad(x):
        return np.cos(np.asarray(x))[..., None, None]

    return SlowModel(1, Sigma, b=b, L=L, Sigma_grad=grad, name=name, params={"base": base})


def diagonal_sin_model(base=2.0, d=2):
    """``Sigma = diag(base + sin x_i)`` with its closed-form transform."""
    L = max(1.0, base + 1.0, 1.0 / (base - 1.0))

    def Sigma(x):
        x = np.asarray(x)
        out = np.zeros(x.shape[:1] + (d, d))
        idx = np.arange(d)
        out[:, idx, idx] = base + np.sin(x)
        return out

    def grad(x):
        x = np.asarray(x)
        out = np.zeros(x.shape[:1] + (d, d, d))
        idx = np.arange(d)
        out[:, idx, idx, idx] = np.cos(x)
        return out

    def r(x):
        return _sin_antiderivative(x, base)

    return SlowModel(d, Sigma, L=L, Sigma_grad=grad, symmetric_inverse=True, r=r,
                     name="diagonal_sin", params={"base": base, "d": d})


def plugin_model(target, **params):
    """Load ``package.module:factory`` and call it with ``params``."""
    if ":" not in target:
        raise SpecError("plugin target must look like 'module:factory'")
    module, attr = target.split(":", 1)
    try:
        factory = getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise SpecError(f"cannot load plugin {target!r}: {exc}") from exc
    model = factory(**params)
    if not isinstance(model, SlowModel):
        raise SpecError(f"plugin {target!r} did not return a SlowModel")
    return model


MODEL_REGISTRY = {
    "constant": constant_model,
    "affine": affine_model,
    "two_plus_sin": two_plus_sin_model,
    "diagonal_sin": diagonal_sin_model,
    "plugin": plugin_model,
}


def model_from_registry(name, **params):
    if name not in MODEL_REGISTRY:
        raise SpecError(f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}")
    return MODEL_REGISTRY[name](**params)


# ----------------------------------------------------------------------------
# Discrete recursions
# ----------------------------------------------------------------------------

def _field_step(x, xi, model, N):
    """One application of the slow recursion to an ensemble state."""
    noise = np.einsum("pij,pj->pi", model.Sigma(x), xi)
    out = x + N ** -0.5 * noise
    if model.has_drift:
        out = out + (1.0 / N) * model.b(x, xi)
    return out


def _march(h, n, paths, first, threads, init, step, keep):
    """Drive ``step(state, xi_t, t)`` over ``n`` fast values, chunk by chunk."""
    stream = h.stream(paths, first, threads)
    state = init
    d = np.shape(init)[1]
    values = np.empty((paths, n + 1, d)) if keep == "path" else None
    if values is not None:
        values[:, 0] = state
    t = 0
    while t < n:
        k = min(_CHUNK, max(1, (1 << 22) // paths), n - t)
        xi = stream.next(k)
        for j in range(k):
            state = step(state, xi[:, j], t)
            t += 1
            if values is not None:
                values[:, t] = state
        if not np.all(np.isfinite(state)):
            at = t
            if values is not None:
                bad = np.flatnonzero(~np.isfinite(values[:, t - k + 1:t + 1]).all(axis=(0, 2)))
                at = t - k + 1 + int(bad[0])
            raise NumericalAbort("slow motion left the finite range", step=at)
    if values is None:
        values = np.stack([np.broadcast_to(init, state.shape), state], axis=1)
    return values


def _initial(x0, paths, d):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = np.full(d, float(x0))
    if x0.shape[-1] != d:
        raise SpecError(f"initial state must have dimension {d}")
    return np.broadcast_to(x0, (paths, d)).copy()


def iterate_discrete(model, h, N, T, x0, paths=1, first=0, threads=1, keep="path"):
    """Slow recursion ``X + N^{-1/2} Sigma(X) xi + N^{-1} b(X, xi)`` on ``[0, T]``.

    ``keep="path"`` returns every grid point; ``keep="terminal"`` returns a
    two-point path ``(0, floor(TN)/N)``.
    """
    if N < 1:
        raise SpecError("N must be at least 1")
    if h.d != model.d:
        raise SpecError("process and model dimensions differ")
    n = steps_for(T, N)
    init = _initial(x0, paths, model.d)
    values = _march(h, n, paths, first, threads, init,
                    lambda x, xi, t: _field_step(x, xi, model, N), keep)
    grid = np.arange(n + 1) / N if keep == "path" else np.array([0.0, n / N])
    return Path(grid, values)


def iterate_transformed(transform, model, h, N, T, y0, paths=1, first=0, threads=1, keep="path"):
    """Additive-noise recursion in transformed coordinates:

    ``Y + N^{-1/2} xi + N^{-1} (Sigma^{-1}(x) b(x, xi) + q(x, xi))`` with ``x = r^{-1}(Y)``.
    """
    n = steps_for(T, N)
    init = _initial(y0, paths, model.d)
    guess = {"x": transform.r_inv(init)}

    def step(y, xi, t):
        x = transform.r_inv(y, guess["x"])
        guess["x"] = x
        drift = transform.q(x, xi)
        if model.has_drift:
            drift = drift + np.einsum("pij,pj->pi", model.Sigma_inv(x), model.b(x, xi))
        return y + N ** -0.5 * xi + (1.0 / N) * drift

    values = _march(h, n, paths, first, threads, init, step, keep)
    grid = np.arange(n + 1) / N if keep == "path" else np.array([0.0, n / N])
    return Path(grid, values)


def transform_gap(X, Y, transform, batch=1 << 15):
    """Per-member ``sup_t |r(X(t)) - Y(t)|`` over a common grid."""
    if X.values.shape != Y.values.shape or not np.array_equal(X.grid, Y.grid):
        raise SpecError("paths must share one grid")
    P, n, d = X.values.shape
    flat_x = X.values.reshape(-1, d)
    flat_y = Y.values.reshape(-1, d)
    gap = np.empty(flat_x.shape[0])
    for s in range(0, gap.size, batch):
        diff = transform.r(flat_x[s:s + batch]) - flat_y[s:s + batch]
        gap[s:s + batch] = np.linalg.norm(diff, axis=1)
    return gap.reshape(P, n).max(axis=1)


# ----------------------------------------------------------------------------
# Transform r with Dr = Sigma^{-1}
# ----------------------------------------------------------------------------

class _ScalarAntiderivative:
    """``r(x) = int_0^x du / Sigma(u)`` on a tabulated grid for ``d = 1``."""

    def __init__(self, model, cell=0.5, reach=100.0, tol=1e-10):
        self.model = model
        self.cell = cell
        self.reach = reach
        self.tol = tol
        count = int(round(reach / cell))
        self.nodes = np.arange(-count, count + 1) * cell
        inv = self._integrand
        pieces = np.array([
            integrate.quad(inv, a, a + cell, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
            for a in self.nodes[:-1]
        ])
        table = np.concatenate([[0.0], np.cumsum(pieces)])
        self.table = table - table[count]
        self.sign = 1.0 if self.table[-1] > self.table[0] else -1.0

    def _integrand(self, u):
        return 1.0 / self.model.Sigma(np.array([[u]]))[0, 0, 0]

    def _scalar(self, x):
        anchor = np.clip(x, -self.reach, self.reach)
        base = self.table[0] if anchor < 0 else self.table[-1]
        return base + integrate.quad(self._integrand, anchor, x, epsabs=1e-13, epsrel=1e-13, limit=500)[0]

    def __call__(self, x, batch=1 << 15):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1)
        out = np.empty_like(flat)
        for s in range(0, flat.size, batch):
            out[s:s + batch] = self._inner(flat[s:s + batch])
        return out.reshape(x.shape)

    def _inner(self, x):
        inside = np.abs(x) <= self.reach
        out = np.empty_like(x)
        xi = x[inside]
        j = np.clip(np.floor((xi + self.reach) / self.cell).astype(np.int64), 0, self.nodes.size - 2)
        a = self.nodes[j]
        half = 0.5 * (xi - a)
        pts = a[:, None] + half[:, None] * (_GL_NODES + 1.0)
        vals = 1.0 / self.model.Sigma(pts.reshape(-1, 1))[:, 0, 0].reshape(pts.shape)
        out[inside] = self.table[j] + half * (vals @ _GL_WEIGHTS)
        for idx in np.flatnonzero(~inside):
            out[idx] = self._scalar(x[idx])
        return out

    def inverse(self, y, guess=None):
        y = np.asarray(y, dtype=float).reshape(-1)
        s = self.sign
        lo_tab, hi_tab = (self.table[0], self.table[-1]) if s > 0 else (self.table[-1], self.table[0])
        inside = (y >= lo_tab) & (y <= hi_tab)
        out = np.empty_like(y)
        if np.any(inside):
            yi = y[inside]
            key = s * yi
            j = np.clip(np.searchsorted(s * self.table, key, side="right") - 1, 0, self.nodes.size - 2)
            lo = self.nodes[j].copy()
            hi = self.nodes[j + 1].copy()
            if guess is None:
                x = 0.5 * (lo + hi)
            else:
                g = np.asarray(guess, dtype=float).reshape(-1)[inside]
                x = np.where((g >= lo) & (g <= hi), g, 0.5 * (lo + hi))
            for _ in range(100):
                f = s * (self(x) - yi)
                lo = np.where(f < 0, x, lo)
                hi = np.where(f >= 0, x, hi)
                step = f * np.abs(self.model.Sigma(x[:, None])[:, 0, 0])
                cand = x - step
                cand = np.where((cand >= lo) & (cand <= hi), cand, 0.5 * (lo + hi))
                done = np.abs(cand - x) <= 1e-14 * (1.0 + np.abs(x))
                x = cand
                if np.all(done):
                    break
            else:
                raise NumericalAbort("inverse transform did not converge")
            out[inside] = x
        for idx in np.flatnonzero(~inside):
            target = y[idx]
            a, b = -self.reach, self.reach
            while s * (self._scalar(a) - target) > 0:
                a *= 2.0
            while s * (self._scalar(b) - target) < 0:
                b *= 2.0
            out[idx] = optimize.brentq(lambda v: self._scalar(v) - target, a, b, xtol=1e-14)
        return out


class TransformHandle:
    """Diffeomorphism ``r`` with ``Dr = Sigma^{-1}``, its inverse and the correction ``q``."""

    def __init__(self, model, r, r_inv):
        self.model = model
        self._r = r
        self._r_inv = r_inv

    def r(self, x):
        return self._r(np.asarray(x, dtype=float))

    def r_inv(self, y, guess=None):
        return self._r_inv(np.asarray(y, dtype=float), guess)

    def Dr(self, x):
        return self.model.Sigma_inv(np.asarray(x, dtype=float))

    def q(self, x, zeta):
        """``q_i = -1/2 Sinv_ik dSigma_km/dx_l Sigma_ln zeta_m zeta_n``."""
        x = np.asarray(x, dtype=float)
        if self.model.constant_sigma:
            return np.zeros_like(x)
        inv = self.model.Sigma_inv(x)
        grad = self.model.gradient(x)
        S = self.model.Sigma(x)
        return -0.5 * np.einsum("pik,pkml,pln,pm,pn->pi", inv, grad, S, zeta, zeta)

    def q_expected(self, x, second_moment):
        """``E q(x, xi)`` for ``E xi xi^T = second_moment``."""
        x = np.asarray(x, dtype=float)
        if self.model.constant_sigma:
            return np.zeros_like(x)
        inv = self.model.Sigma_inv(x)
        grad = self.model.gradient(x)
        S = self.model.Sigma(x)
        return -0.5 * np.einsum("pik,pkml,pln,mn->pi", inv, grad, S, second_moment)


def _newton_inverse(model, r):
    def inverse(y, guess=None):
        y = np.asarray(y, dtype=float)
        x = y.copy() if guess is None else np.asarray(guess, dtype=float).copy()
        for _ in range(100):
            step = np.einsum("pij,pj->pi", model.Sigma(x), r(x) - y)
            x = x - step
            if np.max(np.abs(step)) <= 1e-13 * (1.0 + np.max(np.abs(x))):
                return x
        raise NumericalAbort("inverse transform did not converge")
    return inverse


def build_transform(model, grid=None):
    """Construct ``r`` with ``Dr = Sigma^{-1}``.

    ``d = 1`` integrates ``1 / Sigma`` numerically; ``d >= 2`` needs a
    model-supplied ``r``, which is checked against ``Sigma^{-1}`` by central
    differences.
    """
    if not model.invertible or not model.symmetric_inverse:
        raise SpecError("transform needs an invertible Sigma with a curl-free inverse")
    if grid is None:
        axis = np.linspace(-3.0, 3.0, 7 if model.d > 1 else 61)
        grid = np.array(np.meshgrid(*([axis] * model.d), indexing="ij")).reshape(model.d, -1).T
    worst, where = curl_residual(model, grid)
    if worst > 1e-6:
        i, j, k, x = where
        raise SpecError(f"inverse symmetry condition fails at (i={i}, j={j}, k={k}, x={x}): {worst:.3g}")
    if model.constant_sigma and model.r is not None:
        return TransformHandle(model, model.r, model.r_inv)
    if model.d == 1 and model.r is None:
        table = _ScalarAntiderivative(model)
        r = lambda x: table(x[..., 0])[..., None]
        r_inv = lambda y, guess=None: table.inverse(y[..., 0], None if guess is None else guess[..., 0]).reshape(y.shape[:-1])[..., None]
        return TransformHandle(model, r, r_inv)
    if model.r is None:
        raise SpecError("d >= 2 transforms need a closed-form r supplied by the model")
    jac = np.empty(grid.shape + (model.d,))
    h = 1e-5
    for k in range(model.d):
        e = np.zeros(model.d)
        e[k] = h
        jac[..., k] = (model.r(grid + e) - model.r(grid - e)) / (2 * h)
    err = float(np.abs(jac - model.Sigma_inv(grid)).max())
    if err > 1e-6:
        raise SpecError(f"supplied r does not satisfy Dr = Sigma^-1 (error {err:.3g})")
    r_inv = model.r_inv if model.r_inv is not None else _newton_inverse(model, model.r)
    return TransformHandle(model, model.r, r_inv)


def transform_constants(transform, model, zetas, y_grid=None):
    """Numerical ``L2`` covering the bounds and Lipschitz constants of the transformed drift."""
    if y_grid is None:
        y_grid = np.linspace(-6.0, 6.0, 241)[:, None] * np.ones((1, model.d))
    x = transform.r_inv(y_grid)

    def fb(xx, z):
        zz = np.broadcast_to(z, xx.shape)
        out = transform.q(xx, zz)
        if model.has_drift:
            out = out + np.einsum("pij,pj->pi", model.Sigma_inv(xx), model.b(xx, zz))
        return out

    vals = np.stack([fb(x, z) for z in zetas])
    bound = float(np.linalg.norm(vals, axis=-1).max())
    dy = np.linalg.norm(np.diff(y_grid, axis=0), axis=1)
    lip_y = float((np.linalg.norm(np.diff(vals, axis=1), axis=-1) / dy).max())
    lip_z = 0.0
    for a in range(len(zetas)):
        for b in range(a + 1, len(zetas)):
            dz = np.linalg.norm(np.asarray(zetas[a]) - np.asarray(zetas[b]))
            if dz > 0:
                lip_z = max(lip_z, float(np.linalg.norm(vals[a] - vals[b], axis=-1).max() / dz))
    return max(bound, lip_y, lip_z)


def taylor_remainder_constant(model, zeta_bound, N, grid=None):
    """Bound ``C2`` on ``N^{3/2}`` times the second-order Taylor remainder of ``r`` (``d = 1``)."""
    if model.d != 1:
        raise SpecError("taylor_remainder_constant is implemented for d = 1")
    if grid is None:
        grid = np.linspace(-np.pi, np.pi, 2001)[:, None]
    S = model.Sigma(grid)[:, 0, 0]
    dS = model.gradient(grid)[:, 0, 0, 0]
    h = 1e-4
    d2S = (model.gradient(grid + h)[:, 0, 0, 0] - model.gradient(grid - h)[:, 0, 0, 0]) / (2 * h)
    r2 = np.abs(dS / S ** 2).max()
    r3 = np.abs((2 * dS ** 2 - S * d2S) / S ** 3).max()
    noise = float(np.abs(S).max()) * zeta_bound
    drift = model.L if model.has_drift else 0.0
    step = noise + N ** -0.5 * drift
    return float(r2 * noise * drift + 0.5 * r2 * drift ** 2 * N ** -0.5 + r3 * step ** 3 / 6.0)


# ----------------------------------------------------------------------------
# Flow ODE over a suspension
# ----------------------------------------------------------------------------

@dataclass
class ContinuousRun:
    terminal: np.ndarray        # X^eps(T), (P, d)
    skeleton_terminal: np.ndarray  # Y^eps at the last completed piece, (P, d)
    gap: np.ndarray             # per member max_n sup |r(X) - Y_n| over pieces inside [0, T]
    piece_gap: np.ndarray       # ensemble max of the per-piece sup gap, (n_pieces,)
    pieces: np.ndarray          # number of pieces started before T, per member
    substeps: int


def _flow_value(chunk, k, frac):
    return chunk.start[:, k] + (chunk.end[:, k] - chunk.start[:, k]) * frac


def integrate_continuous(model, susp, eps, T, x0, paths=1, first=0, threads=1,
                         transform=None, roof_range=None, chunk=512):
    """Integrate ``dX/dt = Sigma(X) xi(t/eps^2)/eps + b(X, xi(t/eps^2))`` by RK4.

    Each roof piece of real length ``eps^2 tau_k`` is cut into ``n_sub``
    equal substeps with ``n_sub >= 16 tau_max / tau_min``, so substeps never
    exceed ``eps^2 min(tau) / 16`` and never straddle a piece boundary.  The
    skeleton ``Y_{n+1} = Y_n + eps eta_n + eps^2 Dr b_hat`` runs alongside and
    the per-piece gap ``sup |r(X) - Y_n|`` is recorded.
    """
    if not 0 < eps < 1:
        raise SpecError("eps must lie in (0, 1)")
    d = model.d
    if susp.d != d:
        raise SpecError("suspension and model dimensions differ")
    if transform is None:
        transform = build_transform(model)
    tau_min, tau_max = roof_range if roof_range is not None else (1.0 / susp.roof_bound, susp.roof_bound)
    n_sub = int(np.ceil(16.0 * tau_max / tau_min - 1e-12))
    fast_path = model.state_independent and susp.mode == "constant"
    x = _initial(x0, paths, d)
    y = transform.r(x)
    clock = np.zeros(paths)
    gap = np.zeros(paths)
    pieces = np.zeros(paths, dtype=np.int64)
    terminal = x.copy()
    skeleton = y.copy()
    piece_gaps = []
    stream = SuspensionStream(susp, paths, first, threads)
    chunk = max(8, min(chunk, (1 << 22) // paths))
    eps2 = eps * eps
    while np.any(clock < T):
        ch = stream.next(chunk)
        for k in range(chunk):
            active = clock < T
            if not np.any(active):
                break
            tau = ch.tau[:, k]
            length = np.clip(np.minimum(clock + eps2 * tau, T) - clock, 0.0, None)
            full = active & (clock + eps2 * tau <= T)
            y_piece = y
            if fast_path:
                lvl = ch.start[:, k]
                rate = np.einsum("pij,pj->pi", model.Sigma(x), lvl) / eps + model.b(x, lvl)
                x_new = x + length[:, None] * rate
                z_new = transform.r(x_new)
                sup = np.maximum(np.linalg.norm(transform.r(x) - y_piece, axis=1),
                                 np.linalg.norm(z_new - y_piece, axis=1))
            else:
                x_new, sup = _rk4_piece(model, transform, ch, k, x, y_piece, length, tau, eps, n_sub)
            sup = np.where(active, sup, 0.0)
            gap = np.maximum(gap, sup)
            piece_gaps.append(float(sup.max()))
            pieces += active
            # Skeleton update with the roof-integrated transformed drift.
            x_skel = transform.r_inv(y)
            bhat = _roof_integrated_drift(model, ch, k, x_skel, tau)
            drift = np.einsum("pij,pj->pi", model.Sigma_inv(x_skel), bhat) if model.has_drift else 0.0
            y_next = y + eps * ch.eta[:, k] + eps2 * drift
            y = np.where(full[:, None], y_next, y)
            skeleton = np.where(full[:, None], y, skeleton)
            x = np.where(active[:, None], x_new, x)
            terminal = np.where(active[:, None], x, terminal)
            clock = np.where(full, clock + eps2 * tau, np.where(active, T, clock))
        if not np.all(np.isfinite(x)):
            raise NumericalAbort("flow left the finite range", step=int(pieces.max()))
    return ContinuousRun(terminal, skeleton, gap, np.array(piece_gaps), pieces, n_sub)


def _roof_integrated_drift(model, ch, k, x, tau):
    if not model.has_drift:
        return np.zeros_like(x)
    if np.array_equal(ch.start[:, k], ch.end[:, k]):
        return tau[:, None] * model.b(x, ch.start[:, k])
    acc = np.zeros_like(x)
    for node, weight in zip(_GL3_NODES, _GL3_WEIGHTS):
        frac = 0.5 * (node + 1.0)
        acc = acc + 0.5 * weight * model.b(x, _flow_value(ch, k, frac))
    return tau[:, None] * acc


def _rk4_piece(model, transform, ch, k, x, y_piece, length, tau, eps, n_sub):
    h = (length / n_sub)[:, None]
    frac_step = np.where(tau > 0, length / (eps * eps * tau), 0.0) / n_sub

    def rhs(state, frac):
        lvl = _flow_value(ch, k, frac[:, None])
        return np.einsum("pij,pj->pi", model.Sigma(state), lvl) / eps + model.b(state, lvl)

    sup = np.linalg.norm(transform.r(x) - y_piece, axis=1)
    frac = np.zeros_like(length)
    for _ in range(n_sub):
        k1 = rhs(x, frac)
        k2 = rhs(x + 0.5 * h * k1, frac + 0.5 * frac_step)
        k3 = rhs(x + 0.5 * h * k2, frac + 0.5 * frac_step)
        k4 = rhs(x + h * k3, frac + frac_step)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        frac = frac + frac_step
        sup = np.maximum(sup, np.linalg.norm(transform.r(x) - y_piece, axis=1))
    return x, sup


def piece_gap_bound(eps, L, roof_bound, n):
    """Right-hand side ``eps (1 + eps) L Lhat exp(L^3 (L^2 + 1) Lhat n eps^2)``."""
    return eps * (1 + eps) * L * roof_bound * np.exp(L ** 3 * (L ** 2 + 1) * roof_bound * n * eps * eps)
