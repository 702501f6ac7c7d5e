"""Long-run covariance objects and the drift/diffusion fields built from them.

Convention: ``lags[n] = E xi(0) xi(n)^T``.  The long-run covariance is
``sigma = lags[0] + sum_{n>=1} (lags[n] + lags[n]^T)`` and the one-sided sum
is ``sigma_hat = sum_{n>=1} E xi(n) xi(0)^T = sum_{n>=1} lags[n]^T``; the
second is the orientation that makes ``c`` the correct Itô drift for
``d >= 2``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import SpecError
from .fast_process import MarkovChainSpec, ProcessHandle, as_chain, mixing_coefficient, rho_coefficient

_TAIL_TERMS = 100_000


@dataclass(frozen=True, eq=False)
class CovarianceSummary:
    lags: np.ndarray
    sigma: np.ndarray
    sigma_hat: np.ndarray
    zero_lag: np.ndarray
    provenance: dict
    se: dict = field(default_factory=dict)
    flags: tuple = ()

    @property
    def d(self):
        return self.sigma.shape[0]

    def to_dict(self):
        out = {
            "provenance": dict(self.provenance),
            "d": self.d,
            "n_max": self.lags.shape[0] - 1,
            "lags": self.lags.reshape(self.lags.shape[0], -1).tolist(),
            "sigma": self.sigma.ravel().tolist(),
            "sigma_hat": self.sigma_hat.ravel().tolist(),
            "zero_lag": self.zero_lag.ravel().tolist(),
            "flags": list(self.flags),
        }
        if self.se:
            out["se"] = {k: np.asarray(v).ravel().tolist() for k, v in self.se.items()}
        return out


def _chain_lags(spec, values, n_max):
    D = spec.stationary[:, None] * values
    lags = np.empty((n_max + 1, values.shape[1], values.shape[1]))
    right = values.copy()
    for n in range(n_max + 1):
        lags[n] = values.T @ (spec.stationary[:, None] * right) if n else values.T @ D
        right = spec.transition @ right
    return lags


def _fundamental_sums(spec, values):
    """``sum_{n>=1} E xi(0) xi(n)^T`` in closed form via the fundamental matrix."""
    S = spec.size
    Pi = np.tile(spec.stationary, (S, 1))
    Z = np.linalg.solve(np.eye(S) - spec.transition + Pi, np.eye(S))
    return values.T @ (spec.stationary[:, None] * ((Z - np.eye(S)) @ values))


def _resolve_chain(source):
    if isinstance(source, ProcessHandle):
        rep = as_chain(source)
        if rep is None and not (source.kind == "iid" and source.iid.distribution == "gaussian"):
            raise SpecError("exact summary needs a finite-state or Gaussian iid process")
        return rep
    if isinstance(source, tuple) and isinstance(source[0], MarkovChainSpec):
        return source[0], np.atleast_2d(np.asarray(source[1], dtype=float).T).T
    return None


def covariance_summary(source, n_max=50, handle=None, batches=20):
    """Exact summary for chains, or an estimate from a sampled path ``(n, d)``.

    ``handle`` supplies the mixing bounds used for the truncation tail when
    estimating from a path.
    """
    if n_max < 1:
        raise SpecError("n_max must be at least 1")
    if isinstance(source, (ProcessHandle, tuple)):
        return _exact_summary(source, n_max)
    path = np.asarray(source, dtype=float)
    if path.ndim == 1:
        path = path[:, None]
    return _estimated_summary(path, n_max, handle, batches)


def _exact_summary(source, n_max):
    rep = _resolve_chain(source)
    if rep is None:
        d = source.d
        var = source.iid.scale ** 2 * np.eye(d)
        lags = np.zeros((n_max + 1, d, d))
        lags[0] = var
        return CovarianceSummary(lags, var.copy(), np.zeros((d, d)), var.copy(),
                                 {"mode": "exact", "n_max": n_max, "tail_bound": 0.0})
    spec, values = rep
    if np.max(np.abs(spec.stationary @ values)) > 1e-12:
        raise SpecError("observable is not centered under the stationary law")
    lags = _chain_lags(spec, values, n_max)
    forward = _fundamental_sums(spec, values)
    zero = lags[0]
    sigma = zero + forward + forward.T
    sigma = 0.5 * (sigma + sigma.T)
    sigma_hat = forward.T
    truncated = lags[1:].sum(axis=0)
    tail = float(np.max(np.abs(forward - truncated)))
    flags = () if np.linalg.eigvalsh(sigma).min() >= -1e-8 else ("non_psd",)
    return CovarianceSummary(lags, sigma, sigma_hat, zero,
                             {"mode": "exact", "n_max": n_max, "tail_bound": tail}, flags=flags)


def _lag_covariances(path, n_max):
    n, d = path.shape
    out = np.empty((n_max + 1, d, d))
    for k in range(n_max + 1):
        out[k] = path[: n - k].T @ path[k:] / (n - k)
    return out


def _tail_bound(handle, n_max):
    if handle is None:
        return None
    L = handle.bound
    total = 0.0
    for n in range(n_max + 1, n_max + 1 + _TAIL_TERMS):
        term = 2.0 * L * (L * mixing_coefficient(handle, n // 3) + rho_coefficient(handle, n // 3))
        total += term
        if term < 1e-18:
            break
    return total


def _summarize_lags(lags):
    forward = lags[1:].sum(axis=0)
    sigma = lags[0] + forward + forward.T
    return 0.5 * (sigma + sigma.T), forward.T


def _estimated_summary(path, n_max, handle, batches):
    n, d = path.shape
    if n < 4 * n_max * batches:
        raise SpecError(f"path of length {n} is too short for n_max={n_max}")
    lags = _lag_covariances(path, n_max)
    sigma, sigma_hat = _summarize_lags(lags)
    size = n // batches
    per = []
    for b in range(batches):
        piece = _lag_covariances(path[b * size:(b + 1) * size], n_max)
        per.append(_summarize_lags(piece) + (piece[0],))
    se_sigma = np.std([p[0] for p in per], axis=0, ddof=1) / np.sqrt(batches)
    se_hat = np.std([p[1] for p in per], axis=0, ddof=1) / np.sqrt(batches)
    se_zero = np.std([p[2] for p in per], axis=0, ddof=1) / np.sqrt(batches)
    w, V = np.linalg.eigh(sigma)
    flags = []
    if w.min() < -4.0 * max(float(se_sigma.max()), 1e-12):
        flags.append("non_psd")
    sigma = (V * np.clip(w, 0.0, None)) @ V.T
    tail = _tail_bound(handle, n_max)
    provenance = {"mode": "estimated", "n_max": n_max, "length": n, "batches": batches,
                  "tail_bound": tail}
    return CovarianceSummary(lags, sigma, sigma_hat, lags[0], provenance,
                             se={"sigma": se_sigma, "sigma_hat": se_hat, "zero_lag": se_zero},
                             flags=tuple(flags))


def identity_residual(s):
    """``max |sigma_hat + sigma_hat^T - sigma + zero_lag|`` (zero for an exact summary)."""
    return float(np.max(np.abs(s.sigma_hat + s.sigma_hat.T - s.sigma + s.zero_lag)))


def cesaro_sigma(source, k, richardson=True):
    """Long-run covariance from the double average ``k^-1 sum_{m,n<k} E xi(m) xi(n)^T``.

    The plain average has an O(1/k) bias; with ``richardson`` the value
    ``2 c(2k) - c(k)`` removes it, leaving an error that decays like the
    covariances themselves.
    """
    rep = _resolve_chain(source)
    if rep is None:
        raise SpecError("cesaro_sigma needs a finite-state process")
    spec, values = rep
    lags = _chain_lags(spec, values, 2 * k)

    def average(kk):
        total = (kk) * lags[0]
        for j in range(1, kk):
            total = total + (kk - j) * (lags[j] + lags[j].T)
        return total / kk

    if not richardson:
        return average(k)
    return 2.0 * average(2 * k) - average(k)


def psd_sqrt(m, tol=1e-10):
    """Symmetric PSD square root through the eigendecomposition."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise SpecError("matrix must be square")
    if np.max(np.abs(m - m.T)) > tol:
        raise SpecError("matrix is not symmetric within 1e-10")
    w, V = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < -tol:
        raise SpecError(f"matrix is indefinite (eigenvalue {w.min():.3g})")
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return 0.5 * (root + root.T)


class DiffusionCoefficients:
    """Fields ``a``, ``sigma_field``, ``c`` and ``b_bar`` of the limit diffusion.

    All fields accept a point ``(d,)`` or a batch ``(P, d)``.
    """

    def __init__(self, model, summary, mode, drift_matrix, marginal):
        self.model = model
        self.summary = summary
        self.mode = mode
        self.sigma = summary.sigma
        self.sigma_root = psd_sqrt(summary.sigma, tol=1e-8)
        self.drift_matrix = drift_matrix
        self.marginal = marginal

    @staticmethod
    def _batch(x):
        x = np.asarray(x, dtype=float)
        return (x[None, :], True) if x.ndim == 1 else (x, False)

    def a(self, x):
        xb, single = self._batch(x)
        S = self.model.Sigma(xb)
        out = S @ self.sigma @ S.transpose(0, 2, 1)
        return out[0] if single else out

    def sigma_field(self, x):
        xb, single = self._batch(x)
        out = self.model.Sigma(xb) @ self.sigma_root
        return out[0] if single else out

    def c(self, x):
        xb, single = self._batch(x)
        grad = self.model.gradient(xb)
        S = self.model.Sigma(xb)
        out = np.einsum("pijk,jl,pkl->pi", grad, self.drift_matrix, S)
        return out[0] if single else out

    def b_bar(self, x):
        xb, single = self._batch(x)
        values, weights = self.marginal
        out = np.zeros_like(xb)
        for v, w in zip(values, weights):
            out = out + w * self.model.b(xb, np.broadcast_to(v, xb.shape))
        return out[0] if single else out

    def drift(self, x):
        return self.b_bar(x) + self.c(x)


def diffusion_fields(model, summary, mode="discrete", eta_zero_lag=None, marginal=None):
    """Assemble the limit-diffusion fields.

    ``discrete`` uses ``sigma_hat`` in ``c``; ``continuous`` uses
    ``sigma_hat + E(eta eta^T) / 2`` and requires ``eta_zero_lag``.
    ``marginal`` is ``(values, weights)`` with ``b_bar(x) = sum_s w_s b(x, v_s)``;
    for the continuous mode the weights carry the roof lengths.
    """
    if mode not in ("discrete", "continuous"):
        raise SpecError(f"unknown mode {mode!r}")
    if summary.d != model.d:
        raise SpecError("summary and model dimensions differ")
    if mode == "continuous":
        if eta_zero_lag is None:
            raise SpecError("continuous mode needs the zero-lag moment E(eta eta^T)")
        drift_matrix = summary.sigma_hat + 0.5 * np.asarray(eta_zero_lag, dtype=float)
    else:
        drift_matrix = summary.sigma_hat
    if marginal is None:
        if model.has_drift:
            raise SpecError("a drift b needs the stationary marginal to form b_bar")
        marginal = (np.zeros((1, model.d)), np.ones(1))
    return DiffusionCoefficients(model, summary, mode, drift_matrix, marginal)
