"""Block-gap decomposition, quantile coupling of block sums, and coupled pairs.

Blocks have length ``3 m_N`` with ``m_N = floor(N^{(1-kappa)/2})``.  Block
``k`` covers ``[n_k, n_{k+1})``; its first ``3 floor(m_N^{1/4})`` steps form
the gap and the rest the core ``[l_{k+1}, n_{k+1})``.  Arrays indexed by
block use the block's left end: entry ``k`` of ``alpha``, ``Q``, ``R1``,
``R2`` and ``V`` all describe ``[n_k, n_{k+1})``.

The coupling works in two phases over the whole ensemble: the core sums of
every member are computed first, each block is then transported to
``N(0, sigma)`` by randomized ranks, and finally the fast path is replayed
(identical by seed) alongside a Brownian path built from the coupled block
increments.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .coefficients import covariance_summary, diffusion_fields, psd_sqrt
from .errors import SpecError
from .fast_process import _CHUNK, mixing_coefficient
from .limit_sde import euler_maruyama, sde_from_coefficients, transformed_sde
from .rng import LANE_WIDTH, LaneStreams, Purpose
from .slow_motion import build_transform, iterate_discrete, steps_for

CF_EXPONENT = 1.0 / 20.0
_MEMBER_BATCH = 4 * LANE_WIDTH


@dataclass(frozen=True)
class BlockScheme:
    N: int
    kappa: float
    T: float
    m: int
    gap: int
    steps: int
    blocks: int

    @property
    def block_len(self):
        return 3 * self.m

    @property
    def core_len(self):
        return self.block_len - self.gap

    @property
    def boundaries(self):
        """``n_0, ..., n_K``."""
        return np.arange(self.blocks + 1) * self.block_len

    @property
    def core_starts(self):
        """``l_1, ..., l_K`` (the core of block ``k`` starts at entry ``k``)."""
        return self.boundaries[:-1] + self.gap

    def block_of(self, t):
        """``k_N(t) = max{k : n_k <= t}``."""
        return np.minimum(np.asarray(t) // self.block_len, self.blocks)


def minimal_scale(kappa):
    """Smallest ``N`` with ``floor(N^{(1-kappa)/2}) >= 2``."""
    n = int(np.ceil(2.0 ** (2.0 / (1.0 - kappa))))
    while int(np.floor(n ** ((1.0 - kappa) / 2.0) + 1e-12)) < 2:
        n += 1
    while n > 1 and int(np.floor((n - 1) ** ((1.0 - kappa) / 2.0) + 1e-12)) >= 2:
        n -= 1
    return n


def build_scheme(N, kappa=0.55, T=1.0):
    if not 0.5 < kappa < 2.0 / 3.0:
        raise SpecError(f"kappa must lie in (1/2, 2/3), got {kappa}")
    if T <= 0:
        raise SpecError("T must be positive")
    # The small offset keeps exact powers such as 2^{16 * 0.225} from rounding down.
    m = int(np.floor(N ** ((1.0 - kappa) / 2.0) + 1e-12))
    if m < 2:
        raise SpecError(f"m_N = {m} < 2; use N >= {minimal_scale(kappa)} for kappa = {kappa}")
    gap = 3 * int(np.floor(m ** 0.25 + 1e-12))
    steps = steps_for(T, N)
    blocks = steps // (3 * m)
    if blocks < 1:
        raise SpecError("horizon shorter than one block")
    return BlockScheme(int(N), float(kappa), float(T), m, gap, steps, blocks)


@dataclass(frozen=True, eq=False)
class BlockData:
    alpha: np.ndarray
    Q: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    V: np.ndarray
    beta: np.ndarray = None


def _block_reduce(x, scheme, lo, hi):
    P, _, d = x.shape
    body = x[:, :scheme.blocks * scheme.block_len].reshape(P, scheme.blocks, scheme.block_len, d)
    return body[:, :, lo:hi].sum(axis=2)


def block_sums(xi_m, xi_m4, scheme, transform=None, model=None, frozen=None):
    """Block sums of the smoothed paths ``xi^{(m_N)}`` and ``xi^{(floor m_N^{1/4})}``.

    ``frozen[:, k] = Y_N^{(m_N)}(n_k / N)`` enables ``beta``, where block
    ``k`` is evaluated at the state frozen one block earlier (``Y(0)`` for
    the first block).
    """
    xi_m = np.asarray(xi_m, dtype=float)
    xi_m4 = np.asarray(xi_m4, dtype=float)
    need = scheme.blocks * scheme.block_len
    if xi_m.shape[1] < need or xi_m4.shape[1] < need:
        raise SpecError(f"paths need at least {need} values for {scheme.blocks} blocks")
    g, n = scheme.gap, scheme.block_len
    alpha = _block_reduce(xi_m, scheme, 0, n)
    R2 = _block_reduce(xi_m, scheme, 0, g)
    Q = _block_reduce(xi_m4, scheme, g, n)
    R1 = _block_reduce(xi_m, scheme, g, n) - Q
    V = Q / np.sqrt(scheme.core_len)
    beta = None
    if frozen is not None:
        if transform is None or model is None:
            raise SpecError("beta needs the transform and the model")
        beta = block_drift_sums(xi_m, scheme, transform, model, frozen)
    return BlockData(alpha, Q, R1, R2, V, beta)


def transformed_drift(transform, model, y, zeta):
    """``Sigma^{-1} b + q`` evaluated at ``r^{-1}(y)``."""
    x = transform.r_inv(y)
    out = transform.q(x, zeta)
    if model.has_drift:
        out = out + np.einsum("pij,pj->pi", model.Sigma_inv(x), model.b(x, zeta))
    return out


def block_drift_sums(xi_m, scheme, transform, model, frozen):
    P, _, d = xi_m.shape
    beta = np.zeros((P, scheme.blocks, d))
    if model.constant_sigma and not model.has_drift:
        return beta
    for k in range(scheme.blocks):
        y = frozen[:, max(k - 1, 0)]
        lo = k * scheme.block_len
        for l in range(lo, lo + scheme.block_len):
            beta[:, k] += transformed_drift(transform, model, y, xi_m[:, l])
    return beta


def check_process(data, y0, N):
    """``Y(0) + sum_{l<k} (N^{-1/2} alpha_l + N^{-1} beta_l)`` at every block boundary."""
    inc = data.alpha / np.sqrt(N)
    if data.beta is not None:
        inc = inc + data.beta / N
    P, K, d = inc.shape
    out = np.empty((P, K + 1, d))
    out[:, 0] = y0
    out[:, 1:] = y0 + np.cumsum(inc, axis=1)
    return out


def check_bound(L, L2, T, N, kappa):
    """``6 (L + 6 L2)(1 + T) N^{-(kappa - 1/2)}``."""
    return 6.0 * (L + 6.0 * L2) * (1.0 + T) * N ** (-(kappa - 0.5))


def residual_maxima(data, power=2):
    """Per-member ``max_k |sum_{j<=k} (R1_j + R2_j)|^power``."""
    run = np.cumsum(data.R1 + data.R2, axis=1)
    return np.max(np.linalg.norm(run, axis=2), axis=1) ** power


# ----------------------------------------------------------------------------
# Quantile coupling and Brownian assembly
# ----------------------------------------------------------------------------

def randomized_uniforms(values, tiebreak):
    """Uniforms with the law of a randomized probability transform of ``values``.

    ``values`` and ``tiebreak`` have shape ``(P, K)``; ranks are computed per
    column with ties ordered by ``tiebreak[..., 0]`` and the rank cell is filled by
    ``tiebreak[..., 1]``.
    """
    P, K = values.shape
    out = np.empty((P, K))
    for k in range(K):
        order = np.lexsort((tiebreak[:, k, 0], values[:, k]))
        rank = np.empty(P)
        rank[order] = np.arange(P)
        out[:, k] = (rank + tiebreak[:, k, 1]) / P
    return out


def quantile_couple(V, sigma, seed, first=0, threads=1):
    """Transport each block column of ``V`` (``(P, K, d)``) to ``N(0, sigma)``.

    ``d = 1`` is the monotone transport; ``d >= 2`` whitens by
    ``sigma^{-1/2}`` and transports each coordinate.
    """
    V = np.asarray(V, dtype=float)
    P, K, d = V.shape
    if P < 2:
        raise SpecError("quantile coupling needs an ensemble")
    spread = V.max(axis=0) - V.min(axis=0)
    if np.any(np.all(spread == 0, axis=-1)):
        raise SpecError("degenerate ensemble: some block takes a single value")
    root = psd_sqrt(sigma, tol=1e-8)
    inv_root = np.linalg.pinv(root)
    white = V @ inv_root.T
    ties = LaneStreams(seed, Purpose.TIEBREAK, first, P, threads).uniform(K, 2 * d).reshape(P, K, d, 2)
    z = np.empty_like(white)
    for i in range(d):
        z[..., i] = special.ndtri(randomized_uniforms(white[..., i], ties[:, :, i]))
    return z @ root.T


def assemble_brownian(W_blocks, scheme, sigma, seed, first=0, threads=1, members=None):
    """Standard Brownian increments on ``[0, steps)`` whose core increments carry ``W_blocks``.

    Over the core of block ``k`` the increments sum to
    ``(n - l)^{1/2} sigma^{-1/2} W_k``; inside the core they follow the
    Brownian bridge built from fresh normals, and gap/remainder steps are
    fresh normals.  Returns ``(P, steps, d)``.
    """
    W_blocks = np.asarray(W_blocks, dtype=float)
    P, K, d = W_blocks.shape
    if K != scheme.blocks:
        raise SpecError("one coupled increment per block is required")
    fresh = LaneStreams(seed, Purpose.BROWNIAN, first, P, threads).normal(scheme.steps, d)
    inv_root = np.linalg.pinv(psd_sqrt(sigma, tol=1e-8))
    core = scheme.core_len
    target = np.sqrt(core) * (W_blocks @ inv_root.T)
    body = fresh[:, :K * scheme.block_len].reshape(P, K, scheme.block_len, d)
    seg = body[:, :, scheme.gap:]
    seg -= seg.mean(axis=2, keepdims=True)
    seg += (target / core)[:, :, None, :]
    return fresh


def recover_blocks(increments, scheme, sigma):
    """Inverse of the block identity: ``(n - l)^{-1/2} sigma^{1/2} (W(n) - W(l))``."""
    P, _, d = increments.shape
    body = increments[:, :scheme.blocks * scheme.block_len].reshape(P, scheme.blocks, scheme.block_len, d)
    sums = body[:, :, scheme.gap:].sum(axis=2)
    return sums @ psd_sqrt(sigma, tol=1e-8).T / np.sqrt(scheme.core_len)


# ----------------------------------------------------------------------------
# Coupled pairs
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CoupledPair:
    """Small-ensemble view: paths on the grid ``j / N``."""

    x_path: np.ndarray
    xi_path: np.ndarray
    W_blocks: np.ndarray
    V_blocks: np.ndarray

    @property
    def diagnostics(self):
        return np.linalg.norm(self.V_blocks - self.W_blocks, axis=-1)


@dataclass
class CouplingReport:
    N: int
    kappa: float
    M: int
    blocks: int
    E_sup_2M: float
    CI: tuple
    prokhorov: dict
    rho_m_budget: dict
    per_block_stats: dict
    sup: np.ndarray = field(repr=False, default=None)
    pairs: CoupledPair = field(repr=False, default=None)

    def to_dict(self):
        return {
            "N": self.N, "kappa": self.kappa, "M": self.M, "blocks": self.blocks,
            "E_sup_2M": self.E_sup_2M, "CI": list(self.CI), "prokhorov": self.prokhorov,
            "rho_m_budget": self.rho_m_budget, "per_block_stats": self.per_block_stats,
        }


def bootstrap_mean_ci(values, seed, resamples=200, level=0.95):
    """Percentile bootstrap interval for the mean."""
    values = np.asarray(values, dtype=float)
    g = np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(Purpose.BOOTSTRAP), 0]))
    idx = g.integers(0, values.size, size=(resamples, values.size))
    means = values[idx].mean(axis=1)
    tail = 0.5 * (1.0 - level)
    return float(np.quantile(means, tail)), float(np.quantile(means, 1.0 - tail))


def strassen_prokhorov(distances, grid_points=1000):
    """Smallest ``eps`` on ``{1/G, ..., 1}`` with ``P(distance > eps) <= eps``."""
    distances = np.sort(np.asarray(distances, dtype=float))
    grid = np.arange(1, grid_points + 1) / grid_points
    exceed = 1.0 - np.searchsorted(distances, grid, side="right") / distances.size
    ok = np.flatnonzero(exceed <= grid)
    return float(grid[ok[0]])


def markov_prokhorov(moment, M):
    """``E^{1/(2M+1)}``: the level where Markov's inequality meets the diagonal."""
    return float(min(1.0, moment ** (1.0 / (2 * M + 1))))


def cf_gap_samples(samples, sigma, radius, points=33):
    """``sup_{|w| <= radius} |f_hat(w) - exp(-<sigma w, w>/2)|`` on a coordinate grid."""
    samples = np.asarray(samples, dtype=float)
    d = samples.shape[1]
    axis = np.linspace(-radius, radius, points)
    grid = np.array(np.meshgrid(*([axis] * d), indexing="ij")).reshape(d, -1).T
    grid = grid[np.linalg.norm(grid, axis=1) <= radius + 1e-12]
    phase = samples @ grid.T
    f_hat = np.cos(phase).mean(axis=0) + 1j * np.sin(phase).mean(axis=0)
    target = np.exp(-0.5 * np.einsum("gi,ij,gj->g", grid, sigma, grid))
    return float(np.abs(f_hat - target).max())


def rho_budget(V, sigma, scheme, handle):
    """Coupling budget ``16 K^{-1} log K + 2 nu^{1/2} K^d + 2 delta^{1/2}``."""
    d = V.shape[-1]
    core = scheme.core_len
    K = core ** (CF_EXPONENT / (4 * d))
    nu = float(np.mean([cf_gap_samples(V[:, k], sigma, K) for k in range(V.shape[1])]))
    if d == 1:
        delta = float(2.0 * stats.norm.sf(0.5 * K / np.sqrt(sigma[0, 0])))
    else:
        delta = float(min(1.0, 4.0 * np.trace(sigma) / K ** 2))
    value = 16.0 / K * np.log(K) + 2.0 * np.sqrt(nu) * K ** d + 2.0 * np.sqrt(delta)
    return {"rho_m": float(value), "K_m": float(K), "nu_m": nu, "delta_m": delta,
            "gap_phi": float(mixing_coefficient(handle, scheme.gap))}


def _smoothed_blocks(handle, scheme, paths, first, threads):
    """``V`` (core sums of ``xi^{(floor m^{1/4})}``) for members ``[first, first + paths)``."""
    windows = (scheme.m, max(1, scheme.gap // 3))
    stream = handle.stream(paths, first, threads)
    need = scheme.blocks * scheme.block_len
    parts_m, parts_q = [], []
    done = 0
    while done < need:
        k = min(_CHUNK, need - done)
        a, b = stream.next(k, windows=windows)
        parts_m.append(a)
        parts_q.append(b)
        done += k
    xi_m = np.concatenate(parts_m, axis=1)
    xi_q = np.concatenate(parts_q, axis=1)
    return block_sums(xi_m, xi_q, scheme)


def coupled_pair(model, handle, N, kappa=0.55, M=1, seed=0, ensemble=1000, T=1.0, x0=0.0,
                 threads=1, summary=None, keep_paths=False, first=0):
    """Coupled ensemble of ``(X_N, Xi_N)`` and its strong-error report.

    ``Xi_N`` solves the limit SDE by Euler with ``dt = 1/N`` driven by
    ``W_N(t) = N^{-1/2} W(tN)``; for non-constant ``Sigma`` it is integrated
    as ``Psi = r(Xi)`` with additive noise and mapped back through ``r^{-1}``.
    """
    if M < 1:
        raise SpecError("M must be at least 1")
    if ensemble < 2:
        raise SpecError("ensemble needs at least two members")
    scheme = build_scheme(N, kappa, T)
    if abs(scheme.steps - T * N) > 1e-9:
        raise SpecError("T * N must be an integer")
    if summary is None:
        summary = covariance_summary(handle)
    sigma = summary.sigma
    marginal = handle.marginal() if model.has_drift else None
    coeffs = diffusion_fields(model, summary, "discrete", marginal=marginal)
    dt = 1.0 / N
    if model.constant_sigma:
        sde = sde_from_coefficients(coeffs, dt, T)
        transform = None
    else:
        transform = build_transform(model)
        sde = transformed_sde(coeffs, transform, dt, T)

    # Phase 1: core sums for the whole ensemble, then the ensemble-wide transport.
    V = np.concatenate([
        _smoothed_blocks(handle, scheme, min(_MEMBER_BATCH, ensemble - s), first + s, threads).V
        for s in range(0, ensemble, _MEMBER_BATCH)
    ], axis=0)
    W = quantile_couple(V, sigma, seed, first, threads)

    # Phase 2: replay the fast motion and drive the limit SDE with the assembled noise.
    sup = np.empty(ensemble)
    kept_x, kept_xi = [], []
    x0_vec = np.broadcast_to(np.asarray(x0, dtype=float), (model.d,))
    for s in range(0, ensemble, _MEMBER_BATCH):
        count = min(_MEMBER_BATCH, ensemble - s)
        X = iterate_discrete(model, handle, N, T, x0_vec, paths=count, first=first + s, threads=threads)
        dW = assemble_brownian(W[s:s + count], scheme, sigma, seed, first + s, threads)
        start = x0_vec if transform is None else transform.r(x0_vec[None])[0]
        Xi = euler_maruyama(sde, start, increments=dW * np.sqrt(dt)).values
        if transform is not None:
            Xi = transform.r_inv(Xi.reshape(-1, model.d)).reshape(Xi.shape)
        sup[s:s + count] = np.linalg.norm(X.values - Xi, axis=2).max(axis=1)
        if keep_paths:
            kept_x.append(X.values)
            kept_xi.append(Xi)

    moment = sup ** (2 * M)
    estimate = float(moment.mean())
    ci = bootstrap_mean_ci(moment, seed)
    diff = np.linalg.norm(V - W, axis=-1)
    per_block = {
        "mean_abs_diff": float(diff.mean()),
        "max_block_mean_abs_diff": float(diff.mean(axis=0).max()),
        "m_N": scheme.m, "gap": scheme.gap, "core": scheme.core_len,
        "excluded_tail_steps": int(scheme.steps - scheme.blocks * scheme.block_len),
        "conditional_law": "unconditional ensemble law",
    }
    pairs = None
    if keep_paths:
        pairs = CoupledPair(np.concatenate(kept_x), np.concatenate(kept_xi), W, V)
    return CouplingReport(
        N=int(N), kappa=float(kappa), M=int(M), blocks=scheme.blocks, E_sup_2M=estimate, CI=ci,
        prokhorov={"strassen": strassen_prokhorov(sup), "markov": markov_prokhorov(estimate, M)},
        rho_m_budget=rho_budget(V, sigma, scheme, handle), per_block_stats=per_block,
        sup=sup, pairs=pairs,
    )
