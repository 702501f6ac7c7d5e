"""Decay-rate fits, partial-sum diagnostics and distributional distances."""

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .coupling import CF_EXPONENT, bootstrap_mean_ci, markov_prokhorov, strassen_prokhorov
from .errors import SpecError
from .fast_process import partial_sums
from .rng import Purpose, generator

__all__ = [
    "DecayFit", "decay_fit", "MomentGrowth", "moment_growth", "CfGap", "cf_gaussian_gap",
    "cf_gap_from_sums", "wasserstein1", "wasserstein_ci", "bootstrap_ci", "bootstrap_mean_ci",
    "strassen_prokhorov", "markov_prokhorov",
]

BOOTSTRAP_RESAMPLES = 200


@dataclass(frozen=True)
class DecayFit:
    points: tuple
    slope: float
    intercept: float
    CI: tuple
    residual: float

    @property
    def delta(self):
        return -self.slope

    @property
    def delta_CI(self):
        return (-self.CI[1], -self.CI[0])

    def to_dict(self):
        return {"points": [list(p) for p in self.points], "slope": self.slope,
                "intercept": self.intercept, "delta": self.delta, "CI": list(self.CI),
                "delta_CI": list(self.delta_CI), "residual": self.residual}


def _line(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def decay_fit(errors, samples=None, statistic=np.mean, resamples=BOOTSTRAP_RESAMPLES, seed=0):
    """Least-squares line through ``(log N, log error)``.

    With ``samples`` (a map ``N -> per-member values`` whose ``statistic``
    gives the error) the CI resamples members within each scale; otherwise
    it resamples fit residuals.
    """
    if len(errors) < 4:
        raise SpecError("decay_fit needs at least 4 scales")
    if resamples < 200:
        raise SpecError("decay_fit needs at least 200 bootstrap resamples")
    scales = sorted(errors)
    values = np.array([errors[n] for n in scales], dtype=float)
    if np.any(values <= 0):
        raise SpecError("errors must be positive for a log-log fit")
    x = np.log(np.array(scales, dtype=float))
    y = np.log(values)
    slope, intercept = _line(x, y)
    resid = y - (slope * x + intercept)
    g = generator(seed, Purpose.BOOTSTRAP, 1)
    boot = np.empty(resamples)
    for b in range(resamples):
        if samples is not None:
            yb = np.array([
                np.log(statistic(np.asarray(samples[n])[g.integers(0, len(samples[n]), len(samples[n]))]))
                for n in scales
            ])
        else:
            yb = slope * x + intercept + resid[g.integers(0, resid.size, resid.size)]
        boot[b] = _line(x, yb)[0]
    ci = (float(np.quantile(boot, 0.025)), float(np.quantile(boot, 0.975)))
    points = tuple((float(a), float(b)) for a, b in zip(x, y))
    return DecayFit(points, slope, intercept, ci, float(np.abs(resid).max()))


@dataclass(frozen=True)
class MomentGrowth:
    n: tuple
    ratios: tuple
    se: tuple
    spearman: float
    p_value: float

    @property
    def positive_trend(self):
        return self.p_value < 0.01

    def to_dict(self):
        return {"n": list(self.n), "ratios": list(self.ratios), "se": list(self.se),
                "spearman": self.spearman, "p_value": self.p_value,
                "positive_trend": self.positive_trend}


def moment_growth(h, M, n_grid, paths=20_000, first=0, threads=1):
    """Ratios ``E|S_n|^{2M} / n^M`` on ``n_grid`` with a one-sided Spearman trend test.

    Each ``n`` uses its own block of ensemble members, so the ratios are
    independent across the grid.
    """
    if M < 1:
        raise SpecError("M must be at least 1")
    grid = sorted(int(n) for n in n_grid)
    if len(grid) < 3:
        raise SpecError("moment_growth needs at least 3 grid points")
    ratios, ses = [], []
    for i, n in enumerate(grid):
        s = partial_sums(h, n, paths, first + i * paths, threads)
        vals = np.linalg.norm(s, axis=1) ** (2 * M) / n ** M
        ratios.append(float(vals.mean()))
        ses.append(float(vals.std(ddof=1) / np.sqrt(paths)))
    rho, p = stats.spearmanr(grid, ratios, alternative="greater")
    return MomentGrowth(tuple(grid), tuple(ratios), tuple(ses), float(rho), float(p))


@dataclass(frozen=True)
class CfGap:
    n: int
    gap: float
    se: float
    w: tuple
    radius: float
    samples: int

    @property
    def inconclusive(self):
        return self.gap < 3.0 * self.se

    def to_dict(self):
        return {"n": self.n, "gap": self.gap, "se": self.se, "w": list(self.w),
                "radius": self.radius, "samples": self.samples, "inconclusive": self.inconclusive}


def cf_gap_from_sums(sums, n, sigma, points=33, exponent=CF_EXPONENT, chunk=1 << 18):
    """CF gap of ``n^{-1/2} S_n`` against ``N(0, sigma)`` over ``|w| <= n^{exponent/2}``.

    The error bar is the delta-method s.e. of the projection of
    ``f_hat - g`` on its own direction at the maximizing ``w``.
    """
    sums = np.atleast_2d(np.asarray(sums, dtype=float))
    if sums.shape[0] < 2:
        raise SpecError("need at least two samples")
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = sums.shape[1]
    radius = n ** (exponent / 2.0)
    axis = np.linspace(-radius, radius, points)
    grid = np.array(np.meshgrid(*([axis] * d), indexing="ij")).reshape(d, -1).T
    grid = grid[np.linalg.norm(grid, axis=1) <= radius * (1 + 1e-12)]
    scaled = sums / np.sqrt(n)
    re = np.zeros(grid.shape[0])
    im = np.zeros(grid.shape[0])
    for s in range(0, scaled.shape[0], chunk):
        phase = scaled[s:s + chunk] @ grid.T
        re += np.cos(phase).sum(axis=0)
        im += np.sin(phase).sum(axis=0)
    P = scaled.shape[0]
    f_hat = (re + 1j * im) / P
    target = np.exp(-0.5 * np.einsum("gi,ij,gj->g", grid, sigma, grid))
    diff = f_hat - target
    best = int(np.argmax(np.abs(diff)))
    gap = float(np.abs(diff[best]))
    u = diff[best] / gap if gap > 0 else 1.0
    phase = scaled @ grid[best]
    proj = np.real(np.conj(u) * np.exp(1j * phase))
    se = float(proj.std(ddof=1) / np.sqrt(P))
    return CfGap(int(n), gap, se, tuple(grid[best].tolist()), float(radius), int(P))


def cf_gaussian_gap(h, n, sigma, samples=1 << 20, first=0, threads=1, points=33):
    """Empirical CF gap of normalized partial sums of ``h`` at length ``n``."""
    if samples < 100_000:
        raise SpecError("the CF gap needs at least 1e5 partial-sum samples")
    sums = partial_sums(h, n, samples, first, threads)
    return cf_gap_from_sums(sums, n, sigma, points)


def wasserstein1(a, b, directions=64, seed=0):
    """W1 between empirical laws; sliced over random directions when ``d >= 2``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise SpecError("wasserstein1 needs non-empty samples")
    if a.ndim == 1 or a.shape[1] == 1:
        a = a.reshape(-1)
        b = b.reshape(-1)
        if a.size == b.size:
            return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
        return float(stats.wasserstein_distance(a, b))
    g = generator(seed, Purpose.AUXILIARY, 0)
    dirs = g.standard_normal((directions, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([wasserstein1(a @ u, b @ u) for u in dirs]))


def bootstrap_ci(values, statistic=np.mean, resamples=BOOTSTRAP_RESAMPLES, seed=0, level=0.95):
    """Percentile bootstrap interval of ``statistic`` over the first axis."""
    values = np.asarray(values)
    g = generator(seed, Purpose.BOOTSTRAP, 2)
    boot = np.array([statistic(values[g.integers(0, len(values), len(values))]) for _ in range(resamples)])
    tail = 0.5 * (1.0 - level)
    return float(np.quantile(boot, tail)), float(np.quantile(boot, 1.0 - tail))


def wasserstein_ci(a, b, resamples=BOOTSTRAP_RESAMPLES, seed=0, level=0.95):
    """Point estimate and percentile bootstrap interval for ``wasserstein1(a, b)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    g = generator(seed, Purpose.BOOTSTRAP, 3)
    boot = np.empty(resamples)
    for r in range(resamples):
        boot[r] = wasserstein1(a[g.integers(0, len(a), len(a))], b[g.integers(0, len(b), len(b))])
    tail = 0.5 * (1.0 - level)
    return wasserstein1(a, b), (float(np.quantile(boot, tail)), float(np.quantile(boot, 1.0 - tail)))
