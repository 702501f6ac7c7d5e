"""Stationary mixing fast motions: finite Markov chains, iid laws, the doubling
and Gauss maps, and suspension flows built over any of them.

Paths are produced by ``FastStream`` objects, which generate an ensemble in
time chunks so that long runs never need the whole ``(paths, steps)`` array in
memory.  Interval maps are simulated through their symbolic coordinates
(binary digits for the doubling map, continued-fraction digits for the Gauss
map), which also gives exact access to the cylinders used for conditioning.
"""

from dataclasses import dataclass, field, replace
from math import log

import numba
import numpy as np
from scipy import integrate

from .errors import SpecError
from .rng import LaneStreams, Purpose

# Binary digits needed to pin a float64 in [0, 1).
_DOUBLING_DEPTH = 53
# Continued-fraction digits used to evaluate a Gauss-map point; the
# truncation error is below 1/F_41^2 ~ 4e-17.
_GAUSS_DEPTH = 40
_QUAD_NODES = 64
# Spectral gap of the Gauss transfer operator (Wirsing constant).
_WIRSING = 0.3036630029
_CHUNK = 1 << 14


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MarkovChainSpec:
    """Finite-state stationary chain with a validated transition matrix."""

    transition: np.ndarray
    stationary: np.ndarray = None
    states: tuple = ()

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
            raise SpecError("transition must be a square matrix")
        if np.any(P < 0):
            raise SpecError("transition has negative entries")
        row_err = np.abs(P.sum(axis=1) - 1.0)
        if np.any(row_err > 1e-12):
            bad = int(np.argmax(row_err))
            raise SpecError(f"row {bad} of the transition sums to {P[bad].sum()!r}, not 1")
        S = P.shape[0]
        if not _is_primitive(P):
            raise SpecError(f"chain is reducible or periodic: no power P^k with k <= {S * S} is positive")
        if self.stationary is None:
            pi = _stationary_vector(P)
        else:
            pi = np.asarray(self.stationary, dtype=float)
        if pi.shape != (S,) or np.any(pi < -1e-15) or abs(pi.sum() - 1.0) > 1e-12:
            raise SpecError("stationary vector must be a probability vector of length S")
        if np.max(np.abs(pi @ P - pi)) > 1e-10:
            raise SpecError("stationary vector is not invariant: |pi P - pi| > 1e-10")
        states = tuple(self.states) if self.states else tuple(range(S))
        if len(states) != S:
            raise SpecError("states must have one label per row")
        object.__setattr__(self, "transition", _frozen(P))
        object.__setattr__(self, "stationary", _frozen(pi))
        object.__setattr__(self, "states", states)

    @property
    def size(self):
        return self.transition.shape[0]


def _is_primitive(P):
    S = P.shape[0]
    support = (P > 0).astype(np.int64)
    power = support.copy()
    for _ in range(S * S):
        if np.all(power > 0):
            return True
        power = np.minimum(power @ support, 1)
    return bool(np.all(power > 0))


def _stationary_vector(P):
    S = P.shape[0]
    A = np.vstack([P.T - np.eye(S), np.ones((1, S))])
    rhs = np.zeros(S + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


@dataclass(frozen=True, eq=False)
class ObservableSpec:
    """Observable ``g`` as a table over chain states or a function on [0, 1).

    A function must accept an array of points and return shape ``x.shape + (d,)``.
    """

    values: np.ndarray = None
    function: object = None
    d: int = None
    bound: float = None
    centered: bool = True

    def __post_init__(self):
        if (self.values is None) == (self.function is None):
            raise SpecError("observable needs exactly one of a value table or a function")
        if self.values is not None:
            v = np.asarray(self.values, dtype=float)
            if v.ndim == 1:
                v = v[:, None]
            object.__setattr__(self, "values", _frozen(v))
            object.__setattr__(self, "d", v.shape[1])
        elif self.d is None:
            object.__setattr__(self, "d", 1)
        if self.d < 1:
            raise SpecError("observable dimension must be at least 1")


@dataclass(frozen=True)
class IntervalMapSpec:
    """Doubling map (Lebesgue measure) or Gauss map (Gauss measure)."""

    map_kind: str
    holder_exponent: float = 1.0
    holder_constant: float = 1.0

    def __post_init__(self):
        if self.map_kind not in ("doubling", "gauss"):
            raise SpecError(f"unknown map_kind {self.map_kind!r}")
        if not 0 < self.holder_exponent <= 1:
            raise SpecError("holder_exponent must lie in (0, 1]")
        if self.holder_constant <= 0:
            raise SpecError("holder_constant must be positive")

    @property
    def invariant_measure(self):
        return "lebesgue" if self.map_kind == "doubling" else "gauss_measure"

    def density(self, x):
        x = np.asarray(x, dtype=float)
        if self.map_kind == "doubling":
            return np.ones_like(x)
        return 1.0 / ((1.0 + x) * log(2.0))

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if self.map_kind == "doubling":
            return np.mod(2.0 * x, 1.0)
        return np.mod(1.0 / x, 1.0)


@dataclass(frozen=True)
class IidSpec:
    """Independent coordinates: ``rademacher`` (+-scale) or ``gaussian`` N(0, scale^2)."""

    distribution: str = "rademacher"
    d: int = 1
    scale: float = 1.0

    def __post_init__(self):
        if self.distribution not in ("rademacher", "gaussian"):
            raise SpecError(f"unknown iid distribution {self.distribution!r}")
        if self.d < 1 or self.scale <= 0:
            raise SpecError("iid spec needs d >= 1 and scale > 0")


@dataclass(frozen=True, eq=False)
class ProcessHandle:
    """Seeded, replayable description of a stationary fast motion."""

    kind: str
    seed: int
    d: int
    bound: float
    chain: MarkovChainSpec = None
    values: np.ndarray = None
    interval: IntervalMapSpec = None
    function: object = None
    iid: IidSpec = None
    window: int = None
    symbolic_access: bool = True

    @property
    def lookahead(self):
        if self.kind != "interval_map":
            return 0
        return _DOUBLING_DEPTH - 1 if self.interval.map_kind == "doubling" else _GAUSS_DEPTH

    def stream(self, paths=1, first=0, threads=1):
        return FastStream(self, paths, first, threads)

    def marginal(self):
        """Exact law of xi(0) as ``(values, weights)`` when it is finite, else None."""
        if self.kind == "markov":
            return np.array(self.values), np.array(self.chain.stationary)
        if self.kind == "iid" and self.iid.distribution == "rademacher":
            return _rademacher_support(self.iid.d, self.iid.scale)
        return None


def _rademacher_support(d, scale):
    grid = np.array(np.meshgrid(*([[1.0, -1.0]] * d), indexing="ij")).reshape(d, -1).T
    return scale * grid, np.full(grid.shape[0], 0.5 ** d)


def make_process(spec, obs=None, seed=0):
    """Build a ``ProcessHandle`` from a chain, interval-map or iid spec.

    Centering is enforced here: chain tables subtract the exact stationary
    mean, interval observables subtract their quadrature mean.
    """
    seed = int(seed)
    if isinstance(spec, MarkovChainSpec):
        if obs is None or obs.values is None:
            raise SpecError("a Markov chain needs an observable table")
        if obs.values.shape[0] != spec.size:
            raise SpecError("observable table must have one row per state")
        values = np.array(obs.values)
        if obs.centered:
            values = values - spec.stationary @ values
        bound = float(np.max(np.abs(values)))
        if obs.bound is not None and bound > obs.bound + 1e-12:
            raise SpecError(f"observable exceeds its declared bound {obs.bound}")
        return ProcessHandle("markov", seed, values.shape[1], bound, chain=spec, values=_frozen(values))
    if isinstance(spec, IntervalMapSpec):
        if obs is None or obs.function is None:
            raise SpecError("an interval map needs an observable function")
        fn = _vectorize_observable(obs.function, obs.d)
        check_holder(spec, fn)
        if obs.centered:
            mean = np.array([
                integrate.quad(lambda x, i=i: fn(np.array([x]))[0, i] * spec.density(x),
                               0.0, 1.0, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
                for i in range(obs.d)
            ])
            fn = _CenteredObservable(fn, mean)
        grid = (np.arange(1 << 16) + 0.5) / (1 << 16)
        slack = spec.holder_constant * (0.5 / (1 << 16)) ** spec.holder_exponent
        bound = float(np.max(np.abs(fn(grid)))) + slack
        if obs.bound is not None and bound > obs.bound + 1e-9:
            raise SpecError(f"observable exceeds its declared bound {obs.bound}")
        return ProcessHandle("interval_map", seed, obs.d, bound, interval=spec, function=fn)
    if isinstance(spec, IidSpec):
        bound = spec.scale if spec.distribution == "rademacher" else float("inf")
        return ProcessHandle("iid", seed, spec.d, bound, iid=spec)
    raise SpecError(f"unsupported process spec {type(spec).__name__}")


class _CenteredObservable:
    def __init__(self, fn, mean):
        self.fn = fn
        self.mean = mean

    def __call__(self, x):
        return self.fn(x) - self.mean


def _vectorize_observable(fn, d):
    def wrapped(x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(fn(x), dtype=float)
        if out.shape == x.shape and d == 1:
            out = out[..., None]
        if out.shape != x.shape + (d,):
            raise SpecError(f"observable returned shape {out.shape}, expected {x.shape + (d,)}")
        return out
    return wrapped


def check_holder(spec, fn, levels=12):
    """Reject observables whose Hölder seminorm on dyadic grids exceeds ``K_H``."""
    alpha, K = spec.holder_exponent, spec.holder_constant
    worst = 0.0
    for level in range(1, levels + 1):
        h = 2.0 ** -level
        x = np.arange(0.0, 1.0 - h, h)
        if x.size == 0:
            continue
        diff = np.abs(fn(x + h) - fn(x)).max(axis=-1)
        worst = max(worst, float(diff.max()) / h ** alpha)
    if worst > K * (1 + 1e-9):
        raise SpecError(f"observable Hölder seminorm {worst:.6g} exceeds holder_constant {K}")
    return worst


# ----------------------------------------------------------------------------
# Kernels
# ----------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _pick(row, v):
    k = 0
    last = row.shape[0] - 1
    while k < last and v >= row[k]:
        k += 1
    return k


@numba.njit(cache=True, nogil=True)
def _markov_states(u, cum, cum_pi, carry, fresh):
    P, n = u.shape
    out = np.empty((P, n), np.int64)
    for p in range(P):
        s = carry[p]
        for t in range(n):
            if fresh and t == 0:
                s = _pick(cum_pi, u[p, t])
            else:
                s = _pick(cum[s], u[p, t])
            out[p, t] = s
        carry[p] = s
    return out


@numba.njit(cache=True, nogil=True)
def _binary_points(bits, n):
    # x_t = sum_{j<53} bits[t + j] 2^{-(j+1)}, evaluated by the exact shift.
    P = bits.shape[0]
    out = np.empty((P, n))
    tail = 2.0 ** -53
    for p in range(P):
        x = 0.0
        w = 0.5
        for j in range(53):
            x += bits[p, j] * w
            w *= 0.5
        out[p, 0] = x
        for t in range(1, n):
            y = 2.0 * x
            if y >= 1.0:
                y -= 1.0
            x = y + bits[p, t + 52] * tail
            out[p, t] = x
    return out


@numba.njit(cache=True, nogil=True)
def _gauss_digits(u, y):
    # Natural extension: x | y has density (1 + y) / (1 + x y)^2 on (0, 1).
    P, n = u.shape
    out = np.empty((P, n))
    for p in range(P):
        yy = y[p]
        for t in range(n):
            v = 1.0 - u[p, t]
            x = v / (1.0 + yy - v * yy)
            a = np.floor(1.0 / x)
            if a < 1.0:
                a = 1.0
            out[p, t] = a
            yy = 1.0 / (a + yy)
        y[p] = yy
    return out


@numba.njit(cache=True, nogil=True)
def _continued_fraction(digits, n, depth, tail):
    P = digits.shape[0]
    out = np.empty((P, n))
    for p in range(P):
        for t in range(n):
            x = tail
            for j in range(depth - 1, -1, -1):
                x = 1.0 / (digits[p, t + j] + x)
            out[p, t] = x
    return out


# ----------------------------------------------------------------------------
# Streams
# ----------------------------------------------------------------------------

class FastStream:
    """Chunked generator for ensemble members ``[first, first + paths)``.

    ``next(steps)`` returns the following ``steps`` values as an array of
    shape ``(paths, steps, d)``; ``next(steps, windows=(None, m))`` returns a
    list with the raw path and its ``m``-window conditional smoothing, all
    computed from the same symbolic coordinates.
    """

    def __init__(self, handle, paths=1, first=0, threads=1):
        self.h = handle
        self.paths = int(paths)
        self.lanes = LaneStreams(handle.seed, Purpose.FAST, first, paths, threads)
        self.fresh = True
        self.carry = np.zeros(self.paths, dtype=np.int64)
        self.buffer = np.zeros((self.paths, 0))
        self.y = np.zeros(self.paths)

    def next(self, steps, windows=None):
        steps = int(steps)
        if steps < 1:
            raise SpecError("steps must be at least 1")
        single = windows is None
        if single:
            windows = (self.h.window,)
        h = self.h
        if h.kind == "markov":
            u = self.lanes.uniform(steps)[..., 0]
            cum = np.cumsum(h.chain.transition, axis=1)
            cum_pi = np.cumsum(h.chain.stationary)
            states = _markov_states(u, cum, cum_pi, self.carry, self.fresh)
            self.fresh = False
            out = [np.array(h.values)[states] for _ in windows]
        elif h.kind == "iid":
            if h.iid.distribution == "rademacher":
                raw = np.where(self.lanes.uniform(steps, h.d) < 0.5, h.iid.scale, -h.iid.scale)
            else:
                raw = h.iid.scale * self.lanes.normal(steps, h.d)
            out = [raw for _ in windows]
        else:
            out = self._interval_values(steps, windows)
        return out[0] if single else out

    def _extend_buffer(self, needed, draw):
        missing = needed - self.buffer.shape[1]
        if missing > 0:
            self.buffer = np.concatenate([self.buffer, draw(missing)], axis=1)

    def _interval_values(self, steps, windows):
        h = self.h
        depth = h.lookahead
        if h.interval.map_kind == "doubling":
            self._extend_buffer(steps + depth, lambda k: (self.lanes.uniform(k)[..., 0] >= 0.5).astype(float))
            points = _binary_points(self.buffer, steps)
            symbols = None
        else:
            if self.fresh:
                u0 = self.lanes.uniform(1)[:, 0, 0]
                self.y = 2.0 ** u0 - 1.0
            self._extend_buffer(steps + depth, lambda k: _gauss_digits(self.lanes.uniform(k)[..., 0], self.y))
            points = _continued_fraction(self.buffer, steps, depth, 0.0)
            symbols = self.buffer
        self.fresh = False
        out = []
        for m in windows:
            if m is None or m >= depth:
                out.append(h.function(points))
            else:
                lo, hi = _cylinder(h.interval.map_kind, points, symbols, steps, m)
                out.append(_cylinder_average(h, lo, hi))
        self.buffer = self.buffer[:, steps:]
        return out


def _cylinder(map_kind, points, digits, steps, m):
    if map_kind == "doubling":
        width = 2.0 ** -m
        lo = np.floor(points / width) * width
        return lo, lo + width
    a = _continued_fraction(digits, steps, m, 0.0)
    b = _continued_fraction(digits, steps, m, 1.0)
    return np.minimum(a, b), np.maximum(a, b)


def _cylinder_average(h, lo, hi):
    """Average of g over [lo, hi) w.r.t. the invariant density, 64-node midpoint rule."""
    acc = None
    total = None
    for q in range(_QUAD_NODES):
        x = lo + (q + 0.5) / _QUAD_NODES * (hi - lo)
        w = h.interval.density(x)[..., None]
        term = w * h.function(x)
        acc = term if acc is None else acc + term
        total = w if total is None else total + w
    return acc / total


def smoothed_value(h, x, m):
    """Conditional average of the observable over the m-digit cylinder containing ``x``."""
    if h.kind != "interval_map":
        raise SpecError("smoothed_value applies to interval maps only")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if h.interval.map_kind == "doubling":
        width = 2.0 ** -m
        lo = np.floor(x / width) * width
        return _cylinder_average(h, lo, lo + width)
    digits = np.empty((x.size, m))
    y = x.copy()
    for j in range(m):
        a = np.floor(1.0 / y)
        digits[:, j] = a
        y = 1.0 / y - a
    a = _continued_fraction(digits, 1, m, 0.0)[:, 0]
    b = _continued_fraction(digits, 1, m, 1.0)[:, 0]
    return _cylinder_average(h, np.minimum(a, b), np.maximum(a, b))


def sample_ensemble(h, n, paths=1, first=0, threads=1):
    """Values ``xi(0..n-1)`` for ensemble members, shape ``(paths, n, d)``."""
    if n < 1:
        raise SpecError("n must be at least 1")
    stream = h.stream(paths, first, threads)
    chunks = []
    done = 0
    while done < n:
        k = min(_CHUNK, n - done)
        chunks.append(stream.next(k))
        done += k
    return np.concatenate(chunks, axis=1)


def sample_path(h, n, index=0):
    """Single trajectory ``xi(0..n-1)`` of ensemble member ``index``, shape ``(n, d)``."""
    return sample_ensemble(h, n, 1, index)[0]


def partial_sums(h, n, paths, first=0, threads=1, batch=4096):
    """Terminal sums ``S_n = xi(0) + ... + xi(n-1)`` for many members, shape ``(paths, d)``."""
    out = np.empty((paths, h.d))
    for start in range(0, paths, batch):
        count = min(batch, paths - start)
        stream = h.stream(count, first + start, threads)
        acc = np.zeros((count, h.d))
        done = 0
        while done < n:
            k = min(_CHUNK, n - done)
            acc += stream.next(k).sum(axis=1)
            done += k
        out[start:start + count] = acc
    return out


# ----------------------------------------------------------------------------
# Dependence coefficients and exact moments
# ----------------------------------------------------------------------------

def as_chain(h):
    """Finite-state representation ``(chain, values)`` of a handle, or None."""
    if h.kind == "markov":
        return h.chain, np.array(h.values)
    if h.kind == "iid" and h.iid.distribution == "rademacher":
        values, weights = _rademacher_support(h.iid.d, h.iid.scale)
        rows = np.tile(weights, (weights.size, 1))
        return MarkovChainSpec(rows, weights), values
    return None


def exact_covariance(spec, obs, lag):
    """Lag covariance ``E xi(0) xi(lag)^T`` of a centered chain observable."""
    if lag < 0:
        raise SpecError("lag must be non-negative")
    G = obs.values if isinstance(obs, ObservableSpec) else np.asarray(obs, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if isinstance(obs, ObservableSpec) and not obs.centered:
        raise SpecError("exact_covariance needs a centered observable")
    pi = spec.stationary
    if np.max(np.abs(pi @ G)) > 1e-12:
        raise SpecError("observable is not centered under the stationary law")
    Pn = np.linalg.matrix_power(spec.transition, int(lag))
    return G.T @ (pi[:, None] * (Pn @ G))


def phi_coefficient(spec, n):
    """Uniform bound ``max_i sum_j |P^n_ij - pi_j|``, which dominates 2 phi(n)."""
    if n < 0:
        raise SpecError("gap must be non-negative")
    Pn = np.linalg.matrix_power(spec.transition, int(n))
    return float(np.max(np.abs(Pn - spec.stationary[None, :]).sum(axis=1)))


def _fibonacci(k):
    a, b = 0, 1
    for _ in range(k):
        a, b = b, a + b
    return a


def rho_coefficient(h, m):
    """Approximation coefficient rho(m) (exact 0 or a cylinder-diameter bound)."""
    if not h.symbolic_access:
        raise SpecError("process handle has no symbolic access for conditioning")
    if m < 0:
        raise SpecError("window must be non-negative")
    if h.kind in ("markov", "iid"):
        return 0.0
    spec = h.interval
    if m == 0:
        return spec.holder_constant
    if spec.map_kind == "doubling":
        diameter = 2.0 ** -m
    else:
        diameter = 1.0 / (_fibonacci(m + 1) * _fibonacci(m + 2))
    return spec.holder_constant * diameter ** spec.holder_exponent


def mixing_coefficient(h, n):
    """Upper bound for phi(n) for any handle kind (declared for the Gauss map)."""
    if n <= 0:
        return 1.0
    if h.kind == "markov":
        return phi_coefficient(h.chain, n)
    if h.kind == "iid":
        return 0.0
    if h.interval.map_kind == "doubling":
        return 0.0
    return min(1.0, 2.0 * _WIRSING ** n)


def conditional_smooth(h, m):
    """Handle emitting ``E(xi(n) | digits n-m .. n+m)``."""
    if not h.symbolic_access:
        raise SpecError("process handle has no symbolic access for conditioning")
    if m < 1:
        raise SpecError("smoothing window must be at least 1")
    return replace(h, window=int(m))


def check_invariance(spec, samples=100_000, bins=10, seed=0):
    """Histogram test that one application of the map preserves its measure.

    Returns the largest bin deviation in binomial standard errors.
    """
    g = np.random.default_rng(seed)
    u = g.random(samples)
    x = u if spec.map_kind == "doubling" else 2.0 ** u - 1.0
    fx = spec.apply(x)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(fx, edges)
    if spec.map_kind == "doubling":
        probs = np.diff(edges)
    else:
        probs = np.diff(np.log2(1.0 + edges))
    se = np.sqrt(samples * probs * (1 - probs))
    return float(np.max(np.abs(counts - samples * probs) / se))


# ----------------------------------------------------------------------------
# Suspension flows
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SuspensionSpec:
    """Flow under the roof ``tau(xi(k))`` over a base process.

    The flow value on ``[Theta_k, Theta_{k+1})`` is ``xi(k) - center``
    (``constant`` mode) or the linear interpolation from ``xi(k) - center``
    to ``xi(k+1) - center`` (``linear`` mode).  ``center`` makes the roof
    integral ``eta`` mean zero.
    """

    base: ProcessHandle
    roof: object
    mode: str
    roof_bound: float
    mean_roof: float
    center: np.ndarray = field(default=None)

    @property
    def d(self):
        return self.base.d


def _roof_values(roof, values):
    tau = np.asarray(roof(values), dtype=float)
    if tau.shape == values.shape and values.shape[-1] == 1:
        tau = tau[..., 0]
    return np.broadcast_to(tau, values.shape[:-1])


def build_suspension(base, roof, roof_bound, mode="constant", center=True, samples=200_000):
    """Suspension over ``base`` with roof bounds ``1/roof_bound <= tau <= roof_bound``."""
    if mode not in ("constant", "linear"):
        raise SpecError(f"unknown suspension mode {mode!r}")
    if roof_bound < 1:
        raise SpecError("roof bound must be at least 1")
    lo, hi = 1.0 / roof_bound, roof_bound
    chain = as_chain(base)
    if chain is not None:
        spec, values = chain
        tau = _roof_values(roof, values)
        if np.any(tau < lo - 1e-15) or np.any(tau > hi + 1e-15):
            raise SpecError(f"roof leaves [{lo}, {hi}]")
        pi = spec.stationary
        mean_roof = float(pi @ tau)
        if mode == "constant":
            shift = (pi * tau) @ values / mean_roof
        else:
            nxt = spec.transition @ values
            shift = (pi * tau) @ (values + nxt) / (2.0 * mean_roof)
    else:
        path = sample_path(base, samples + 1)
        tau = _roof_values(roof, path)
        if np.any(tau < lo - 1e-15) or np.any(tau > hi + 1e-15):
            raise SpecError(f"roof leaves [{lo}, {hi}]")
        half = samples // 2
        first, second = tau[:half].mean(), tau[half:samples].mean()
        se = np.sqrt(tau[:samples].var() * 2.0 / half)
        if abs(first - second) > 3.0 * se + 1e-15:
            raise SpecError("mean roof estimate has not converged (half-samples disagree)")
        mean_roof = float(tau[:samples].mean())
        if mode == "constant":
            weighted = tau[:samples, None] * path[:samples]
        else:
            weighted = tau[:samples, None] * 0.5 * (path[:samples] + path[1:])
        shift = weighted.mean(axis=0) / mean_roof
    if not center:
        shift = np.zeros(base.d)
    return SuspensionSpec(base, roof, mode, float(roof_bound), mean_roof, _frozen(shift))


@dataclass
class SuspensionChunk:
    tau: np.ndarray      # (paths, n) roof lengths
    start: np.ndarray    # (paths, n, d) flow value at the left end of each piece
    end: np.ndarray      # (paths, n, d) flow value at the right end (== start in constant mode)
    eta: np.ndarray      # (paths, n, d) integral of the flow over each piece


class SuspensionStream:
    """Chunked generation of roof pieces for ensemble members."""

    def __init__(self, susp, paths=1, first=0, threads=1):
        self.s = susp
        self.base = susp.base.stream(paths, first, threads)
        self.pending = None

    def next(self, n):
        s = self.s
        if s.mode == "constant":
            raw = self.base.next(n)
        else:
            if self.pending is None:
                self.pending = self.base.next(1)
            raw = np.concatenate([self.pending, self.base.next(n)], axis=1)
            self.pending = raw[:, -1:]
        head = raw[:, :n]
        tau = _roof_values(s.roof, head)
        lo, hi = 1.0 / s.roof_bound, s.roof_bound
        if np.any(tau < lo - 1e-15) or np.any(tau > hi + 1e-15):
            raise SpecError(f"roof leaves [{lo}, {hi}]")
        start = head - s.center
        end = start if s.mode == "constant" else raw[:, 1:n + 1] - s.center
        eta = tau[..., None] * 0.5 * (start + end)
        return SuspensionChunk(tau, start, end, eta)


def eta_path(susp, n, paths=1, first=0):
    """Roof integrals ``eta(k)`` for ``k < n``, shape ``(paths, n, d)``."""
    return SuspensionStream(susp, paths, first).next(n).eta


def theta(susp, n, paths=1, first=0):
    """Return times ``Theta_0 .. Theta_n``, shape ``(paths, n + 1)``."""
    tau = SuspensionStream(susp, paths, first).next(n).tau
    return np.concatenate([np.zeros((tau.shape[0], 1)), np.cumsum(tau, axis=1)], axis=1)


def eta_chain(susp):
    """Finite-state representation of ``eta`` for chain bases: ``(chain, values)``."""
    rep = as_chain(susp.base)
    if rep is None:
        return None
    spec, values = rep
    tau = _roof_values(susp.roof, values)
    start = values - susp.center
    if susp.mode == "constant":
        return spec, tau[:, None] * start
    S = spec.size
    P = spec.transition
    pair_P = np.zeros((S * S, S * S))
    pair_pi = np.zeros(S * S)
    pair_values = np.zeros((S * S, values.shape[1]))
    for a in range(S):
        for b in range(S):
            i = a * S + b
            pair_pi[i] = spec.stationary[a] * P[a, b]
            pair_values[i] = tau[a] * 0.5 * (start[a] + values[b] - susp.center)
            for c in range(S):
                pair_P[i, b * S + c] = P[b, c]
    keep = pair_pi > 0
    idx = np.flatnonzero(keep)
    sub = pair_P[np.ix_(idx, idx)]
    sub = sub / sub.sum(axis=1, keepdims=True)
    return MarkovChainSpec(sub, pair_pi[idx] / pair_pi[idx].sum()), pair_values[idx]


def roof_moments(susp):
    """Exact ``(mean_roof, E eta eta^T)`` for chain bases, else a Monte Carlo estimate."""
    rep = eta_chain(susp)
    if rep is not None:
        spec, values = rep
        return susp.mean_roof, values.T @ (spec.stationary[:, None] * values)
    eta = eta_path(susp, 200_000)[0]
    return susp.mean_roof, eta.T @ eta / eta.shape[0]
