"""Config-driven experiment runner.

Usage: ``fastslow {simulate,coefficients,converge,couple,diagnose} --config FILE``.
Exit codes: 0 ok, 2 configuration error, 3 numerical abort.
"""

import argparse
import os
import sys
import time

import numpy as np
import yaml

from . import __version__
from .analysis import cf_gaussian_gap, decay_fit, moment_growth, wasserstein_ci
from .coefficients import covariance_summary, diffusion_fields, identity_residual
from .coupling import coupled_pair
from .errors import ConfigError, NumericalAbort, SpecError
from .fast_process import (IidSpec, IntervalMapSpec, MarkovChainSpec, ObservableSpec,
                           build_suspension, eta_chain, make_process, roof_moments, sample_path)
from .io import git_blob_sha1, canonical_json, sha256_hex, tidy_rows, write_avlb, write_json, write_tidy_csv
from .limit_sde import sde_from_coefficients, time_changed_terminal
from .slow_motion import MODEL_REGISTRY, integrate_continuous, iterate_discrete, piece_gap_bound, model_from_registry

COMMANDS = ("simulate", "coefficients", "converge", "couple", "diagnose")
OUT_ENV = "FASTSLOW_OUT"

OBSERVABLES = {
    "cosine": (lambda x: np.cos(2 * np.pi * x), 1.0, 2 * np.pi),
    "identity": (lambda x: x, 1.0, 1.0),
    "tent": (lambda x: np.abs(x - 0.5), 1.0, 1.0),
    "sqrt": (lambda x: np.sqrt(x), 0.5, 1.0),
}


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------

class Config:
    """Parsed YAML with line lookup for diagnostics."""

    def __init__(self, data, node):
        self.data = data
        self.node = node

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                              line=None if mark is None else mark.line + 1) from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping at the top level", line=1)
        return cls(data, node)

    def line(self, dotted):
        node = self.node
        found = None
        for key in dotted.split("."):
            if node is None or not isinstance(node, yaml.MappingNode):
                break
            match = [(k, v) for k, v in node.value if k.value == key]
            if not match:
                break
            found = match[0][0].start_mark.line + 1
            node = match[0][1]
        return found

    def error(self, field, message):
        parent = field.rsplit(".", 1)[0] if "." in field else None
        line = self.line(field) or (self.line(parent) if parent else None)
        return ConfigError(message, field=field, line=line)

    def get(self, dotted, default=None, required=False):
        cur = self.data
        for key in dotted.split("."):
            if not isinstance(cur, dict) or key not in cur:
                if required:
                    raise self.error(dotted, "required field is missing")
                return default
            cur = cur[key]
        return cur

    def number(self, dotted, default=None, kind=float, required=False):
        value = self.get(dotted, default, required)
        if value is None:
            return None
        try:
            return kind(value)
        except (TypeError, ValueError):
            raise self.error(dotted, f"expected a number, got {value!r}") from None


def build_process(cfg, seed):
    kind = cfg.get("process.kind", required=True)
    try:
        if kind == "markov":
            chain = MarkovChainSpec(np.asarray(cfg.get("process.transition", required=True), dtype=float))
            values = np.asarray(cfg.get("process.values", required=True), dtype=float)
            if values.ndim == 1:
                values = values[:, None]
            return make_process(chain, ObservableSpec(values=values), seed)
        if kind == "iid":
            spec = IidSpec(cfg.get("process.distribution", "rademacher"),
                           cfg.number("process.d", 1, int), cfg.number("process.scale", 1.0))
            return make_process(spec, seed=seed)
        if kind == "interval_map":
            name = cfg.get("process.observable", "cosine")
            if name not in OBSERVABLES:
                raise cfg.error("process.observable", f"unknown observable {name!r}; known: {sorted(OBSERVABLES)}")
            fn, alpha, const = OBSERVABLES[name]
            spec = IntervalMapSpec(cfg.get("process.map", "doubling"), alpha, const)
            return make_process(spec, ObservableSpec(function=fn, d=1), seed)
    except ConfigError:
        raise
    except SpecError as exc:
        raise cfg.error("process", str(exc)) from exc
    raise cfg.error("process.kind", f"unknown process kind {kind!r}")


def build_model(cfg):
    name = cfg.get("model.name")
    if name is None:
        raise cfg.error("model.name", "required field is missing (model registry name)")
    if name not in MODEL_REGISTRY:
        raise cfg.error("model.name", f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}")
    params = cfg.get("model.params", {}) or {}
    if not isinstance(params, dict):
        raise cfg.error("model.params", "model parameters must be a mapping")
    try:
        return model_from_registry(name, **params)
    except (SpecError, TypeError) as exc:
        raise cfg.error("model.params", str(exc)) from exc


def build_suspension_from(cfg, handle):
    roof = cfg.get("suspension.roof", required=True)
    values = np.asarray(roof, dtype=float)
    try:
        if values.ndim == 1 and values.size == 2:
            # Affine roof tau = a + b * xi.
            fn = lambda v, a=values[0], b=values[1]: a + b * v[..., 0]
        else:
            raise cfg.error("suspension.roof", "roof must be [offset, slope] of an affine function of xi")
        return build_suspension(handle, fn, cfg.number("suspension.roof_bound", required=True),
                                cfg.get("suspension.mode", "constant"))
    except ConfigError:
        raise
    except SpecError as exc:
        raise cfg.error("suspension", str(exc)) from exc


def validate(cfg, command):
    mode = cfg.get("mode", "discrete")
    if mode not in ("discrete", "continuous"):
        raise cfg.error("mode", f"mode must be discrete or continuous, got {mode!r}")
    if command in ("simulate", "converge", "couple"):
        scales = cfg.get("scales", required=True)
        if not isinstance(scales, list) or not scales:
            raise cfg.error("scales", "scales must be a non-empty list")
        try:
            scales = [float(s) for s in scales]
        except (TypeError, ValueError):
            raise cfg.error("scales", "scales must be numbers") from None
        resolution = [1.0 / s for s in scales] if mode == "continuous" else scales
        if any(b <= a for a, b in zip(resolution, resolution[1:])):
            order = "decreasing eps" if mode == "continuous" else "increasing N"
            raise cfg.error("scales", f"scales must be strictly ordered ({order})")
        if command == "converge" and len(scales) < 4:
            raise cfg.error("scales", "converge needs at least 4 scales")
        ensemble = cfg.number("ensemble", 1000, int)
        if ensemble < 100:
            raise cfg.error("ensemble", "ensemble must be at least 100")
        if command in ("converge", "couple") and mode == "discrete":
            kappa = cfg.number("kappa", 0.55)
            if not 0.5 < kappa < 2.0 / 3.0:
                raise cfg.error("kappa", "kappa must lie in (1/2, 2/3)")
    return mode


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

class Context:
    def __init__(self, cfg, seed, threads, command):
        self.cfg = cfg
        self.seed = seed
        self.threads = threads
        self.command = command
        self.mode = validate(cfg, command)
        self.handle = build_process(cfg, seed)
        self.model = build_model(cfg) if command != "diagnose" else None
        entry = {"model": cfg.get("model", {}), "process": cfg.get("process", {})}
        self.registry_blob = git_blob_sha1(canonical_json(entry))
        hashed = {k: v for k, v in cfg.data.items() if k not in ("outputs", "threads")}
        hashed["seed"] = seed
        self.config_hash = sha256_hex(hashed)
        self.T = cfg.number("T", 1.0)
        self.ensemble = cfg.number("ensemble", 1000, int)
        self.x0 = cfg.get("x0", 0.0)
        self.name = cfg.get("experiment", command)

    @property
    def tags(self):
        return {"config_hash": self.config_hash, "registry_blob": self.registry_blob}

    def scales(self):
        raw = self.cfg.get("scales")
        return [float(s) for s in raw] if self.mode == "continuous" else [int(s) for s in raw]

    def summary(self):
        return covariance_summary(self.handle)


def _terminal_stats(values):
    mean = values.mean(axis=0)
    var = values.var(axis=0, ddof=1)
    centered = (values - mean) ** 2
    se_var = centered.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
    return {"mean_X_T": mean.tolist(), "var_X_T": var.tolist(), "se_var_X_T": se_var.tolist(),
            "se_mean_X_T": (np.sqrt(var / values.shape[0])).tolist()}


def cmd_simulate(ctx, out_dir):
    records = []
    write_paths = bool(ctx.cfg.get("write_paths", False))
    for scale in ctx.scales():
        if ctx.mode == "discrete":
            keep = "path" if write_paths else "terminal"
            path = iterate_discrete(ctx.model, ctx.handle, scale, ctx.T, ctx.x0, ctx.ensemble,
                                    threads=ctx.threads, keep=keep)
            stats = _terminal_stats(path.terminal)
            if write_paths:
                write_avlb(os.path.join(out_dir, f"path_N{scale}.avlb"), path.values[0])
        else:
            susp = build_suspension_from(ctx.cfg, ctx.handle)
            run = integrate_continuous(ctx.model, susp, scale, ctx.T, ctx.x0, ctx.ensemble, threads=ctx.threads)
            stats = _terminal_stats(run.terminal)
            stats["flow_gap_max"] = float(run.gap.max())
        records.append((scale, stats))
    if write_paths:
        write_avlb(os.path.join(out_dir, "fast_path.avlb"), sample_path(ctx.handle, 1024))
    return records, None


def _scalar(m):
    m = np.asarray(m)
    return float(m.ravel()[0]) if m.size == 1 else m.tolist()


def cmd_coefficients(ctx, out_dir):
    est = ctx.cfg.get("estimate")
    if est:
        length = ctx.cfg.number("estimate.length", 1_000_000, int)
        n_max = ctx.cfg.number("estimate.n_max", 50, int)
        summary = covariance_summary(sample_path(ctx.handle, length), n_max=n_max, handle=ctx.handle)
    else:
        summary = covariance_summary(ctx.handle, n_max=ctx.cfg.number("n_max", 50, int))
    x = np.atleast_1d(np.asarray(ctx.x0, dtype=float))
    x = np.broadcast_to(x, (ctx.model.d,)).copy()
    marginal = ctx.handle.marginal() if ctx.model.has_drift else None
    record = {
        "sigma": _scalar(summary.sigma),
        "sigma_hat": _scalar(summary.sigma_hat),
        "zero_lag": _scalar(summary.zero_lag),
        "identity_residual": identity_residual(summary),
        "provenance": summary.provenance,
        "flags": list(summary.flags),
    }
    if summary.se:
        record["se"] = {k: _scalar(v) for k, v in summary.se.items()}
    try:
        fields = diffusion_fields(ctx.model, summary, marginal=marginal)
        record.update({"x": x.tolist(), "a": _scalar(fields.a(x)), "c": _scalar(fields.c(x)),
                       "b_bar": _scalar(fields.b_bar(x)), "sigma_field": _scalar(fields.sigma_field(x))})
    except SpecError as exc:
        record["fields_error"] = str(exc)
    return [(None, record)], None


def _continuous_setup(ctx):
    susp = build_suspension_from(ctx.cfg, ctx.handle)
    rep = eta_chain(susp)
    if rep is None:
        raise ctx.cfg.error("process", "continuous mode needs a finite-state base process")
    summary = covariance_summary(rep)
    mean_roof, eta_second = roof_moments(susp)
    coeffs = diffusion_fields(ctx.model, summary, "continuous", eta_zero_lag=eta_second,
                              marginal=ctx.handle.marginal() if ctx.model.has_drift else None)
    return susp, coeffs, mean_roof


def cmd_converge(ctx, out_dir):
    M = ctx.cfg.number("M", 1, int)
    records, samples, errors = [], {}, {}
    if ctx.mode == "discrete":
        kappa = ctx.cfg.number("kappa", 0.55)
        summary = ctx.summary()
        for N in ctx.scales():
            rep = coupled_pair(ctx.model, ctx.handle, N, kappa, M, ctx.seed, ctx.ensemble, ctx.T,
                               ctx.x0, ctx.threads, summary)
            samples[N] = rep.sup ** (2 * M)
            errors[N] = rep.E_sup_2M
            records.append((N, {"E_sup_2M": rep.E_sup_2M, "CI": list(rep.CI), "prokhorov": rep.prokhorov}))
    else:
        susp, coeffs, mean_roof = _continuous_setup(ctx)
        dt = ctx.cfg.number("dt", 1e-3) * ctx.T
        sde = sde_from_coefficients(coeffs, dt, ctx.T)
        target = time_changed_terminal(sde, ctx.x0, mean_roof, ctx.seed, ctx.ensemble, threads=ctx.threads)
        for eps in ctx.scales():
            run = integrate_continuous(ctx.model, susp, eps, ctx.T, ctx.x0, ctx.ensemble, threads=ctx.threads)
            w, ci = wasserstein_ci(run.terminal, target, seed=ctx.seed)
            n = np.arange(1, run.piece_gap.size + 1)
            ratio = run.piece_gap / piece_gap_bound(eps, ctx.model.L, susp.roof_bound, n)
            key = 1.0 / eps ** 2
            errors[key] = w
            records.append((eps, {"W1": w, "CI": list(ci), "flow_gap_max": float(run.gap.max()),
                                  "gap_bound_ratio_max": float(ratio.max()), "mean_roof": mean_roof}))
    fit = decay_fit(errors, samples=samples or None, seed=ctx.seed)
    return records, fit.to_dict()


def cmd_couple(ctx, out_dir):
    if ctx.mode != "discrete":
        raise ctx.cfg.error("mode", "couple runs in discrete mode")
    M = ctx.cfg.number("M", 1, int)
    kappa = ctx.cfg.number("kappa", 0.55)
    summary = ctx.summary()
    records = []
    for N in ctx.scales():
        rep = coupled_pair(ctx.model, ctx.handle, N, kappa, M, ctx.seed, ctx.ensemble, ctx.T,
                           ctx.x0, ctx.threads, summary)
        records.append((N, rep.to_dict()))
    return records, None


def cmd_diagnose(ctx, out_dir):
    cfg = ctx.cfg
    summary = ctx.summary()
    n_grid = cfg.get("diagnose.n_grid", [2 ** k for k in range(9, 15)])
    paths = cfg.number("diagnose.paths", 20_000, int)
    records = []
    for M in cfg.get("diagnose.M", [1, 2]):
        mg = moment_growth(ctx.handle, int(M), n_grid, paths, threads=ctx.threads)
        records.append((f"moments_M{M}", mg.to_dict()))
    samples = cfg.number("diagnose.cf_samples", 1 << 20, int)
    offset = len(n_grid) * paths
    for i, n in enumerate(cfg.get("diagnose.cf_n", [64, 1024])):
        gap = cf_gaussian_gap(ctx.handle, int(n), summary.sigma, samples,
                              first=offset + i * samples, threads=ctx.threads)
        records.append((f"cf_n{n}", gap.to_dict()))
    return records, None


HANDLERS = {"simulate": cmd_simulate, "coefficients": cmd_coefficients, "converge": cmd_converge,
            "couple": cmd_couple, "diagnose": cmd_diagnose}


# ----------------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------------

def output_dir(args, cfg):
    if args.out:
        return args.out
    env = os.environ.get(OUT_ENV)
    if env:
        return env
    return cfg.get("outputs", ".")


def parse_args(argv):
    p = argparse.ArgumentParser(prog="fastslow", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.add_argument("--deterministic", action="store_true",
                   help="omit the timestamp so reruns are byte-identical")
    p.add_argument("--version", action="version", version=__version__)
    return p.parse_args(argv)


def run(argv=None):
    args = parse_args(argv)
    cfg = Config.load(args.config)
    seed = args.seed if args.seed is not None else cfg.number("seed", 0, int)
    if seed < 0 or seed >= 1 << 64:
        raise cfg.error("seed", "seed must be an unsigned 64-bit integer")
    out_dir = output_dir(args, cfg)
    os.makedirs(out_dir, exist_ok=True)
    try:
        ctx = Context(cfg, seed, max(1, args.threads), args.command)
        records, fit = HANDLERS[args.command](ctx, out_dir)
    except (ConfigError, NumericalAbort):
        raise
    except SpecError as exc:
        raise ConfigError(str(exc)) from exc
    rows = [dict(scale=scale, **ctx.tags, **record) for scale, record in records]
    target = os.path.join(out_dir, f"{args.command}.{args.format}")
    if args.format == "json":
        document = {"command": args.command, "experiment": ctx.name, **ctx.tags, "rows": rows}
        if fit is not None:
            document["fit"] = dict(fit, **ctx.tags)
        if not (args.deterministic or cfg.get("deterministic", False)):
            document["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        write_json(target, document)
    else:
        tidy = []
        for scale, record in records:
            tidy.extend(tidy_rows(ctx.name, scale, record, ctx.tags))
        if fit is not None:
            tidy.extend(tidy_rows(ctx.name, "fit", fit, ctx.tags))
        write_tidy_csv(target, tidy)
    return target


def main(argv=None):
    try:
        target = run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    print(target)
    return 0


if __name__ == "__main__":
    sys.exit(main())
