"""Command-line interface: validate, run, summarize, and benchmark.

The run configuration is an INI file with typed sections; unknown sections or
keys are hard errors so a typo cannot silently change a run. Paths inside the
config resolve relative to the config file. Exit codes are stable: 0 success,
2 configuration error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .covariance import CovarianceDecomposition
from .diagnostics import RHAT_THRESHOLD, ess, hpd_interval, rhat
from .engine import (GibbsModel, GibbsSchedule, benchmark_latent_sampler,
                     correlation_names, run_chains)
from .model import ColumnSpec, DataError, initial_latent, load_traits
from .tree import CovarianceMode, NewickError, RootPrior, TreeError, read_trees
from .treegauss import build_gaussian

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text: str):
    return [float(p) for p in text.split(",") if p.strip()]


def _parse_str_list(text: str):
    return [p.strip() for p in text.split(",") if p.strip()]


_REQUIRED = object()

# section -> key -> (converter, default); _REQUIRED means the key must appear
_SCHEMA = {
    "paths": {
        "tree": (str, _REQUIRED),
        "traits": (str, _REQUIRED),
        "output": (str, _REQUIRED),
    },
    "priors": {
        "eta": (float, 1.0),
        "root_mean": (_parse_float_list, [0.0]),
        "root_sample_size": (float, 10.0),
    },
    "schedule": {
        "iterations": (int, _REQUIRED),
        "warmup": (int, 1000),
        "thin": (int, 1),
        "chains": (int, 1),
        "seed": (int, 0),
        "latent_weight": (float, 0.8),
        "covariance_weight": (float, 0.2),
        "save_latent": (_parse_bool, False),
        "workers": (int, 1),
    },
    "bps": {
        "travel_multiplier": (float, 0.01),
    },
    "hmc": {
        "target_accept": (float, 0.8),
        "path_length": (float, 1.0),
        "init_step": (float, 0.1),
    },
    "model": {
        "covariance_mode": (str, "full_tree"),
    },
    "benchmark": {
        "budget_seconds": (float, 60.0),
        "samplers": (_parse_str_list, ["bps", "baseline"]),
        "travel_multipliers": (_parse_float_list, []),
        "seed": (int, 0),
    },
}


@dataclass
class RunConfig:
    tree_path: Path
    traits_path: Path
    output_dir: Path
    columns: dict
    settings: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.settings[key]


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # trait names are case-sensitive
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}")

    known = set(_SCHEMA) | {"columns"}
    unknown_sections = [s for s in parser.sections() if s not in known]
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {', '.join(unknown_sections)}")
    if "columns" not in parser or not parser["columns"]:
        raise ConfigError("config must declare a [columns] section")
    try:
        columns = {name: ColumnSpec.parse(text) for name, text in parser["columns"].items()}
    except DataError as exc:
        raise ConfigError(str(exc))

    settings = {}
    for section, keys in _SCHEMA.items():
        present = parser[section] if section in parser else {}
        unknown = [k for k in present if k not in keys]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
        for key, (convert, default) in keys.items():
            if key in present:
                try:
                    settings[f"{section}.{key}"] = convert(present[key])
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}")
            elif default is _REQUIRED:
                raise ConfigError(f"missing required config key [{section}] {key}")
            else:
                settings[f"{section}.{key}"] = default

    try:
        CovarianceMode.from_string(settings["model.covariance_mode"])
    except ValueError as exc:
        raise ConfigError(str(exc))

    base = path.parent
    return RunConfig(
        tree_path=(base / settings["paths.tree"]).resolve(),
        traits_path=(base / settings["paths.traits"]).resolve(),
        output_dir=(base / settings["paths.output"]).resolve(),
        columns=columns,
        settings=settings,
    )


def _build_model(config: RunConfig):
    """Load inputs and assemble the Gibbs model; raises DataError family."""
    if not config.tree_path.exists():
        raise DataError(f"tree file not found: {config.tree_path}")
    if not config.traits_path.exists():
        raise DataError(f"trait file not found: {config.traits_path}")
    trees = read_trees(config.tree_path)
    traits = load_traits(config.traits_path, config.columns, trees[0].labels)
    mode = CovarianceMode.from_string(config["model.covariance_mode"])
    kappa = config["priors.root_sample_size"]
    gaussians = [build_gaussian(tree, mode, kappa) for tree in trees]
    root_mean = np.asarray(config["priors.root_mean"], dtype=float)
    if root_mean.shape == (1,):
        root_mean = np.full(traits.n_traits, root_mean[0])
    root_prior = RootPrior(mean=root_mean, sample_size=kappa)
    model = GibbsModel(
        traits=traits,
        gaussians=gaussians,
        root_prior=root_prior,
        eta=config["priors.eta"],
        travel_multiplier=config["bps.travel_multiplier"],
        target_accept=config["hmc.target_accept"],
        path_length=config["hmc.path_length"],
        initial_step=config["hmc.init_step"],
    )
    return model, trees


def _schedule(config: RunConfig) -> GibbsSchedule:
    try:
        return GibbsSchedule(
            iterations=config["schedule.iterations"],
            warmup=config["schedule.warmup"],
            thin=config["schedule.thin"],
            latent_weight=config["schedule.latent_weight"],
            covariance_weight=config["schedule.covariance_weight"],
            seed=config["schedule.seed"],
            save_latent=config["schedule.save_latent"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def _write_samples_csv(path: Path, result):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration"] + result.column_names)
        matrix = result.samples_matrix()
        for row_idx in range(matrix.shape[0]):
            row = [str(int(result.iterations[row_idx]))]
            row += [repr(float(v)) for v in matrix[row_idx]]
            writer.writerow(row)


def _write_latent_csv(path: Path, result, traits):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["iteration"] + [
            f"X[{i + 1},{j + 1}]" for i in range(traits.n_taxa) for j in range(traits.n_traits)
        ]
        writer.writerow(header)
        for row_idx in range(result.latent.shape[0]):
            row = [str(int(result.iterations[row_idx]))]
            row += [repr(float(v)) for v in result.latent[row_idx].ravel()]
            writer.writerow(row)


def _manifest(config: RunConfig, config_path, model, trees) -> dict:
    digest = hashlib.sha256(Path(config_path).read_bytes()).hexdigest()
    return {
        "phyloprobit_version": __version__,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
        "config_path": str(config_path),
        "config_sha256": digest,
        "seed": config["schedule.seed"],
        "chains": config["schedule.chains"],
        "iterations": config["schedule.iterations"],
        "warmup": config["schedule.warmup"],
        "thin": config["schedule.thin"],
        "covariance_mode": config["model.covariance_mode"],
        "n_taxa": model.traits.n_taxa,
        "n_traits": model.traits.n_traits,
        "n_binary": model.traits.n_binary,
        "trait_names": list(model.traits.names),
        "n_trees": len(trees),
        "tip_order": trees[0].tip_order,
    }


def _diagnostics(results) -> dict:
    names = results[0].column_names
    pooled_ess = {}
    for j, name in enumerate(names):
        try:
            pooled_ess[name] = float(
                sum(ess(r.samples_matrix()[:, j]) for r in results)
            )
        except ValueError:  # fewer retained samples than the estimator needs
            pooled_ess[name] = None
    ess_values = np.array([v for v in pooled_ess.values() if v is not None])
    diag = {
        "ess": pooled_ess,
        "min_ess": float(ess_values.min()) if ess_values.size else None,
        "median_ess": float(np.median(ess_values)) if ess_values.size else None,
        "counters": [r.counters for r in results],
    }
    if len(results) >= 2:
        rhats = {}
        for j, name in enumerate(names):
            stacked = np.stack([r.samples_matrix()[:, j] for r in results])
            try:
                rhats[name] = float(rhat(stacked))
            except ValueError:
                rhats[name] = None
        diag["rhat"] = rhats
        diag["rhat_threshold"] = RHAT_THRESHOLD
        diag["rhat_flags"] = [
            name for name, value in rhats.items()
            if value is not None and value > RHAT_THRESHOLD
        ]
    return diag


def cmd_validate(args) -> int:
    config = load_config(args.config)
    model, trees = _build_model(config)
    _schedule(config)
    rng = np.random.default_rng(0)
    latent = initial_latent(model.traits, rng)
    decomp = CovarianceDecomposition.identity(model.traits.n_binary,
                                              model.traits.n_continuous)
    from .model import build_target

    build_target(model.traits, model.gaussians[0], decomp.sigma_inv, model.root_prior.mean)
    observed = int(model.traits.observed.sum())
    total = model.traits.values.size
    print(f"config OK: {args.config}")
    print(f"trees: {len(trees)}  taxa: {model.traits.n_taxa}  "
          f"traits: {model.traits.n_traits} ({model.traits.n_binary} binary, "
          f"{model.traits.n_continuous} continuous)")
    print(f"observed cells: {observed}/{total} "
          f"({100.0 * observed / total:.1f}%)  latent start shape: {latent.shape}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args.config)
    model, trees = _build_model(config)
    schedule = _schedule(config)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    n_chains = config["schedule.chains"]
    results = run_chains(model, schedule, n_chains, workers=config["schedule.workers"])
    for k, result in enumerate(results):
        _write_samples_csv(out / f"samples_chain{k}.csv", result)
        if schedule.save_latent:
            _write_latent_csv(out / f"latent_chain{k}.csv", result, model.traits)
    manifest = _manifest(config, args.config, model, trees)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    diagnostics = _diagnostics(results)
    with open(out / "diagnostics.json", "w") as fh:
        json.dump(diagnostics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    flagged = diagnostics.get("rhat_flags", [])
    print(f"wrote {len(results)} chain(s) to {out}")
    if diagnostics["min_ess"] is not None:
        print(f"min ESS {diagnostics['min_ess']:.1f}, "
              f"median ESS {diagnostics['median_ess']:.1f}")
    if flagged:
        print(f"WARNING: {len(flagged)} dimension(s) above the {RHAT_THRESHOLD} "
              f"convergence bar: {', '.join(flagged)}")
    return EXIT_OK


def _read_samples_dir(samples_dir: Path):
    files = sorted(samples_dir.glob("samples_chain*.csv"))
    if not files:
        raise DataError(f"no samples_chain*.csv files in {samples_dir}")
    chains = []
    names = None
    for f in files:
        with open(f, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "iteration":
                raise DataError(f"{f}: not a samples file")
            if names is None:
                names = header[1:]
            elif header[1:] != names:
                raise DataError(f"{f}: column names disagree with the other chains")
            rows = []
            for row in reader:
                if len(row) != len(header):
                    raise DataError(f"{f}: truncated row with {len(row)} fields")
                rows.append([float(v) for v in row[1:]])
        if not rows:
            raise DataError(f"{f}: no samples")
        chains.append(np.asarray(rows))
    return names, chains


def cmd_summarize(args) -> int:
    samples_dir = Path(args.samples_dir)
    names, chains = _read_samples_dir(samples_dir)
    pooled = np.concatenate(chains, axis=0)
    corr_cols = [(j, name) for j, name in enumerate(names) if name.startswith("R[")]
    if not corr_cols:
        raise DataError("no correlation columns found in the samples")
    n_entries = len(corr_cols)
    p = int(round((1 + np.sqrt(1 + 8 * n_entries)) / 2))
    trait_names = None
    manifest_path = samples_dir / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as fh:
            trait_names = json.load(fh).get("trait_names")
    pairs = [(i, j) for i in range(p) for j in range(i + 1, p)]
    mean_matrix = np.eye(p)
    significant_matrix = np.zeros((p, p), dtype=bool)
    rows = []
    for (col, name), (i, j) in zip(corr_cols, pairs):
        series = pooled[:, col]
        lo, hi = hpd_interval(series, mass=args.mass)
        mean = float(series.mean())
        significant = lo > 0.0 or hi < 0.0
        mean_matrix[i, j] = mean_matrix[j, i] = mean
        significant_matrix[i, j] = significant_matrix[j, i] = significant
        label_i = trait_names[i] if trait_names else f"trait{i + 1}"
        label_j = trait_names[j] if trait_names else f"trait{j + 1}"
        rows.append([name, label_i, label_j, repr(mean), repr(lo), repr(hi),
                     "yes" if significant else "no"])
    summary_path = samples_dir / "correlation_summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["entry", "trait_a", "trait_b", "mean",
                         f"hpd{int(round(args.mass * 100))}_low",
                         f"hpd{int(round(args.mass * 100))}_high", "significant"])
        writer.writerows(rows)
    matrix_path = samples_dir / "correlation_matrix.json"
    with open(matrix_path, "w") as fh:
        json.dump(
            {
                "mass": args.mass,
                "trait_names": trait_names or [f"trait{i + 1}" for i in range(p)],
                "posterior_mean": mean_matrix.tolist(),
                "significant": significant_matrix.tolist(),
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    n_sig = int(significant_matrix[np.triu_indices(p, k=1)].sum())
    print(f"summarized {pooled.shape[0]} pooled draws over {n_entries} correlations")
    print(f"{n_sig} significant at {int(round(args.mass * 100))}% HPD; "
          f"wrote {summary_path.name} and {matrix_path.name}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    config = load_config(args.config)
    model, _ = _build_model(config)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    budget = config["benchmark.budget_seconds"]
    samplers = config["benchmark.samplers"]
    bad = [s for s in samplers if s not in ("bps", "baseline")]
    if bad:
        raise ConfigError(f"unknown benchmark samplers: {', '.join(bad)}")
    sweep = config["benchmark.travel_multipliers"]
    decomp = CovarianceDecomposition.identity(model.traits.n_binary,
                                              model.traits.n_continuous)
    reports = []
    for sampler in samplers:
        rng = np.random.default_rng(config["benchmark.seed"])
        report = benchmark_latent_sampler(
            model.traits, model.gaussians[0], decomp, model.root_prior, sampler,
            budget, rng, travel_multiplier=model.travel_multiplier,
        )
        reports.append(report)
        _print_benchmark_line(report)
    sweep_reports = []
    for multiplier in sweep:
        rng = np.random.default_rng(config["benchmark.seed"])
        report = benchmark_latent_sampler(
            model.traits, model.gaussians[0], decomp, model.root_prior, "bps",
            budget, rng, travel_multiplier=multiplier,
        )
        report["travel_multiplier"] = multiplier
        sweep_reports.append(report)
        _print_benchmark_line(report, extra=f"multiplier={multiplier}")
    payload = {"budget_seconds": budget, "samplers": reports,
               "travel_sweep": sweep_reports}
    with open(out / "benchmark.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out / 'benchmark.json'}")
    return EXIT_OK


def _print_benchmark_line(report, extra: str = ""):
    tag = report["sampler"] + (f" ({extra})" if extra else "")
    if report.get("ess_per_hour") is None:
        print(f"{tag}: {report['iterations']} iterations, no ESS "
              f"({report.get('warning', 'insufficient samples')})")
        return
    stats = report["ess_per_hour"]
    print(f"{tag}: {report['iterations']} iterations in "
          f"{report['elapsed_seconds']:.1f}s; ESS/hr min {stats['min']:.1f}, "
          f"median {stats['median']:.1f}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="phyloprobit",
        description="Bayesian phylogenetic multivariate probit inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the configured chains")
    p_run.add_argument("config")
    p_val = sub.add_parser("validate", help="dry-run check of config and data")
    p_val.add_argument("config")
    p_sum = sub.add_parser("summarize", help="correlation significance report")
    p_sum.add_argument("samples_dir")
    p_sum.add_argument("--mass", type=float, default=0.9,
                       help="HPD mass for the significance call (default 0.9)")
    p_bench = sub.add_parser("benchmark", help="wall-clock latent-sampler comparison")
    p_bench.add_argument("config")
    args = parser.parse_args(argv)
    commands = {
        "run": cmd_run,
        "validate": cmd_validate,
        "summarize": cmd_summarize,
        "benchmark": cmd_benchmark,
    }
    try:
        return commands[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NewickError, TreeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # runtime failures get their own exit code
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
