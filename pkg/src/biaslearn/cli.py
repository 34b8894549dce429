"""Command-line entry point.

Subcommands cover the full pipeline: ``gen-data`` writes an exemplar
CSV, ``run`` executes the condition grid and writes records, summary,
and a diagnostics log, ``summarize`` recomputes a summary from records,
``analyze`` writes the per-setting effect-test tables, and ``plot``
renders the SVG figures.  A flat JSON config file can override any
default; ``--seed``, ``--out``, and ``--threads`` override the config.

Exit codes: 0 success, 2 configuration or input-schema errors, 3
convergence diagnostics failed after retry, 4 I/O errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from .data import DatasetSpec, generate_exemplars, write_exemplars_csv
from .experiment import (
    Condition,
    read_records_csv,
    run_grid,
    summarize,
    write_records_csv,
    write_summary_csv,
)
from .model import BiasClass
from .plots import render_all
from .sampler import SamplerConfig
from .stats import anova_table, write_anova_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIAGNOSTICS = 3
EXIT_IO = 4

_BIAS_NAMES = tuple(b.value for b in BiasClass)


class ConfigError(ValueError):
    """Malformed configuration file or option."""


@dataclass
class RunConfig:
    """Flat pipeline configuration; every key has a working default.

    Field names double as the JSON config keys.  weight_settings lists
    (w, s) pairs for the blend-weight prior; sigma_s2 is the perceptual
    noise variance added at classification and in the likelihood.
    """

    # dataset
    n_per_category: int = 8
    n_features: int = 2
    n_categories: int = 2
    diagnostic_feature: int = 0
    mean_separation: float = 2.0
    within_sd: float = 0.25
    # grid
    weight_settings: list = field(
        default_factory=lambda: [[0.2, 0.0], [0.3, 0.03], [0.5, 0.0]]
    )
    domain_biases: list = field(default_factory=lambda: list(_BIAS_NAMES))
    label_biases: list = field(default_factory=lambda: list(_BIAS_NAMES))
    gamma: float = 10.0
    sigma_s2: float = 1.0
    n_blocks: int = 4
    n_participants: int = 75
    n_seeds: int = 5
    # sampler
    n_chains: int = 2
    n_warmup: int = 500
    n_samples: int = 500
    target_accept: float = 0.8
    algorithm: str = "hmc"
    path_length: float = 4.0
    # execution
    seed: int = 0
    out_dir: str = "."
    threads: int = 1

    def __post_init__(self):
        for name in ("domain_biases", "label_biases"):
            bad = [b for b in getattr(self, name) if b not in _BIAS_NAMES]
            if bad:
                raise ConfigError(f"{name} contains unknown bias classes: {bad}")
        for pair in self.weight_settings:
            if len(pair) != 2:
                raise ConfigError("weight_settings entries must be [w, s] pairs")
            w, s = pair
            if not 0.0 < float(w) <= 1.0 or float(s) < 0.0:
                raise ConfigError(f"invalid weight setting {pair}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            n_per_category=self.n_per_category,
            n_features=self.n_features,
            n_categories=self.n_categories,
            diagnostic_feature=self.diagnostic_feature,
            mean_separation=self.mean_separation,
            within_sd=self.within_sd,
            seed=self.seed,
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            n_chains=self.n_chains,
            n_warmup=self.n_warmup,
            n_samples=self.n_samples,
            target_accept=self.target_accept,
            seed=self.seed,
            algorithm=self.algorithm,
            path_length=self.path_length,
        )

    def conditions(self) -> list:
        return [
            Condition(
                domain_bias=BiasClass(d),
                label_bias=BiasClass(l),
                w=float(w),
                s=float(s),
            )
            for (w, s) in self.weight_settings
            for d in self.domain_biases
            for l in self.label_biases
        ]


def load_config(path: str | None) -> RunConfig:
    """Config file merged over defaults; unknown keys are errors."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return RunConfig(**raw)


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.threads is not None:
        updates["threads"] = args.threads
    return dataclasses.replace(config, **updates) if updates else config


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args, config: RunConfig) -> int:
    out = _out_dir(config)
    exemplars = generate_exemplars(config.dataset_spec())
    path = out / "exemplars.csv"
    write_exemplars_csv(exemplars, path)
    print(f"wrote {path} ({len(exemplars)} exemplars)")
    return EXIT_OK


def cmd_run(args, config: RunConfig) -> int:
    out = _out_dir(config)
    result = run_grid(
        config.conditions(),
        config.dataset_spec(),
        config.sampler_config(),
        n_seeds=config.n_seeds,
        n_blocks=config.n_blocks,
        gamma=config.gamma,
        noise_var=config.sigma_s2,
        n_participants=config.n_participants,
        n_jobs=config.threads,
    )
    write_records_csv(result, out / "records.csv")
    write_summary_csv(summarize(result), out / "summary.csv")

    log_path = out / "diagnostics.log"
    reports = result.fit_reports
    with open(log_path, "w") as fh:
        for row in reports.itertuples(index=False):
            status = "ok" if row.converged else "FAILED"
            fh.write(
                f"{row.condition_id} seed={row.seed} block={row.block} "
                f"attempts={row.n_fit_attempts} max_mu_rhat={row.max_mu_rhat:.4f} "
                f"{status}\n"
            )
        n_bad = int((~reports.converged).sum())
        fh.write(
            f"total fits={len(reports)} retried={int((reports.n_fit_attempts > 1).sum())} "
            f"failed={n_bad}\n"
        )
    print(f"wrote {out / 'records.csv'}, {out / 'summary.csv'}, {log_path}")
    if n_bad:
        print(
            f"{n_bad} fits failed the R-hat gate after retry; see {log_path}",
            file=sys.stderr,
        )
        return EXIT_DIAGNOSTICS
    return EXIT_OK


def cmd_summarize(args, config: RunConfig) -> int:
    out = _out_dir(config)
    records = read_records_csv(args.records)
    path = out / "summary.csv"
    write_summary_csv(summarize(records), path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_analyze(args, config: RunConfig) -> int:
    out = _out_dir(config)
    records = read_records_csv(args.records)
    written = []
    for (w, s), group in records.groupby(["w", "s"], sort=True):
        table = anova_table(group)
        path = out / f"anova_w{w:g}_s{s:g}.csv"
        write_anova_csv(table, path)
        written.append(path)
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_plot(args, config: RunConfig) -> int:
    out = _out_dir(config)
    summary = pd.read_csv(args.summary, float_precision="round_trip")
    paths = render_all(summary, out)
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biaslearn",
        description="Simulate and analyze category learning under interacting biases.",
    )
    parser.add_argument("--config", help="JSON config file; keys match RunConfig fields")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--threads", type=int, help="worker processes for grid fits")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="write the exemplar CSV").set_defaults(
        func=cmd_gen_data
    )
    sub.add_parser(
        "run", help="run the condition grid; write records, summary, diagnostics"
    ).set_defaults(func=cmd_run)

    p_sum = sub.add_parser("summarize", help="summary CSV from a records CSV")
    p_sum.add_argument("--records", default="records.csv")
    p_sum.set_defaults(func=cmd_summarize)

    p_an = sub.add_parser("analyze", help="effect tests per (w, s) setting")
    p_an.add_argument("--records", default="records.csv")
    p_an.set_defaults(func=cmd_analyze)

    p_plot = sub.add_parser("plot", help="render SVG figures from a summary CSV")
    p_plot.add_argument("--summary", default="summary.csv")
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _apply_overrides(load_config(args.config), args)
        return args.func(args, config)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
