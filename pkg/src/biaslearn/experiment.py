"""Block-learning experiments over the bias-condition grid.

One condition is a (domain bias, label bias, weight location, weight
spread) cell.  Per block the posterior is fitted on the exemplar set
replicated once per elapsed block (evidence accumulates across blocks;
the stimulus set itself never changes), simulated participants classify
every exemplar using single posterior draws as their beliefs, and the
resulting binary records aggregate into per-cell accuracy curves.

Every random stream is derived from the master seed through
``numpy.random.SeedSequence`` keyed on (master seed, condition id hash,
block, seed index, stream tag), so grid cells are reproducible in any
execution order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .data import DatasetSpec, Exemplar, ObservationSet, generate_exemplars, to_observations
from .model import (
    BiasClass,
    Hyperparams,
    JointTarget,
    LatentState,
    constrain,
    constrain_batch,
)
from .sampler import PosteriorDraws, SamplerConfig, run_chains, split_rhat

# grid defaults: three weight settings crossed with all bias pairs
DEFAULT_WEIGHT_SETTINGS = ((0.2, 0.0), (0.3, 0.03), (0.5, 0.0))
MU_RHAT_THRESHOLD = 1.05

RECORD_COLUMNS = [
    "condition_id",
    "domain_bias",
    "label_bias",
    "w",
    "s",
    "seed",
    "block",
    "participant",
    "object",
    "correct",
]
SUMMARY_COLUMNS = [
    "domain_bias",
    "label_bias",
    "w",
    "s",
    "block",
    "mean_accuracy",
    "se",
    "n",
]

# stream tags for seed derivation
_TAG_FIT = 0
_TAG_RETRY = 1
_TAG_PARTICIPANTS = 2
_TAG_DATASET = 3


@dataclass(frozen=True)
class Condition:
    """One cell of the experiment grid.

    diagnostic_first records the orientation convention for the
    concentration pairs: the first component of the two-level setting
    goes on the diagnostic feature.  The default is the calibrated
    orientation under which a right bias helps and a wrong bias hurts;
    the flag exists so calibration fixtures can probe both orientations.
    """

    domain_bias: BiasClass
    label_bias: BiasClass
    w: float
    s: float
    diagnostic_first: bool = True

    def __post_init__(self):
        if not 0.0 < self.w <= 1.0:
            raise ValueError("w must lie in (0, 1]")
        if self.s < 0.0:
            raise ValueError("s must be nonnegative")

    @property
    def condition_id(self) -> str:
        return (
            f"{self.domain_bias.value}_{self.label_bias.value}"
            f"_w{self.w:g}_s{self.s:g}"
        )

    def hyperparams(
        self,
        n_features: int,
        n_categories: int,
        diagnostic_feature: int = 0,
        gamma: float = 10.0,
        noise_var: float = 1.0,
    ) -> Hyperparams:
        """Instantiate the generative hyperparameters for this cell."""
        return Hyperparams(
            alpha_domain=self.domain_bias.concentration(
                n_features, diagnostic_feature, self.diagnostic_first
            ),
            alpha_label=self.label_bias.concentration(
                n_features, diagnostic_feature, self.diagnostic_first
            ),
            weight_loc=self.w,
            weight_scale=self.s,
            gamma=gamma,
            noise_var=noise_var,
            n_features=n_features,
            n_categories=n_categories,
        )


@dataclass(frozen=True)
class BlockPosterior:
    """Fitted posterior for one learning block, with its QC verdict.

    A fit that misses the R-hat gate after the retry is still returned,
    flagged by ``converged=False``; downstream consumers decide what to
    do with it, nothing is silently dropped.
    """

    block: int
    hyper: Hyperparams
    draws: PosteriorDraws = field(repr=False)
    mu_mean: np.ndarray
    mu_sd: np.ndarray
    sigma_mean: np.ndarray
    sigma_sd: np.ndarray
    max_mu_rhat: float
    converged: bool
    n_fit_attempts: int

    def __post_init__(self):
        if self.block < 1:
            raise ValueError("blocks are numbered from 1")


@dataclass(frozen=True)
class ParticipantRecord:
    """One simulated classification outcome: participant x object."""

    condition_id: str
    block: int
    participant: int
    object_id: int
    correct: int


@dataclass(frozen=True)
class GridResult:
    """Record table of a grid run plus per-fit diagnostics."""

    records: pd.DataFrame
    fit_reports: pd.DataFrame

    @property
    def all_converged(self) -> bool:
        return bool(self.fit_reports["converged"].all())


def default_fit_config(seed: int = 0) -> SamplerConfig:
    """Sampler configuration used for grid fits unless overridden.

    Settled by a gate rehearsal over the full bias grid at the largest
    block: 2 chains of 500 warmup + 500 retained draws with trajectory
    length 4.0 cleared the R-hat gate on every cell without retries to
    spare, at a few seconds per fit.  Longer trajectories matter here
    because the high-correlation cells mix along a curved valley in
    (bias, sigma, mean) space.
    """
    return SamplerConfig(
        n_chains=2,
        n_warmup=500,
        n_samples=500,
        target_accept=0.8,
        seed=seed,
        path_length=4.0,
    )


def default_conditions(
    weight_settings=DEFAULT_WEIGHT_SETTINGS,
) -> list[Condition]:
    """Full crossing of bias classes with the weight settings, grid order."""
    return [
        Condition(domain_bias=d, label_bias=l, w=w, s=s)
        for (w, s) in weight_settings
        for d in BiasClass
        for l in BiasClass
    ]


def _derived_seed(master: int, condition: Condition, block: int, seed_index: int, tag: int) -> int:
    key = [
        master & 0xFFFF_FFFF_FFFF_FFFF,
        zlib.crc32(condition.condition_id.encode()),
        block,
        seed_index,
        tag,
    ]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _mu_rhat(draws: PosteriorDraws, hyper: Hyperparams) -> float:
    """Worst split R-hat over the constrained mean dimensions."""
    FC = hyper.n_features * hyper.n_categories
    flat = draws.draws.reshape(-1, draws.dim)
    mu = constrain_batch(flat, hyper)[:, -FC:]
    per_chain = mu.reshape(draws.n_chains, draws.n_samples, FC)
    return float(np.max(split_rhat(per_chain)))


def _fit_block(target: JointTarget, config: SamplerConfig, seed: int) -> PosteriorDraws:
    cfg = replace(
        config,
        seed=seed,
        jump_proposals=config.jump_proposals + (target.category_reflection,),
    )
    return run_chains(target, target.dim, cfg)


def run_block_learning(
    condition: Condition,
    observations: ObservationSet,
    n_blocks: int = 4,
    sampler_config: SamplerConfig | None = None,
    *,
    diagnostic_feature: int = 0,
    gamma: float = 10.0,
    noise_var: float = 1.0,
    seed_index: int = 0,
) -> list[BlockPosterior]:
    """Fit the posterior for each learning block of one condition.

    Block b is fitted on the observation set replicated b times, the
    cumulative-evidence reading of repeated exposure to a fixed stimulus
    set.  Each fit must pass R-hat < 1.05 on the constrained mean
    dimensions; a failing fit is retried once with doubled warmup and
    otherwise returned flagged.

    Parameters
    ----------
    condition : Condition
    observations : ObservationSet
        Per-feature category vectors of the base exemplar set.
    n_blocks : int
    sampler_config : SamplerConfig, optional
        Defaults to ``default_fit_config()``.  Its seed acts as the
        master seed of all derived streams.
    diagnostic_feature, gamma, noise_var :
        Forwarded into the condition's hyperparameters.
    seed_index : int
        Replication index, part of the seed derivation.
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    config = sampler_config if sampler_config is not None else default_fit_config()
    hyper = condition.hyperparams(
        observations.n_features,
        observations.n_categories,
        diagnostic_feature,
        gamma,
        noise_var,
    )
    posteriors = []
    for block in range(1, n_blocks + 1):
        tiled = np.tile(observations.vectors, (1, block, 1))
        target = JointTarget(hyper, tiled)
        attempts = 1
        draws = _fit_block(
            target,
            config,
            _derived_seed(config.seed, condition, block, seed_index, _TAG_FIT),
        )
        max_rhat = _mu_rhat(draws, hyper)
        if max_rhat >= MU_RHAT_THRESHOLD:
            attempts = 2
            retry_cfg = replace(config, n_warmup=2 * config.n_warmup)
            draws = _fit_block(
                target,
                retry_cfg,
                _derived_seed(config.seed, condition, block, seed_index, _TAG_RETRY),
            )
            max_rhat = _mu_rhat(draws, hyper)

        F, C = hyper.n_features, hyper.n_categories
        flat = constrain_batch(draws.draws.reshape(-1, draws.dim), hyper)
        sigma_cols = flat[:, -2 * F * C : -F * C]
        mu_cols = flat[:, -F * C :]
        posteriors.append(
            BlockPosterior(
                block=block,
                hyper=hyper,
                draws=draws,
                mu_mean=mu_cols.mean(axis=0).reshape(F, C),
                mu_sd=mu_cols.std(axis=0, ddof=1).reshape(F, C),
                sigma_mean=sigma_cols.mean(axis=0).reshape(F, C),
                sigma_sd=sigma_cols.std(axis=0, ddof=1).reshape(F, C),
                max_mu_rhat=max_rhat,
                converged=max_rhat < MU_RHAT_THRESHOLD,
                n_fit_attempts=attempts,
            )
        )
    return posteriors


def classify_exemplar(
    exemplar: Exemplar, belief: LatentState, sigma_s2: float = 1.0
) -> int:
    """Most likely category of one exemplar under one belief state.

    Scores each category by the sum over features of the Gaussian
    log density of the exemplar's value at the believed mean, with
    variance sigma^2 + sigma_s2.  Ties break toward the lower index.
    """
    v = belief.sigma**2 + sigma_s2
    resid = exemplar.features[:, None] - belief.mu
    scores = -0.5 * (np.log(2.0 * np.pi * v) + resid * resid / v).sum(axis=0)
    return int(np.argmax(scores))  # argmax takes the first maximum on ties


def simulate_participants(
    block_posterior: BlockPosterior,
    exemplars: list[Exemplar],
    n_participants: int = 75,
    rng: np.random.Generator | None = None,
) -> list[ParticipantRecord]:
    """Classify every exemplar under per-participant posterior beliefs.

    Participant j's belief is the j-th of n_participants draws sampled
    without replacement from the pooled chains; between-participant
    variability therefore reflects posterior uncertainty.  Returns one
    binary record per (participant, object), a complete crossing.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    draws = block_posterior.draws
    pool = draws.draws.reshape(-1, draws.dim)
    if pool.shape[0] < n_participants:
        raise ValueError(
            f"need at least {n_participants} retained draws, have {pool.shape[0]}"
        )
    chosen = rng.choice(pool.shape[0], size=n_participants, replace=False)
    hyper = block_posterior.hyper
    records = []
    for j, idx in enumerate(chosen):
        belief = constrain(pool[idx], hyper)
        for oid, ex in enumerate(exemplars):
            predicted = classify_exemplar(ex, belief, hyper.noise_var)
            records.append(
                ParticipantRecord(
                    condition_id="",
                    block=block_posterior.block,
                    participant=j,
                    object_id=oid,
                    correct=int(predicted == ex.category),
                )
            )
    return records


def _grid_cell(task) -> tuple:
    """Fit and simulate one (seed replication, condition) cell.

    Module-level so a process pool can dispatch it; every random stream
    inside is derived from the master seed, making the result
    independent of which worker runs the task.
    """
    (
        spec,
        condition,
        n_blocks,
        config,
        gamma,
        noise_var,
        n_participants,
        seed_index,
    ) = task
    exemplars = generate_exemplars(spec)
    observations = to_observations(exemplars)
    posteriors = run_block_learning(
        condition,
        observations,
        n_blocks,
        config,
        diagnostic_feature=spec.diagnostic_feature,
        gamma=gamma,
        noise_var=noise_var,
        seed_index=seed_index,
    )
    rows = []
    fits = []
    for post in posteriors:
        fits.append(
            {
                "condition_id": condition.condition_id,
                "seed": seed_index,
                "block": post.block,
                "n_fit_attempts": post.n_fit_attempts,
                "max_mu_rhat": post.max_mu_rhat,
                "converged": post.converged,
            }
        )
        prng = np.random.default_rng(
            _derived_seed(
                config.seed, condition, post.block, seed_index, _TAG_PARTICIPANTS
            )
        )
        for rec in simulate_participants(post, exemplars, n_participants, prng):
            rows.append(
                (
                    condition.condition_id,
                    condition.domain_bias.value,
                    condition.label_bias.value,
                    condition.w,
                    condition.s,
                    seed_index,
                    rec.block,
                    rec.participant,
                    rec.object_id,
                    rec.correct,
                )
            )
    return rows, fits


def run_grid(
    conditions: list[Condition],
    dataset: DatasetSpec,
    sampler_config: SamplerConfig | None = None,
    n_seeds: int = 5,
    *,
    n_blocks: int = 4,
    gamma: float = 10.0,
    noise_var: float = 1.0,
    n_participants: int = 75,
    n_jobs: int = 1,
) -> GridResult:
    """Sweep conditions x blocks x participants over seed replications.

    Each seed replication draws a fresh dataset (shared by every
    condition within that replication, so conditions are compared on
    identical data) and refits all cells.  All streams derive from
    ``sampler_config.seed`` as master seed and results assemble in task
    order, so reruns with the same master yield an identical record
    table regardless of execution order or worker count.

    Parameters
    ----------
    n_jobs : int
        Worker processes for cell fits; 1 runs in-process.

    Returns
    -------
    GridResult
        ``records``: one row per (condition, seed, block, participant,
        object) with binary correctness.  ``fit_reports``: one row per
        fitted cell with attempt count, worst mean R-hat, and the
        convergence flag (failing cells are reported, never dropped).
    """
    if not conditions:
        raise ValueError("need at least one condition")
    if n_jobs < 1:
        raise ValueError("n_jobs must be >= 1")
    config = sampler_config if sampler_config is not None else default_fit_config()
    master = config.seed

    tasks = []
    for seed_index in range(n_seeds):
        dataset_seed = int(
            np.random.SeedSequence(
                [master & 0xFFFF_FFFF_FFFF_FFFF, seed_index, _TAG_DATASET]
            ).generate_state(1)[0]
        )
        spec = replace(dataset, seed=dataset_seed)
        for condition in conditions:
            tasks.append(
                (
                    spec,
                    condition,
                    n_blocks,
                    config,
                    gamma,
                    noise_var,
                    n_participants,
                    seed_index,
                )
            )

    if n_jobs == 1:
        results = [_grid_cell(t) for t in tasks]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_grid_cell, tasks, chunksize=1))

    rows = []
    fits = []
    for cell_rows, cell_fits in results:
        rows.extend(cell_rows)
        fits.extend(cell_fits)
    records = pd.DataFrame(rows, columns=RECORD_COLUMNS)
    fit_reports = pd.DataFrame(fits)
    return GridResult(records=records, fit_reports=fit_reports)


def _bias_order(values: pd.Series) -> pd.Series:
    order = {b.value: i for i, b in enumerate(BiasClass)}
    return values.map(order)


def summarize(records) -> pd.DataFrame:
    """Per-cell mean accuracy with its standard error.

    Accepts a record table (or a GridResult).  The mean is over all
    records of the cell; the standard error is the standard deviation of
    per-participant accuracy means divided by the square root of their
    count, treating each (seed, participant) pair as one participant.
    """
    if isinstance(records, GridResult):
        records = records.records
    if len(records) == 0:
        raise ValueError("record table is empty")
    cell_keys = ["domain_bias", "label_bias", "w", "s", "block"]
    participant_keys = cell_keys + ["seed", "participant"]
    per_participant = (
        records.groupby(participant_keys, sort=False)["correct"].mean().reset_index()
    )
    grouped = per_participant.groupby(cell_keys, sort=False)["correct"]
    summary = grouped.agg(
        mean_accuracy="mean",
        se=lambda x: (x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0,
        n="count",
    ).reset_index()
    summary = summary.sort_values(
        by=cell_keys,
        key=lambda col: _bias_order(col) if col.name in ("domain_bias", "label_bias") else col,
        kind="mergesort",
    ).reset_index(drop=True)
    return summary[SUMMARY_COLUMNS]


def _format_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_table(df: pd.DataFrame, columns: list[str], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in df.itertuples(index=False):
            writer.writerow([_format_cell(v) for v in row])


def write_records_csv(records, path) -> None:
    """Record table to CSV with full float round-trip precision."""
    if isinstance(records, GridResult):
        records = records.records
    _write_table(records[RECORD_COLUMNS], RECORD_COLUMNS, path)


def write_summary_csv(summary: pd.DataFrame, path) -> None:
    _write_table(summary[SUMMARY_COLUMNS], SUMMARY_COLUMNS, path)


def read_records_csv(path) -> pd.DataFrame:
    """Read a record table written by ``write_records_csv``."""
    df = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in RECORD_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"record table misses columns: {missing}")
    return df[RECORD_COLUMNS]
