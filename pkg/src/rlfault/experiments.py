"""Experiment protocols: budget accounting, baseline comparison, sweeps.

The comparison against random testing charges one budget unit per executed
episode. In the "provided initial population" scenario the budget is
B = N + M (validated faulty generated episodes plus executed mutants); when
the initial population must be generated too, B additionally counts its size,
and the initial population's faults count toward the search's total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .abstraction import AbstractionIndex
from .base import check_rng
from .classifier import (
    DecisionTree,
    FaultForest,
    accuracy,
    extract_all_leaf_rules,
    extract_rules,
    kfold_metrics,
    precision_recall_f1,
    rules_predict,
)
from .episodes import Episode, EpisodeOrigin, collect_states, encode_episodes
from .replay import validate_episodes
from .search import SearchConfig, SearchContext, run_search

PROVIDED_INITIAL = "provided_initial"
SELF_GENERATED = "self_generated"
SCENARIOS = (PROVIDED_INITIAL, SELF_GENERATED)


# ---------------------------------------------------------------------------
# Mann-Whitney U


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float  # U statistic of the first sample
    p_one_sided: float  # tail probability in the observed direction
    p_two_sided: float
    method: str  # "exact" or "normal"


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_rank_sum_cdf(scaled_ranks, n1: int):
    """Distribution of the size-n1 subset rank sum by dynamic programming.

    ``scaled_ranks`` are pooled midranks times two (integers, ties included).
    Counts stay below 2^53 for every n1*n2 <= 400, so float64 arithmetic is
    exact.
    """
    total = int(sum(scaled_ranks))
    table = np.zeros((n1 + 1, total + 1))
    table[0, 0] = 1.0
    for r in scaled_ranks:
        r = int(r)
        table[1:, r:] += table[:-1, : total + 1 - r]
    return table[n1]  # counts over scaled rank sums


def mann_whitney_u(x, y, method: str | None = None) -> MannWhitneyResult:
    """Rank-sum U test with midrank ties.

    Exact p by enumerating the rank-sum distribution when |x|*|y| <= 400;
    otherwise the normal approximation with tie and continuity corrections.
    The one-sided p is the tail of the observed direction. ``method`` forces
    "exact" or "normal" regardless of sample size.
    """
    if method not in (None, "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be nonempty")

    pooled = np.concatenate([x, y])
    ranks = _midranks(pooled)
    r1 = float(ranks[:n1].sum())
    u1 = r1 - n1 * (n1 + 1) / 2.0
    u2 = n1 * n2 - u1
    u_small = min(u1, u2)

    if method == "exact" or (method is None and n1 * n2 <= 400):
        scaled = np.rint(ranks * 2).astype(np.int64)
        # Work with whichever sample is smaller; the rank-sum distribution of
        # the complement mirrors it.
        k = min(n1, n2)
        counts = _exact_rank_sum_cdf(scaled, k)
        total = counts.sum()
        # U_small corresponds to a rank-sum bound for the size-k sample.
        bound = u_small + k * (k + 1) / 2.0
        sums = np.arange(len(counts)) / 2.0
        p_one = float(counts[sums <= bound + 1e-9].sum() / total)
        method = "exact"
    else:
        tie_counts = np.unique(pooled, return_counts=True)[1]
        n = n1 + n2
        tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
        var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
        if var <= 0:
            p_one = 0.5
        else:
            z = (u_small - n1 * n2 / 2.0 + 0.5) / math.sqrt(var)
            p_one = 0.5 * math.erfc(-z / math.sqrt(2.0))
        method = "normal"

    return MannWhitneyResult(
        u=u1,
        p_one_sided=min(1.0, p_one),
        p_two_sided=min(1.0, 2.0 * p_one),
        method=method,
    )


# ---------------------------------------------------------------------------
# RQ1: search versus random testing at the same budget


@dataclass
class CampaignRun:
    """One seeded search run plus its post-search validation."""

    run_id: int
    seed: int
    mutations_executed: int  # M
    validations_executed: int  # replays of never-executed generated episodes
    n_generated_faults: int  # N: validated faulty generated episodes
    generations_run: int
    archive_size: int
    archive_faults: int  # archive entries whose validated status is faulty
    all_satisfied: bool
    fault_episodes: list[Episode] = field(default_factory=list)

    def budget(self, scenario: str, initial_population: int) -> int:
        if scenario == PROVIDED_INITIAL:
            return self.n_generated_faults + self.mutations_executed
        if scenario == SELF_GENERATED:
            return (
                initial_population
                + self.n_generated_faults
                + self.mutations_executed
            )
        raise ValueError(f"unknown scenario {scenario!r}")


def run_campaign(
    run_id: int,
    initial_episodes: list[Episode],
    ctx: SearchContext,
    config: SearchConfig,
) -> CampaignRun:
    """Search plus post-search validation, with executed-episode accounting.

    Mutants were executed during the search, so their fault labels are real
    and they are not replayed. Crossover offspring were never executed: every
    one of them is replayed after the search (each replay is an executed
    episode) and its fault status replaced by the replay observation. N
    counts the validated faulty episodes of generated origin (mutants plus
    confirmed crossovers).
    """
    result = run_search(initial_episodes, ctx, config)

    to_replay = [ind.episode for ind in result.offspring]
    report, outcomes = validate_episodes(to_replay, ctx.net, ctx.env)
    confirmed = [
        out.executed
        for out in outcomes
        if out.valid and out.observed_fault and out.executed is not None
    ]
    mutant_faults = [m.episode for m in result.mutants if m.episode.fault]
    fault_episodes = mutant_faults + confirmed

    crossover_faulty = {
        ep.episode_id: out.valid and out.observed_fault
        for ep, out in zip(to_replay, outcomes)
    }
    archive_faults = 0
    for entry in result.archive.entries():
        episode = entry.individual.episode
        if episode.origin is EpisodeOrigin.CROSSOVER:
            archive_faults += int(crossover_faulty.get(episode.episode_id, False))
        else:
            archive_faults += int(episode.fault)

    return CampaignRun(
        run_id=run_id,
        seed=config.seed,
        mutations_executed=result.mutations_executed,
        validations_executed=report.n_episodes,
        n_generated_faults=len(fault_episodes),
        generations_run=result.generations_run,
        archive_size=len(result.archive),
        archive_faults=archive_faults,
        all_satisfied=result.all_satisfied,
        fault_episodes=fault_episodes,
    )


def resample_fault_counts(pool_faults, budget: int, resamples: int, rng) -> np.ndarray:
    """Fault counts of ``resamples`` with-replacement draws of size ``budget``."""
    pool = np.asarray(pool_faults, dtype=np.int64)
    if budget > len(pool):
        raise ValueError(
            f"baseline pool has {len(pool)} episodes, budget {budget} exceeds it"
        )
    rng = check_rng(rng)
    counts = np.empty(resamples, dtype=np.int64)
    for i in range(resamples):
        counts[i] = pool[rng.integers(0, len(pool), size=budget)].sum()
    return counts


@dataclass
class ComparisonReport:
    scenario: str
    budget: int
    runs: int
    resamples: int
    search_counts: list[int]
    baseline_counts: list[int]
    search_mean: float
    baseline_mean: float
    u_statistic: float
    p_one_sided: float
    p_two_sided: float
    mean_generated_faults: float
    mean_mutations: float
    mean_validations: float
    initial_population: int
    initial_fault_count: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def rq1_report(
    campaign_runs: list[CampaignRun],
    initial_episodes: list[Episode],
    baseline_episodes: list[Episode],
    scenario: str,
    resamples: int = 100,
    rng=None,
) -> ComparisonReport:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    rng = check_rng(rng)
    initial_faults = sum(1 for e in initial_episodes if e.fault)

    mean_n = float(np.mean([r.n_generated_faults for r in campaign_runs]))
    mean_m = float(np.mean([r.mutations_executed for r in campaign_runs]))
    budget = int(round(mean_n + mean_m))
    if scenario == SELF_GENERATED:
        budget += len(initial_episodes)

    if scenario == PROVIDED_INITIAL:
        search_counts = [r.n_generated_faults for r in campaign_runs]
    else:
        search_counts = [
            r.n_generated_faults + initial_faults for r in campaign_runs
        ]

    pool_faults = [e.fault for e in baseline_episodes]
    baseline_counts = resample_fault_counts(pool_faults, budget, resamples, rng)
    stats = mann_whitney_u(search_counts, baseline_counts)

    return ComparisonReport(
        scenario=scenario,
        budget=budget,
        runs=len(campaign_runs),
        resamples=resamples,
        search_counts=[int(c) for c in search_counts],
        baseline_counts=[int(c) for c in baseline_counts],
        search_mean=float(np.mean(search_counts)),
        baseline_mean=float(np.mean(baseline_counts)),
        u_statistic=stats.u,
        p_one_sided=stats.p_one_sided,
        p_two_sided=stats.p_two_sided,
        mean_generated_faults=mean_n,
        mean_mutations=mean_m,
        mean_validations=float(np.mean([r.validations_executed for r in campaign_runs])),
        initial_population=len(initial_episodes),
        initial_fault_count=initial_faults,
    )


def _campaign_star(args) -> CampaignRun:
    return run_campaign(*args)


def run_campaigns(
    initial_episodes: list[Episode],
    ctx: SearchContext,
    config: SearchConfig,
    runs: int,
    seed: int = 0,
    jobs: int = 1,
) -> list[CampaignRun]:
    """``runs`` independently seeded campaigns, optionally across processes.

    Results are merged by run index, so the parallel path is identical to the
    sequential one.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    run_seeds = [
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(runs)
    ]
    tasks = [
        (i, initial_episodes, ctx, replace(config, seed=run_seed))
        for i, run_seed in enumerate(run_seeds)
    ]
    if jobs <= 1:
        return [_campaign_star(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_campaign_star, tasks))


def run_rq1(
    initial_episodes: list[Episode],
    baseline_episodes: list[Episode],
    ctx: SearchContext,
    config: SearchConfig,
    runs: int,
    scenarios=SCENARIOS,
    resamples: int = 100,
    seed: int = 0,
    jobs: int = 1,
) -> tuple[list[CampaignRun], dict[str, ComparisonReport]]:
    """Re-execute the search ``runs`` times and compare against resampled
    random testing under each budget scenario."""
    campaign_runs = run_campaigns(initial_episodes, ctx, config, runs, seed, jobs)

    reports = {}
    for scenario in scenarios:
        reports[scenario] = rq1_report(
            campaign_runs,
            initial_episodes,
            baseline_episodes,
            scenario,
            resamples=resamples,
            rng=np.random.default_rng([seed, SCENARIOS.index(scenario)]),
        )
    return campaign_runs, reports


# ---------------------------------------------------------------------------
# RQ2: surrogate accuracy across abstraction levels


def split_indices(n: int, train_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    order = check_rng(rng).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


@dataclass
class Rq2Row:
    level: float
    n_abstract_states: int
    accuracy: float
    precision: float
    recall: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def run_rq2_sweep(
    episodes: list[Episode],
    q_fn,
    levels,
    n_trees: int = 100,
    train_fraction: float = 0.7,
    seed: int = 0,
) -> list[Rq2Row]:
    """Rebuild the abstraction, re-encode, and re-train per level.

    The train/test split is fixed across levels (same rows, different
    features) so the sweep isolates the effect of the abstraction level.
    """
    labels = np.array([e.fault for e in episodes], dtype=np.int64)
    states = collect_states(episodes)
    train_idx, test_idx = split_indices(
        len(episodes), train_fraction, np.random.default_rng([seed, 0])
    )
    rows = []
    for li, level in enumerate(levels):
        index = AbstractionIndex.build(states, q_fn, level)
        X = encode_episodes(episodes, index, q_fn)
        forest = FaultForest(n_trees=n_trees, random_state=[seed, 1 + li])
        forest.fit(X[train_idx], labels[train_idx])
        pred = forest.predict(X[test_idx])
        prec, rec, _ = precision_recall_f1(labels[test_idx], pred)
        rows.append(
            Rq2Row(
                level=float(level),
                n_abstract_states=index.n_states,
                accuracy=accuracy(labels[test_idx], pred),
                precision=prec,
                recall=rec,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# RQ3: interpretable rules over validated faults


def build_rule_dataset(
    fault_episodes: list[Episode],
    random_pool: list[Episode],
    index: AbstractionIndex,
    q_fn,
    rng=None,
):
    """Balanced binary dataset: validated faults vs sampled non-faulty episodes."""
    if not fault_episodes:
        raise ValueError("no faulty episodes to learn rules from")
    non_faulty = [e for e in random_pool if not e.fault]
    if len(non_faulty) < len(fault_episodes):
        raise ValueError(
            f"need {len(fault_episodes)} non-faulty episodes, pool has {len(non_faulty)}"
        )
    rng = check_rng(rng)
    picked = rng.choice(len(non_faulty), size=len(fault_episodes), replace=False)
    chosen = [non_faulty[int(i)] for i in picked]
    X = encode_episodes(fault_episodes + chosen, index, q_fn)
    y = np.array([1] * len(fault_episodes) + [0] * len(chosen), dtype=np.int64)
    return X, y


@dataclass
class Rq3Result:
    n_faults: int
    medians: dict
    n_rules: int
    example_rules: list[str]
    rules_match_tree: bool
    run_id: int | None = None  # None for the campaign-level dataset

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _rule_mining(
    fault_episodes, random_pool, index, q_fn, k, rng_data, rng_folds, run_id=None, min_leaf=5
):
    # Rule datasets are small at desk scale; a minimum leaf size keeps the
    # tree from pinning rules to single episodes.
    X, y = build_rule_dataset(fault_episodes, random_pool, index, q_fn, rng_data)
    leaf = max(1, min(min_leaf, X.shape[0] // 10))  # back off on tiny datasets
    metrics = kfold_metrics(X, y, k, DecisionTree(min_leaf=leaf, random_state=0), rng_folds)
    tree = DecisionTree(min_leaf=leaf, random_state=0).fit(X, y)
    fault_rules = extract_rules(tree, target_class=1)
    all_rules = extract_all_leaf_rules(tree)
    agree = bool(np.array_equal(rules_predict(all_rules, X), tree.predict(X)))
    return Rq3Result(
        n_faults=len(fault_episodes),
        medians=metrics.medians,
        n_rules=len(fault_rules),
        example_rules=[r.describe() for r in fault_rules[:5]],
        rules_match_tree=agree,
        run_id=run_id,
    )


@dataclass
class Rq3Report:
    campaign: Rq3Result
    per_run: list[Rq3Result]

    def to_dict(self) -> dict:
        return {
            "campaign": self.campaign.to_dict(),
            "per_run": [r.to_dict() for r in self.per_run],
        }


def run_rq3(
    campaign_runs: list[CampaignRun],
    random_pool: list[Episode],
    index: AbstractionIndex,
    q_fn,
    k: int = 5,
    seed: int = 0,
    min_leaf: int = 5,
) -> Rq3Report:
    """Rule mining over the campaign's validated faults.

    The headline dataset pools every validated faulty episode of the campaign
    with an equal number of non-faulty random executions, then runs k-fold
    decision-tree cross-validation and extracts the fault rules. Per-run
    datasets are also evaluated where they hold at least k rows (the per-run
    fault counts are small at desk scale, so those numbers are noisy).
    """
    all_faults = [e for run in campaign_runs for e in run.fault_episodes]
    if not all_faults:
        raise ValueError("campaign produced no validated faulty episodes")
    campaign = _rule_mining(
        all_faults,
        random_pool,
        index,
        q_fn,
        k,
        np.random.default_rng([seed, 0]),
        np.random.default_rng([seed, 1]),
        min_leaf=min_leaf,
    )
    per_run = []
    for run in campaign_runs:
        if 2 * len(run.fault_episodes) < k:
            continue
        per_run.append(
            _rule_mining(
                run.fault_episodes,
                random_pool,
                index,
                q_fn,
                k,
                np.random.default_rng([seed, 2, run.run_id]),
                np.random.default_rng([seed, 3, run.run_id]),
                run_id=run.run_id,
                min_leaf=min_leaf,
            )
        )
    return Rq3Report(campaign=campaign, per_run=per_run)
