"""Many-objective genetic search for functional-faulty episodes.

Episodes evolve under three minimised fitness functions: accumulated reward,
one minus the surrogate fault probability, and the agent's mean decision
margin (certainty). Crossover splices two recorded episodes at steps whose
abstract keys and recorded actions agree; mutation perturbs one state and
re-executes the tail in the real environment. Ranking follows the
many-objective scheme: per-objective best individuals get rank 0, the rest
are non-dominated-sorted, and an archive keeps every individual that
satisfies at least one objective threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .abstraction import AbstractionIndex, state_keys
from .agents import QNetwork, greedy_policy, softmax_batch
from .base import check_rng
from .classifier import FaultForest, predict_fault_probability
from .envs import Environment
from .episodes import Episode, EpisodeOrigin, Step, encode_features

OBJECTIVES = ("reward", "fault_probability", "certainty")


@dataclass(frozen=True)
class FitnessThresholds:
    """Per-objective satisfaction thresholds (all fitness values minimised).

    reward: satisfied iff f1 <= reward_max.
    fault probability: satisfied iff 1 - f2 >= fault_prob_min.
    certainty: satisfied iff f3 <= certainty_max.
    """

    reward_max: float
    fault_prob_min: float = 0.95
    certainty_max: float = 0.04

    def __post_init__(self):
        if not 0.0 < self.fault_prob_min <= 1.0:
            raise ValueError("fault_prob_min must be in (0, 1]")
        if self.certainty_max < 0.0:
            raise ValueError("certainty_max must be >= 0")

    def satisfied(self, fitness) -> tuple[str, ...]:
        f1, f2, f3 = fitness
        hit = []
        if f1 <= self.reward_max:
            hit.append("reward")
        if 1.0 - f2 >= self.fault_prob_min:
            hit.append("fault_probability")
        if f3 <= self.certainty_max:
            hit.append("certainty")
        return tuple(hit)


@dataclass(frozen=True)
class SearchConfig:
    population_size: int
    generations: int = 10
    crossover_rate: float = 0.75
    tournament_k: int = 2
    match_retries: int = 50
    mutation_magnitudes: tuple[float, ...] | None = None
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 1:
            raise ValueError("population_size must be >= 1")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not 0.0 <= self.crossover_rate <= 1.0:
            raise ValueError("crossover_rate must be in [0, 1]")
        if self.tournament_k < 2:
            raise ValueError("tournament_k must be >= 2")
        if self.match_retries < 1:
            raise ValueError("match_retries must be >= 1")


@dataclass
class Individual:
    episode: Episode
    fitness: tuple[float, float, float]
    features: np.ndarray
    step_keys: tuple[tuple[int, ...], ...]
    satisfied: tuple[str, ...]


def fitness_reward(episode: Episode) -> float:
    return episode.accumulated_reward


def fitness_fault_prob(
    episode: Episode, forest: FaultForest, index: AbstractionIndex, q_fn
) -> float:
    """1 - predicted fault probability (minimised toward likely faults)."""
    return 1.0 - predict_fault_probability(forest, encode_features(episode, index, q_fn))


def fitness_certainty(episode: Episode, q_fn, temperature: float = 1.0) -> float:
    """Mean margin between the recorded action's probability and the runner-up."""
    probs = softmax_batch(np.asarray(q_fn(episode.step_states())), temperature)
    actions = episode.actions()
    rows = np.arange(len(actions))
    p_chosen = probs[rows, actions]
    others = probs.copy()
    others[rows, actions] = -np.inf
    return float(np.mean(p_chosen - others.max(axis=1)))


@dataclass
class SearchContext:
    """Frozen models and simulator the search evaluates against."""

    net: QNetwork
    env: Environment
    forest: FaultForest
    index: AbstractionIndex
    thresholds: FitnessThresholds
    temperature: float = 1.0

    def evaluate(self, episode: Episode) -> Individual:
        fitness = (
            fitness_reward(episode),
            fitness_fault_prob(episode, self.forest, self.index, self.net),
            fitness_certainty(episode, self.net, self.temperature),
        )
        keys = tuple(state_keys(episode.step_states(), self.net, self.index.level))
        return Individual(
            episode=episode,
            fitness=fitness,
            features=encode_features(episode, self.index, self.net),
            step_keys=keys,
            satisfied=self.thresholds.satisfied(fitness),
        )


def _dominates(a, b) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def mosa_rank(fitnesses) -> tuple[np.ndarray, np.ndarray]:
    """Rank assignment plus crowding distances.

    Rank 0 goes to every individual achieving the minimum of some objective;
    the remaining individuals get standard fast non-dominated sorting,
    numbered from rank 1.
    """
    F = np.asarray(fitnesses, dtype=np.float64)
    n = F.shape[0]
    ranks = np.full(n, -1, dtype=np.int64)
    for j in range(F.shape[1]):
        ranks[F[:, j] == F[:, j].min()] = 0

    rest = np.flatnonzero(ranks < 0)
    if rest.size:
        dominated_by = {i: [] for i in rest}  # i dominates these
        n_dominators = {i: 0 for i in rest}
        for ai, a in enumerate(rest):
            for b in rest[ai + 1 :]:
                if _dominates(F[a], F[b]):
                    dominated_by[a].append(b)
                    n_dominators[b] += 1
                elif _dominates(F[b], F[a]):
                    dominated_by[b].append(a)
                    n_dominators[a] += 1
        front = [i for i in rest if n_dominators[i] == 0]
        level = 1
        while front:
            nxt = []
            for i in front:
                ranks[i] = level
                for j in dominated_by[i]:
                    n_dominators[j] -= 1
                    if n_dominators[j] == 0:
                        nxt.append(j)
            front = nxt
            level += 1

    crowding = np.zeros(n)
    for level in np.unique(ranks):
        members = np.flatnonzero(ranks == level)
        if members.size <= 2:
            crowding[members] = np.inf
            continue
        for j in range(F.shape[1]):
            order = members[np.argsort(F[members, j], kind="stable")]
            span = F[order[-1], j] - F[order[0], j]
            crowding[order[0]] = np.inf
            crowding[order[-1]] = np.inf
            if span > 0:
                inner = order[1:-1]
                crowding[inner] += (F[order[2:], j] - F[order[:-2], j]) / span
    return ranks, crowding


def tournament_select(ranks, crowding, k: int, rng) -> int:
    """K uniform draws; lowest rank wins, larger crowding breaks ties, then chance."""
    n = len(ranks)
    if n == 1:
        return 0
    draws = rng.integers(0, n, size=k)
    best_key = min((ranks[i], -crowding[i]) for i in draws)
    tied = [int(i) for i in draws if (ranks[i], -crowding[i]) == best_key]
    return tied[0] if len(tied) == 1 else int(tied[rng.integers(len(tied))])


def splice_episodes(
    parent: Episode, f: int, match: Episode, v: int, id_a: str, id_b: str
) -> tuple[Episode, Episode]:
    """Offspring A = parent[0:f] + match[v:], offspring B = match[0:v] + parent[f:]."""
    a = Episode.from_steps(
        id_a,
        EpisodeOrigin.CROSSOVER,
        parent.env_kind,
        list(parent.steps[:f]) + list(match.steps[v:]),
        match.final_state,
        match.termination_cause,
    )
    b = Episode.from_steps(
        id_b,
        EpisodeOrigin.CROSSOVER,
        parent.env_kind,
        list(match.steps[:v]) + list(parent.steps[f:]),
        parent.final_state,
        parent.termination_cause,
    )
    return a, b


def crossover(
    population: list[Individual],
    ranks,
    crowding,
    config: SearchConfig,
    rng,
    id_a: str,
    id_b: str,
) -> tuple[Episode, Episode] | None:
    """Abstract-state-matched one-point crossover.

    A tournament picks the parent and a uniform crossover step f; the
    population is scanned in random order for an episode holding a step whose
    abstract key and recorded action both equal the parent's at f (key
    equality alone does not pin down the greedy action once Q-values are
    bucketed, so the action is matched explicitly). The trivial self-match
    (same episode, same index) is skipped. After ``match_retries`` failed
    (parent, point) draws the operator reports no-match for this generation.
    """
    for _ in range(config.match_retries):
        p_idx = tournament_select(ranks, crowding, config.tournament_k, rng)
        parent = population[p_idx]
        f = int(rng.integers(len(parent.episode)))
        key = parent.step_keys[f]
        action = parent.episode.steps[f].action
        for j in rng.permutation(len(population)):
            cand = population[int(j)]
            positions = [
                v
                for v in range(len(cand.episode))
                if cand.step_keys[v] == key
                and cand.episode.steps[v].action == action
                and not (int(j) == p_idx and v == f)
            ]
            if positions:
                v = positions[int(rng.integers(len(positions)))]
                return splice_episodes(
                    parent.episode, f, cand.episode, v, id_a, id_b
                )
    return None


def mutate(
    episode: Episode,
    policy,
    env: Environment,
    rng,
    magnitudes=None,
    episode_id="mutant",
) -> Episode:
    """Perturb one uniformly chosen state and execute the tail for real.

    The prefix before the mutation point is kept bitwise; from the perturbed
    state onward the environment runs under the greedy policy until it
    terminates, so the resulting fault label is observed, not predicted. The
    simulator's step counter is seeded with the prefix length so the overall
    episode still respects the step limit.
    """
    c = int(rng.integers(len(episode)))
    perturbed = env.perturb_state(episode.steps[c].state, magnitudes, rng)
    env.set_state(perturbed, steps_elapsed=c)
    steps = list(episode.steps[:c])
    state = env.state
    while True:
        action = int(policy(state))
        outcome = env.step(action)
        steps.append(Step(state, action, outcome.reward))
        state = outcome.next_state
        if outcome.terminated:
            return Episode.from_steps(
                episode_id,
                EpisodeOrigin.MUTATED,
                env.kind(),
                steps,
                state,
                outcome.termination_cause,
            )


@dataclass
class ArchiveEntry:
    individual: Individual
    satisfied: tuple[str, ...]


class Archive:
    """Append-only store of individuals satisfying at least one objective."""

    def __init__(self):
        self._entries: dict[str, ArchiveEntry] = {}

    def update(self, individuals) -> int:
        added = 0
        for ind in individuals:
            if ind.satisfied and ind.episode.episode_id not in self._entries:
                self._entries[ind.episode.episode_id] = ArchiveEntry(
                    ind, ind.satisfied
                )
                added += 1
        return added

    def __len__(self):
        return len(self._entries)

    def entries(self) -> list[ArchiveEntry]:
        return list(self._entries.values())

    def episodes(self) -> list[Episode]:
        return [e.individual.episode for e in self._entries.values()]

    def covered_objectives(self) -> set[str]:
        covered: set[str] = set()
        for entry in self._entries.values():
            covered.update(entry.satisfied)
        return covered

    def all_satisfied(self) -> bool:
        return set(OBJECTIVES) <= self.covered_objectives()


@dataclass
class SearchResult:
    archive: Archive
    mutants: list[Individual]
    offspring: list[Individual]  # all crossover offspring, never executed
    generations_run: int
    archive_sizes: list[int]
    mutations_executed: int
    crossovers_applied: int
    crossover_no_match: int
    population_size: int
    all_satisfied: bool

    def metrics(self) -> dict:
        return {
            "generations_run": self.generations_run,
            "archive_sizes": self.archive_sizes,
            "archive_final": self.archive_sizes[-1] if self.archive_sizes else 0,
            "mutations_executed": self.mutations_executed,
            "crossovers_applied": self.crossovers_applied,
            "crossover_no_match": self.crossover_no_match,
            "population_size": self.population_size,
            "all_satisfied": self.all_satisfied,
        }


def select_next_population(
    population: list[Individual], offspring: list[Individual], size: int
) -> list[Individual]:
    """Elitist merge: best MOSA ranks from parents plus offspring, crowding ties."""
    pool = population + offspring
    ranks, crowding = mosa_rank([ind.fitness for ind in pool])
    order = np.lexsort((np.arange(len(pool)), -crowding, ranks))
    return [pool[int(i)] for i in order[:size]]


def run_search(
    initial_episodes: list[Episode],
    ctx: SearchContext,
    config: SearchConfig,
) -> SearchResult:
    """One full genetic-search run over a provided initial population.

    Per generation: with probability ``crossover_rate`` create two spliced
    offspring (not executed); always mutate one tournament-selected individual
    drawn from the population plus the fresh offspring (executed, counted
    against the budget); update the archive; select the next population
    elitist-style. Stops early once every objective has a satisfying archive
    entry.
    """
    if not initial_episodes:
        raise ValueError("initial population must be nonempty")
    rng = check_rng(config.seed)
    policy = greedy_policy(ctx.net)
    population = [ctx.evaluate(e) for e in initial_episodes]
    size = len(population)

    archive = Archive()
    archive.update(population)
    archive_sizes = [len(archive)]
    mutants: list[Individual] = []
    all_offspring: list[Individual] = []
    crossovers = no_match = 0

    gen = 0
    while not archive.all_satisfied() and gen < config.generations:
        ranks, crowding = mosa_rank([ind.fitness for ind in population])
        offspring: list[Individual] = []

        if rng.uniform() < config.crossover_rate:
            pair = crossover(
                population,
                ranks,
                crowding,
                config,
                rng,
                id_a=f"gen{gen:03d}-xa",
                id_b=f"gen{gen:03d}-xb",
            )
            if pair is None:
                no_match += 1
            else:
                crossovers += 1
                evaluated = [ctx.evaluate(e) for e in pair]
                offspring.extend(evaluated)
                all_offspring.extend(evaluated)

        # Mutation candidate comes from the current population plus the fresh
        # offspring; the mutated episode is executed for real.
        pool = population + offspring
        pool_ranks, pool_crowding = mosa_rank([ind.fitness for ind in pool])
        m_idx = tournament_select(pool_ranks, pool_crowding, config.tournament_k, rng)
        mutated = mutate(
            pool[m_idx].episode,
            policy,
            ctx.env,
            rng,
            config.mutation_magnitudes,
            episode_id=f"gen{gen:03d}-m",
        )
        mutant = ctx.evaluate(mutated)
        mutants.append(mutant)
        new_individuals = offspring + [mutant]

        archive.update(new_individuals)
        archive_sizes.append(len(archive))
        population = select_next_population(population, new_individuals, size)
        gen += 1

    return SearchResult(
        archive=archive,
        mutants=mutants,
        offspring=all_offspring,
        generations_run=gen,
        archive_sizes=archive_sizes,
        mutations_executed=len(mutants),
        crossovers_applied=crossovers,
        crossover_no_match=no_match,
        population_size=size,
        all_satisfied=archive.all_satisfied(),
    )
