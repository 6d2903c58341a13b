"""Attack-side numbers: work factor, brute force, false-accept and linkability estimates."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .embedding import hash_entry_tuple
from .sources import ChannelSet, Population
from .trials import map_trials, trial_rngs
from .vault import HelperData, ProtocolParams, enroll, enroll_traced, verify

DEFAULT_ATTACK_BUDGET = 2**24


class AttackBudgetError(RuntimeError):
    """The requested attack exceeds the configured hash budget."""


@dataclass(frozen=True)
class WorkFactorReport:
    paper_bits: float       # log2(m^n)
    refined_bits: float     # log2(C(n,k) * m^k)
    attack_bits: float      # log2(C(n,k) * (m+1)^k), what brute force enumerates
    total_candidates: int
    expected_tries: float

    def to_record(self, params: ProtocolParams) -> dict:
        return {"operation": "work_factor", "params": params.to_dict(), **asdict(self)}


def work_factor(params: ProtocolParams) -> WorkFactorReport:
    n, m, k = params.n, params.m, params.k
    total = math.comb(n, k) * (m + 1) ** k
    return WorkFactorReport(
        paper_bits=n * math.log2(m),
        refined_bits=math.log2(math.comb(n, k)) + k * math.log2(m),
        attack_bits=math.log2(math.comb(n, k)) + k * math.log2(m + 1),
        total_candidates=total,
        expected_tries=(total + 1) / 2,
    )


@dataclass(frozen=True)
class AttackResult:
    tries_to_success: int
    succeeded: bool
    wall_time: float
    total_candidates: int

    def to_record(self, seed=None) -> dict:
        return {"operation": "brute_force_attack", "seed": seed, **asdict(self)}


def brute_force_attack(helper: HelperData, rng: np.random.Generator | None = None,
                       budget: int = DEFAULT_ATTACK_BUDGET) -> AttackResult:
    """Hash candidate tuples in uniformly random order until one matches a commitment.

    A candidate is a (k-subset, one entry per vault in it) pair. Refuses to
    start when the candidate space exceeds ``budget``.
    """
    p = helper.params
    wf = work_factor(p)
    if wf.total_candidates > budget:
        raise AttackBudgetError(
            f"brute force needs up to {wf.total_candidates:.3g} hashes "
            f"({wf.attack_bits:.1f} bits; m^n bound {wf.paper_bits:.2f} bits), "
            f"over the budget of 2^{math.log2(budget):.1f}")
    rng = rng if rng is not None else np.random.default_rng()
    subsets = list(helper.commitments)
    rows = p.m + 1
    per_subset = rows**p.k
    dtype = np.int32 if wf.total_candidates < 2**31 else np.int64
    order = rng.permutation(np.arange(wf.total_candidates, dtype=dtype))
    start = time.perf_counter()
    for tries, c in enumerate(order, start=1):
        s_idx, rem = divmod(int(c), per_subset)
        subset = subsets[s_idx]
        picks = []
        for _ in range(p.k):
            rem, j = divmod(rem, rows)
            picks.append(j)
        entries = [helper.vaults[v].entry_bytes(j) for v, j in zip(subset, picks)]
        if hash_entry_tuple(subset, entries, helper.salt) == helper.commitments[subset]:
            return AttackResult(tries, True, time.perf_counter() - start, wf.total_candidates)
    return AttackResult(len(order), False, time.perf_counter() - start, wf.total_candidates)


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(successes, trials).proportion_ci(confidence, method="wilson")
    return float(ci.low), float(ci.high)


def far_bound(params: ProtocolParams, tr: int | None = None) -> float:
    """Accept probability for a query that ranks vault entries uniformly at random."""
    tr = params.tr if tr is None else tr
    per_vault = min(1.0, tr / (params.m + 1))
    return min(1.0, math.comb(params.n, params.k) * per_vault**params.k)


@dataclass(frozen=True)
class FarEstimate:
    accepts: int
    trials: int
    estimate: float
    ci_low: float
    ci_high: float
    analytic_bound: float
    tr: int
    seed: int
    query_kind: str

    def to_record(self, params: ProtocolParams) -> dict:
        return {"operation": "far_attack_probability", "params": params.to_dict(), **asdict(self)}


def far_attack_probability(params: ProtocolParams, population: Population, trials: int,
                           tr: int | None = None, seed: int = 0, query_kind: str = "unrelated",
                           identity: int = 0, threads: int | None = 1) -> FarEstimate:
    """Monte-Carlo false-accept rate against one fixed enrollment.

    ``query_kind`` is ``"unrelated"`` (fresh faces, exchangeable with chaff)
    or ``"imposter"`` (other population members at imposter-band cosine).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    tr = params.tr if tr is None else tr
    rng = np.random.default_rng([seed, 1])
    helper = enroll(population.template(identity), population.chaff_source(seed), params, rng)

    def one(trial_rng):
        if query_kind == "unrelated":
            q = population.unrelated_query(trial_rng)
        elif query_kind == "imposter":
            q = population.imposter_query(identity, trial_rng)
        else:
            raise ValueError(f"unknown query kind {query_kind!r}")
        return verify(helper, q, tr).accepted

    accepts = sum(map_trials(one, trial_rngs(seed, trials, stream=2), threads))
    lo, hi = wilson_interval(accepts, trials)
    return FarEstimate(accepts, trials, accepts / trials, lo, hi, far_bound(params, tr), tr,
                       seed, query_kind)


def rank_enroll_fn(params: ProtocolParams, population: Population, obfuscation: bool = True,
                   template_scale: float = 1.0) -> Callable:
    """Enrollment callable for ``chaff_rank_test``; may plant a norm defect."""

    def fn(rng: np.random.Generator):
        identity = int(rng.integers(population.spec.num_identities))
        tmpl = population.template(identity)
        if template_scale != 1.0:
            tmpl = ChannelSet.of([template_scale * np.asarray(c, dtype=np.float64) for c in tmpl])
        return enroll_traced(tmpl, population.chaff_source(int(rng.integers(2**63))), params,
                             rng, obfuscation=obfuscation)

    return fn


def _randomized_rank(stat: np.ndarray, pos: int, rng: np.random.Generator) -> float:
    """Position of ``stat[pos]`` as a uniform(0, 1) draw under exchangeability."""
    t = stat[pos]
    less = np.count_nonzero(stat < t)
    equal = np.count_nonzero(stat == t)
    return (less + rng.uniform() * equal) / stat.shape[0]


def _rank_statistics(entries: np.ndarray) -> dict[str, np.ndarray]:
    x = np.asarray(entries, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    unit = x / norms[:, None]
    mean_cos = (unit @ unit.sum(axis=0) - 1.0) / (x.shape[0] - 1)
    return {"norm": norms, "mean_cos": mean_cos}


@dataclass(frozen=True)
class RankTestResult:
    p_value: float
    per_statistic: dict
    decile_counts: dict
    samples: int

    def to_record(self, seed=None) -> dict:
        return {"operation": "chaff_rank_test", "seed": seed, **asdict(self)}


def chaff_rank_test(enroll_fn: Callable, trials: int, seed: int = 0,
                    threads: int | None = 1) -> RankTestResult:
    """Chi-square test that the template's rank among vault entries is uniform.

    Statistics: entry norm and mean cosine to the other entries. The
    reported p-value is Bonferroni-combined over both.
    """
    if trials < 100:
        raise ValueError(f"rank test needs >= 100 trials, got {trials}")

    def one(rng):
        helper, positions = enroll_fn(rng)
        out = {"norm": [], "mean_cos": []}
        for vault, pos in zip(helper.vaults, positions):
            if len(vault) < 2:
                raise ValueError("rank undefined for a vault without chaff")
            for name, stat in _rank_statistics(vault.entries).items():
                out[name].append(_randomized_rank(stat, pos, rng))
        return out

    results = map_trials(one, trial_rngs(seed, trials, stream=3), threads)
    per_stat, counts = {}, {}
    for name in ("norm", "mean_cos"):
        u = np.concatenate([r[name] for r in results])
        hist = np.bincount(np.minimum((u * 10).astype(int), 9), minlength=10)
        per_stat[name] = float(stats.chisquare(hist).pvalue)
        counts[name] = hist.tolist()
    p = min(1.0, 2 * min(per_stat.values()))
    return RankTestResult(p, per_stat, counts, sum(len(r["norm"]) for r in results))


def linkability_advantage(population: Population, trials: int, seed: int = 0,
                          channels: tuple[int, int] = (0, 1)) -> float:
    """Advantage of a cosine linker across two channels, in [0, 1].

    Each trial draws two fresh identities A and B from the population's
    generative process, shows A's first-channel vector and both
    second-channel vectors, and the linker picks the higher cosine.
    Advantage = |2 * accuracy - 1|.
    """
    if population.n_channels < 2:
        raise ValueError("linkability needs at least two channels")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng([seed, 4])
    c1, c2 = channels
    a = population.fresh_latents(rng, trials)
    b = population.fresh_latents(rng, trials)
    x = a[:, c1]
    same = np.einsum("ij,ij->i", x, a[:, c2])
    other = np.einsum("ij,ij->i", x, b[:, c2])
    correct = np.where(same == other, rng.uniform(size=trials) < 0.5, same > other)
    return float(abs(2 * correct.mean() - 1))


def template_rank(helper: HelperData, positions, query) -> list[int]:
    """Rank (0 = best) of the hidden template in each vault for ``query``."""
    out = []
    for vault, pos, q in zip(helper.vaults, positions, query):
        s = vault.scores(q)
        order = np.argsort(-s, kind="stable")
        out.append(int(np.nonzero(order == pos)[0][0]))
    return out
