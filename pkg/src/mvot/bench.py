"""End-to-end benchmark: ROC over the retrieval threshold, TPR/TNR tables,
score histograms and per-phase timings.

A trial enrolls one synthetic identity with fresh chaff, then runs one
genuine query against it. Imposter trials are spread round-robin over the
same enrollments. Every trial owns an rng stream derived from the config
seed, and trial ``j`` uses the same stream in every grid configuration, so
configurations are compared on common random numbers.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import cosine_similarity
from .sources import Population, PopulationSpec, sample_population
from .trials import map_trials, trial_rngs
from .vault import (ProtocolParams, check_combinations, enroll, match_commitments,
                    rank_candidates, verify)

SCHEMA_VERSION = 1
MIN_TRIALS = 100
HIST_BIN_WIDTH = 0.05
IMPOSTER_KINDS = ("unrelated", "imposter")


class BenchError(ValueError):
    pass


@dataclass
class BenchConfig:
    population: PopulationSpec
    params_grid: list[ProtocolParams]
    tr_sweep: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    genuine_trials: int = 100
    imposter_trials: int = 100
    rng_seed: int = 0
    # "unrelated": faces from outside the population (the TNR setting);
    # "imposter": other population members at imposter-band cosine
    imposter_kind: str = "unrelated"
    table_tr: int = 3
    histogram_samples: int = 1000
    timing_repetitions: int = 10
    threads: int = 1

    def validate(self, min_trials: int = MIN_TRIALS) -> None:
        if not self.params_grid:
            raise BenchError("params_grid is empty")
        if self.genuine_trials < min_trials or self.imposter_trials < min_trials:
            raise BenchError(f"reported rates need >= {min_trials} genuine and imposter trials")
        if not self.tr_sweep or min(self.tr_sweep) < 1:
            raise BenchError("tr_sweep must hold positive thresholds")
        if self.imposter_kind not in IMPOSTER_KINDS:
            raise BenchError(f"imposter_kind must be one of {IMPOSTER_KINDS}")
        for p in self.params_grid:
            if p.dim != self.population.dim or p.n != self.population.n_channels:
                raise BenchError("params dim/n must match the population")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["population"] = self.population.to_dict()
        d["params_grid"] = [p.to_dict() for p in self.params_grid]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        d = dict(d)
        d["population"] = PopulationSpec.from_dict(d.get("population", {}))
        d["params_grid"] = [ProtocolParams.from_dict(p) for p in d.get("params_grid", [])]
        return cls(**d)


def default_grid(dim: int = 512, n: int = 5, tr: int = 3) -> list[ProtocolParams]:
    """(m=2000, k=5), (m=4000, k=5), (m=4000, k=4)."""
    return [ProtocolParams(gamma=40, n=n, m=m, k=k, tr=tr, dim=dim)
            for m, k in ((2000, 5), (4000, 5), (4000, 4))]


@dataclass
class BenchReport:
    seed: int
    config: dict
    roc: list[dict] = field(default_factory=list)
    table: list[dict] = field(default_factory=list)
    histograms: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise BenchError(f"unsupported report schema {d.get('schema_version')}")
        return cls(**d)

    def without_timing(self) -> dict:
        """Report contents minus wall-clock fields (those vary run to run)."""
        d = self.to_dict()
        d.pop("timing")
        for section in ("roc", "table"):
            for row in d[section]:
                row.pop("timing", None)
        return d


def params_label(p: ProtocolParams) -> str:
    return f"n{p.n}_m{p.m}_k{p.k}"


def trapezoid_auc(points) -> float:
    """Area under (fpr, tpr) points closed with (0, 0) and (1, 1)."""
    pts = [(0.0, 0.0)] + sorted(points) + [(1.0, 1.0)]
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


class _Phases:
    def __init__(self):
        self.totals = {"simulate": 0.0, "match": 0.0, "hash": 0.0}

    def add(self, other: dict):
        for k, v in other.items():
            self.totals[k] += v

    def as_dict(self) -> dict:
        d = dict(self.totals)
        d["total"] = sum(self.totals.values())
        return d


def _trial_outcomes(config: BenchConfig, population: Population, params: ProtocolParams,
                    thresholds: list[int]):
    """Per-threshold accept counts for genuine and imposter trials."""
    max_tr = max(thresholds)
    check_combinations(params.n, params.k, max_tr, params.combination_budget)
    if max_tr > params.m + 1:
        raise BenchError(f"tr {max_tr} exceeds vault size {params.m + 1}")
    seed = config.rng_seed
    g_rngs = trial_rngs(seed, config.genuine_trials, stream=10)
    i_rngs = trial_rngs(seed, config.imposter_trials, stream=11)
    ids = population.spec.num_identities
    per_enroll = [list(range(j, config.imposter_trials, config.genuine_trials))
                  for j in range(config.genuine_trials)]

    def accepts_at(helper, query, clock):
        t0 = time.perf_counter()
        cands, _ = rank_candidates(helper, query, max_tr)
        t1 = time.perf_counter()
        out = [match_commitments(helper, [c[:tr] for c in cands])[0] is not None
               for tr in thresholds]
        clock["match"] += t1 - t0
        clock["hash"] += time.perf_counter() - t1
        return out

    def one(j):
        rng = g_rngs[j]
        clock = {"simulate": 0.0, "match": 0.0, "hash": 0.0}
        t0 = time.perf_counter()
        identity = j % ids
        helper = enroll(population.template(identity), population.chaff_source(), params, rng)
        query = population.genuine_query(identity, rng)
        clock["simulate"] += time.perf_counter() - t0
        genuine = accepts_at(helper, query, clock)
        imposter = []
        for i in per_enroll[j]:
            t0 = time.perf_counter()
            irng = i_rngs[i]
            if config.imposter_kind == "unrelated":
                q = population.unrelated_query(irng)
            else:
                q = population.imposter_query(identity, irng)
            clock["simulate"] += time.perf_counter() - t0
            imposter.append(accepts_at(helper, q, clock))
        return genuine, imposter, clock

    results = map_trials(one, range(config.genuine_trials), config.threads)
    phases = _Phases()
    g_counts = np.zeros(len(thresholds), dtype=int)
    i_counts = np.zeros(len(thresholds), dtype=int)
    for genuine, imposter, clock in results:
        g_counts += np.asarray(genuine, dtype=int)
        for row in imposter:
            i_counts += np.asarray(row, dtype=int)
        phases.add(clock)
    return g_counts, i_counts, phases.as_dict()


def run_roc(config: BenchConfig, params: ProtocolParams | None = None,
            population: Population | None = None) -> BenchReport:
    """One (FPR, TPR) point per retrieval threshold in ``config.tr_sweep``."""
    config.validate()
    params = params or config.params_grid[0]
    population = population or sample_population(config.population)
    sweep = sorted(set(config.tr_sweep))
    g, i, timing = _trial_outcomes(config, population, params, sweep)
    points = []
    for tr, ga, ia in zip(sweep, g, i):
        points.append({
            "tr": tr,
            "tpr": float(ga) / config.genuine_trials,
            "fpr": float(ia) / config.imposter_trials,
            "genuine_accepts": int(ga),
            "imposter_accepts": int(ia),
        })
    points.sort(key=lambda p: (p["fpr"], p["tpr"], p["tr"]))
    result = {
        "label": params_label(params),
        "params": params.to_dict(),
        "points": points,
        "auc": trapezoid_auc([(p["fpr"], p["tpr"]) for p in points]),
        "genuine_trials": config.genuine_trials,
        "imposter_trials": config.imposter_trials,
        "imposter_kind": config.imposter_kind,
        "seed": config.rng_seed,
        "timing": timing,
    }
    return BenchReport(seed=config.rng_seed, config=config.to_dict(), roc=[result])


def run_table(config: BenchConfig, population: Population | None = None) -> BenchReport:
    """TPR/TNR per grid configuration at ``config.table_tr``."""
    config.validate()
    population = population or sample_population(config.population)
    rows = []
    for params in config.params_grid:
        g, i, timing = _trial_outcomes(config, population, params, [config.table_tr])
        fpr = float(i[0]) / config.imposter_trials
        rows.append({
            "label": params_label(params),
            "m": params.m,
            "k": params.k,
            "n": params.n,
            "tr": config.table_tr,
            "tpr": float(g[0]) / config.genuine_trials,
            "tnr": 1.0 - fpr,
            "fpr": fpr,
            "genuine_accepts": int(g[0]),
            "false_accepts": int(i[0]),
            "genuine_trials": config.genuine_trials,
            "imposter_trials": config.imposter_trials,
            "imposter_kind": config.imposter_kind,
            "seed": config.rng_seed,
            "timing": timing,
        })
    return BenchReport(seed=config.rng_seed, config=config.to_dict(), table=rows)


def histogram_edges() -> np.ndarray:
    return np.round(np.linspace(-1.0, 1.0, int(round(2.0 / HIST_BIN_WIDTH)) + 1), 10)


def score_histograms(population: Population, samples: int, seed: int = 0) -> dict:
    """Genuine, same-population imposter and chaff cosine histograms over [-1, 1].

    Chaff scores compare a genuine capture with a fresh chaff vector.
    """
    if samples < 1000:
        raise BenchError(f"histograms need >= 1000 samples, got {samples}")
    rng = np.random.default_rng([seed, 20])
    ids, n = population.spec.num_identities, population.n_channels
    chaff = population.chaff_source()
    scores = {"genuine": [], "imposter": [], "chaff": []}
    for _ in range(samples):
        identity = int(rng.integers(ids))
        ch = int(rng.integers(n))
        tmpl = population.latents[identity, ch]
        g = population.genuine_query(identity, rng)[ch]
        scores["genuine"].append(cosine_similarity(g, tmpl))
        scores["imposter"].append(cosine_similarity(population.imposter_query(identity, rng)[ch], tmpl))
        scores["chaff"].append(cosine_similarity(g, chaff.draw(ch, 1, rng)[0]))
    edges = histogram_edges()
    out = {"bin_edges": edges.tolist(), "samples": samples, "seed": seed}
    for name, vals in scores.items():
        counts, _ = np.histogram(np.clip(vals, -1.0, 1.0), bins=edges)
        out[name] = counts.tolist()
    return out


def band_mass(hist: dict, name: str, low: float, high: float) -> float:
    """Fraction of ``name`` counts in bins lying inside [low, high]."""
    edges = np.asarray(hist["bin_edges"])
    counts = np.asarray(hist[name])
    inside = (edges[:-1] >= low - 1e-9) & (edges[1:] <= high + 1e-9)
    return float(counts[inside].sum() / counts.sum())


# larger than the last-level cache of common server and desktop parts
_EVICT_BYTES = 128 * 2**20
_evict_buffer: np.ndarray | None = None


def _evict_caches() -> None:
    global _evict_buffer
    if _evict_buffer is None:
        _evict_buffer = np.zeros(_EVICT_BYTES // 8)
    _evict_buffer += 1.0


def timing_report(params: ProtocolParams, repetitions: int,
                  population: Population | None = None, seed: int = 0,
                  cold_cache: bool = True) -> dict:
    """Mean and p95 latency per verification phase, run sequentially.

    ``hash`` times a full enumeration for a rejecting query, i.e.
    C(n,k) * tr^k hashes. With ``cold_cache`` the CPU caches are flushed
    before the match and verify phases, as for a helper that was just
    loaded; otherwise small vault sets stay cache-resident across
    repetitions and look faster per entry than large ones.
    """
    if repetitions < 10:
        raise BenchError(f"timing needs >= 10 repetitions, got {repetitions}")
    population = population or sample_population(
        PopulationSpec(num_identities=max(2, repetitions), dim=params.dim,
                       n_channels=params.n, rng_seed=seed))
    rng = np.random.default_rng([seed, 30])
    helper = enroll(population.template(0), population.chaff_source(), params, rng)
    samples = {"simulate": [], "match": [], "hash": [], "verify": []}
    for _ in range(repetitions):
        t0 = time.perf_counter()
        query = population.unrelated_query(rng)
        t1 = time.perf_counter()
        if cold_cache:
            _evict_caches()
        t1m = time.perf_counter()
        cands, _ = rank_candidates(helper, query, params.tr)
        t2 = time.perf_counter()
        match_commitments(helper, cands)
        t3 = time.perf_counter()
        if cold_cache:
            _evict_caches()
        t3v = time.perf_counter()
        verify(helper, query, params.tr)
        t4 = time.perf_counter()
        samples["simulate"].append(t1 - t0)
        samples["match"].append(t2 - t1m)
        samples["hash"].append(t3 - t2)
        samples["verify"].append(t4 - t3v)
    out = {}
    for phase, vals in samples.items():
        arr = np.asarray(vals)
        out[phase] = {"mean": float(arr.mean()), "p95": float(np.percentile(arr, 95)),
                      "repetitions": repetitions}
    out["params"] = params.to_dict()
    out["cold_cache"] = cold_cache
    out["cosine_evaluations"] = params.n * (params.m + 1)
    return out


def run_bench(config: BenchConfig) -> BenchReport:
    """ROC on the first grid entry, the full table, histograms and timings."""
    config.validate()
    population = sample_population(config.population)
    report = run_roc(config, population=population)
    report.table = run_table(config, population=population).table
    report.histograms = score_histograms(population, config.histogram_samples, config.rng_seed)
    report.timing = timing_report(config.params_grid[0], config.timing_repetitions,
                                  population, config.rng_seed)
    return report


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_report(report: BenchReport, path, fmt: str = "json") -> list[Path]:
    """Write ``report`` as one JSON file, or as CSV plot data into directory ``path``.

    CSV output: roc.csv (fpr,tpr,tr), table.csv, timing.csv and
    hist_<kind>.csv, each only when the section is present.
    """
    path = Path(path)
    if fmt == "json":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return [path]
    if fmt != "csv":
        raise BenchError(f"unknown report format {fmt!r}")
    path.mkdir(parents=True, exist_ok=True)
    written = []
    if report.roc:
        out = path / "roc.csv"
        _write_csv(out, ["fpr", "tpr", "tr"],
                   ([p["fpr"], p["tpr"], p["tr"]] for p in report.roc[0]["points"]))
        written.append(out)
    if report.table:
        cols = ["label", "n", "m", "k", "tr", "tpr", "tnr", "fpr", "genuine_trials",
                "imposter_trials", "false_accepts", "seed"]
        out = path / "table.csv"
        _write_csv(out, cols, ([row[c] for c in cols] for row in report.table))
        written.append(out)
    if report.timing:
        out = path / "timing.csv"
        phases = [k for k, v in report.timing.items() if isinstance(v, dict) and "mean" in v]
        _write_csv(out, ["phase", "mean_s", "p95_s", "repetitions"],
                   ([ph, report.timing[ph]["mean"], report.timing[ph]["p95"],
                     report.timing[ph]["repetitions"]] for ph in phases))
        written.append(out)
    if report.histograms:
        edges = report.histograms["bin_edges"]
        for kind in ("genuine", "imposter", "chaff"):
            out = path / f"hist_{kind}.csv"
            _write_csv(out, ["bin_low", "bin_high", "count"],
                       ([lo, hi, c] for lo, hi, c in zip(edges, edges[1:], report.histograms[kind])))
            written.append(out)
    return written


def load_report(path) -> BenchReport:
    return BenchReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
