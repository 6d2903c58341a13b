"""Multi-vault enrollment and verification.

Each of the ``n`` channels gets a vault of ``m + 1`` entries: the enrolled
sub-template hidden at a random position among ``m`` chaff vectors. Every
entry (template and chaff alike) is rescaled by a random positive scalar and
nudged by a small random vector before storage, so stored norms and
directions carry no marker of which entry is real.

For every ``k``-subset of vaults the helper stores a salted SHA-256 over the
stored bytes of the sub-templates in those vaults. Verification retrieves
the ``tr`` entries closest to each query channel and hashes every tuple of
the Cartesian product over a subset's vaults. Any matching subset accepts.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .embedding import FLOAT_DTYPE, cosine_scores, hash_entry_tuple, tuple_hasher
from .sources import ChaffSource, ChannelSet, SourceError

FORMAT_VERSION = 1
HASH_VERSION = 1
SALT_SIZE = 16
DEFAULT_COMBINATION_BUDGET = 10**6
DEFAULT_MAX_M = 10**7


class ParamsError(ValueError):
    pass


class EnrollError(ValueError):
    pass


class VerifyError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolParams:
    gamma: int
    n: int = 5
    m: int = 2000
    k: int = 5
    tr: int = 3
    dim: int = 512
    scalar_range: tuple[float, float] = (0.5, 2.0)
    noise_delta: float = 0.05
    hash_version: int = HASH_VERSION
    combination_budget: int = DEFAULT_COMBINATION_BUDGET

    def __post_init__(self):
        object.__setattr__(self, "scalar_range", tuple(float(x) for x in self.scalar_range))
        if self.gamma < 1:
            raise ParamsError(f"gamma must be >= 1, got {self.gamma}")
        if self.n < 1:
            raise ParamsError(f"n must be >= 1, got {self.n}")
        if not 1 <= self.k <= self.n:
            raise ParamsError(f"k must satisfy 1 <= k <= n={self.n}, got {self.k}")
        if self.m < 1:
            raise ParamsError(f"m must be >= 1, got {self.m}")
        if self.dim < 2:
            raise ParamsError(f"dim must be >= 2, got {self.dim}")
        if not 1 <= self.tr <= self.m + 1:
            raise ParamsError(f"tr must satisfy 1 <= tr <= m+1={self.m + 1}, got {self.tr}")
        r_min, r_max = self.scalar_range
        if not 0 < r_min <= r_max:
            raise ParamsError(f"scalar_range must satisfy 0 < r_min <= r_max, got {self.scalar_range}")
        if self.noise_delta < 0:
            raise ParamsError("noise_delta must be >= 0")
        if self.hash_version != HASH_VERSION:
            raise ParamsError(f"unsupported hash_version {self.hash_version}")
        if self.m**self.k < 2**self.gamma:
            raise ParamsError(
                f"k*log2(m) = {self.k * math.log2(self.m):.2f} < gamma = {self.gamma}; "
                f"need m >= {min_chaff(self.gamma, self.k)}")
        check_combinations(self.n, self.k, self.tr, self.combination_budget)

    @property
    def subsets(self) -> list[tuple[int, ...]]:
        return list(itertools.combinations(range(self.n), self.k))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scalar_range"] = list(self.scalar_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolParams":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ParamsError(f"unknown params fields: {sorted(unknown)}")
        return cls(**d)


def check_combinations(n: int, k: int, tr: int, budget: int) -> int:
    total = math.comb(n, k) * tr**k
    if total > budget:
        raise ParamsError(
            f"C({n},{k}) * {tr}^{k} = {total} candidate hashes exceeds budget {budget}")
    return total


def min_chaff(gamma: int, k: int) -> int:
    """Smallest m with m**k >= 2**gamma (i.e. k*log2(m) >= gamma)."""
    target = 2**gamma
    m = max(2, math.ceil(2 ** (gamma / k)))
    while m**k < target:
        m += 1
    while m > 2 and (m - 1) ** k >= target:
        m -= 1
    return m


def keygen(gamma: int, n: int = 5, k: int | None = None, dim: int = 512,
           m: int | None = None, max_m: int = DEFAULT_MAX_M, **kwargs) -> ProtocolParams:
    """Choose (or validate) the chaff count for security level ``gamma``."""
    if gamma < 1:
        raise ParamsError(f"gamma must be >= 1, got {gamma}")
    k = n if k is None else k
    if not 1 <= k <= n:
        raise ParamsError(f"k must satisfy 1 <= k <= n={n}, got {k}")
    if m is None:
        m = min_chaff(gamma, k)
        if m > max_m:
            raise ParamsError(f"gamma={gamma} with k={k} needs m={m} > max_m={max_m}")
    if "tr" in kwargs:
        kwargs["tr"] = min(kwargs["tr"], m + 1)
    else:
        kwargs["tr"] = min(3, m + 1)
    return ProtocolParams(gamma=gamma, n=n, m=m, k=k, dim=dim, **kwargs)


@dataclass(frozen=True)
class Vault:
    entries: np.ndarray  # (m + 1, dim) little-endian float32, read-only
    channel_index: int
    norms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        e = np.ascontiguousarray(self.entries, dtype=FLOAT_DTYPE)
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)
        object.__setattr__(self, "norms", np.linalg.norm(e, axis=1))

    def scores(self, query) -> np.ndarray:
        return cosine_scores(self.entries, query, self.norms)

    def entry_bytes(self, j: int) -> memoryview:
        return self.entries[j].data

    def __len__(self):
        return self.entries.shape[0]


@dataclass(frozen=True)
class HelperData:
    params: ProtocolParams
    vaults: tuple[Vault, ...]
    salt: bytes
    commitments: dict[tuple[int, ...], bytes]
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        p = self.params
        if len(self.vaults) != p.n:
            raise EnrollError(f"expected {p.n} vaults, got {len(self.vaults)}")
        for v in self.vaults:
            if v.entries.shape != (p.m + 1, p.dim):
                raise EnrollError(f"vault {v.channel_index} has shape {v.entries.shape}, "
                                  f"expected {(p.m + 1, p.dim)}")
        if len(self.salt) != SALT_SIZE:
            raise EnrollError(f"salt must be {SALT_SIZE} bytes")
        if len(self.commitments) != math.comb(p.n, p.k):
            raise EnrollError(f"expected C({p.n},{p.k}) commitments, got {len(self.commitments)}")


def obfuscate(entries: np.ndarray, params: ProtocolParams, rng: np.random.Generator) -> np.ndarray:
    """Per row: x -> r * (x + eps), r ~ U[r_min, r_max], |eps| = delta*|x|*U[0,1].

    The noise is added before scaling, so the direction moves by at most
    asin(delta) whatever r is.
    """
    x = np.array(entries, dtype=np.float32)
    rows = x.shape[0]
    r_min, r_max = params.scalar_range
    r = rng.uniform(r_min, r_max, size=(rows, 1)).astype(np.float32)
    if params.noise_delta > 0:
        direction = rng.standard_normal(x.shape, dtype=np.float32)
        scale = (params.noise_delta * rng.uniform(size=(rows, 1))
                 * np.linalg.norm(x, axis=1, keepdims=True)
                 / np.linalg.norm(direction, axis=1, keepdims=True))
        x += scale.astype(np.float32) * direction
    x *= r
    return x.astype(FLOAT_DTYPE, copy=False)


def _commit(vaults, positions, salt, subsets) -> dict[tuple[int, ...], bytes]:
    return {
        s: hash_entry_tuple(s, [vaults[i].entry_bytes(positions[i]) for i in s], salt)
        for s in subsets
    }


def _check_query(params: ProtocolParams, channels: ChannelSet, what: str):
    if len(channels) != params.n:
        raise EnrollError(f"{what} has {len(channels)} channels, params need n={params.n}")
    if channels.dim != params.dim:
        raise EnrollError(f"{what} has dimension {channels.dim}, params need dim={params.dim}")


def enroll_traced(template: ChannelSet, chaff: ChaffSource, params: ProtocolParams,
                  rng: np.random.Generator | None = None,
                  obfuscation: bool = True) -> tuple[HelperData, list[int]]:
    """Enroll and also return the secret template positions.

    The positions are for evaluation code only (rank tests, position
    uniformity); ``enroll`` drops them.
    """
    rng = rng if rng is not None else np.random.default_rng()
    _check_query(params, template, "template")
    if chaff.dim != params.dim:
        raise EnrollError(f"chaff dimension {chaff.dim} != params dim {params.dim}")
    short = []
    for i in range(params.n):
        have = chaff.available(i)
        if have is not None and have < params.m:
            short.append(f"channel {i}: {have}/{params.m}")
    if short:
        raise EnrollError(f"chaff shortage (need n*m = {params.n * params.m} rows, "
                          f"{params.m} per channel): " + ", ".join(short))
    salt = rng.bytes(SALT_SIZE)
    vaults, positions = [], []
    for i in range(params.n):
        try:
            decoys = chaff.draw(i, params.m, rng)
        except SourceError as e:
            raise EnrollError(str(e)) from e
        pos = int(rng.integers(params.m + 1))
        entries = np.insert(decoys, pos, np.asarray(template[i], dtype=FLOAT_DTYPE), axis=0)
        if obfuscation:
            entries = obfuscate(entries, params, rng)
        vaults.append(Vault(entries, i))
        positions.append(pos)
    commitments = _commit(vaults, positions, salt, params.subsets)
    return HelperData(params, tuple(vaults), salt, commitments), positions


def enroll(template: ChannelSet, chaff: ChaffSource, params: ProtocolParams,
           rng: np.random.Generator | None = None) -> HelperData:
    return enroll_traced(template, chaff, params, rng)[0]


def recommit(helper: HelperData, positions: list[int], k: int) -> HelperData:
    """Same vaults and salt, commitments regenerated for a different k."""
    params = dataclasses.replace(helper.params, k=k)
    return dataclasses.replace(
        helper, params=params,
        commitments=_commit(helper.vaults, positions, helper.salt, params.subsets))


def revoke_and_reenroll(template: ChannelSet, old_helper: HelperData, chaff: ChaffSource,
                        rng: np.random.Generator | None = None) -> HelperData:
    """Fresh salt, chaff and obfuscation under the old parameters."""
    rng = rng if rng is not None else np.random.default_rng()
    old = set(old_helper.commitments.values())
    while True:
        helper = enroll(template, chaff, old_helper.params, rng)
        if helper.salt != old_helper.salt and not old & set(helper.commitments.values()):
            return helper


@dataclass
class VerifyResult:
    accepted: bool
    matched_subset: tuple[int, ...] | None
    # rank (0 = closest) of the matching entry in each vault of the subset
    matched_ranks: tuple[int, ...] | None
    candidates: list[list[int]]
    top_scores: list[float]
    hash_count: int
    tr: int = 1
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "matched_subset": list(self.matched_subset) if self.matched_subset else None,
            "matched_ranks": list(self.matched_ranks) if self.matched_ranks else None,
            "candidates": self.candidates,
            "top_scores": self.top_scores,
            "hash_count": self.hash_count,
            "tr": self.tr,
        }


def top_indices(scores: np.ndarray, tr: int) -> np.ndarray:
    """Indices of the ``tr`` largest scores, best first, ties to the lower index.

    Same result as ``np.argsort(-scores, kind="stable")[:tr]`` in linear time.
    """
    size = scores.shape[0]
    if tr >= size:
        return np.argsort(-scores, kind="stable")
    kth = np.partition(scores, size - tr)[size - tr]
    above = np.flatnonzero(scores > kth)
    ties = np.flatnonzero(scores == kth)[:tr - above.shape[0]]
    sel = np.concatenate([above, ties])
    return sel[np.lexsort((sel, -scores[sel]))]


def rank_candidates(helper: HelperData, query: ChannelSet, tr: int):
    """Top-``tr`` entry indices per vault (ties: lower index first) and their scores."""
    cands, scores = [], []
    for vault, q in zip(helper.vaults, query):
        s = vault.scores(q)
        order = top_indices(s, tr)
        cands.append(order)
        scores.append(s[order])
    return cands, scores


def match_commitments(helper: HelperData, candidates):
    """Hash the candidate product for every stored subset; stop at the first match.

    Returns (subset, ranks, hash_count); subset and ranks are None on reject.
    Hash states are shared along common tuple prefixes.
    """
    salt_state = tuple_hasher(helper.salt)
    vaults = helper.vaults
    count = 0
    for subset, target in helper.commitments.items():
        stack = [(salt_state, 0, ())]
        while stack:
            state, depth, ranks = stack.pop()
            vi = subset[depth]
            head = struct.pack("<I", vi)
            cands = candidates[vi]
            last = depth == len(subset) - 1
            # children are pushed in reverse so the stack pops them in rank order
            for rank in (range(len(cands)) if last else reversed(range(len(cands)))):
                h = state.copy()
                h.update(head)
                h.update(vaults[vi].entry_bytes(int(cands[rank])))
                if last:
                    count += 1
                    if h.digest() == target:
                        return subset, ranks + (rank,), count
                else:
                    stack.append((h, depth + 1, ranks + (rank,)))
    return None, None, count


def verify(helper: HelperData, query: ChannelSet, tr: int | None = None) -> VerifyResult:
    p = helper.params
    tr = p.tr if tr is None else tr
    if not 1 <= tr <= p.m + 1:
        raise VerifyError(f"tr must satisfy 1 <= tr <= m+1={p.m + 1}, got {tr}")
    try:
        _check_query(p, query, "query")
        check_combinations(p.n, p.k, tr, p.combination_budget)
    except (EnrollError, ParamsError) as e:
        raise VerifyError(str(e)) from e
    cands, scores = rank_candidates(helper, query, tr)
    subset, ranks, count = match_commitments(helper, cands)
    return VerifyResult(
        accepted=subset is not None,
        matched_subset=subset,
        matched_ranks=ranks,
        candidates=[c.tolist() for c in cands],
        top_scores=[float(s[0]) for s in scores],
        hash_count=count,
        tr=tr,
    )
