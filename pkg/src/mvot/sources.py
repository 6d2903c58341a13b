"""Where embeddings come from: synthetic populations, chaff and ingested files.

The synthetic model stands in for the per-channel CNN embedders. Every
"face" (enrolled identity, unrelated passer-by, GAN chaff) is a random unit
vector on a shared low-dimensional face manifold of ``effective_dim``
dimensions embedded in ``dim``. The manifold dimension is chosen so that two
unrelated faces have cosine similarity with standard deviation close to the
``unrelated_cos`` spread. Queries are built with an exact target cosine to
the enrolled vector:

    q = rho * u + sqrt(1 - rho**2) * w,   w unit, w orthogonal to u

so genuine and imposter score bands are controlled directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .embedding import FLOAT_DTYPE, EmbeddingError, as_embedding


class SourceError(ValueError):
    """Bad distribution spec, chaff shortfall or malformed embedding file."""


@dataclass(frozen=True)
class CosineDist:
    """Normal(mean, std) truncated to [low, high]."""

    mean: float
    std: float
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.std < 0:
            raise SourceError(f"std must be >= 0, got {self.std}")
        if not (-1.0 <= self.low <= self.high <= 1.0):
            raise SourceError(f"truncation [{self.low}, {self.high}] must lie within [-1, 1]")
        if self.low == self.high and self.std > 0:
            raise SourceError("empty truncation interval")
        if self.std == 0 and not (self.low <= self.mean <= self.high):
            raise SourceError(f"constant {self.mean} outside [{self.low}, {self.high}]")

    def sample(self, rng: np.random.Generator, size=None):
        if self.std == 0:
            return np.full(size, self.mean) if size is not None else float(self.mean)
        a = (self.low - self.mean) / self.std
        b = (self.high - self.mean) / self.std
        return stats.truncnorm.rvs(a, b, loc=self.mean, scale=self.std, size=size, random_state=rng)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "low": self.low, "high": self.high}


GENUINE_DEFAULT = CosineDist(0.9, 0.05, 0.8, 1.0)
IMPOSTER_DEFAULT = CosineDist(0.3, 0.05, 0.2, 0.4)
UNRELATED_DEFAULT = CosineDist(0.0, 0.1, -0.25, 0.25)


@dataclass(frozen=True)
class PopulationSpec:
    num_identities: int = 100
    dim: int = 512
    n_channels: int = 5
    genuine_cos: CosineDist = GENUINE_DEFAULT
    imposter_cos: CosineDist = IMPOSTER_DEFAULT
    unrelated_cos: CosineDist = UNRELATED_DEFAULT
    rng_seed: int = 0
    # 0 = independent channels, 1 = every channel carries the same vector
    channel_coupling: float = 0.0

    def __post_init__(self):
        if self.num_identities < 1 or self.n_channels < 1:
            raise SourceError("num_identities and n_channels must be positive")
        if self.dim < 2:
            raise SourceError("dim must be >= 2")
        if self.genuine_cos.low <= self.imposter_cos.high:
            raise SourceError("genuine band must lie strictly above the imposter band")
        if not 0.0 <= self.channel_coupling <= 1.0:
            raise SourceError("channel_coupling must be in [0, 1]")

    @property
    def effective_dim(self) -> int:
        return effective_dim_for(self.unrelated_cos.std, self.dim)

    def to_dict(self) -> dict:
        return {
            "num_identities": self.num_identities,
            "dim": self.dim,
            "n_channels": self.n_channels,
            "genuine_cos": self.genuine_cos.to_dict(),
            "imposter_cos": self.imposter_cos.to_dict(),
            "unrelated_cos": self.unrelated_cos.to_dict(),
            "rng_seed": self.rng_seed,
            "channel_coupling": self.channel_coupling,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationSpec":
        d = dict(d)
        for key in ("genuine_cos", "imposter_cos", "unrelated_cos"):
            if key in d and isinstance(d[key], dict):
                d[key] = CosineDist(**d[key])
        return cls(**d)


def effective_dim_for(unrelated_std: float, dim: int) -> int:
    # cosine of two random unit vectors in d dims has std ~ 1/sqrt(d)
    if unrelated_std <= 0:
        return dim
    return int(min(dim, max(2, round(1.0 / unrelated_std**2))))


@dataclass(frozen=True)
class FaceManifold:
    """Random ``effective_dim``-dimensional subspace of R^dim shared by all faces."""

    dim: int
    effective_dim: int
    seed: int = 0
    basis: np.ndarray | None = field(default=None, compare=False, repr=False)

    @classmethod
    def build(cls, dim: int, effective_dim: int, seed: int) -> "FaceManifold":
        if effective_dim >= dim:
            return cls(dim, dim, seed, None)
        rng = np.random.default_rng([seed, 0x5EED])
        q, _ = np.linalg.qr(rng.standard_normal((dim, effective_dim)))
        return cls(dim, effective_dim, seed, np.ascontiguousarray(q.T))

    def random_units(self, rng: np.random.Generator, count: int) -> np.ndarray:
        z = rng.standard_normal((count, self.effective_dim))
        if self.basis is not None:
            z = z @ self.basis
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return z

    def orthogonal_unit(self, u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Random unit vector on the manifold orthogonal to unit ``u``."""
        while True:
            w = self.random_units(rng, 1)[0]
            w -= np.dot(w, u) * u
            n = np.linalg.norm(w)
            if n > 1e-6:
                return w / n


def isotropic(dim: int) -> FaceManifold:
    return FaceManifold(dim, dim)


@dataclass(frozen=True)
class ChannelSet:
    """One capture of one identity: a vector per channel."""

    channels: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.channels:
            raise SourceError("channel set is empty")
        dims = {c.shape[0] for c in self.channels}
        if len(dims) != 1:
            raise SourceError(f"channels differ in dimension: {sorted(dims)}")

    @classmethod
    def of(cls, vectors: Iterable) -> "ChannelSet":
        return cls(tuple(as_embedding(v) for v in vectors))

    @property
    def n(self) -> int:
        return len(self.channels)

    @property
    def dim(self) -> int:
        return self.channels[0].shape[0]

    def __len__(self):
        return len(self.channels)

    def __getitem__(self, i):
        return self.channels[i]

    def __iter__(self):
        return iter(self.channels)


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def derive_channels(identity_latents, target_cos, rng: np.random.Generator,
                    manifold: FaceManifold | None = None,
                    directions: Sequence[np.ndarray] | None = None) -> ChannelSet:
    """Build a capture whose channel i has cosine exactly ``target_cos`` to latent i.

    ``target_cos`` is a scalar or one value per channel. The orthogonal
    component is a fresh random direction on ``manifold`` unless
    ``directions`` supplies one vector per channel to project.
    """
    latents = [_unit(u) for u in identity_latents]
    if not latents:
        raise SourceError("no latents given")
    dim = latents[0].shape[0]
    if dim < 2:
        raise SourceError("dimension must be >= 2")
    rhos = np.broadcast_to(np.asarray(target_cos, dtype=np.float64), (len(latents),))
    if np.any(rhos <= -1.0) or np.any(rhos > 1.0):
        raise SourceError(f"target cosine must lie in (-1, 1], got {target_cos}")
    manifold = manifold or isotropic(dim)
    out = []
    for i, (u, rho) in enumerate(zip(latents, rhos)):
        if rho == 1.0:
            out.append(u)
            continue
        if directions is not None:
            w = np.asarray(directions[i], dtype=np.float64)
            w = w - np.dot(w, u) * u
            nw = np.linalg.norm(w)
            w = w / nw if nw > 1e-9 else manifold.orthogonal_unit(u, rng)
        else:
            w = manifold.orthogonal_unit(u, rng)
        out.append(rho * u + math.sqrt(1.0 - rho * rho) * w)
    return ChannelSet.of(out)


class Population:
    """Synthetic identities with per-channel ground-truth latents.

    Deterministic under ``spec.rng_seed``. Query methods take the caller's
    rng so that trials can own independent streams.
    """

    def __init__(self, spec: PopulationSpec):
        self.spec = spec
        self.manifold = FaceManifold.build(spec.dim, spec.effective_dim, spec.rng_seed)
        self.latents = self.fresh_latents(np.random.default_rng(spec.rng_seed),
                                          spec.num_identities)

    def fresh_latents(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """(count, n_channels, dim) unit latents for new identities."""
        n, c = self.spec.n_channels, self.spec.channel_coupling
        shared = self.manifold.random_units(rng, count)
        lat = self.manifold.random_units(rng, count * n).reshape(count, n, self.spec.dim)
        if c > 0:
            lat = c * shared[:, None, :] + math.sqrt(max(0.0, 1.0 - c * c)) * lat
            lat /= np.linalg.norm(lat, axis=2, keepdims=True)
        return lat

    @property
    def n_channels(self) -> int:
        return self.spec.n_channels

    def template(self, identity: int) -> ChannelSet:
        return ChannelSet.of(self.latents[identity])

    def genuine_query(self, identity: int, rng: np.random.Generator) -> ChannelSet:
        rhos = self.spec.genuine_cos.sample(rng, self.n_channels)
        return derive_channels(self.latents[identity], rhos, rng, self.manifold)

    def imposter_query(self, identity: int, rng: np.random.Generator,
                       other: int | None = None) -> ChannelSet:
        """Another identity's face, placed at an imposter-band cosine to ``identity``."""
        if other is None:
            if self.spec.num_identities < 2:
                raise SourceError("imposter queries need at least two identities")
            other = int(rng.integers(self.spec.num_identities - 1))
            other += other >= identity
        rhos = self.spec.imposter_cos.sample(rng, self.n_channels)
        return derive_channels(self.latents[identity], rhos, rng, self.manifold,
                               directions=self.latents[other])

    def unrelated_query(self, rng: np.random.Generator) -> ChannelSet:
        """A fresh face from outside the population, drawn like chaff."""
        return ChannelSet.of(self.manifold.random_units(rng, self.n_channels))

    def chaff_source(self, rng_seed: int | None = None) -> "ChaffSource":
        seed = self.spec.rng_seed + 1 if rng_seed is None else rng_seed
        return ChaffSource.synthetic(self.manifold, seed)


def sample_population(spec: PopulationSpec) -> Population:
    return Population(spec)


@dataclass(frozen=True)
class ChaffSource:
    """Synthetic manifold draws or rows of an ingested embedding file."""

    mode: str
    dim: int
    rng_seed: int = 0
    manifold: FaceManifold | None = None
    path: Path | None = None
    table: "EmbeddingTable | None" = field(default=None, compare=False, repr=False)

    @classmethod
    def synthetic(cls, manifold: FaceManifold, rng_seed: int = 0) -> "ChaffSource":
        return cls("synthetic", manifold.dim, rng_seed, manifold=manifold)

    @classmethod
    def from_file(cls, path, dim: int, rng_seed: int = 0) -> "ChaffSource":
        table = ingest_embeddings(path, dim)
        return cls("file", dim, rng_seed, path=Path(path), table=table)

    def available(self, channel: int) -> int | None:
        if self.mode == "synthetic":
            return None
        return len(self.table.channel_rows(channel))

    def draw(self, channel: int, count: int, rng: np.random.Generator,
             shuffle: bool = True) -> np.ndarray:
        """``count`` chaff vectors for ``channel`` as a float32 matrix."""
        if count < 1:
            raise SourceError(f"chaff count must be >= 1, got {count}")
        if self.mode == "synthetic":
            return self.manifold.random_units(rng, count).astype(FLOAT_DTYPE)
        rows = self.table.channel_rows(channel)
        if len(rows) < count:
            raise SourceError(
                f"chaff {self.path or 'table'} has {len(rows)} rows for channel {channel}, "
                f"need {count} (short by {count - len(rows)})")
        idx = rng.permutation(len(rows))[:count] if shuffle else np.arange(count)
        return np.stack([rows[i] for i in idx]).astype(FLOAT_DTYPE)


def generate_chaff(source: ChaffSource, count: int, channel: int = 0) -> list[np.ndarray]:
    """Deterministic chaff under ``source.rng_seed``."""
    rng = np.random.default_rng([source.rng_seed, channel])
    mat = source.draw(channel, count, rng, shuffle=False)
    return [as_embedding(row) for row in mat]


class EmbeddingTable:
    """(identity, channel) -> vector, in file order."""

    def __init__(self, dim: int):
        self.dim = dim
        self.entries: dict[tuple[str, int], np.ndarray] = {}

    def add(self, identity: str, channel: int, vector) -> None:
        key = (identity, channel)
        if key in self.entries:
            raise SourceError(f"duplicate entry for identity {identity!r} channel {channel}")
        self.entries[key] = as_embedding(vector, self.dim)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingTable) or self.dim != other.dim:
            return NotImplemented
        return (list(self.entries) == list(other.entries)
                and all(np.array_equal(self.entries[k], other.entries[k]) for k in self.entries))

    def identities(self) -> list[str]:
        return list(dict.fromkeys(k[0] for k in self.entries))

    def channel_rows(self, channel: int) -> list[np.ndarray]:
        return [v for (_, ch), v in self.entries.items() if ch == channel]

    def channel_set(self, identity: str, n_channels: int) -> ChannelSet:
        missing = [c for c in range(n_channels) if (identity, c) not in self.entries]
        if missing:
            raise SourceError(f"identity {identity!r} lacks channels {missing}")
        return ChannelSet(tuple(self.entries[(identity, c)] for c in range(n_channels)))


def ingest_embeddings(path, expected_dim: int) -> EmbeddingTable:
    """Parse ``identity,channel,v0,...,v{dim-1}`` lines.

    Blank lines and ``#`` comments are skipped; a first line starting with
    ``identity`` is taken as a header.
    """
    table = EmbeddingTable(expected_dim)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise SourceError(f"cannot read embedding file {path}: {e}") from e
    seen_data = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if not seen_data and parts[0].lower() == "identity":
            seen_data = True
            continue
        seen_data = True
        if len(parts) != expected_dim + 2:
            raise SourceError(f"{path}:{lineno}: expected {expected_dim} values, "
                              f"got {len(parts) - 2}")
        try:
            channel = int(parts[1])
            values = [float(x) for x in parts[2:]]
        except ValueError as e:
            raise SourceError(f"{path}:{lineno}: {e}") from e
        try:
            table.add(parts[0], channel, values)
        except (EmbeddingError, SourceError) as e:
            raise SourceError(f"{path}:{lineno}: {e}") from e
    return table


def write_embeddings(rows: Iterable[tuple[str, int, np.ndarray]], path) -> None:
    """Write rows in the ingestion format; float32 values round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# identity,channel,v0,v1,...\n")
        for identity, channel, vec in rows:
            vals = ",".join(repr(float(x)) for x in np.asarray(vec, dtype=FLOAT_DTYPE))
            fh.write(f"{identity},{channel},{vals}\n")


def table_rows(table: EmbeddingTable):
    for (identity, channel), vec in table.entries.items():
        yield identity, channel, vec
