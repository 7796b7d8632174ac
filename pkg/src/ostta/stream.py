"""Synthetic and file-backed embedding streams.

Desired samples are drawn around class prototypes and undesired samples
around separate cluster centres, both pushed through a per-domain covariate
shift (a Householder reflection plus a bias).  Every random draw flows from
the scenario seed through per-purpose sub-generators, so a stream is
reproducible bit for bit.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from . import UNDESIRED
from .errors import ConfigError, DimensionMismatch, FormatError, SeparationInfeasible

MAX_REJECTION_TRIES = 10_000

# sub-seed tags, one per purpose
_SEED_PROTOTYPES = 0
_SEED_UNDESIRED = 1
_SEED_SHIFT = 2
_SEED_ORDER = 3
_SEED_NOISE = 4


def _rng(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose]))


def unit(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit L2 norm.  Vectors already unit within 1e-12 are returned as is."""
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) <= 1e-12:
        return v
    return v / n


class ScenarioKind(str, enum.Enum):
    SINGLE = "single"
    CONTINUOUS = "continuous"
    FREQUENT = "frequent"
    VARYING_RATIO = "ratio"


@dataclass(frozen=True)
class ClassPrototypeSet:
    prototypes: np.ndarray
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        p = np.ascontiguousarray(self.prototypes, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 2:
            raise ConfigError("need a (num_classes >= 2, dim) prototype matrix")
        if not np.all(np.isfinite(p)):
            raise ConfigError("prototypes must be finite")
        norms = np.linalg.norm(p, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ConfigError("prototype rows must be unit norm")
        p.setflags(write=False)
        object.__setattr__(self, "prototypes", p)
        names = tuple(self.class_names) or tuple(f"class_{i}" for i in range(p.shape[0]))
        if len(names) != p.shape[0]:
            raise ConfigError("class_names length must match prototype count")
        object.__setattr__(self, "class_names", names)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass(frozen=True)
class StreamSample:
    t: int
    raw: np.ndarray
    raw_aug: np.ndarray
    gt_class: int
    domain_id: int = 0

    @property
    def is_desired(self) -> bool:
        return self.gt_class != UNDESIRED


@dataclass(frozen=True)
class ScenarioConfig:
    kind: ScenarioKind = ScenarioKind.SINGLE
    dim: int = 64
    num_desired_classes: int = 10
    num_undesired_clusters: int = 2
    desired_ratio: float = 0.5
    samples_per_domain: int = 1000
    num_domains: int = 1
    shift_strength: float = 0.0
    noise_sigma: float = 0.1
    aug_sigma: float = 0.05
    min_cosine_gap: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        self.validate()

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        if self.num_desired_classes < 2:
            raise ConfigError("need at least 2 desired classes")
        if self.num_undesired_clusters < 1:
            raise ConfigError("need at least 1 undesired cluster")
        if not 0.0 < self.desired_ratio < 1.0:
            raise ConfigError("desired_ratio must lie in (0, 1)")
        if self.samples_per_domain < 1:
            raise ConfigError("samples_per_domain must be positive")
        if self.num_domains < 1:
            raise ConfigError("num_domains must be positive")
        if self.kind is ScenarioKind.SINGLE and self.num_domains != 1:
            raise ConfigError("single-domain scenario takes num_domains=1")
        for name in ("shift_strength", "noise_sigma", "aug_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.min_cosine_gap < 1.0:
            raise ConfigError("min_cosine_gap must lie in [0, 1)")

    def undesired_per_domain(self) -> int:
        r = self.desired_ratio
        return int(round(self.samples_per_domain * (1.0 - r) / r))

    def stream_length(self) -> int:
        """Block scenarios add undesired samples on top of ``samples_per_domain``;
        the Bernoulli-interleaved one counts every sample in it."""
        if self.kind is ScenarioKind.VARYING_RATIO:
            return self.samples_per_domain * self.num_domains
        return (self.samples_per_domain + self.undesired_per_domain()) * self.num_domains


def _rejection_sample(
    rng: np.random.Generator,
    count: int,
    dim: int,
    max_cos: float,
    avoid: np.ndarray | None = None,
) -> np.ndarray:
    accepted: list[np.ndarray] = []
    tries = 0
    while len(accepted) < count:
        if tries >= MAX_REJECTION_TRIES:
            raise SeparationInfeasible(
                f"could not place {count} unit vectors in dim {dim} with cosine <= {max_cos}"
            )
        tries += 1
        v = unit(rng.standard_normal(dim))
        others = accepted + ([] if avoid is None else list(avoid))
        if others and float(np.max(np.stack(others) @ v)) > max_cos:
            continue
        accepted.append(v)
    return np.stack(accepted)


def generate_prototypes(num_classes: int, dim: int, min_cosine_gap: float, seed: int) -> ClassPrototypeSet:
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if not 0.0 <= min_cosine_gap < 1.0:
        raise ConfigError("min_cosine_gap must lie in [0, 1)")
    rows = _rejection_sample(_rng(seed, _SEED_PROTOTYPES), num_classes, dim, 1.0 - min_cosine_gap)
    return ClassPrototypeSet(rows)


@dataclass(frozen=True)
class _DomainShift:
    normal: np.ndarray
    bias: np.ndarray
    strength: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        # strength * (H x - x + b) with H = I - 2 v v^T
        if self.strength == 0.0:
            return np.zeros_like(x)
        return self.strength * (-2.0 * float(self.normal @ x) * self.normal + self.bias)


@dataclass
class _Plan:
    labels: np.ndarray
    clusters: np.ndarray
    domains: np.ndarray
    undesired_centers: np.ndarray
    shifts: list[_DomainShift] = field(default_factory=list)


def _plan(config: ScenarioConfig, prototypes: ClassPrototypeSet) -> _Plan:
    seed = config.seed
    centers = _rejection_sample(
        _rng(seed, _SEED_UNDESIRED),
        config.num_undesired_clusters,
        config.dim,
        1.0 - config.min_cosine_gap,
        avoid=prototypes.prototypes,
    )
    srng = _rng(seed, _SEED_SHIFT)
    shifts = [
        _DomainShift(unit(srng.standard_normal(config.dim)), unit(srng.standard_normal(config.dim)), config.shift_strength)
        for _ in range(config.num_domains)
    ]

    orng = _rng(seed, _SEED_ORDER)
    C = config.num_desired_classes
    labels, domains = [], []
    for d in range(config.num_domains):
        if config.kind is ScenarioKind.VARYING_RATIO:
            is_des = orng.random(config.samples_per_domain) < config.desired_ratio
            block = np.where(is_des, orng.integers(0, C, size=is_des.size), UNDESIRED)
        else:
            n_d = config.samples_per_domain
            n_u = config.undesired_per_domain()
            block = np.concatenate([np.arange(n_d) % C, np.full(n_u, UNDESIRED)])
            orng.shuffle(block)
        labels.append(block)
        domains.append(np.full(block.size, d))
    labels_arr = np.concatenate(labels).astype(np.int64)
    clusters = orng.integers(0, config.num_undesired_clusters, size=labels_arr.size)
    return _Plan(labels_arr, clusters, np.concatenate(domains).astype(np.int64), centers, shifts)


def iter_stream(config: ScenarioConfig, prototypes: ClassPrototypeSet) -> Iterator[StreamSample]:
    """Yield the scenario's samples one at a time, in stream order."""
    if prototypes.num_classes != config.num_desired_classes:
        raise ConfigError("prototype count does not match num_desired_classes")
    if prototypes.dim != config.dim:
        raise DimensionMismatch(f"prototype dim {prototypes.dim} != scenario dim {config.dim}")
    plan = _plan(config, prototypes)
    nrng = _rng(config.seed, _SEED_NOISE)
    F = config.dim
    for t, (label, cluster, dom) in enumerate(zip(plan.labels, plan.clusters, plan.domains)):
        center = prototypes.prototypes[label] if label != UNDESIRED else plan.undesired_centers[cluster]
        noise = nrng.standard_normal(F)
        aug = nrng.standard_normal(F)
        x = center + plan.shifts[dom](center)
        if config.noise_sigma:
            x = x + config.noise_sigma * noise
        raw = unit(x)
        raw_aug = unit(raw + config.aug_sigma * aug) if config.aug_sigma else raw.copy()
        raw.setflags(write=False)
        raw_aug.setflags(write=False)
        yield StreamSample(t, raw, raw_aug, int(label), int(dom))


def synth_stream(config: ScenarioConfig, prototypes: ClassPrototypeSet) -> list[StreamSample]:
    return list(iter_stream(config, prototypes))


def undesired_centers(config: ScenarioConfig, prototypes: ClassPrototypeSet) -> np.ndarray:
    return _plan(config, prototypes).undesired_centers


# --- EMB1 binary dump -------------------------------------------------------

MAGIC = b"EMB1"
_U32 = struct.Struct("<I")
_TAIL = struct.Struct("<iHxx")


def write_embedding_dump(
    path: str | Path, prototypes: ClassPrototypeSet, samples: Sequence[StreamSample]
) -> None:
    F = prototypes.dim
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(F))
        fh.write(_U32.pack(prototypes.num_classes))
        fh.write(prototypes.prototypes.astype("<f4").tobytes())
        fh.write(_U32.pack(len(samples)))
        for s in samples:
            if s.raw.shape != (F,) or s.raw_aug.shape != (F,):
                raise DimensionMismatch(f"sample {s.t} has dim {s.raw.shape}, expected {F}")
            fh.write(np.asarray(s.raw, dtype="<f4").tobytes())
            fh.write(np.asarray(s.raw_aug, dtype="<f4").tobytes())
            fh.write(_TAIL.pack(int(s.gt_class), int(s.domain_id)))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def load_embedding_dump(
    path: str | Path, expected_dim: int | None = None
) -> tuple[ClassPrototypeSet, list[StreamSample]]:
    """Read an EMB1 dump.  Values are stored as float32 and widened to float64."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError("bad magic, expected EMB1")
        (F,) = _U32.unpack(_read_exact(fh, 4, "dim"))
        (C,) = _U32.unpack(_read_exact(fh, 4, "num_classes"))
        if F == 0 or C < 2:
            raise FormatError(f"invalid header: dim={F}, num_classes={C}")
        if expected_dim is not None and F != expected_dim:
            raise DimensionMismatch(f"{path}: dim {F} != expected {expected_dim}")
        protos = np.frombuffer(_read_exact(fh, 4 * F * C, "prototypes"), dtype="<f4").reshape(C, F)
        # f32 storage loses the exact unit norm; renormalise in f64
        protos64 = protos.astype(np.float64)
        protos64 /= np.linalg.norm(protos64, axis=1, keepdims=True)
        (n,) = _U32.unpack(_read_exact(fh, 4, "num_samples"))
        samples = []
        for t in range(n):
            raw = np.frombuffer(_read_exact(fh, 4 * F, "raw"), dtype="<f4").astype(np.float64)
            aug = np.frombuffer(_read_exact(fh, 4 * F, "raw_aug"), dtype="<f4").astype(np.float64)
            gt, dom = _TAIL.unpack(_read_exact(fh, _TAIL.size, "sample tail"))
            if gt != UNDESIRED and not 0 <= gt < C:
                raise FormatError(f"sample {t}: gt_class {gt} out of range")
            samples.append(StreamSample(t, raw, aug, gt, dom))
        if fh.read(1):
            raise FormatError("trailing bytes after last sample")
    return ClassPrototypeSet(protos64), samples
