"""Dataset construction and corruption.

Synthetic feature generation realizes the informative/distractor token
structure used throughout: every sample of a class carries a few tokens
tightly clustered around that class's unit prototype plus unrelated
distractor tokens, so attention has genuine signal to find.  Label noise is
injected with an exact seeded budget, and datasets round-trip bit-exactly
through the little-endian VPFT file format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (ConfigError, DegenerateInputError, GenerationError,
                     VpftFormatError)

VPFT_MAGIC = b"VPFT"
VPFT_VERSION = 1
_HEADER = struct.Struct("<4s5I")   # magic, version, N, M, d_v, K

DISTRACTOR_COS_LIMIT = 0.3
REJECTION_BUDGET = 1000


@dataclass
class Provenance:
    kind: str                      # "synthetic" | "ingested"
    detail: str = ""


@dataclass
class FeatureDataset:
    """Per-sample visual token matrices with clean and observed labels."""

    tokens: np.ndarray             # (N, M, d_v) float64
    clean_labels: np.ndarray       # (N,) int64
    observed_labels: np.ndarray    # (N,) int64
    n_classes: int
    provenance: Provenance

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.clean_labels = np.asarray(self.clean_labels, dtype=np.int64)
        self.observed_labels = np.asarray(self.observed_labels, dtype=np.int64)
        if self.tokens.ndim != 3:
            raise ConfigError("tokens must be (N, M, d_v)")
        n = self.tokens.shape[0]
        if self.clean_labels.shape != (n,) or self.observed_labels.shape != (n,):
            raise ConfigError("label arrays must have one entry per sample")
        for labels in (self.clean_labels, self.observed_labels):
            if n and (labels.min() < 0 or labels.max() >= self.n_classes):
                raise ConfigError("labels must lie in [0, n_classes)")

    @property
    def n_samples(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def noise_mask(self) -> np.ndarray:
        """True where the observed label differs from the clean one."""
        return self.clean_labels != self.observed_labels


@dataclass
class SyntheticSpec:
    n_classes: int
    samples_per_class: int
    n_tokens: int = 8
    token_dim: int = 48
    eps_v: float = 0.1             # informative-token dispersion
    n_informative: int = 5
    margin_scale: float = 1.0      # scales distractor decorrelation
    seed: int = 0
    prototype_seed: int | None = None   # None: reuse `seed`

    def __post_init__(self):
        if not 1 <= self.n_informative <= self.n_tokens:
            raise ConfigError("need 1 <= n_informative <= n_tokens")
        if self.eps_v < 0:
            raise ConfigError("eps_v must be nonnegative")
        if self.n_classes < 1 or self.samples_per_class < 1:
            raise ConfigError("need at least one class and one sample per class")
        if self.prototype_seed is None:
            self.prototype_seed = self.seed


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def class_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """The seeded unit-norm class prototypes a dataset is built around.

    Prototypes depend only on `prototype_seed`, so train and test splits of
    one task share classes while drawing disjoint samples.
    """
    rng = np.random.default_rng(spec.prototype_seed)
    protos = rng.normal(0.0, 1.0, (spec.n_classes, spec.token_dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> FeatureDataset:
    """Seeded synthetic dataset with clean labels.

    Informative tokens are the class prototype plus eps_v times a random
    unit direction, re-normalized; distractors are random unit vectors
    rejection-sampled until |cos| with every prototype falls below
    0.3 / margin_scale.  Token values are quantized through float32 once
    so file round trips are exact while compute stays 64-bit.
    """
    rng = np.random.default_rng(spec.seed)
    protos = class_prototypes(spec)

    cos_limit = DISTRACTOR_COS_LIMIT / spec.margin_scale
    n = spec.n_classes * spec.samples_per_class
    tokens = np.empty((n, spec.n_tokens, spec.token_dim))
    labels = np.empty(n, dtype=np.int64)

    i = 0
    for k in range(spec.n_classes):
        for _ in range(spec.samples_per_class):
            for t in range(spec.n_informative):
                direction = _unit(rng.normal(0.0, 1.0, spec.token_dim))
                tokens[i, t] = _unit(protos[k] + spec.eps_v * direction)
            for t in range(spec.n_informative, spec.n_tokens):
                for attempt in range(REJECTION_BUDGET):
                    cand = _unit(rng.normal(0.0, 1.0, spec.token_dim))
                    if np.abs(protos @ cand).max() < cos_limit:
                        tokens[i, t] = cand
                        break
                else:
                    raise GenerationError(
                        f"could not decorrelate a distractor token after "
                        f"{REJECTION_BUDGET} attempts; try a larger token_dim")
            labels[i] = k
            i += 1

    tokens = tokens.astype(np.float32).astype(np.float64)
    return FeatureDataset(
        tokens=tokens, clean_labels=labels, observed_labels=labels.copy(),
        n_classes=spec.n_classes,
        provenance=Provenance("synthetic", f"seed={spec.seed}"))


def _flip_count(rate: float, n: int) -> int:
    return int(np.rint(rate * n))


def _check_noise_args(ds: FeatureDataset, rate: float):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"noise rate must lie in [0, 1), got {rate}")
    if ds.n_classes < 2:
        raise ConfigError("label noise needs at least 2 classes")


def inject_symmetric_noise(ds: FeatureDataset, rate: float,
                           seed: int) -> FeatureDataset:
    """Flip exactly round(rate * N) seeded samples to a uniformly chosen
    *other* class.  Flips are defined against clean labels, so re-injection
    replaces any prior noise instead of stacking."""
    _check_noise_args(ds, rate)
    rng = np.random.default_rng(seed)
    n = ds.n_samples
    observed = ds.clean_labels.copy()
    flip = rng.choice(n, size=_flip_count(rate, n), replace=False)
    offsets = rng.integers(1, ds.n_classes, size=flip.size)
    observed[flip] = (observed[flip] + offsets) % ds.n_classes
    return replace(ds, tokens=ds.tokens.copy(),
                   clean_labels=ds.clean_labels.copy(),
                   observed_labels=observed)


def inject_asymmetric_noise(ds: FeatureDataset, rate: float,
                            seed: int) -> FeatureDataset:
    """Pair-flip convention: exactly round(rate * N) seeded samples move
    from class k to (k + 1) mod K."""
    _check_noise_args(ds, rate)
    rng = np.random.default_rng(seed)
    n = ds.n_samples
    observed = ds.clean_labels.copy()
    flip = rng.choice(n, size=_flip_count(rate, n), replace=False)
    observed[flip] = (observed[flip] + 1) % ds.n_classes
    return replace(ds, tokens=ds.tokens.copy(),
                   clean_labels=ds.clean_labels.copy(),
                   observed_labels=observed)


def subset(ds: FeatureDataset, indices: np.ndarray) -> FeatureDataset:
    indices = np.asarray(indices, dtype=np.intp)
    return replace(ds, tokens=ds.tokens[indices],
                   clean_labels=ds.clean_labels[indices],
                   observed_labels=ds.observed_labels[indices])


def few_shot_sample(ds: FeatureDataset, shots: int, seed: int) -> FeatureDataset:
    """Seeded uniform choice of exactly `shots` samples per clean class.

    Meant to run before noise injection; sampling keys off clean labels.
    """
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(ds.n_classes):
        pool = np.flatnonzero(ds.clean_labels == k)
        if pool.size < shots:
            raise DegenerateInputError(
                f"class {k} has only {pool.size} samples, need {shots}")
        chosen.append(rng.choice(pool, size=shots, replace=False))
    return subset(ds, np.sort(np.concatenate(chosen)))


def estimate_class_directions(ds: FeatureDataset) -> np.ndarray:
    """Unit direction per class from clean-label means of pooled tokens.

    This stands in for the alignment a pretrained backbone would carry.
    It keys off clean labels because pretraining predates (and is
    independent of) whatever corrupted the observed labels; for ingested
    data whose clean labels are unknown the file carries observed copies
    and the estimate degrades gracefully.
    """
    pooled = ds.tokens.mean(axis=1)
    dirs = np.zeros((ds.n_classes, ds.token_dim))
    for k in range(ds.n_classes):
        members = ds.clean_labels == k
        if not members.any():
            raise DegenerateInputError(f"class {k} has no samples")
        mean = pooled[members].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise DegenerateInputError(f"class {k} pools to a zero vector")
        dirs[k] = mean / norm
    return dirs


def datasets_equal(a: FeatureDataset, b: FeatureDataset) -> bool:
    """Field-for-field data equality; provenance is intentionally excluded."""
    return (a.n_classes == b.n_classes
            and a.tokens.shape == b.tokens.shape
            and np.array_equal(a.tokens, b.tokens)
            and np.array_equal(a.clean_labels, b.clean_labels)
            and np.array_equal(a.observed_labels, b.observed_labels))


# ---------------------------------------------------------------------------
# VPFT file format, little-endian:
#   "VPFT" | u32 version=1 | u32 N | u32 M | u32 d_v | u32 K
#   N records of (u32 clean_label, u32 observed_label)
#   N*M*d_v float32 token values, sample-major then token-major then dim
# ---------------------------------------------------------------------------

def save_features(ds: FeatureDataset, path) -> None:
    header = _HEADER.pack(VPFT_MAGIC, VPFT_VERSION, ds.n_samples,
                          ds.n_tokens, ds.token_dim, ds.n_classes)
    labels = np.empty((ds.n_samples, 2), dtype="<u4")
    labels[:, 0] = ds.clean_labels
    labels[:, 1] = ds.observed_labels
    floats = np.ascontiguousarray(ds.tokens, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(labels.tobytes())
        fh.write(floats.tobytes())


def load_features(path) -> FeatureDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise VpftFormatError(
            f"truncated header: file ends at byte {len(blob)}, "
            f"need {_HEADER.size}")
    magic, version, n, m, d_v, k = _HEADER.unpack_from(blob, 0)
    if magic != VPFT_MAGIC:
        raise VpftFormatError(f"bad magic {magic!r} at byte 0")
    if version != VPFT_VERSION:
        raise VpftFormatError(f"unsupported version {version} at byte 4")

    label_bytes = 8 * n
    float_bytes = 4 * n * m * d_v
    expected = _HEADER.size + label_bytes + float_bytes
    if len(blob) != expected:
        raise VpftFormatError(
            f"size mismatch at byte {min(len(blob), expected)}: "
            f"header implies {expected} bytes, file has {len(blob)}")

    labels = np.frombuffer(blob, dtype="<u4", count=2 * n,
                           offset=_HEADER.size).reshape(n, 2)
    if n and labels.max() >= k:
        bad = int(np.argwhere(labels >= k)[0, 0])
        raise VpftFormatError(
            f"label out of range at byte {_HEADER.size + 8 * bad}")

    floats = np.frombuffer(blob, dtype="<f4", count=n * m * d_v,
                           offset=_HEADER.size + label_bytes)
    if not np.all(np.isfinite(floats)):
        bad = int(np.flatnonzero(~np.isfinite(floats))[0])
        raise VpftFormatError(
            f"non-finite token value at byte "
            f"{_HEADER.size + label_bytes + 4 * bad}")

    return FeatureDataset(
        tokens=floats.astype(np.float64).reshape(n, m, d_v),
        clean_labels=labels[:, 0].astype(np.int64),
        observed_labels=labels[:, 1].astype(np.int64),
        n_classes=int(k),
        provenance=Provenance("ingested", str(path)))
