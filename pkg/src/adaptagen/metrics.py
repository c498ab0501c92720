"""Generation quality metrics: Frechet feature distance, inception-style
score, and prompt-image alignment score.

All three operate on backend-provided features, class probabilities, and
embeddings, so the metric math is exercised with cheap deterministic
mocks at desk scale and with real encoder backends in integration runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .selection import EmbeddingVector, cosine

_SYMMETRY_TOL = 1e-9
_IMAG_TOL = 1e-6
_NEG_CLAMP = -1e-8
_LOG_FLOOR = 1e-12


@dataclass
class FeatureStats:
    """Gaussian moment summary of a feature sample: mean, covariance, count."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(
                f"covariance shape {self.cov.shape} does not match dim {d}"
            )
        if self.count < 2:
            raise ValueError(f"count must be >= 2, got {self.count}")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise ValueError("non-finite feature statistics")
        asym = np.max(np.abs(self.cov - self.cov.T)) if d else 0.0
        if asym > _SYMMETRY_TOL:
            raise ValueError(f"covariance asymmetric by {asym:g}")
        self.cov = (self.cov + self.cov.T) / 2.0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class ClassProbabilities:
    """N rows, each a distribution over K classes."""

    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if np.any(self.rows < 0):
            raise ValueError("class probabilities must be nonnegative")
        sums = self.rows.sum(axis=1)
        bad = np.where(np.abs(sums - 1.0) > 1e-6)[0]
        if bad.size:
            raise ValueError(
                f"rows {bad[:5].tolist()} do not sum to 1 (first sum {sums[bad[0]]:.8f})"
            )


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Column means and unbiased sample covariance of an (N, D) matrix."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = features.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    mean = features.mean(axis=0)
    cov = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
    cov = (cov + cov.T) / 2.0
    return FeatureStats(mean=mean, cov=cov, count=n)


def _sqrt_psd(matrix: np.ndarray, context: str) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues slightly below zero are numerical noise and clipped;
    anything whose square root would carry an imaginary part above the
    tolerance is an error.
    """
    eigvals, eigvecs = np.linalg.eigh(matrix)
    neg = eigvals[eigvals < 0]
    if neg.size and np.sqrt(-neg.min()) > _IMAG_TOL:
        raise ValueError(
            f"{context}: imaginary residue {np.sqrt(-neg.min()):.3g} exceeds "
            f"tolerance {_IMAG_TOL:g}"
        )
    root = np.sqrt(np.clip(eigvals, 0.0, None))
    return (eigvecs * root) @ eigvecs.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two Gaussian moment summaries.

    ||mean_a - mean_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)),
    with the cross term evaluated as sqrt(cov_a)^T cov_b sqrt(cov_a) so
    the eigendecomposition stays in symmetric territory.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")

    diff = a.mean - b.mean
    sqrt_a = _sqrt_psd(a.cov, "fid: sqrt of first covariance")
    inner = sqrt_a @ b.cov @ sqrt_a
    inner = (inner + inner.T) / 2.0

    eigvals = np.linalg.eigvalsh(inner)
    neg = eigvals[eigvals < 0]
    if neg.size and np.sqrt(-neg.min()) > _IMAG_TOL:
        raise ValueError(
            f"fid: imaginary residue {np.sqrt(-neg.min()):.3g} exceeds "
            f"tolerance {_IMAG_TOL:g}"
        )
    trace_sqrt = float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())

    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)
    if value < 0:
        if value < _NEG_CLAMP:
            raise ValueError(f"fid: negative result {value:g} beyond clamp tolerance")
        value = 0.0
    return value


def inception_score(
    probs: ClassProbabilities | np.ndarray, splits: int = 10
) -> tuple[float, float]:
    """Mean and standard deviation of per-split exponentiated KL scores.

    Each split's score is exp(mean_x KL(p(y|x) || p_bar)) where p_bar is
    the split's own marginal. Logs are natural with a 1e-12 floor.
    """
    if not isinstance(probs, ClassProbabilities):
        probs = ClassProbabilities(rows=probs)
    rows = probs.rows
    if splits < 1:
        raise ValueError(f"splits must be >= 1, got {splits}")
    if rows.shape[0] < splits:
        raise ValueError(f"need at least {splits} rows for {splits} splits, got {rows.shape[0]}")

    scores = []
    for chunk in np.array_split(rows, splits):
        marginal = chunk.mean(axis=0)
        log_ratio = np.log(np.maximum(chunk, _LOG_FLOOR)) - np.log(
            np.maximum(marginal, _LOG_FLOOR)
        )
        kl_per_row = (chunk * log_ratio).sum(axis=1)
        scores.append(float(np.exp(kl_per_row.mean())))
    scores = np.asarray(scores)
    return float(scores.mean()), float(scores.std())


def clip_score(
    image_embeddings: Sequence[EmbeddingVector],
    prompt_embeddings: Sequence[EmbeddingVector],
    rescale: bool = False,
) -> float:
    """Mean cosine similarity over index-paired embeddings.

    Raw cosine in [-1, 1] by default; ``rescale`` applies the clamped
    2.5x convention some toolkits report instead.
    """
    if len(image_embeddings) != len(prompt_embeddings):
        raise ValueError(
            f"{len(image_embeddings)} image vs {len(prompt_embeddings)} prompt embeddings"
        )
    if not image_embeddings:
        raise ValueError("clip_score requires at least one pair")
    sims = [cosine(img, txt) for img, txt in zip(image_embeddings, prompt_embeddings)]
    if rescale:
        sims = [2.5 * max(s, 0.0) for s in sims]
    return float(np.mean(sims))


@runtime_checkable
class FeatureBackend(Protocol):
    """Deterministic image -> feature-vector map used by the FID side."""

    name: str
    dim: int

    def features(self, image_path: Path) -> np.ndarray: ...


@runtime_checkable
class ClassifierBackend(Protocol):
    """Deterministic image -> class-probability map used by the IS side."""

    name: str
    classes: int

    def class_probabilities(self, image_path: Path) -> np.ndarray: ...


@dataclass
class CategoryMetrics:
    fid: float
    is_mean: float
    is_std: float
    clip_score: float
    n_real: int
    n_generated: int


@dataclass
class MetricReport:
    per_category: dict[str, CategoryMetrics]
    overall: dict[str, float]
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_category": {
                cat: {
                    "fid": m.fid,
                    "is_mean": m.is_mean,
                    "is_std": m.is_std,
                    "clip_score": m.clip_score,
                    "n_real": m.n_real,
                    "n_generated": m.n_generated,
                }
                for cat, m in sorted(self.per_category.items())
            },
            "metadata": self.metadata,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        per_category = {
            cat: CategoryMetrics(**vals) for cat, vals in data["per_category"].items()
        }
        return cls(
            per_category=per_category,
            overall=data["overall"],
            metadata=data.get("metadata", {}),
        )


def build_report(
    per_category: dict[str, CategoryMetrics], metadata: dict | None = None
) -> MetricReport:
    """Aggregate per-category metrics; overall is the unweighted mean."""
    if not per_category:
        raise ValueError("cannot build a report without categories")
    values = list(per_category.values())
    overall = {
        "fid": float(np.mean([m.fid for m in values])),
        "is_mean": float(np.mean([m.is_mean for m in values])),
        "is_std": float(np.mean([m.is_std for m in values])),
        "clip_score": float(np.mean([m.clip_score for m in values])),
    }
    return MetricReport(
        per_category=dict(per_category), overall=overall, metadata=metadata or {}
    )
