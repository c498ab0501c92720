"""Image-caption similarity scoring and per-image caption selection.

Every image is scored against its own candidate captions with cosine
similarity in a shared embedding space, and the best candidate per image
is kept. Embeddings are L2-normalized at construction, so cosine reduces
to a clamped dot product.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .captioning import CandidateSet
from .dataset import ImageRecord
from .errors import SelectionError

log = logging.getLogger(__name__)

# Row maxima below this are logged as an audit aid; selection is unchanged.
LOW_SCORE_WARNING = 0.15


class EmbeddingVector:
    """A finite, nonzero embedding stored in L2-normalized form."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"embedding must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding contains non-finite entries")
        norm = float(np.linalg.norm(arr))
        if norm <= 0.0:
            raise ValueError("zero-norm embedding rejected")
        self.values = arr / norm

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"EmbeddingVector(dim={self.dim})"


def cosine(u: EmbeddingVector, v: EmbeddingVector) -> float:
    """Cosine similarity, clamped to [-1, 1]."""
    if u.dim != v.dim:
        raise ValueError(f"dimension mismatch: {u.dim} vs {v.dim}")
    return float(np.clip(np.dot(u.values, v.values), -1.0, 1.0))


@dataclass(frozen=True)
class ImageRef:
    """Identity handed to embedder backends for image inputs."""

    image_id: str
    category: str
    path: Path | None = None


@runtime_checkable
class EmbedderBackend(Protocol):
    """Deterministic image/text embedders sharing one dimension."""

    name: str

    def embed_image(self, ref: ImageRef) -> EmbeddingVector: ...

    def embed_text(self, text: str) -> EmbeddingVector: ...


@dataclass
class SimilarityMatrix:
    """Per-image candidate scores; entry (i, j) pairs image i with its own
    j-th candidate only."""

    image_ids: list[str]
    entries: np.ndarray  # (n, m) float64 in [-1, 1]
    caption_refs: list[list[tuple[str, str]]]  # (image_id, template_id) grid

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        n, m = self.entries.shape
        if len(self.image_ids) != n or len(self.caption_refs) != n:
            raise ValueError("similarity matrix rows misaligned with image ids")
        if any(len(row) != m for row in self.caption_refs):
            raise ValueError("caption_refs grid width misaligned with entries")
        if np.any(np.abs(self.entries) > 1.0 + 1e-9):
            raise ValueError("similarity entries outside [-1, 1]")

    def save(self, path: str | Path) -> None:
        data = {
            "image_ids": self.image_ids,
            "template_ids": [[ref[1] for ref in row] for row in self.caption_refs],
            "entries": self.entries.tolist(),
        }
        Path(path).write_text(
            json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "SimilarityMatrix":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        refs = [
            [(image_id, tid) for tid in row]
            for image_id, row in zip(data["image_ids"], data["template_ids"])
        ]
        return cls(
            image_ids=data["image_ids"],
            entries=np.asarray(data["entries"], dtype=np.float64),
            caption_refs=refs,
        )


@dataclass(frozen=True)
class SelectedCaption:
    image_id: str
    text: str
    template_id: str
    score: float


def build_similarity_matrix(
    images: Sequence[ImageRecord],
    candidate_sets: Sequence[CandidateSet],
    backend: EmbedderBackend,
    root: str | Path | None = None,
) -> SimilarityMatrix:
    """Score every image against each of its candidate captions.

    Image embeddings are computed once per image and text embeddings once
    per candidate. Any backend failure is fatal and names the item, since
    a partially built matrix is never persisted.
    """
    if len(images) != len(candidate_sets):
        raise ValueError(
            f"{len(images)} images but {len(candidate_sets)} candidate sets"
        )
    if not images:
        raise ValueError("cannot build a similarity matrix from zero images")
    sizes = {len(cs.candidates) for cs in candidate_sets}
    if len(sizes) != 1:
        raise ValueError(f"candidate sets have unequal sizes: {sorted(sizes)}")
    for rec, cs in zip(images, candidate_sets):
        if rec.image_id != cs.image_id:
            raise ValueError(
                f"candidate set {cs.image_id!r} misaligned with image {rec.image_id!r}"
            )

    root_path = Path(root) if root is not None else None
    m = sizes.pop()
    entries = np.empty((len(images), m), dtype=np.float64)
    refs: list[list[tuple[str, str]]] = []

    for i, (rec, cs) in enumerate(zip(images, candidate_sets)):
        ref = ImageRef(
            image_id=rec.image_id,
            category=rec.category,
            path=(root_path / rec.path) if root_path is not None else None,
        )
        try:
            img_vec = backend.embed_image(ref)
        except Exception as exc:
            raise SelectionError(f"image embedding failed for {rec.image_id}: {exc}") from exc
        row_refs = []
        for j, cand in enumerate(cs.candidates):
            try:
                txt_vec = backend.embed_text(cand.text)
            except Exception as exc:
                raise SelectionError(
                    f"text embedding failed for {rec.image_id} / {cand.template_id}: {exc}"
                ) from exc
            entries[i, j] = cosine(img_vec, txt_vec)
            row_refs.append((cand.image_id, cand.template_id))
        refs.append(row_refs)
        row_max = entries[i].max()
        if row_max < LOW_SCORE_WARNING:
            log.warning(
                "all candidates for %s score below %.2f (max %.4f)",
                rec.image_id,
                LOW_SCORE_WARNING,
                row_max,
            )

    return SimilarityMatrix(
        image_ids=[r.image_id for r in images], entries=entries, caption_refs=refs
    )


def select_optimal(
    matrix: SimilarityMatrix, candidate_sets: Sequence[CandidateSet]
) -> list[SelectedCaption]:
    """Pick the row-max candidate per image; ties go to the lowest index,
    which corresponds to template order."""
    if len(candidate_sets) != len(matrix.image_ids):
        raise ValueError("candidate sets misaligned with matrix rows")
    selected = []
    for i, cs in enumerate(candidate_sets):
        if cs.image_id != matrix.image_ids[i]:
            raise ValueError(
                f"row {i} is {matrix.image_ids[i]!r} but set is {cs.image_id!r}"
            )
        if len(cs.candidates) != matrix.entries.shape[1]:
            raise ValueError(f"row {i} width misaligned with candidates")
        j = int(np.argmax(matrix.entries[i]))
        cand = cs.candidates[j]
        selected.append(
            SelectedCaption(
                image_id=cs.image_id,
                text=cand.text,
                template_id=cand.template_id,
                score=float(matrix.entries[i, j]),
            )
        )
    return selected


def save_selected(selected: list[SelectedCaption], path: str | Path) -> None:
    """Write `captions_selected.jsonl`, one image per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in selected:
            row = {
                "image_id": s.image_id,
                "text": s.text,
                "template_id": s.template_id,
                "score": s.score,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_selected(path: str | Path) -> list[SelectedCaption]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            out.append(
                SelectedCaption(
                    image_id=row["image_id"],
                    text=row["text"],
                    template_id=row["template_id"],
                    score=float(row["score"]),
                )
            )
    return out
