"""Dataset discovery and deterministic few-shot sampling.

Datasets are laid out as ``root/<category>/<image files>``. Scanning
produces a manifest with canonical (lexicographic) ordering so that seeded
sampling is portable across filesystems; sampling keeps exactly ``k``
records per category.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .seeding import derive_seed

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}


@dataclass(frozen=True)
class ImageRecord:
    """One training image, identified by ``<category>/<filename-stem>``."""

    image_id: str
    category: str
    path: str  # relative to the dataset root, POSIX separators

    def __post_init__(self):
        if not self.category:
            raise DatasetError("ImageRecord.category must be non-empty")


@dataclass
class DatasetManifest:
    """All records of a scan or of a sampled few-shot subset.

    ``seed`` and ``per_category_count`` are zero until
    :func:`sample_per_category` has been applied. ``created_at`` is kept
    in memory only; it is excluded from serialization so that the same
    (root, k, seed) always produces byte-identical manifest files.
    """

    root: str
    seed: int = 0
    per_category_count: int = 0
    records: list[ImageRecord] = field(default_factory=list)
    created_at: str | None = field(default=None, compare=False)

    def categories(self) -> list[str]:
        return sorted({r.category for r in self.records})

    def by_category(self) -> dict[str, list[ImageRecord]]:
        grouped: dict[str, list[ImageRecord]] = {}
        for rec in self.records:
            grouped.setdefault(rec.category, []).append(rec)
        return {cat: grouped[cat] for cat in sorted(grouped)}

    def to_json_dict(self) -> dict:
        categories = {
            cat: [{"image_id": r.image_id, "path": r.path} for r in recs]
            for cat, recs in self.by_category().items()
        }
        return {
            "root": self.root,
            "seed": self.seed,
            "per_category_count": self.per_category_count,
            "categories": categories,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DatasetManifest":
        records = [
            ImageRecord(image_id=item["image_id"], category=cat, path=item["path"])
            for cat, items in sorted(data["categories"].items())
            for item in items
        ]
        return cls(
            root=data["root"],
            seed=int(data["seed"]),
            per_category_count=int(data["per_category_count"]),
            records=records,
        )

    def save(self, path: str | Path) -> None:
        text = json.dumps(self.to_json_dict(), sort_keys=True, indent=2)
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_json_dict(data)

    def resolve(self, record: ImageRecord) -> Path:
        return Path(self.root) / record.path


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def scan_dataset(root: str | Path) -> DatasetManifest:
    """Discover every image under ``root/<category>/`` into a manifest.

    Categories and files are ordered lexicographically. A missing root,
    an empty root, or a category without any image file is fatal.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")

    category_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not category_dirs:
        raise DatasetError(f"no categories found under {root}")

    records: list[ImageRecord] = []
    empty: list[str] = []
    seen_ids: set[str] = set()
    for cat_dir in category_dirs:
        category = cat_dir.name
        files = sorted(
            p for p in cat_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            empty.append(category)
            continue
        for f in files:
            image_id = f"{category}/{f.stem}"
            if image_id in seen_ids:
                raise DatasetError(
                    f"duplicate image_id {image_id!r} (same stem with different extensions?)"
                )
            seen_ids.add(image_id)
            records.append(
                ImageRecord(
                    image_id=image_id,
                    category=category,
                    path=f.relative_to(root).as_posix(),
                )
            )
    if empty:
        raise DatasetError(
            "categories without image files: " + ", ".join(sorted(empty))
        )
    return DatasetManifest(root=str(root), records=records, created_at=_now_iso())


def sample_per_category(
    manifest: DatasetManifest, k: int, seed: int
) -> DatasetManifest:
    """Keep exactly ``k`` seeded-uniformly sampled records per category.

    Sampling is without replacement, deterministic for a fixed
    (manifest, k, seed), and the kept records are stored back in
    canonical order.
    """
    if k < 1:
        raise DatasetError(f"k must be >= 1, got {k}")

    grouped = manifest.by_category()
    too_small = {cat: len(recs) for cat, recs in grouped.items() if len(recs) < k}
    if too_small:
        detail = ", ".join(f"{cat} has {n}" for cat, n in sorted(too_small.items()))
        raise DatasetError(f"cannot sample k={k} per category: {detail}")

    sampled: list[ImageRecord] = []
    for cat, recs in grouped.items():
        rng = np.random.default_rng(derive_seed(seed, "sample", cat))
        idx = rng.choice(len(recs), size=k, replace=False)
        chosen = sorted((recs[i] for i in idx), key=lambda r: r.image_id)
        sampled.extend(chosen)

    return replace(
        manifest,
        seed=seed,
        per_category_count=k,
        records=sampled,
        created_at=_now_iso(),
    )
