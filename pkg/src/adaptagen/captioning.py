"""Multi-perspective candidate caption generation.

Each image is captioned once per prompt template through a pluggable
captioner backend. Four perspectives ship by default: object recognition,
scene composition, subject emphasis, and contextual interpretation. The
template wordings are our own fixed strings, exposed as data so callers
can replace or extend them.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

from .dataset import ImageRecord
from .errors import BackendError
from .seeding import derive_seed

log = logging.getLogger(__name__)

PERSPECTIVES = (
    "object_recognition",
    "scene_composition",
    "subject_emphasis",
    "contextual_interpretation",
)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    perspective: str
    instruction_text: str

    def __post_init__(self):
        if not self.instruction_text.strip():
            raise ValueError(f"template {self.template_id!r} has empty instruction_text")
        if self.perspective not in PERSPECTIVES:
            raise ValueError(
                f"template {self.template_id!r} has unknown perspective "
                f"{self.perspective!r}; expected one of {PERSPECTIVES}"
            )


@dataclass(frozen=True)
class CandidateCaption:
    image_id: str
    template_id: str
    text: str

    def __post_init__(self):
        stripped = self.text.strip()
        if not stripped:
            raise ValueError(
                f"empty caption for image {self.image_id!r}, template {self.template_id!r}"
            )
        object.__setattr__(self, "text", stripped)


@dataclass
class CandidateSet:
    """All candidate captions for one image, in template order."""

    image_id: str
    candidates: list[CandidateCaption]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError(f"candidate set for {self.image_id!r} is empty")


@dataclass(frozen=True)
class CaptionTask:
    """Everything a captioner backend may need for one call."""

    image_id: str
    category: str
    image_path: Path | None
    template_id: str
    perspective: str
    instruction_text: str
    seed: int


@runtime_checkable
class CaptionerBackend(Protocol):
    """Produces one caption per task; must be deterministic per task."""

    name: str
    concurrency_safe: bool

    def caption(self, task: CaptionTask) -> str: ...


@dataclass(frozen=True)
class CaptionFailure:
    image_id: str
    reason: str


@dataclass
class CaptionRun:
    """Successful candidate sets plus per-record failures of one run."""

    sets: list[CandidateSet] = field(default_factory=list)
    failures: list[CaptionFailure] = field(default_factory=list)


def default_templates() -> list[PromptTemplate]:
    """The four shipped perspectives with stable template ids."""
    return [
        PromptTemplate(
            template_id="t_obj",
            perspective="object_recognition",
            instruction_text=(
                "List the main objects visible in the image and describe "
                "each one precisely."
            ),
        ),
        PromptTemplate(
            template_id="t_scene",
            perspective="scene_composition",
            instruction_text=(
                "Describe the overall scene: the setting, the background, "
                "and how the elements are arranged."
            ),
        ),
        PromptTemplate(
            template_id="t_subj",
            perspective="subject_emphasis",
            instruction_text=(
                "Describe the primary subject of the image in detail, "
                "focusing on its most distinctive features."
            ),
        ),
        PromptTemplate(
            template_id="t_ctx",
            perspective="contextual_interpretation",
            instruction_text=(
                "Explain the context of the image: what is happening, "
                "where, and under what conditions."
            ),
        ),
    ]


def _caption_one_record(
    record: ImageRecord,
    templates: list[PromptTemplate],
    backend: CaptionerBackend,
    seed: int,
    root: Path | None,
) -> CandidateSet | CaptionFailure:
    image_path = (root / record.path) if root is not None else None
    if image_path is not None and not image_path.is_file():
        return CaptionFailure(record.image_id, f"image not readable: {image_path}")

    candidates: list[CandidateCaption] = []
    for template in templates:
        base_seed = derive_seed(seed, record.image_id, template.template_id)
        text = ""
        for attempt_seed in (base_seed, derive_seed(base_seed, "retry")):
            task = CaptionTask(
                image_id=record.image_id,
                category=record.category,
                image_path=image_path,
                template_id=template.template_id,
                perspective=template.perspective,
                instruction_text=template.instruction_text,
                seed=attempt_seed,
            )
            try:
                text = backend.caption(task).strip()
            except Exception as exc:  # backend failures are per-record
                return CaptionFailure(record.image_id, f"backend error: {exc}")
            if text:
                break
        if not text:
            return CaptionFailure(
                record.image_id,
                f"backend returned empty text twice for template {template.template_id}",
            )
        candidates.append(
            CandidateCaption(
                image_id=record.image_id,
                template_id=template.template_id,
                text=text,
            )
        )
    return CandidateSet(image_id=record.image_id, candidates=candidates)


def generate_candidates(
    records: list[ImageRecord],
    templates: list[PromptTemplate],
    backend: CaptionerBackend,
    seed: int,
    root: str | Path | None = None,
    max_workers: int = 1,
) -> CaptionRun:
    """Caption every record once per template.

    Per-candidate seeds are derived from (seed, image_id, template_id), so
    results do not depend on scheduling order. Records whose backend calls
    fail are excluded and reported in the failure list instead of aborting
    the run. Backends that declare themselves unsafe for concurrent use
    are always called sequentially.
    """
    if not templates:
        raise ValueError("template list must be non-empty")
    ids = [t.template_id for t in templates]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate template ids: {ids}")

    root_path = Path(root) if root is not None else None
    workers = max_workers if getattr(backend, "concurrency_safe", False) else 1

    def work(record: ImageRecord):
        return _caption_one_record(record, templates, backend, seed, root_path)

    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(work, records))
    else:
        outcomes = [work(r) for r in records]

    run = CaptionRun()
    for outcome in outcomes:
        if isinstance(outcome, CaptionFailure):
            log.warning("captioning failed for %s: %s", outcome.image_id, outcome.reason)
            run.failures.append(outcome)
        else:
            run.sets.append(outcome)
    return run


def save_candidates(sets: list[CandidateSet], path: str | Path) -> None:
    """Write `captions_raw.jsonl`, one image per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for cs in sets:
            row = {
                "image_id": cs.image_id,
                "candidates": [
                    {"template_id": c.template_id, "text": c.text}
                    for c in cs.candidates
                ],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_candidates(path: str | Path) -> list[CandidateSet]:
    sets = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            sets.append(
                CandidateSet(
                    image_id=row["image_id"],
                    candidates=[
                        CandidateCaption(
                            image_id=row["image_id"],
                            template_id=c["template_id"],
                            text=c["text"],
                        )
                        for c in row["candidates"]
                    ],
                )
            )
    return sets
