"""Prompt-to-image generation with deterministic job scheduling.

Requests are independent: each carries its own derived seed, so the set
of produced images does not depend on the parallelism degree. Images are
written as PNG and content hashes are computed over decoded pixel bytes,
keeping file metadata out of determinism checks.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

from PIL import Image

from .errors import GenerationBatchError, GenerationError
from .lora import LoraAdapter

log = logging.getLogger(__name__)

FAILURE_EXIT_FRACTION = 0.10


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    prompt_id: str
    category: str
    seed: int
    steps: int = 30
    guidance: float = 7.5
    lora_scale: float = 1.0
    width: int = 512
    height: int = 512

    def __post_init__(self):
        if not self.prompt.strip():
            raise ValueError(f"request {self.prompt_id!r} has an empty prompt")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.guidance < 0:
            raise ValueError(f"guidance must be >= 0, got {self.guidance}")
        if self.lora_scale < 0:
            raise ValueError(f"lora_scale must be >= 0, got {self.lora_scale}")
        for side, value in (("width", self.width), ("height", self.height)):
            if value < 64 or value % 2 != 0:
                raise ValueError(f"{side} must be an even integer >= 64, got {value}")


@dataclass
class GeneratedImage:
    path: str  # relative to the output root
    request: GenerationRequest
    content_hash: str


@runtime_checkable
class GeneratorBackend(Protocol):
    """Turns one request into an image, deterministically.

    ``max_parallelism`` of 0 means unlimited concurrent invocations.
    """

    name: str
    max_parallelism: int

    def generate(
        self, request: GenerationRequest, adapter: LoraAdapter | None
    ) -> Image.Image: ...


@dataclass
class GenerationBatch:
    images: list[GeneratedImage] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def failure_fraction(self) -> float:
        total = len(self.images) + len(self.failures)
        return len(self.failures) / total if total else 0.0


def pixel_hash(image: Image.Image) -> str:
    """SHA-256 over mode, size, and raw pixel bytes of an image."""
    image = image.convert("RGB")
    h = hashlib.sha256()
    h.update(image.mode.encode("ascii"))
    h.update(f"{image.width}x{image.height}".encode("ascii"))
    h.update(image.tobytes())
    return h.hexdigest()


def _output_path(out_dir: Path, request: GenerationRequest) -> Path:
    return out_dir / request.category / f"{request.prompt_id}-{request.seed}.png"


def generate(
    request: GenerationRequest,
    backend: GeneratorBackend,
    out_dir: str | Path,
    adapter: LoraAdapter | None = None,
) -> GeneratedImage:
    """Render one request to ``<out>/<category>/<prompt_id>-<seed>.png``.

    Retries once on backend failure, then raises.
    """
    out_dir = Path(out_dir)
    last_exc: Exception | None = None
    for attempt in range(2):
        try:
            image = backend.generate(request, adapter).convert("RGB")
            break
        except Exception as exc:
            last_exc = exc
            log.warning(
                "generation attempt %d failed for %s: %s",
                attempt + 1, request.prompt_id, exc,
            )
    else:
        raise GenerationError(
            f"generation failed twice for {request.prompt_id}: {last_exc}"
        ) from last_exc

    path = _output_path(out_dir, request)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="PNG")
    return GeneratedImage(
        path=path.relative_to(out_dir).as_posix(),
        request=request,
        content_hash=pixel_hash(image),
    )


def batch_generate(
    requests: Sequence[GenerationRequest],
    backend: GeneratorBackend,
    out_dir: str | Path,
    adapter: LoraAdapter | None = None,
    parallelism: int = 1,
    manifest_path: str | Path | None = None,
) -> GenerationBatch:
    """Attempt every request and record successes and failures.

    Results are collected in prompt_id order regardless of scheduling.
    Raises when more than 10% of the requests fail (the manifest is still
    written first, so partial output remains inspectable).
    """
    ids = [r.prompt_id for r in requests]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate prompt_ids: {dupes}")
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")

    limit = getattr(backend, "max_parallelism", 1)
    workers = parallelism if limit == 0 else min(parallelism, max(limit, 1))

    def work(request: GenerationRequest):
        try:
            return generate(request, backend, out_dir, adapter)
        except GenerationError as exc:
            return {"prompt_id": request.prompt_id, "request": request, "error": str(exc)}

    if workers > 1 and len(requests) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(work, requests))
    else:
        outcomes = [work(r) for r in requests]

    batch = GenerationBatch()
    for outcome in outcomes:
        if isinstance(outcome, GeneratedImage):
            batch.images.append(outcome)
        else:
            batch.failures.append(outcome)
    batch.images.sort(key=lambda g: g.request.prompt_id)
    batch.failures.sort(key=lambda f: f["prompt_id"])

    if manifest_path is not None:
        write_generation_manifest(batch, manifest_path)

    if batch.failure_fraction > FAILURE_EXIT_FRACTION:
        raise GenerationBatchError(
            f"{len(batch.failures)} of {len(requests)} generation requests failed",
            failed=len(batch.failures),
            total=len(requests),
        )
    return batch


def write_generation_manifest(batch: GenerationBatch, path: str | Path) -> None:
    """Write `generated.jsonl`, successes and failures in prompt_id order."""
    rows = []
    for img in batch.images:
        r = img.request
        rows.append({
            "prompt_id": r.prompt_id,
            "seed": r.seed,
            "path": img.path,
            "content_hash": img.content_hash,
            "status": "ok",
            "n": r.steps,
            "omega": r.guidance,
            "s": r.lora_scale,
        })
    for failure in batch.failures:
        r = failure["request"]
        rows.append({
            "prompt_id": r.prompt_id,
            "seed": r.seed,
            "path": None,
            "content_hash": None,
            "status": "failed",
            "n": r.steps,
            "omega": r.guidance,
            "s": r.lora_scale,
        })
    rows.sort(key=lambda row: row["prompt_id"])
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_generation_manifest(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def verify_manifest(path: str | Path, out_dir: str | Path) -> list[str]:
    """Re-hash every ok entry against its file; returns mismatched ids."""
    out_dir = Path(out_dir)
    bad = []
    for row in load_generation_manifest(path):
        if row["status"] != "ok":
            continue
        file_path = out_dir / row["path"]
        if not file_path.is_file():
            bad.append(row["prompt_id"])
            continue
        with Image.open(file_path) as img:
            if pixel_hash(img) != row["content_hash"]:
                bad.append(row["prompt_id"])
    return bad
