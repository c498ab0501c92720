"""Two-phase caption transformation for prompt synthesis.

Phase 1 paraphrases each selected caption at a randomized temperature
while preserving the category's core tokens. When more prompts are
requested than captions exist, phase 2 builds a per-category corpus of
caption segments and fuses attribute segments across source images onto
seeded-chosen base captions.

Segmentation rule: captions split at commas and before a fixed set of
conjunctions and prepositions; the leading piece is the caption's head
and the remaining pieces form the attribute pool. Segments whose tokens
are all core tokens are excluded from the pool.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .selection import SelectedCaption
from .seeding import derive_seed

log = logging.getLogger(__name__)

# Boundary words that start a new attribute segment. "of" is deliberately
# absent so heads like "a photo of pizza" stay in one piece.
BOUNDARY_WORDS = (
    "with", "and", "on", "in", "at", "near", "under", "over", "beside",
    "against", "atop", "beneath", "among", "between", "featuring",
    "holding", "wearing", "surrounded",
)

_BOUNDARY_SPLIT = re.compile(
    r"\s+(?=(?:" + "|".join(BOUNDARY_WORDS) + r")\b)", flags=re.IGNORECASE
)
_NON_ALNUM = re.compile(r"[^a-z0-9]+")


@dataclass(frozen=True)
class TemperatureSpec:
    """Base paraphrase temperature plus a uniform spread around it."""

    tau_base: float = 0.8
    delta_tau: float = 0.2

    def __post_init__(self):
        if self.delta_tau < 0:
            raise ValueError(f"delta_tau must be >= 0, got {self.delta_tau}")
        if self.tau_base - self.delta_tau <= 0:
            raise ValueError(
                f"tau_base - delta_tau must be > 0, got "
                f"{self.tau_base} - {self.delta_tau}"
            )


@dataclass(frozen=True)
class TransformedCaption:
    source_image_id: str
    text: str
    tau_used: float | None
    phase: str  # "phase1" | "phase2"
    borrowed_from: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("transformed caption text must be non-empty")
        if self.phase not in ("phase1", "phase2"):
            raise ValueError(f"unknown phase {self.phase!r}")


@dataclass(frozen=True)
class Segment:
    source_image_id: str
    text: str


@dataclass
class PromptCorpus:
    """Per-category fusion material: base captions plus attribute segments."""

    category: str
    core_tokens: list[str]
    segments: list[Segment]
    bases: list[SelectedCaption]
    fusion_capable: bool

    def __post_init__(self):
        if not self.core_tokens:
            raise ValueError("core_tokens must be non-empty")


@runtime_checkable
class ParaphraserBackend(Protocol):
    """Deterministic text rewriter; output non-empty for non-empty input."""

    name: str

    def transform(self, text: str, temperature: float, seed: int) -> str: ...


@dataclass(frozen=True)
class PromptPlan:
    phase1_count: int
    phase2_count: int


def core_tokens_for(category: str) -> list[str]:
    """Lowercased alphanumeric tokens of a category label."""
    tokens = [t for t in _NON_ALNUM.split(category.lower()) if t]
    if not tokens:
        raise ValueError(f"category {category!r} yields no core tokens")
    return tokens


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace (dedupe key)."""
    return " ".join(_NON_ALNUM.split(text.lower())).strip()


def contains_core_tokens(text: str, core_tokens: Sequence[str]) -> bool:
    words = set(normalize_text(text).split())
    return all(tok in words for tok in core_tokens)


def sample_temperature(spec: TemperatureSpec, rng_seed: int) -> float:
    """tau_base + delta_tau * u with u seeded-uniform on [-1, 1]."""
    rng = np.random.default_rng(rng_seed)
    u = rng.uniform(-1.0, 1.0)
    return spec.tau_base + spec.delta_tau * u


def split_caption(text: str) -> tuple[str, list[str]]:
    """Split a caption into its head and attribute segments."""
    head = ""
    segments: list[str] = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        pieces = [p.strip() for p in _BOUNDARY_SPLIT.split(chunk) if p.strip()]
        if not head and pieces:
            head = pieces[0]
            pieces = pieces[1:]
        segments.extend(pieces)
    return head, segments


def _category_of(image_id: str) -> str | None:
    return image_id.split("/", 1)[0] if "/" in image_id else None


def _paraphrase_with_fallback(
    text: str,
    image_id: str,
    backend: ParaphraserBackend,
    spec: TemperatureSpec,
    item_seed: int,
    retry_seed: int,
    core_tokens: Sequence[str] | None,
) -> tuple[str, float | None]:
    """Try the paraphraser twice, then fall back to the original text."""
    for seed in (item_seed, retry_seed):
        tau = sample_temperature(spec, seed)
        try:
            out = backend.transform(text, tau, seed).strip()
        except Exception as exc:
            log.warning("paraphrase failed for %s: %s", image_id, exc)
            continue
        if not out:
            continue
        if core_tokens is not None and not contains_core_tokens(out, core_tokens):
            continue
        return out, tau
    log.warning("falling back to untransformed caption for %s", image_id)
    return text, None


def phase1_transform(
    selected: Sequence[SelectedCaption],
    backend: ParaphraserBackend,
    spec: TemperatureSpec,
    seed: int,
) -> list[TransformedCaption]:
    """Paraphrase each caption once at a per-item sampled temperature.

    An output that drops the category core tokens (or an erroring
    backend) is retried once with a perturbed seed, then replaced by the
    untransformed caption; generation must never stall on a bad
    paraphrase.
    """
    if not selected:
        raise ValueError("phase1_transform requires at least one caption")
    out = []
    for item in selected:
        category = _category_of(item.image_id)
        core = core_tokens_for(category) if category else None
        item_seed = derive_seed(seed, "phase1", item.image_id)
        retry_seed = derive_seed(seed, "phase1", item.image_id, "retry")
        text, tau = _paraphrase_with_fallback(
            item.text, item.image_id, backend, spec, item_seed, retry_seed, core
        )
        out.append(
            TransformedCaption(
                source_image_id=item.image_id,
                text=text,
                tau_used=tau,
                phase="phase1",
            )
        )
    return out


def build_corpus(
    selected: Sequence[SelectedCaption],
    category: str,
    core_tokens: Sequence[str] | None = None,
) -> PromptCorpus:
    """Collect attribute segments from all of a category's captions.

    Core-token-only segments carry no attribute information and are
    excluded. A corpus with zero pool segments is flagged fusion-incapable
    and phase 2 degrades to seeded caption repetition.
    """
    if not selected:
        raise ValueError("cannot build a corpus from zero captions")
    core = list(core_tokens) if core_tokens else core_tokens_for(category)
    for item in selected:
        item_cat = _category_of(item.image_id)
        if item_cat is not None and item_cat != category:
            raise ValueError(
                f"caption {item.image_id!r} does not belong to category {category!r}"
            )

    # Function words carry no attribute content, so they do not rescue a
    # segment from the core-only exclusion.
    function_words = set(BOUNDARY_WORDS) | {"a", "an", "the", "of"}
    segments: list[Segment] = []
    for item in selected:
        _, segs = split_caption(item.text)
        for seg in segs:
            content = set(normalize_text(seg).split()) - function_words
            if content <= set(core):
                continue
            segments.append(Segment(source_image_id=item.image_id, text=seg))

    return PromptCorpus(
        category=category,
        core_tokens=core,
        segments=segments,
        bases=list(selected),
        fusion_capable=bool(segments),
    )


def _starts_with_boundary(segment: str) -> bool:
    first = segment.split(None, 1)[0].lower() if segment.split() else ""
    return first in BOUNDARY_WORDS


def _assemble(head: str, segments: Sequence[str]) -> str:
    parts = [head]
    for seg in segments:
        parts.append((" " if _starts_with_boundary(seg) else ", ") + seg)
    return "".join(parts)


def _ensure_core(text: str, corpus: PromptCorpus) -> str:
    if contains_core_tokens(text, corpus.core_tokens):
        return text
    log.warning("fused prompt lost core tokens; appending category phrase")
    return f"{text}, {' '.join(corpus.core_tokens)}"


def _dedupe_suffix(text: str, index: int, seen: set[str]) -> str:
    suffixed = f"{text} ({index})"
    bump = 2
    while normalize_text(suffixed) in seen:
        suffixed = f"{text} ({index} {bump})"
        bump += 1
    return suffixed


def phase1_cycle(
    selected: Sequence[SelectedCaption],
    count: int,
    seed: int,
    backend: ParaphraserBackend | None = None,
    spec: TemperatureSpec | None = None,
    core_tokens: Sequence[str] | None = None,
    site: str = "cycle",
) -> list[TransformedCaption]:
    """Emit ``count`` prompts by cycling captions through phase-1 style
    paraphrasing with distinct derived seeds.

    Serves both the fusion-disabled configuration and the degraded path
    of a fusion-incapable corpus. Without a backend the captions pass
    through untransformed; colliding texts get an ordinal suffix.
    """
    if not selected:
        raise ValueError("phase1_cycle requires at least one caption")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    spec = spec or TemperatureSpec()
    out: list[TransformedCaption] = []
    seen: set[str] = set()
    for i in range(count):
        base = selected[i % len(selected)]
        core = core_tokens
        if core is None:
            category = _category_of(base.image_id)
            core = core_tokens_for(category) if category else None
        if backend is not None:
            item_seed = derive_seed(seed, site, base.image_id, i)
            retry_seed = derive_seed(seed, site, base.image_id, i, "retry")
            text, tau = _paraphrase_with_fallback(
                base.text, base.image_id, backend, spec,
                item_seed, retry_seed, core,
            )
        else:
            text, tau = base.text, None
        norm = normalize_text(text)
        if norm in seen:
            text = _dedupe_suffix(text, i, seen)
            norm = normalize_text(text)
        seen.add(norm)
        out.append(
            TransformedCaption(
                source_image_id=base.image_id,
                text=text,
                tau_used=tau,
                phase="phase1",
            )
        )
    return out


def phase2_fuse(
    corpus: PromptCorpus,
    count: int,
    seed: int,
    backend: ParaphraserBackend | None = None,
    spec: TemperatureSpec | None = None,
) -> list[TransformedCaption]:
    """Synthesize ``count`` prompts by cross-image segment fusion.

    Each prompt takes a seeded-chosen base caption and substitutes or
    appends one or two attribute segments originating from a different
    source image. Prompts are deduplicated by normalized text: a
    collision is resampled up to 10 times, then a discriminating ordinal
    suffix is appended. Every output contains the category core tokens.

    The optional paraphraser backend only serves the degraded path taken
    when the corpus cannot support fusion.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")

    # Bases must have at least one foreign segment available, otherwise
    # cross-image fusion cannot be guaranteed.
    eligible = [
        b for b in corpus.bases
        if any(s.source_image_id != b.image_id for s in corpus.segments)
    ]
    if not corpus.fusion_capable or not eligible:
        log.warning(
            "corpus for %s cannot support cross-image fusion; "
            "emitting cycled paraphrases instead",
            corpus.category,
        )
        return phase1_cycle(
            corpus.bases, count, seed, backend, spec,
            core_tokens=corpus.core_tokens, site="degraded",
        )

    rng = np.random.default_rng(derive_seed(seed, "phase2", corpus.category))
    out: list[TransformedCaption] = []
    seen: set[str] = set()

    for i in range(count):
        last: TransformedCaption | None = None
        for _attempt in range(11):
            base = eligible[int(rng.integers(len(eligible)))]
            pool = [s for s in corpus.segments if s.source_image_id != base.image_id]
            k = min(int(rng.integers(1, 3)), len(pool))
            picked_idx = rng.choice(len(pool), size=k, replace=False)
            picked = [pool[int(j)] for j in picked_idx]

            head, own_segments = split_caption(base.text)
            substitute = bool(own_segments) and rng.random() < 0.5
            if substitute:
                drop = int(rng.integers(len(own_segments)))
                kept = [s for j, s in enumerate(own_segments) if j != drop]
                new_segments = kept + [p.text for p in picked]
            else:
                new_segments = own_segments + [p.text for p in picked]

            last = TransformedCaption(
                source_image_id=base.image_id,
                text=_ensure_core(_assemble(head, new_segments), corpus),
                tau_used=None,
                phase="phase2",
                borrowed_from=tuple(p.source_image_id for p in picked),
            )
            if normalize_text(last.text) not in seen:
                break
        else:
            # 10 resamples collided; force uniqueness with an ordinal suffix.
            last = TransformedCaption(
                source_image_id=last.source_image_id,
                text=_dedupe_suffix(last.text, i, seen),
                tau_used=None,
                phase="phase2",
                borrowed_from=last.borrowed_from,
            )
        seen.add(normalize_text(last.text))
        out.append(last)
    return out


def plan_prompts(selected: Sequence[SelectedCaption], requested: int) -> PromptPlan:
    """Split a prompt budget between per-caption paraphrase and fusion."""
    if not selected:
        raise ValueError("plan_prompts requires at least one caption")
    if requested < 1:
        raise ValueError(f"requested must be >= 1, got {requested}")
    n = len(selected)
    if requested <= n:
        return PromptPlan(phase1_count=requested, phase2_count=0)
    return PromptPlan(phase1_count=n, phase2_count=requested - n)
