"""Backend registry and the deterministic mock backends.

Every pluggable surface (captioner, embedder, paraphraser, generator,
feature extractor, classifier, trainable model) is resolved by string
name through one registry. The "mock" implementations are pure functions
of their inputs, which makes whole-pipeline runs reproducible without
model weights. Real integrations register under other names, either in
code or from plugin files discovered via ``ADAPTAGEN_BACKEND_DIR``.
"""

from __future__ import annotations

import importlib.util
import os
import sys
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np
from PIL import Image

from .captioning import CaptionTask
from .errors import BackendError
from .generation import GenerationRequest
from .lora import DiffusionBatch, LoraAdapter
from .selection import EmbeddingVector, ImageRef
from .seeding import derive_seed, stable_hash32

BACKEND_KINDS = (
    "captioner",
    "embedder",
    "paraphraser",
    "generator",
    "features",
    "classifier",
    "model",
)

PLUGIN_ENV_VAR = "ADAPTAGEN_BACKEND_DIR"


class BackendRegistry:
    """Maps (kind, name) to a factory producing a backend instance."""

    def __init__(self):
        self._factories: dict[str, dict[str, Callable[..., object]]] = {
            kind: {} for kind in BACKEND_KINDS
        }

    def register(self, kind: str, name: str, factory: Callable[..., object]) -> None:
        if kind not in self._factories:
            raise BackendError(f"unknown backend kind {kind!r}; expected {BACKEND_KINDS}")
        self._factories[kind][name] = factory

    def has(self, kind: str, name: str) -> bool:
        return name in self._factories.get(kind, {})

    def names(self, kind: str) -> list[str]:
        return sorted(self._factories.get(kind, {}))

    def create(self, kind: str, name: str, **options) -> object:
        if kind not in self._factories:
            raise BackendError(f"unknown backend kind {kind!r}")
        factory = self._factories[kind].get(name)
        if factory is None:
            raise BackendError(
                f"no {kind} backend named {name!r}; registered: {self.names(kind)}"
            )
        return factory(**options)


registry = BackendRegistry()


def load_backend_plugins(directory: str | Path | None = None) -> list[str]:
    """Import every *.py file in the plugin directory (or $ADAPTAGEN_BACKEND_DIR).

    Plugin modules register their backends at import time via
    ``adaptagen.backends.registry``. Returns the loaded module names.
    """
    if directory is None:
        directory = os.environ.get(PLUGIN_ENV_VAR)
    if not directory:
        return []
    plugin_dir = Path(directory)
    if not plugin_dir.is_dir():
        raise BackendError(f"backend plugin directory not found: {plugin_dir}")
    loaded = []
    for path in sorted(plugin_dir.glob("*.py")):
        mod_name = f"adaptagen_plugin_{path.stem}"
        spec = importlib.util.spec_from_file_location(mod_name, path)
        if spec is None or spec.loader is None:
            raise BackendError(f"cannot load backend plugin {path}")
        module = importlib.util.module_from_spec(spec)
        sys.modules[mod_name] = module
        spec.loader.exec_module(module)
        loaded.append(mod_name)
    return loaded


def _gaussian_from(seed: int, size: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=size)


def _digest_bytes(key: str, count: int) -> bytes:
    """Deterministic byte stream: chained 32-bit hashes of (key, counter)."""
    out = bytearray()
    counter = 0
    while len(out) < count:
        out.extend(stable_hash32(key, counter).to_bytes(4, "little"))
        counter += 1
    return bytes(out[:count])


class MockCaptioner:
    """Emits ``<perspective keyword> photo of <category> variant-<h>``.

    ``h`` is a stable 32-bit hash of (image_id, template_id) mod 7, so
    captions are deterministic, distinct across templates, and always
    carry the category tokens.
    """

    name = "mock"
    concurrency_safe = True

    _KEYWORDS = {
        "object_recognition": "a detailed",
        "scene_composition": "a wide-angle",
        "subject_emphasis": "a close-up",
        "contextual_interpretation": "an ambient",
    }

    _EXTRAS = (
        "with natural lighting",
        "on a plain background",
        "in sharp focus",
        "with soft shadows",
        "at close range",
        "in daylight",
        "with muted colors",
    )

    def caption(self, task: CaptionTask) -> str:
        keyword = self._KEYWORDS.get(task.perspective, "a plain")
        category_phrase = " ".join(
            t for t in task.category.lower().replace("-", " ").replace("_", " ").split()
        )
        h = stable_hash32(task.image_id, task.template_id) % 7
        return (
            f"{keyword} photo of {category_phrase} variant-{h} {self._EXTRAS[h]}"
        )


class MockEmbedder:
    """Hash-token text embeddings and category-anchored image embeddings.

    Text vectors sum per-token seeded Gaussian directions, so texts that
    share words land closer together. Image vectors blend the category
    token direction with a byte-derived component from the decoded image
    (falling back to the image id when no file is available).
    """

    name = "mock"

    def __init__(self, dim: int = 32):
        self.dim = dim

    def _token_vector(self, token: str) -> np.ndarray:
        return _gaussian_from(derive_seed("mock-embed-token", token), self.dim)

    def embed_text(self, text: str) -> EmbeddingVector:
        tokens = [t for t in text.lower().split() if t]
        if not tokens:
            raise BackendError("cannot embed empty text")
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self._token_vector(tok)
        return EmbeddingVector(acc)

    def _byte_component(self, ref: ImageRef) -> np.ndarray:
        if ref.path is not None and Path(ref.path).is_file():
            with Image.open(ref.path) as img:
                small = img.convert("RGB").resize((8, 8), Image.NEAREST)
            raw = np.frombuffer(small.tobytes(), dtype=np.uint8).astype(np.float64)
            seed_key = derive_seed("mock-embed-pixels", raw.tobytes().hex())
        else:
            seed_key = derive_seed("mock-embed-id", ref.image_id)
        return _gaussian_from(seed_key, self.dim)

    def embed_image(self, ref: ImageRef) -> EmbeddingVector:
        tokens = [t for t in ref.category.lower().replace("_", " ").split() if t]
        anchor = np.zeros(self.dim)
        for tok in tokens:
            anchor += self._token_vector(tok)
        norm = np.linalg.norm(anchor)
        if norm > 0:
            anchor /= norm
        noise = self._byte_component(ref)
        noise /= np.linalg.norm(noise)
        return EmbeddingVector(0.7 * anchor + 0.3 * noise)


class MockParaphraser:
    """Decorates the input text with a seeded stylistic suffix.

    The original text survives verbatim, so any core tokens are
    preserved. Higher temperatures unlock a wider suffix pool, mimicking
    increased sampling variability.
    """

    name = "mock"

    _SUFFIXES = (
        "captured in natural light",
        "rendered in fine detail",
        "seen from a slight angle",
        "framed against a clean backdrop",
        "with subtle depth of field",
        "under even studio lighting",
        "composed with generous negative space",
        "presented in documentary style",
    )

    def transform(self, text: str, temperature: float, seed: int) -> str:
        text = text.strip()
        if not text:
            raise BackendError("cannot paraphrase empty text")
        pool = max(1, min(len(self._SUFFIXES), int(round(temperature * 8))))
        rng = np.random.default_rng(
            derive_seed("mock-paraphrase", text, f"{temperature:.6f}", seed)
        )
        suffix = self._SUFFIXES[int(rng.integers(pool))]
        return f"{text}, {suffix}"


class MockGenerator:
    """Tiles an 8x8 grid of color blocks derived from (prompt, seed, size).

    A pure function of those three inputs: adapter, step count, and
    guidance do not change the bytes, which keeps scheduling-invariance
    and rerun-determinism checks exact.
    """

    name = "mock"
    max_parallelism = 0  # unlimited

    _GRID = 8

    def generate(
        self, request: GenerationRequest, adapter: LoraAdapter | None
    ) -> Image.Image:
        key = f"{request.prompt}\x1f{request.seed}\x1f{request.width}x{request.height}"
        raw = _digest_bytes(key, self._GRID * self._GRID * 3)
        blocks = np.frombuffer(raw, dtype=np.uint8).reshape(self._GRID, self._GRID, 3)
        tile = Image.fromarray(blocks, mode="RGB")
        return tile.resize((request.width, request.height), Image.NEAREST)


def _image_signal(image_path: Path, side: int = 8) -> np.ndarray:
    """Fixed-length pixel summary used by the mock metric backends."""
    with Image.open(image_path) as img:
        small = img.convert("RGB").resize((side, side), Image.NEAREST)
    return np.frombuffer(small.tobytes(), dtype=np.uint8).astype(np.float64)


class MockFeatureBackend:
    """Seeded random projection of decoded pixel bytes to a feature vector."""

    name = "mock"

    def __init__(self, dim: int = 16):
        self.dim = dim
        signal_len = 8 * 8 * 3
        rng = np.random.default_rng(derive_seed("mock-features", dim))
        self._projection = rng.normal(size=(dim, signal_len)) / np.sqrt(signal_len)

    def features(self, image_path: Path) -> np.ndarray:
        signal = _image_signal(Path(image_path)) / 255.0
        return self._projection @ signal


class MockClassifierBackend:
    """Softmax over a seeded random projection of decoded pixel bytes."""

    name = "mock"

    def __init__(self, classes: int = 8, sharpness: float = 4.0):
        self.classes = classes
        self.sharpness = sharpness
        signal_len = 8 * 8 * 3
        rng = np.random.default_rng(derive_seed("mock-classifier", classes))
        self._projection = rng.normal(size=(classes, signal_len)) / np.sqrt(signal_len)

    def class_probabilities(self, image_path: Path) -> np.ndarray:
        signal = _image_signal(Path(image_path)) / 255.0
        logits = self.sharpness * (self._projection @ signal)
        logits -= logits.max()
        exp = np.exp(logits)
        return exp / exp.sum()


class MockNoiseModel:
    """Linear noise predictor with named attention-style projections.

    The prediction averages ``W_t @ x`` over the targets. A hidden
    perturbed copy of the base weights defines the training target, so
    adapting the base toward it is a well-posed least-squares problem
    whose loss demonstrably falls under SGD.
    """

    def __init__(
        self,
        dim: int = 8,
        targets: tuple[str, ...] = (
            "block0.attn.to_q",
            "block0.attn.to_k",
            "block0.attn.to_v",
            "block0.attn.to_out",
        ),
        seed: int = 0,
        shift: float = 0.5,
    ):
        self.dim = dim
        self._names = tuple(targets)
        self._base: dict[str, np.ndarray] = {}
        self._true: dict[str, np.ndarray] = {}
        for name in self._names:
            rng = np.random.default_rng(derive_seed("mock-model", seed, name))
            w0 = rng.normal(size=(dim, dim)) / np.sqrt(dim)
            delta = rng.normal(size=(dim, dim)) * shift / np.sqrt(dim)
            self._base[name] = w0
            self._true[name] = w0 + delta

    def target_weights(self) -> dict[str, np.ndarray]:
        return dict(self._base)

    def predict(
        self, batch: DiffusionBatch, weights: Mapping[str, np.ndarray]
    ) -> np.ndarray:
        acc = np.zeros_like(batch.noised)
        for name in self._names:
            acc += batch.noised @ weights[name].T
        return acc / len(self._names)

    def weight_grads(
        self,
        batch: DiffusionBatch,
        weights: Mapping[str, np.ndarray],
        grad_output: np.ndarray,
    ) -> dict[str, np.ndarray]:
        scale = 1.0 / len(self._names)
        return {
            name: scale * (grad_output.T @ batch.noised) for name in self._names
        }

    def training_batches(
        self,
        seed: int,
        batch_size: int = 16,
        conditioning: list[np.ndarray] | None = None,
    ) -> Iterator[DiffusionBatch]:
        """Endless stream of synthetic batches whose target noise comes
        from the hidden true weights."""
        step = 0
        while True:
            rng = np.random.default_rng(derive_seed(seed, "mock-batch", step))
            x = rng.normal(size=(batch_size, self.dim))
            noise = np.zeros_like(x)
            for name in self._names:
                noise += x @ self._true[name].T
            noise /= len(self._names)
            cond = None
            if conditioning:
                cond = conditioning[step % len(conditioning)]
            yield DiffusionBatch(noised=x, t=step % 1000, noise=noise, conditioning=cond)
            step += 1


def _register_defaults() -> None:
    registry.register("captioner", "mock", MockCaptioner)
    registry.register("embedder", "mock", MockEmbedder)
    registry.register("paraphraser", "mock", MockParaphraser)
    registry.register("generator", "mock", MockGenerator)
    registry.register("features", "mock", MockFeatureBackend)
    registry.register("classifier", "mock", MockClassifierBackend)
    registry.register("model", "mock", MockNoiseModel)


_register_defaults()
