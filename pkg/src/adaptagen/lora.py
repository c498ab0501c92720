"""Low-rank adapter math and frozen-base training.

An adapter augments a frozen weight matrix ``W0`` with a rank-r update
``up @ down`` scaled by a factor sigma, so the effective weight is
``W = W0 + sigma * up @ down``. Two scale conventions are supported:

* ``paper``        sigma = alpha * r / d_in   (default)
* ``conventional`` sigma = alpha / r

``down`` is initialized from a seeded Gaussian and ``up`` starts at zero,
so a fresh adapter is an exact identity on top of the base model. At
inference an extra runtime scale multiplies sigma.

Training runs plain SGD on the adapter factors only: the model reports
its loss gradient with respect to each effective weight matrix, and the
chain rule to the factors lives here:

    d(loss)/d(up)   = sigma * G @ down.T
    d(loss)/d(down) = sigma * up.T @ G

with ``G = d(loss)/dW`` of shape (d_out, d_in).
"""

from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, runtime_checkable

import numpy as np

from .errors import TrainingError
from .seeding import derive_seed

log = logging.getLogger(__name__)

SCALE_MODES = ("paper", "conventional")


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 4.0
    scale_mode: str = "paper"
    target_selectors: tuple[str, ...] = ("to_q", "to_k", "to_v", "to_out")
    learning_rate: float = 1e-4
    max_steps: int = 500
    seed: int = 0
    log_interval: int = 10
    checkpoint_interval: int = 100

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(
                f"scale_mode must be one of {SCALE_MODES}, got {self.scale_mode!r}"
            )
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        self.target_selectors = tuple(self.target_selectors)

    def scale(self, d_in: int) -> float:
        """Adapter scale sigma for a target with ``d_in`` input features."""
        if self.scale_mode == "paper":
            sigma = self.alpha * self.rank / d_in
        else:
            sigma = self.alpha / self.rank
        if not np.isfinite(sigma) or sigma <= 0:
            raise ValueError(f"scale factor must be finite and > 0, got {sigma}")
        return sigma


@dataclass
class AdapterEntry:
    """Factors for one adapted weight: down (r, d_in) and up (d_out, r)."""

    target_name: str
    w0_shape: tuple[int, int]
    down: np.ndarray
    up: np.ndarray

    def __post_init__(self):
        d_out, d_in = self.w0_shape
        if self.down.shape[1] != d_in or self.up.shape[0] != d_out:
            raise ValueError(
                f"factor shapes {self.down.shape}/{self.up.shape} inconsistent "
                f"with target shape {self.w0_shape}"
            )
        if self.down.shape[0] != self.up.shape[1]:
            raise ValueError("down and up disagree on rank")
        if not (np.all(np.isfinite(self.down)) and np.all(np.isfinite(self.up))):
            raise ValueError(f"non-finite adapter factors for {self.target_name}")

    @property
    def rank(self) -> int:
        return self.down.shape[0]


@dataclass
class LoraAdapter:
    entries: dict[str, AdapterEntry]
    config: LoraConfig


@dataclass
class DiffusionBatch:
    """One noise-prediction training batch.

    ``noised`` holds the noised input at timestep ``t``, ``noise`` the
    target noise of identical shape, ``conditioning`` the caption
    embedding (may be None for unconditional models).
    """

    noised: np.ndarray
    t: int
    noise: np.ndarray
    conditioning: np.ndarray | None = None

    def __post_init__(self):
        if self.noised.shape != self.noise.shape:
            raise ValueError(
                f"noised {self.noised.shape} and noise {self.noise.shape} differ"
            )


@dataclass
class TrainState:
    step: int
    loss: float
    checkpoint_path: str | None
    seed: int

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise ValueError(f"TrainState.loss must be finite, got {self.loss}")


@runtime_checkable
class TrainableModel(Protocol):
    """A frozen-base model whose adaptable weights are named matrices.

    ``predict`` must compute the noise prediction from the supplied
    effective weights without mutating them; ``weight_grads`` returns the
    loss gradient with respect to each effective weight.
    """

    def target_weights(self) -> dict[str, np.ndarray]: ...

    def predict(
        self, batch: DiffusionBatch, weights: Mapping[str, np.ndarray]
    ) -> np.ndarray: ...

    def weight_grads(
        self,
        batch: DiffusionBatch,
        weights: Mapping[str, np.ndarray],
        grad_output: np.ndarray,
    ) -> dict[str, np.ndarray]: ...


def init_adapter(
    targets: list[tuple[str, tuple[int, int]]], cfg: LoraConfig
) -> LoraAdapter:
    """Create a fresh adapter: down ~ Gaussian(0, 1/r), up = 0.

    The zero up-factor guarantees the adapter is an exact no-op until the
    first training step. Deterministic for a fixed config seed.
    """
    entries: dict[str, AdapterEntry] = {}
    for name, (d_out, d_in) in targets:
        if cfg.rank > min(d_out, d_in):
            raise ValueError(
                f"rank {cfg.rank} exceeds min dimension of target "
                f"{name!r} with shape ({d_out}, {d_in})"
            )
        rng = np.random.default_rng(derive_seed(cfg.seed, "adapter-init", name))
        down = rng.normal(0.0, 1.0 / cfg.rank, size=(cfg.rank, d_in))
        up = np.zeros((d_out, cfg.rank))
        entries[name] = AdapterEntry(
            target_name=name, w0_shape=(d_out, d_in), down=down, up=up
        )
    return LoraAdapter(entries=entries, config=cfg)


def _check_w0(entry: AdapterEntry, w0: np.ndarray) -> None:
    if w0.shape != entry.w0_shape:
        raise ValueError(
            f"base weight shape {w0.shape} does not match adapter target "
            f"{entry.target_name!r} shape {entry.w0_shape}"
        )


def adapter_forward(
    entry: AdapterEntry,
    w0: np.ndarray,
    x: np.ndarray,
    cfg: LoraConfig,
    runtime_scale: float = 1.0,
) -> np.ndarray:
    """Apply the adapted weight without materializing it.

    Accepts a single input vector of length d_in or a batch with rows of
    length d_in. The runtime scale multiplies sigma on top of the
    configured convention.
    """
    _check_w0(entry, w0)
    sigma = cfg.scale(entry.w0_shape[1]) * runtime_scale
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != entry.w0_shape[1]:
            raise ValueError(f"input length {x.shape[0]} != d_in {entry.w0_shape[1]}")
        return w0 @ x + sigma * (entry.up @ (entry.down @ x))
    if x.ndim == 2:
        if x.shape[1] != entry.w0_shape[1]:
            raise ValueError(f"input width {x.shape[1]} != d_in {entry.w0_shape[1]}")
        return x @ w0.T + sigma * ((x @ entry.down.T) @ entry.up.T)
    raise ValueError(f"input must be 1-D or 2-D, got shape {x.shape}")


def merge(
    entry: AdapterEntry,
    w0: np.ndarray,
    cfg: LoraConfig,
    runtime_scale: float = 1.0,
) -> np.ndarray:
    """Return ``w0 + sigma * up @ down`` as a new array; w0 is untouched."""
    _check_w0(entry, w0)
    sigma = cfg.scale(entry.w0_shape[1]) * runtime_scale
    return w0 + sigma * (entry.up @ entry.down)


def unmerge(
    entry: AdapterEntry,
    w: np.ndarray,
    cfg: LoraConfig,
    runtime_scale: float = 1.0,
) -> np.ndarray:
    """Inverse of :func:`merge`: subtract the scaled low-rank update."""
    _check_w0(entry, w)
    sigma = cfg.scale(entry.w0_shape[1]) * runtime_scale
    return w - sigma * (entry.up @ entry.down)


def diffusion_loss(predicted: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over all elements; zero iff the tensors match."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(
            f"shape mismatch: predicted {predicted.shape} vs target {target.shape}"
        )
    return float(np.mean((predicted - target) ** 2))


def match_targets(names: Iterable[str], selectors: Iterable[str]) -> list[str]:
    """Names matching any selector regex, in input order."""
    patterns = [re.compile(sel) for sel in selectors]
    return [n for n in names if any(p.search(n) for p in patterns)]


def train(
    adapter: LoraAdapter,
    batches: Iterable[DiffusionBatch],
    model: TrainableModel,
    cfg: LoraConfig | None = None,
    checkpoint_dir: str | Path | None = None,
    on_state: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run SGD on the adapter factors against a frozen-base model.

    Consumes up to ``cfg.max_steps`` batches. Base weights are read but
    never written. Checkpoints are saved every ``checkpoint_interval``
    steps when a directory is given, and the final state is always
    persisted. A non-finite loss aborts with the last good checkpoint
    retained on disk.
    """
    cfg = cfg or adapter.config
    base = model.target_weights()
    matched = match_targets(base.keys(), cfg.target_selectors)
    if not matched:
        raise TrainingError(
            f"no target selector {list(cfg.target_selectors)} matches any of "
            f"{sorted(base.keys())}"
        )
    missing = [n for n in matched if n not in adapter.entries]
    if missing:
        raise TrainingError(f"adapter has no entries for matched targets: {missing}")

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def effective() -> dict[str, np.ndarray]:
        out = {}
        for name, w0 in base.items():
            if name in adapter.entries and name in matched:
                out[name] = merge(adapter.entries[name], w0, cfg)
            else:
                out[name] = w0
        return out

    def checkpoint(step: int) -> str | None:
        if ckpt_dir is None:
            return None
        path = ckpt_dir / f"adapter-{step:06d}.bin"
        save_adapter(adapter, path)
        return str(path)

    last_ckpt: str | None = None
    steps_done = 0
    loss = float("nan")

    for step, batch in enumerate(batches):
        if step >= cfg.max_steps:
            break
        weights = effective()
        pred = model.predict(batch, weights)
        loss = diffusion_loss(pred, batch.noise)
        if not np.isfinite(loss):
            log.error("non-finite loss at step %d; aborting", step)
            raise TrainingError(
                f"non-finite loss at step {step}; last checkpoint: {last_ckpt}"
            )

        grad_out = 2.0 * (pred - batch.noise) / pred.size
        grads = model.weight_grads(batch, weights, grad_out)
        for name in matched:
            if name not in grads:
                continue
            entry = adapter.entries[name]
            sigma = cfg.scale(entry.w0_shape[1])
            g = grads[name]
            grad_up = sigma * (g @ entry.down.T)
            grad_down = sigma * (entry.up.T @ g)
            entry.up -= cfg.learning_rate * grad_up
            entry.down -= cfg.learning_rate * grad_down

        steps_done = step + 1
        if steps_done % cfg.log_interval == 0 or steps_done == cfg.max_steps:
            log.info("step %d: loss %.6g", steps_done, loss)
            if on_state is not None:
                on_state(
                    TrainState(
                        step=steps_done,
                        loss=loss,
                        checkpoint_path=last_ckpt,
                        seed=cfg.seed,
                    )
                )
        if ckpt_dir is not None and steps_done % cfg.checkpoint_interval == 0:
            last_ckpt = checkpoint(steps_done)

    if steps_done == 0:
        raise TrainingError("batch stream was empty; nothing to train on")

    final_ckpt = checkpoint(steps_done)
    return TrainState(
        step=steps_done,
        loss=float(loss),
        checkpoint_path=final_ckpt if final_ckpt is not None else last_ckpt,
        seed=cfg.seed,
    )


# Checkpoint container: an 8-byte little-endian header length, a JSON
# header mapping tensor keys to {shape, dtype, offsets} plus the config
# under "__config__", then the concatenated row-major little-endian
# float32 payloads. Keys are "<target>.down" and "<target>.up", sorted.

_HEADER_LEN = struct.Struct("<Q")


def save_adapter(adapter: LoraAdapter, path: str | Path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, entry in adapter.entries.items():
        tensors[f"{name}.down"] = entry.down
        tensors[f"{name}.up"] = entry.up

    header: dict[str, object] = {
        "__config__": {
            "rank": adapter.config.rank,
            "alpha": adapter.config.alpha,
            "scale_mode": adapter.config.scale_mode,
            "target_selectors": list(adapter.config.target_selectors),
            "learning_rate": adapter.config.learning_rate,
            "max_steps": adapter.config.max_steps,
            "seed": adapter.config.seed,
        }
    }
    payload = bytearray()
    for key in sorted(tensors):
        raw = np.ascontiguousarray(tensors[key], dtype="<f4").tobytes()
        header[key] = {
            "shape": list(tensors[key].shape),
            "dtype": "float32",
            "offsets": [len(payload), len(payload) + len(raw)],
        }
        payload.extend(raw)

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER_LEN.pack(len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_adapter(path: str | Path) -> LoraAdapter:
    blob = Path(path).read_bytes()
    (header_len,) = _HEADER_LEN.unpack_from(blob, 0)
    header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    payload = blob[8 + header_len :]

    cfg_dict = header.pop("__config__")
    cfg = LoraConfig(
        rank=cfg_dict["rank"],
        alpha=cfg_dict["alpha"],
        scale_mode=cfg_dict["scale_mode"],
        target_selectors=tuple(cfg_dict["target_selectors"]),
        learning_rate=cfg_dict["learning_rate"],
        max_steps=cfg_dict["max_steps"],
        seed=cfg_dict["seed"],
    )

    tensors: dict[str, np.ndarray] = {}
    for key, meta in header.items():
        if meta["dtype"] != "float32":
            raise ValueError(f"unsupported dtype {meta['dtype']!r} for {key}")
        start, end = meta["offsets"]
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(meta["shape"])
        tensors[key] = arr.astype(np.float64)

    entries: dict[str, AdapterEntry] = {}
    names = sorted({k.rsplit(".", 1)[0] for k in tensors})
    for name in names:
        down = tensors[f"{name}.down"]
        up = tensors[f"{name}.up"]
        entries[name] = AdapterEntry(
            target_name=name, w0_shape=(up.shape[0], down.shape[1]), down=down, up=up
        )
    return LoraAdapter(entries=entries, config=cfg)
