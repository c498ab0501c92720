"""End-to-end orchestration across the pipeline stages.

Stages run strictly in order, each persisting its artifact before the
next begins, so any window of stages can be re-run from the artifacts of
the previous ones. The stage order is:

    ingest -> caption -> select -> train -> transform -> generate -> evaluate

A run report with per-stage status, timings, the config snapshot, and a
global digest over all JSON/JSONL artifacts is written at the end of
every run, including failed ones.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import captioning, dataset, generation, lora, metrics, selection, transform
from .backends import registry
from .config import RunConfig
from .errors import PipelineError
from .seeding import derive_seed, stable_hash

log = logging.getLogger(__name__)

STAGES = ("ingest", "caption", "select", "train", "transform", "generate", "evaluate")


@dataclass
class ArtifactPaths:
    out_dir: Path

    @property
    def manifest(self) -> Path:
        return self.out_dir / "manifest.json"

    @property
    def captions_raw(self) -> Path:
        return self.out_dir / "captions_raw.jsonl"

    @property
    def caption_failures(self) -> Path:
        return self.out_dir / "caption_failures.json"

    @property
    def similarity(self) -> Path:
        return self.out_dir / "similarity_matrix.json"

    @property
    def selected(self) -> Path:
        return self.out_dir / "captions_selected.jsonl"

    @property
    def adapters_dir(self) -> Path:
        return self.out_dir / "adapters"

    @property
    def train_state(self) -> Path:
        return self.out_dir / "train_state.json"

    @property
    def prompts(self) -> Path:
        return self.out_dir / "prompts.jsonl"

    @property
    def images_dir(self) -> Path:
        return self.out_dir / "images"

    @property
    def generated(self) -> Path:
        return self.out_dir / "generated.jsonl"

    @property
    def metrics(self) -> Path:
        return self.out_dir / "metrics.json"

    @property
    def report(self) -> Path:
        return self.out_dir / "run_report.json"


@dataclass
class StageResult:
    name: str
    status: str  # "ok" | "failed" | "skipped"
    seconds: float
    artifacts: list[str] = field(default_factory=list)


@dataclass
class RunReport:
    stages: list[StageResult]
    config: dict
    global_digest: str

    def to_json_dict(self) -> dict:
        return {
            "stages": [
                {
                    "name": s.name,
                    "status": s.status,
                    "seconds": s.seconds,
                    "artifacts": s.artifacts,
                }
                for s in self.stages
            ],
            "config": self.config,
            "global_digest": self.global_digest,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    @property
    def ok(self) -> bool:
        return all(s.status in ("ok", "skipped") for s in self.stages)


def compute_global_digest(out_dir: Path) -> str:
    """SHA-256 over every JSON/JSONL artifact except the run report."""
    h = hashlib.sha256()
    paths = sorted(
        p
        for pattern in ("*.json", "*.jsonl")
        for p in out_dir.rglob(pattern)
        if p.name != "run_report.json"
    )
    for p in paths:
        h.update(p.relative_to(out_dir).as_posix().encode("utf-8"))
        h.update(b"\x00")
        h.update(p.read_bytes())
        h.update(b"\x00")
    return h.hexdigest()


def _require(paths: list[Path], stage: str) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise PipelineError(
            f"stage {stage!r} requires artifacts that do not exist: {missing}; "
            "run the earlier stages first"
        )


def _templates_from_config(cfg: RunConfig) -> list[captioning.PromptTemplate]:
    if cfg.caption.templates is None:
        return captioning.default_templates()
    return [
        captioning.PromptTemplate(
            template_id=entry["template_id"],
            perspective=entry["perspective"],
            instruction_text=entry["instruction_text"],
        )
        for entry in cfg.caption.templates
    ]


def stage_ingest(cfg: RunConfig, paths: ArtifactPaths) -> list[str]:
    manifest = dataset.scan_dataset(cfg.dataset.root)
    sampled = dataset.sample_per_category(manifest, cfg.dataset.k, cfg.seed)
    sampled.save(paths.manifest)
    return [str(paths.manifest)]


def stage_caption(cfg: RunConfig, paths: ArtifactPaths) -> list[str]:
    _require([paths.manifest], "caption")
    manifest = dataset.DatasetManifest.load(paths.manifest)
    backend = registry.create("captioner", cfg.caption.backend)
    templates = _templates_from_config(cfg)
    run = captioning.generate_candidates(
        manifest.records,
        templates,
        backend,
        seed=derive_seed(cfg.seed, "caption"),
        root=manifest.root,
    )
    if not run.sets:
        raise PipelineError("captioning failed for every record")
    artifacts = [str(paths.captions_raw)]
    captioning.save_candidates(run.sets, paths.captions_raw)
    if run.failures:
        failures = [
            {"image_id": f.image_id, "reason": f.reason} for f in run.failures
        ]
        paths.caption_failures.write_text(
            json.dumps(failures, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        artifacts.append(str(paths.caption_failures))
    return artifacts


def stage_select(cfg: RunConfig, paths: ArtifactPaths) -> list[str]:
    _require([paths.manifest, paths.captions_raw], "select")
    manifest = dataset.DatasetManifest.load(paths.manifest)
    sets = captioning.load_candidates(paths.captions_raw)
    by_id = {cs.image_id: cs for cs in sets}
    records = [r for r in manifest.records if r.image_id in by_id]
    aligned = [by_id[r.image_id] for r in records]

    backend = registry.create("embedder", cfg.select.backend)
    matrix = selection.build_similarity_matrix(
        records, aligned, backend, root=manifest.root
    )
    selected = selection.select_optimal(matrix, aligned)
    matrix.save(paths.similarity)
    selection.save_selected(selected, paths.selected)
    return [str(paths.similarity), str(paths.selected)]


def stage_train(cfg: RunConfig, paths: ArtifactPaths) -> list[str]:
    _require([paths.selected], "train")
    selected = selection.load_selected(paths.selected)

    model = registry.create("model", cfg.lora.backend)
    lora_cfg = lora.LoraConfig(
        rank=cfg.lora.rank,
        alpha=cfg.lora.alpha,
        scale_mode=cfg.lora.scale_mode,
        target_selectors=tuple(cfg.lora.target_selectors),
        learning_rate=cfg.lora.learning_rate,
        max_steps=cfg.lora.max_steps,
        seed=derive_seed(cfg.seed, "train"),
        log_interval=cfg.lora.log_interval,
        checkpoint_interval=cfg.lora.checkpoint_interval,
    )
    base = model.target_weights()
    matched = lora.match_targets(base.keys(), lora_cfg.target_selectors)
    adapter = lora.init_adapter([(n, base[n].shape) for n in matched], lora_cfg)

    embedder = registry.create("embedder", cfg.select.backend)
    conditioning = [embedder.embed_text(s.text).values for s in selected]
    batches = model.training_batches(seed=lora_cfg.seed, conditioning=conditioning)

    state = lora.train(
        adapter, batches, model, lora_cfg, checkpoint_dir=paths.adapters_dir
    )
    # Checkpoint path stored relative to out_dir so identical runs in
    # different directories produce identical artifacts.
    checkpoint_rel = (
        Path(state.checkpoint_path).relative_to(paths.out_dir).as_posix()
        if state.checkpoint_path
        else None
    )
    paths.train_state.write_text(
        json.dumps(
            {
                "step": state.step,
                "loss": state.loss,
                "checkpoint": checkpoint_rel,
                "seed": state.seed,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return [str(paths.train_state), str(state.checkpoint_path)]


def _selected_by_category(selected: list[selection.SelectedCaption]):
    grouped: dict[str, list[selection.SelectedCaption]] = {}
    for item in selected:
        category = item.image_id.split("/", 1)[0]
        grouped.setdefault(category, []).append(item)
    return dict(sorted(grouped.items()))


def stage_transform(cfg: RunConfig, paths: ArtifactPaths) -> list[str]:
    _require([paths.selected], "transform")
    selected = selection.load_selected(paths.selected)
    grouped = _selected_by_category(selected)
    spec = transform.TemperatureSpec(
        tau_base=cfg.transform.tau_base, delta_tau=cfg.transform.delta_tau
    )
    backend = registry.create("paraphraser", cfg.transform.backend)
    requested = cfg.generate.per_category_count

    rows = []
    for category, items in grouped.items():
        stage_seed = derive_seed(cfg.seed, "transform", category)
        if cfg.transform.disable_transform:
            outputs = transform.phase1_cycle(items, requested, stage_seed)
        else:
            plan = transform.plan_prompts(items, requested)
            outputs = transform.phase1_transform(
                items[: plan.phase1_count], backend, spec, stage_seed
            )
            if plan.phase2_count:
                if cfg.transform.disable_fusion:
                    outputs += transform.phase1_cycle(
                        items, plan.phase2_count, stage_seed, backend, spec
                    )
                else:
                    corpus = transform.build_corpus(items, category)
                    outputs += transform.phase2_fuse(
                        corpus, plan.phase2_count, stage_seed, backend, spec
                    )
        for i, out in enumerate(outputs):
            prompt_id = f"{category}-{i:04d}"
            rows.append(
                {
                    "prompt_id": prompt_id,
                    "category": category,
                    "text": out.text,
                    "phase": out.phase,
                    "source_image_ids": [out.source_image_id, *out.borrowed_from],
                    "tau": out.tau_used,
                    "seed": stable_hash(cfg.seed, prompt_id),
                }
            )

    with open(paths.prompts, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return [str(paths.prompts)]


def _load_prompts(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def stage_generate(cfg: RunConfig, paths: ArtifactPaths) -> list[str]:
    _require([paths.prompts], "generate")
    rows = _load_prompts(paths.prompts)
    width, height = cfg.generate.size
    requests = [
        generation.GenerationRequest(
            prompt=row["text"],
            prompt_id=row["prompt_id"],
            category=row["category"],
            seed=row["seed"],
            steps=cfg.generate.steps,
            guidance=cfg.generate.guidance,
            lora_scale=cfg.generate.lora_scale,
            width=width,
            height=height,
        )
        for row in rows
    ]

    adapter = None
    if paths.train_state.exists():
        state = json.loads(paths.train_state.read_text(encoding="utf-8"))
        if state.get("checkpoint"):
            adapter = lora.load_adapter(paths.out_dir / state["checkpoint"])
    if adapter is None:
        log.info("no adapter checkpoint found; generating with the base model")

    backend = registry.create("generator", cfg.generate.backend)
    generation.batch_generate(
        requests,
        backend,
        paths.images_dir,
        adapter=adapter,
        parallelism=cfg.generate.parallelism,
        manifest_path=paths.generated,
    )
    return [str(paths.generated), str(paths.images_dir)]


def stage_evaluate(cfg: RunConfig, paths: ArtifactPaths) -> list[str]:
    _require([paths.manifest, paths.prompts, paths.generated], "evaluate")
    manifest = dataset.DatasetManifest.load(paths.manifest)
    prompts = {row["prompt_id"]: row for row in _load_prompts(paths.prompts)}
    gen_rows = [
        row
        for row in generation.load_generation_manifest(paths.generated)
        if row["status"] == "ok"
    ]
    if not gen_rows:
        raise PipelineError("no successfully generated images to evaluate")

    features_backend = registry.create("features", cfg.evaluate.features_backend)
    classifier = registry.create("classifier", cfg.evaluate.classifier_backend)
    embedder = registry.create("embedder", cfg.evaluate.clip_backend)

    gen_by_category: dict[str, list[dict]] = {}
    for row in gen_rows:
        category = prompts[row["prompt_id"]]["category"]
        gen_by_category.setdefault(category, []).append(row)

    per_category: dict[str, metrics.CategoryMetrics] = {}
    for category, records in manifest.by_category().items():
        rows = gen_by_category.get(category)
        if not rows:
            raise PipelineError(f"no generated images for category {category!r}")
        real_paths = [manifest.resolve(r) for r in records]
        gen_paths = [paths.images_dir / row["path"] for row in rows]

        real_stats = metrics.feature_stats(
            np.stack([features_backend.features(p) for p in real_paths])
        )
        gen_stats = metrics.feature_stats(
            np.stack([features_backend.features(p) for p in gen_paths])
        )
        fid_value = metrics.fid(real_stats, gen_stats)

        probs = np.stack([classifier.class_probabilities(p) for p in gen_paths])
        is_mean, is_std = metrics.inception_score(probs, splits=cfg.evaluate.splits)

        image_embeddings = [
            embedder.embed_image(
                selection.ImageRef(
                    image_id=row["prompt_id"], category=category, path=path
                )
            )
            for row, path in zip(rows, gen_paths)
        ]
        prompt_embeddings = [
            embedder.embed_text(prompts[row["prompt_id"]]["text"]) for row in rows
        ]
        clip_value = metrics.clip_score(image_embeddings, prompt_embeddings)

        per_category[category] = metrics.CategoryMetrics(
            fid=fid_value,
            is_mean=is_mean,
            is_std=is_std,
            clip_score=clip_value,
            n_real=len(real_paths),
            n_generated=len(gen_paths),
        )

    report = metrics.build_report(
        per_category,
        metadata={
            "n_real": sum(m.n_real for m in per_category.values()),
            "n_generated": sum(m.n_generated for m in per_category.values()),
            "backends": {
                "features": cfg.evaluate.features_backend,
                "classifier": cfg.evaluate.classifier_backend,
                "clip": cfg.evaluate.clip_backend,
            },
        },
    )
    report.save(paths.metrics)
    return [str(paths.metrics)]


_STAGE_FUNCS = {
    "ingest": stage_ingest,
    "caption": stage_caption,
    "select": stage_select,
    "train": stage_train,
    "transform": stage_transform,
    "generate": stage_generate,
    "evaluate": stage_evaluate,
}


def run_pipeline(
    cfg: RunConfig,
    from_stage: str | None = None,
    until_stage: str | None = None,
) -> RunReport:
    """Execute the stage window [from_stage, until_stage], inclusive.

    Stages outside the window are marked skipped; their artifacts must
    already exist for the stages inside to load. The run report is
    persisted even when a stage fails, and the failure is re-raised.
    """
    for name, value in (("--from", from_stage), ("--until", until_stage)):
        if value is not None and value not in STAGES:
            raise PipelineError(f"unknown stage for {name}: {value!r}; stages: {STAGES}")
    start = STAGES.index(from_stage) if from_stage else 0
    stop = STAGES.index(until_stage) if until_stage else len(STAGES) - 1
    if start > stop:
        raise PipelineError(
            f"--from {STAGES[start]!r} comes after --until {STAGES[stop]!r}"
        )

    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = ArtifactPaths(out_dir=out_dir)

    results: list[StageResult] = []
    failure: Exception | None = None
    for i, stage in enumerate(STAGES):
        if i < start or i > stop or failure is not None:
            results.append(StageResult(name=stage, status="skipped", seconds=0.0))
            continue
        t0 = time.perf_counter()
        try:
            artifacts = _STAGE_FUNCS[stage](cfg, paths)
        except Exception as exc:
            results.append(
                StageResult(
                    name=stage, status="failed", seconds=time.perf_counter() - t0
                )
            )
            log.error("stage %s failed: %s", stage, exc)
            failure = exc
            continue
        results.append(
            StageResult(
                name=stage,
                status="ok",
                seconds=time.perf_counter() - t0,
                artifacts=artifacts,
            )
        )
        log.info("stage %s done in %.2fs", stage, results[-1].seconds)

    report = RunReport(
        stages=results,
        config=cfg.to_json_dict(),
        global_digest=compute_global_digest(out_dir),
    )
    report.save(paths.report)
    if failure is not None:
        raise failure
    return report
