"""Command-line entry point.

Every stage is exposed as its own subcommand so the pipeline can be
scripted stage by stage against the documented artifacts; ``pipeline``
runs the whole sequence and ``report`` renders metrics.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .backends import load_backend_plugins
from .config import load_config
from .errors import AdaptagenError
from .pipeline import STAGES, run_pipeline

log = logging.getLogger("adaptagen")


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True):
    parser.add_argument("--config", required=config_required, help="path to the YAML run config")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out-dir", default=None, help="override output.out_dir")
    parser.add_argument(
        "--disable-fusion",
        action="store_true",
        help="replace cross-image fusion with cycled per-caption paraphrases",
    )
    parser.add_argument(
        "--disable-transform",
        action="store_true",
        help="skip caption transformation entirely; prompts are the raw captions",
    )
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptagen",
        description=(
            "Few-shot domain adaptation pipeline: caption, select, adapt, "
            "synthesize prompts, generate, and evaluate."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run only the {stage} stage")
        _add_common(p)

    p = sub.add_parser("pipeline", help="run all stages in order")
    _add_common(p)
    p.add_argument("--from", dest="from_stage", default=None, choices=STAGES)
    p.add_argument("--until", dest="until_stage", default=None, choices=STAGES)

    p = sub.add_parser("report", help="print the metric table for a finished run")
    _add_common(p, config_required=False)
    p.add_argument("--plots", action="store_true", help="also write metric bar charts")
    return parser


def _load_cfg(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.output.out_dir = args.out_dir
    if args.disable_fusion:
        cfg.transform.disable_fusion = True
    if args.disable_transform:
        cfg.transform.disable_transform = True
    return cfg


def _print_report(out_dir: Path, plots: bool) -> None:
    from .metrics import MetricReport

    metrics_path = out_dir / "metrics.json"
    if not metrics_path.is_file():
        raise AdaptagenError(f"no metrics.json under {out_dir}; run evaluate first")
    report = MetricReport.load(metrics_path)

    header = f"{'category':<28} {'fid':>10} {'is_mean':>8} {'is_std':>8} {'clip':>7} {'n_gen':>6}"
    print(header)
    print("-" * len(header))
    for cat, m in sorted(report.per_category.items()):
        print(
            f"{cat:<28} {m.fid:>10.3f} {m.is_mean:>8.3f} {m.is_std:>8.3f} "
            f"{m.clip_score:>7.3f} {m.n_generated:>6d}"
        )
    o = report.overall
    print("-" * len(header))
    print(
        f"{'overall':<28} {o['fid']:>10.3f} {o['is_mean']:>8.3f} "
        f"{o['is_std']:>8.3f} {o['clip_score']:>7.3f}"
    )

    if plots:
        _write_plots(report, out_dir / "figures")


def _write_plots(report, figures_dir: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise AdaptagenError(
            "matplotlib is required for --plots (pip install adaptagen[plots])"
        ) from exc

    figures_dir.mkdir(parents=True, exist_ok=True)
    cats = sorted(report.per_category)
    for key, label in (
        ("fid", "Frechet feature distance"),
        ("is_mean", "Inception-style score"),
        ("clip_score", "Prompt-image alignment"),
    ):
        values = [getattr(report.per_category[c], key) for c in cats]
        fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(cats)), 3.2))
        ax.bar(range(len(cats)), values, color="#4878a8")
        ax.set_xticks(range(len(cats)))
        ax.set_xticklabels(cats, rotation=30, ha="right")
        ax.set_ylabel(label)
        fig.tight_layout()
        fig.savefig(figures_dir / f"{key}.png", dpi=120)
        plt.close(fig)
    print(f"figures written to {figures_dir}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        load_backend_plugins()

        if args.command == "report":
            if args.config:
                out_dir = _load_cfg(args).out_dir
            elif args.out_dir:
                out_dir = Path(args.out_dir)
            else:
                raise AdaptagenError("report needs --config or --out-dir")
            _print_report(out_dir, args.plots)
            return 0

        cfg = _load_cfg(args)
        if args.command == "pipeline":
            report = run_pipeline(cfg, args.from_stage, args.until_stage)
        else:
            report = run_pipeline(cfg, from_stage=args.command, until_stage=args.command)
        print(f"global digest: {report.global_digest}")
        return 0 if report.ok else 1
    except AdaptagenError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
