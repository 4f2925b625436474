"""Command-line entry point.

Every run takes an INI config file plus optional ``--set section.key=value``
overrides, writes its artifacts under the configured output directory,
and records a run manifest with the config fingerprint and seeds so any
result can be replayed exactly.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .config import ConfigError, RunConfig, config_fingerprint, load_config, to_ini_text
from .dataset import (
    ManifestError,
    SplitError,
    build_patient_index,
    load_manifest,
    monte_carlo_split,
    slide_labels,
    temporal_split,
)
from .experiments import (
    ExperimentError,
    extract_cohort_patches,
    format_experiment_report,
    run_experiment1,
    run_experiment2,
    resolution_sweep,
    run_fold,
    write_experiment_outputs,
)
from .latent import anchor_distances, compute_anchors, distance_report, write_distance_records
from .metrics import MetricsError
from .models.training import TrainingError, save_checkpoint, split_fingerprint, write_history
from .risk import (
    QuestionnaireError,
    assess,
    format_verdict,
    interactive_assess,
    questionnaire_from_text,
)
from .stain import StainEstimationError, augment_stain
from .synthetic import generate_synthetic_cohort
from .tiling import SlideImage, TilingError, build_tissue_mask, enumerate_patches, write_mask_png, write_patch_list

logger = logging.getLogger("historeid")

_KNOWN_ERRORS = (
    ConfigError,
    ManifestError,
    SplitError,
    TilingError,
    StainEstimationError,
    TrainingError,
    MetricsError,
    ExperimentError,
    QuestionnaireError,
    ValueError,
)


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        spec, value = pair.split("=", 1)
        overrides[spec.strip()] = value
    return overrides


def _load_run_config(args: argparse.Namespace, require_dataset: bool) -> RunConfig:
    overrides = _parse_overrides(args.set or [])
    if require_dataset:
        has_section = False
        if args.config:
            parser = configparser.ConfigParser()
            parser.optionxform = str
            with open(args.config) as fh:
                parser.read_file(fh)
            has_section = parser.has_section("dataset")
        has_section = has_section or any(k.startswith("dataset.") for k in overrides)
        if not has_section:
            raise ConfigError("missing required section [dataset] (config file or --set)")
    config = load_config(args.config, overrides)
    if args.output is not None:
        config.run.output_dir = args.output
    if args.workers is not None:
        config.run.workers = args.workers
    torch.set_num_threads(max(1, config.run.workers))
    return config


def _resolve_entries(config: RunConfig, out_dir: Path):
    ds = config.dataset
    if ds.manifest:
        return load_manifest(ds.manifest)
    cohort = generate_synthetic_cohort(
        out_dir / "cohort",
        n_patients=ds.synthetic_patients,
        slides_per_patient=ds.synthetic_slides_per_patient,
        resections_per_patient=ds.synthetic_resections,
        image_size_px=ds.synthetic_image_size,
        seed=ds.synthetic_seed,
        drift=ds.synthetic_drift,
        native_mpp=ds.synthetic_native_mpp,
    )
    logger.info("generated synthetic cohort: %d slides", len(cohort.entries))
    return cohort.entries


def _write_run_manifest(out_dir: Path, command: str, config: RunConfig, seeds: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "package_version": __version__,
        "config_fingerprint": config_fingerprint(config),
        "seeds": seeds,
        "effective_config": to_ini_text(config),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _cmd_synth(args: argparse.Namespace) -> int:
    config = _load_run_config(args, require_dataset=False)
    out_dir = Path(config.run.output_dir)
    ds = config.dataset
    cohort = generate_synthetic_cohort(
        out_dir / "cohort",
        n_patients=ds.synthetic_patients,
        slides_per_patient=ds.synthetic_slides_per_patient,
        resections_per_patient=ds.synthetic_resections,
        image_size_px=ds.synthetic_image_size,
        seed=ds.synthetic_seed,
        drift=ds.synthetic_drift,
        native_mpp=ds.synthetic_native_mpp,
    )
    _write_run_manifest(out_dir, "synth", config, {"synthetic_seed": ds.synthetic_seed})
    print(f"wrote {len(cohort.entries)} slides and {cohort.manifest_path}")
    return 0


def _cmd_tile(args: argparse.Namespace) -> int:
    config = _load_run_config(args, require_dataset=True)
    out_dir = Path(config.run.output_dir) / "tiles"
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = _resolve_entries(config, Path(config.run.output_dir))
    tiling = config.tiling
    stride = tiling.stride_px if tiling.stride_px > 0 else None
    all_specs = []
    for entry in entries:
        slide = SlideImage.from_entry(entry)
        mask = build_tissue_mask(slide, tiling.downscale_factor)
        specs = enumerate_patches(
            slide, mask, tiling.size_px, tiling.target_mpp, stride, tiling.min_coverage
        )
        all_specs.extend(specs)
        if args.export_masks:
            write_mask_png(mask, out_dir / f"{entry.slide_id}_mask.png")
    write_patch_list(all_specs, out_dir / "patches.csv")
    _write_run_manifest(out_dir, "tile", config, {})
    print(f"wrote {len(all_specs)} patch specs to {out_dir / 'patches.csv'}")
    return 0


def _train_single(args: argparse.Namespace, kind: str) -> int:
    config = _load_run_config(args, require_dataset=True)
    config.model.kind = kind
    out_dir = Path(config.run.output_dir) / f"train-{kind}"
    entries = _resolve_entries(config, Path(config.run.output_dir))
    patch_map = extract_cohort_patches(entries, config)
    exp = config.experiment
    seed = exp.base_seed
    split = monte_carlo_split(
        entries, ratios=(exp.train_ratio, exp.val_ratio, exp.test_ratio), seed=seed
    )
    artifacts = run_fold(entries, patch_map, split, config, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = build_patient_index(entries)
    from .experiments import _encoder_config  # single source for the mapping

    save_checkpoint(
        out_dir / "checkpoint.pt",
        artifacts.trained,
        _encoder_config(config),
        config.training,
        index.to_json(),
        split,
    )
    write_history(artifacts.trained.history, out_dir / "history.csv")
    (out_dir / "split.json").write_text(split.to_json())
    _write_run_manifest(out_dir, f"train-{kind}", config, {"split_seed": seed})
    best = artifacts.trained.history[artifacts.trained.best_epoch]
    print(
        f"trained {kind} model: best epoch {best.epoch}, val loss {best.val_loss:.4f}, "
        f"val recall@1 {best.val_recall1:.3f}; checkpoint at {out_dir / 'checkpoint.pt'}"
    )
    return 0


def _cmd_exp1(args: argparse.Namespace) -> int:
    config = _load_run_config(args, require_dataset=True)
    out_dir = Path(config.run.output_dir) / "exp1"
    entries = _resolve_entries(config, Path(config.run.output_dir))
    result, _ = run_experiment1(entries, config)
    write_experiment_outputs(result, out_dir, ks=config.experiment.ks)
    _write_run_manifest(out_dir, "exp1", config, {"fold_seeds": result.fold_seeds})
    print(format_experiment_report(result, ks=config.experiment.ks))
    return 0


def _cmd_exp2(args: argparse.Namespace) -> int:
    config = _load_run_config(args, require_dataset=True)
    out_dir = Path(config.run.output_dir) / "exp2"
    entries = _resolve_entries(config, Path(config.run.output_dir))
    result, _ = run_experiment2(entries, config)
    write_experiment_outputs(result, out_dir, ks=config.experiment.ks)
    _write_run_manifest(out_dir, "exp2", config, {"repeat_seeds": result.fold_seeds})
    print(format_experiment_report(result, ks=config.experiment.ks))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _load_run_config(args, require_dataset=True)
    out_dir = Path(config.run.output_dir) / "sweep"
    entries = _resolve_entries(config, Path(config.run.output_dir))
    results = resolution_sweep(entries, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["target_mpp | " + " | ".join(f"{n}" for n in ("recall@1", "recall@5", "precision", "f1"))]
    for mpp, result in results.items():
        write_experiment_outputs(result, out_dir / f"mpp_{mpp:g}", ks=config.experiment.ks)
        lines.append(
            f"{mpp:g} | "
            + " | ".join(
                f"{100 * result.mean[n]:.2f}% +/- {100 * result.std[n]:.2f}%"
                for n in (f"recall@{config.experiment.ks[0]}", f"recall@{config.experiment.ks[1]}", "precision", "f1")
            )
        )
    (out_dir / "sweep_report.txt").write_text("\n".join(lines) + "\n")
    _write_run_manifest(out_dir, "sweep", config, {"mpp_list": list(results)})
    print("\n".join(lines))
    return 0


def _cmd_latent(args: argparse.Namespace) -> int:
    config = _load_run_config(args, require_dataset=True)
    out_dir = Path(config.run.output_dir) / "latent"
    entries = _resolve_entries(config, Path(config.run.output_dir))
    patch_map = extract_cohort_patches(entries, config)
    exp = config.experiment
    seed = exp.base_seed
    if args.temporal:
        split = temporal_split(entries, val_fraction=exp.temporal_val_fraction, seed=seed)
    else:
        split = monte_carlo_split(
            entries, ratios=(exp.train_ratio, exp.val_ratio, exp.test_ratio), seed=seed
        )
    artifacts = run_fold(entries, patch_map, split, config, seed)
    index = build_patient_index(entries)
    labels = slide_labels(entries, index)

    train_by_class: dict[int, list[str]] = {}
    for sid in sorted(split.train):
        if len(patch_map.get(sid, ())) > 0:
            train_by_class.setdefault(labels[sid], []).append(sid)
    anchors = compute_anchors(artifacts.encoder, patch_map, train_by_class, seed=seed)
    test_labels = {sid: labels[sid] for sid in artifacts.predictions}
    records = anchor_distances(
        artifacts.encoder, patch_map, test_labels, anchors, artifacts.predictions, seed=seed
    )
    summary = distance_report(records)

    out_dir.mkdir(parents=True, exist_ok=True)
    write_distance_records(records, out_dir / "records.csv")
    lines = []
    for name, group in summary.groups.items():
        lines.append(
            f"{name}: n={group.n} min={group.minimum:.4f} q1={group.q1:.4f} "
            f"median={group.median:.4f} q3={group.q3:.4f} max={group.maximum:.4f}"
        )
    lines.extend(summary.notes)
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    if args.plot:
        _plot_distances(summary, out_dir / "distances.png")
    _write_run_manifest(out_dir, "latent", config, {"split_seed": seed})
    print("\n".join(lines))
    return 0


def _plot_distances(summary, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(summary.groups)
    values = [summary.groups[n].values for n in names]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.boxplot(values, tick_labels=names)
    ax.set_ylabel("distance to own anchor")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _cmd_risk(args: argparse.Namespace) -> int:
    if args.answers:
        text = Path(args.answers).read_text()
        verdict = assess(questionnaire_from_text(text))
        print(format_verdict(verdict), end="")
    else:
        verdict = interactive_assess(sys.stdin, sys.stdout)
    if args.json_out:
        Path(args.json_out).write_text(
            json.dumps(
                {
                    "level": verdict.level,
                    "rationale": verdict.rationale,
                    "recommendations": verdict.recommendations,
                },
                indent=2,
            )
        )
    return 0


def _cmd_augment_demo(args: argparse.Namespace) -> int:
    config = _load_run_config(args, require_dataset=False)
    out_dir = Path(config.run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.image:
        with Image.open(args.image) as im:
            patch = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    else:
        from .synthetic import _draw_signature, render_slide

        rng = np.random.default_rng(args.seed)
        image, _ = render_slide(_draw_signature(rng), 256, rng)
        patch = image[96:160, 96:160].astype(np.float64) / 255.0

    n = args.grid
    center = n // 2
    lam = config.stain.stain_lambda
    size = patch.shape[0]
    canvas = np.ones((n * size + (n - 1) * 2, n * size + (n - 1) * 2, 3))
    for i in range(n):
        for j in range(n):
            ring = max(abs(i - center), abs(j - center))
            cell_lam = lam * ring / max(center, 1)
            cell_rng = np.random.default_rng([args.seed, i, j])
            cell = patch if ring == 0 else augment_stain(patch, cell_lam, cell_rng)
            y0, x0 = i * (size + 2), j * (size + 2)
            canvas[y0 : y0 + size, x0 : x0 + size] = cell
    out_path = out_dir / "augment_grid.png"
    Image.fromarray(np.clip(np.rint(canvas * 255), 0, 255).astype(np.uint8)).save(out_path)
    print(f"wrote {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="historeid",
        description="Histopathology patient re-identification pipeline",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="INI config file")
        p.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable)",
        )
        p.add_argument("--output", help="output directory (overrides [run] output_dir)")
        p.add_argument("--workers", type=int, help="worker threads (default 1, deterministic)")

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("tile", help="export tissue masks and patch grids")
    add_common(p)
    p.add_argument("--export-masks", action="store_true")
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("train-patch", help="train the patch classifier on one split")
    add_common(p)
    p.set_defaults(func=lambda a: _train_single(a, "patch"))

    p = sub.add_parser("train-mil", help="train the attention-MIL model on one split")
    add_common(p)
    p.set_defaults(func=lambda a: _train_single(a, "mil"))

    p = sub.add_parser("exp1", help="Monte Carlo cross-validation experiment")
    add_common(p)
    p.set_defaults(func=_cmd_exp1)

    p = sub.add_parser("exp2", help="temporal (earliest-resection) experiment")
    add_common(p)
    p.set_defaults(func=_cmd_exp2)

    p = sub.add_parser("sweep", help="resolution sweep over target mpp values")
    add_common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("latent", help="latent-anchor distance analysis")
    add_common(p)
    p.add_argument("--temporal", action="store_true", help="use the temporal split")
    p.add_argument("--plot", action="store_true", help="write a box-plot image")
    p.set_defaults(func=_cmd_latent)

    p = sub.add_parser("risk", help="publication risk assessment")
    p.add_argument("--answers", help="answers file with field=yes/no lines")
    p.add_argument("--json-out", help="also write the verdict as JSON")
    p.set_defaults(func=_cmd_risk)

    p = sub.add_parser("augment-demo", help="render a stain-augmentation grid image")
    add_common(p)
    p.add_argument("--image", help="input patch image (defaults to a synthetic patch)")
    p.add_argument("--grid", type=int, default=5, help="grid side length (odd)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_augment_demo)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _KNOWN_ERRORS as exc:
        category = type(exc).__name__
        print(f"error ({category}): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
