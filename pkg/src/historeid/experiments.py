"""Experiment orchestration: repeated-split evaluation and reports.

Experiment 1 runs Monte Carlo cross-validation over random slide
splits; Experiment 2 trains on each patient's earliest resection and
tests on every later-resection slide (the test set is fixed by the
data, only the train/val partition varies per repeat). The resolution
sweep reruns Experiment 1 across a list of target resolutions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from torch import nn

from .config import RunConfig, config_fingerprint
from .dataset import (
    SlideManifestEntry,
    SplitAssignment,
    build_patient_index,
    monte_carlo_split,
    slide_labels,
    temporal_split,
)
from .metrics import MetricsReport, compute_metrics
from .models.nets import EncoderConfig, build_encoder
from .models.training import (
    TrainedModel,
    TrainingError,
    predict_slide_mil,
    predict_slide_patchwise,
    train_mil,
    train_patch_classifier,
)
from .tiling import SlideImage, extract_slide_patches

logger = logging.getLogger(__name__)

_SEED_LABEL_PERMUTE = 31

METRIC_NAMES = ("recall@1", "recall@5", "precision", "f1")


class ExperimentError(RuntimeError):
    """Raised when an experiment cannot run on the given data."""


@dataclass
class FoldArtifacts:
    """Everything one fold produced, for post-hoc analysis."""

    seed: int
    split: SplitAssignment
    trained: TrainedModel
    encoder: nn.Module
    predictions: dict[str, "object"]  # slide_id -> SlidePrediction
    labels: Mapping[str, int]


@dataclass
class ExperimentResult:
    kind: str  # "experiment1" | "experiment2"
    model_kind: str
    fold_reports: list[MetricsReport]
    fold_seeds: list[int]
    mean: dict[str, float]
    std: dict[str, float]
    config_fingerprint: str

    @property
    def n_folds(self) -> int:
        return len(self.fold_reports)


def extract_cohort_patches(
    entries: Sequence[SlideManifestEntry], config: RunConfig
) -> dict[str, np.ndarray]:
    """Mask and read every slide's retained patches once, up front."""
    tiling = config.tiling
    stride = tiling.stride_px if tiling.stride_px > 0 else None
    patch_map: dict[str, np.ndarray] = {}
    for entry in entries:
        slide = SlideImage.from_entry(entry)
        _, patches = extract_slide_patches(
            slide,
            size_px=tiling.size_px,
            target_mpp=tiling.target_mpp,
            stride_px=stride,
            min_coverage=tiling.min_coverage,
            downscale_factor=tiling.downscale_factor,
        )
        if len(patches) == 0:
            logger.warning("slide %s: no patches above coverage threshold", entry.slide_id)
        patch_map[entry.slide_id] = patches
    return patch_map


def _metric_names(ks: Sequence[int]) -> list[str]:
    return [f"recall@{k}" for k in ks] + ["precision", "f1"]


def _permuted(labels: Mapping[str, int], slides: Sequence[str], seed: int) -> dict[str, int]:
    """Shuffle the labels of the given slides among themselves."""
    ordered = sorted(slides)
    values = [labels[s] for s in ordered]
    rng = np.random.default_rng([_SEED_LABEL_PERMUTE, seed])
    shuffled = [values[i] for i in rng.permutation(len(values))]
    out = dict(labels)
    out.update(dict(zip(ordered, shuffled)))
    return out


def _encoder_config(config: RunConfig) -> EncoderConfig:
    model = config.model
    return EncoderConfig(
        variant=model.encoder_variant,
        embedding_dim=model.embedding_dim,
        weights_path=Path(model.encoder_weights) if model.encoder_weights else None,
        width=model.encoder_width,
        depth=model.encoder_depth,
    )


def run_fold(
    entries: Sequence[SlideManifestEntry],
    patch_map: Mapping[str, np.ndarray],
    split: SplitAssignment,
    config: RunConfig,
    seed: int,
    permute_labels: bool = False,
) -> FoldArtifacts:
    """Train the configured model on one split and predict its test slides."""
    index = build_patient_index(entries)
    labels = slide_labels(entries, index)
    train_labels = labels
    if permute_labels:
        train_labels = _permuted(labels, sorted(split.train | split.val), seed)

    training = replace(config.training, seed=seed)
    model_cfg = config.model

    if model_cfg.kind == "patch":
        trained = train_patch_classifier(
            patch_map, train_labels, split, len(index), _encoder_config(config), training
        )
        encoder = trained.model.encoder
        predict = lambda sid: predict_slide_patchwise(
            trained.model, patch_map[sid], sid, aggregation=model_cfg.aggregation
        )
    elif model_cfg.kind == "mil":
        if model_cfg.mil_encoder_source == "task_trained":
            stem = train_patch_classifier(
                patch_map, train_labels, split, len(index), _encoder_config(config), training
            )
            encoder = stem.model.encoder
        else:
            encoder = build_encoder(
                EncoderConfig(
                    variant=model_cfg.mil_encoder_source,
                    embedding_dim=512,
                    weights_path=Path(model_cfg.encoder_weights),
                )
            )
        trained = train_mil(
            patch_map,
            train_labels,
            split,
            len(index),
            encoder,
            training,
            bag_size=model_cfg.bag_size,
            attention_hidden=model_cfg.attention_hidden,
            inference_cap=model_cfg.inference_patch_cap,
        )
        predict = lambda sid: predict_slide_mil(
            trained.model, patch_map[sid], sid, cap=model_cfg.inference_patch_cap, seed=seed
        )
    else:
        raise ExperimentError(f"unknown model kind {model_cfg.kind!r}")

    predictions = {}
    for sid in sorted(split.test):
        if len(patch_map.get(sid, ())) == 0:
            logger.warning("test slide %s has no patches; skipped", sid)
            continue
        predictions[sid] = predict(sid)
    if not predictions:
        raise ExperimentError("no test slide produced a prediction")

    return FoldArtifacts(
        seed=seed,
        split=split,
        trained=trained,
        encoder=encoder,
        predictions=predictions,
        labels=labels,
    )


def _aggregate(
    kind: str,
    model_kind: str,
    reports: list[MetricsReport],
    seeds: list[int],
    config: RunConfig,
) -> ExperimentResult:
    names = _metric_names(config.experiment.ks)
    mean, std = {}, {}
    for name in names:
        values = np.array([r.scalar(name) for r in reports])
        mean[name] = float(values.mean())
        std[name] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return ExperimentResult(
        kind=kind,
        model_kind=model_kind,
        fold_reports=reports,
        fold_seeds=seeds,
        mean=mean,
        std=std,
        config_fingerprint=config_fingerprint(config),
    )


def run_experiment1(
    entries: Sequence[SlideManifestEntry],
    config: RunConfig,
    patch_map: Mapping[str, np.ndarray] | None = None,
    n_folds: int | None = None,
    permute_labels: bool = False,
) -> tuple[ExperimentResult, list[FoldArtifacts]]:
    """Monte Carlo cross-validation over random slide splits."""
    if not entries:
        raise ExperimentError("empty manifest")
    exp = config.experiment
    n_folds = exp.n_folds if n_folds is None else n_folds
    if patch_map is None:
        patch_map = extract_cohort_patches(entries, config)
    labels = slide_labels(entries, build_patient_index(entries))

    reports, artifacts, seeds = [], [], []
    ratios = (exp.train_ratio, exp.val_ratio, exp.test_ratio)
    for fold in range(n_folds):
        seed = exp.base_seed + fold
        split = monte_carlo_split(entries, ratios=ratios, seed=seed)
        fold_art = run_fold(entries, patch_map, split, config, seed, permute_labels)
        report = compute_metrics(
            list(fold_art.predictions.values()),
            {sid: labels[sid] for sid in fold_art.predictions},
            ks=exp.ks,
        )
        reports.append(report)
        artifacts.append(fold_art)
        seeds.append(seed)
        logger.info(
            "experiment1 fold %d/%d: recall@1=%.3f", fold + 1, n_folds, report.macro_recall[1]
        )
    return _aggregate("experiment1", config.model.kind, reports, seeds, config), artifacts


def run_experiment2(
    entries: Sequence[SlideManifestEntry],
    config: RunConfig,
    patch_map: Mapping[str, np.ndarray] | None = None,
    n_repeats: int | None = None,
) -> tuple[ExperimentResult, list[FoldArtifacts]]:
    """Temporal evaluation: train on earliest resections, test on later ones."""
    if not entries:
        raise ExperimentError("empty manifest")
    exp = config.experiment
    n_repeats = exp.n_repeats if n_repeats is None else n_repeats
    if patch_map is None:
        patch_map = extract_cohort_patches(entries, config)
    labels = slide_labels(entries, build_patient_index(entries))

    reports, artifacts, seeds = [], [], []
    for repeat in range(n_repeats):
        seed = exp.base_seed + repeat
        split = temporal_split(entries, val_fraction=exp.temporal_val_fraction, seed=seed)
        fold_art = run_fold(entries, patch_map, split, config, seed)
        report = compute_metrics(
            list(fold_art.predictions.values()),
            {sid: labels[sid] for sid in fold_art.predictions},
            ks=exp.ks,
        )
        reports.append(report)
        artifacts.append(fold_art)
        seeds.append(seed)
        logger.info(
            "experiment2 repeat %d/%d: recall@1=%.3f", repeat + 1, n_repeats, report.macro_recall[1]
        )
    return _aggregate("experiment2", config.model.kind, reports, seeds, config), artifacts


def resolution_sweep(
    entries: Sequence[SlideManifestEntry],
    config: RunConfig,
    mpp_list: Sequence[float] | None = None,
    n_folds: int | None = None,
) -> dict[float, ExperimentResult]:
    """Experiment 1 repeated per target resolution."""
    mpps = tuple(config.experiment.mpp_list if mpp_list is None else mpp_list)
    finest_native = max(e.native_mpp for e in entries)
    too_fine = [m for m in mpps if m < finest_native - 1e-9]
    if too_fine:
        raise ExperimentError(
            f"target resolutions finer than native {finest_native} mpp: {too_fine}"
        )
    results: dict[float, ExperimentResult] = {}
    for mpp in mpps:
        sweep_config = replace(config, tiling=replace(config.tiling, target_mpp=mpp))
        patch_map = extract_cohort_patches(entries, sweep_config)
        result, _ = run_experiment1(entries, sweep_config, patch_map, n_folds=n_folds)
        results[mpp] = result
        logger.info("sweep %.2f mpp: recall@1=%.3f", mpp, result.mean["recall@1"])
    return results


def format_experiment_report(result: ExperimentResult, ks: Sequence[int] = (1, 5)) -> str:
    """Text table: mean +/- std per metric plus the random baseline row."""
    names = _metric_names(ks)
    header = ["method"] + names
    row = [f"{result.model_kind}"]
    for name in names:
        row.append(f"{100 * result.mean[name]:.2f}% +/- {100 * result.std[name]:.2f}%")
    baseline = result.fold_reports[0].random_baseline
    baseline_row = ["random"] + [
        f"{100 * baseline[k]:.2f}%" for k in ks
    ] + ["", ""]

    widths = [max(len(r[i]) for r in (header, row, baseline_row)) for i in range(len(header))]
    lines = [
        f"{result.kind} ({result.n_folds} folds, seeds {result.fold_seeds[0]}..{result.fold_seeds[-1]}, "
        f"config {result.config_fingerprint})",
        " | ".join(h.ljust(w) for h, w in zip(header, widths)),
        "-+-".join("-" * w for w in widths),
        " | ".join(c.ljust(w) for c, w in zip(row, widths)),
        " | ".join(c.ljust(w) for c, w in zip(baseline_row, widths)),
    ]
    return "\n".join(lines) + "\n"


def write_experiment_outputs(
    result: ExperimentResult, out_dir: str | Path, ks: Sequence[int] = (1, 5)
) -> None:
    """report.txt (human readable) and metrics.csv (machine readable)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(format_experiment_report(result, ks))

    import csv

    names = _metric_names(ks)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", "std"] + [f"fold{i}" for i in range(result.n_folds)])
        for name in names:
            writer.writerow(
                [name, f"{result.mean[name]:.6f}", f"{result.std[name]:.6f}"]
                + [f"{r.scalar(name):.6f}" for r in result.fold_reports]
            )
