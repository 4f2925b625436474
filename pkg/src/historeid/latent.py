"""Post-hoc latent-space analysis.

Each patient gets an anchor: the mean of their training slide
embeddings, where a slide embedding is the mean of its patch
embeddings (so slides with many patches do not dominate the patient
mean). Test slides are scored by L2 distance to their own patient's
anchor and grouped by whether the classifier got them right.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from torch import nn

from .models.nets import embed_patches
from .models.training import SlidePrediction

DEFAULT_PATCHES_PER_SLIDE = 64
_SEED_ANCHOR_SAMPLE = 21


class LatentError(ValueError):
    """Raised for unusable latent-analysis inputs."""


@dataclass
class LatentAnchor:
    class_index: int
    anchor: np.ndarray  # (d,)
    n_contributing: int  # slides averaged

    def __post_init__(self) -> None:
        if self.n_contributing < 1:
            raise LatentError("anchor needs at least one contributing slide")
        if not np.all(np.isfinite(self.anchor)):
            raise LatentError("anchor must be finite")


@dataclass
class DistanceRecord:
    slide_id: str
    true_class: int
    predicted_class: int
    distance_to_own_anchor: float
    correct: bool

    def __post_init__(self) -> None:
        if self.distance_to_own_anchor < 0:
            raise LatentError("distance must be >= 0")
        if self.correct != (self.true_class == self.predicted_class):
            raise LatentError("correct flag inconsistent with classes")


def _slide_embedding(
    encoder: nn.Module,
    patches: np.ndarray,
    slide_id: str,
    patches_per_slide: int,
    seed: int,
) -> np.ndarray:
    if len(patches) == 0:
        raise LatentError(f"slide {slide_id}: no patches to embed")
    if len(patches) > patches_per_slide:
        rng = np.random.default_rng(
            [_SEED_ANCHOR_SAMPLE, seed, zlib.crc32(slide_id.encode())]
        )
        idx = np.sort(rng.choice(len(patches), size=patches_per_slide, replace=False))
        patches = patches[idx]
    return embed_patches(encoder, patches).mean(axis=0)


def compute_anchors(
    encoder: nn.Module,
    patch_map: Mapping[str, np.ndarray],
    train_slides_by_class: Mapping[int, Sequence[str]],
    patches_per_slide: int = DEFAULT_PATCHES_PER_SLIDE,
    seed: int = 0,
) -> dict[int, LatentAnchor]:
    """Mean training embedding per patient class."""
    anchors: dict[int, LatentAnchor] = {}
    for class_index in sorted(train_slides_by_class):
        slide_ids = sorted(train_slides_by_class[class_index])
        if not slide_ids:
            raise LatentError(f"class {class_index}: no training slides")
        embeddings = np.stack(
            [
                _slide_embedding(encoder, patch_map[sid], sid, patches_per_slide, seed)
                for sid in slide_ids
            ]
        )
        anchors[class_index] = LatentAnchor(
            class_index=class_index,
            anchor=embeddings.mean(axis=0),
            n_contributing=len(slide_ids),
        )
    return anchors


def anchor_distances(
    encoder: nn.Module,
    patch_map: Mapping[str, np.ndarray],
    test_labels: Mapping[str, int],
    anchors: Mapping[int, LatentAnchor],
    predictions: Mapping[str, SlidePrediction],
    patches_per_slide: int = DEFAULT_PATCHES_PER_SLIDE,
    seed: int = 0,
) -> list[DistanceRecord]:
    """L2 distance from each test slide embedding to its own anchor."""
    records = []
    for slide_id in sorted(test_labels):
        true_class = test_labels[slide_id]
        if true_class not in anchors:
            raise LatentError(f"no anchor for class {true_class} (slide {slide_id})")
        embedding = _slide_embedding(
            encoder, patch_map[slide_id], slide_id, patches_per_slide, seed
        )
        diff = embedding.astype(np.float64) - anchors[true_class].anchor.astype(np.float64)
        predicted = predictions[slide_id].predicted_class
        records.append(
            DistanceRecord(
                slide_id=slide_id,
                true_class=true_class,
                predicted_class=predicted,
                distance_to_own_anchor=float(np.sqrt(np.sum(diff * diff))),
                correct=predicted == true_class,
            )
        )
    return records


@dataclass
class GroupSummary:
    n: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    values: list[float]


@dataclass
class DistanceSummary:
    groups: dict[str, GroupSummary]  # "correct" / "incorrect"; absent when empty
    notes: list[str]


def _quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    """Sort-based quartiles with linear interpolation between order stats."""
    ordered = sorted(values)
    n = len(ordered)

    def at(q: float) -> float:
        pos = (n - 1) * q
        lo = int(pos)
        hi = min(lo + 1, n - 1)
        frac = pos - lo
        return ordered[lo] + frac * (ordered[hi] - ordered[lo])

    return at(0.25), at(0.5), at(0.75)


def distance_report(records: Sequence[DistanceRecord]) -> DistanceSummary:
    """Quartile summary per correctness group plus raw values for plotting."""
    if not records:
        raise LatentError("no distance records to summarize")
    groups: dict[str, GroupSummary] = {}
    notes: list[str] = []
    for name, keep in (("correct", True), ("incorrect", False)):
        values = [r.distance_to_own_anchor for r in records if r.correct is keep]
        if not values:
            notes.append(f"no {name} records; group omitted")
            continue
        q1, median, q3 = _quartiles(values)
        groups[name] = GroupSummary(
            n=len(values),
            minimum=min(values),
            q1=q1,
            median=median,
            q3=q3,
            maximum=max(values),
            values=values,
        )
    return DistanceSummary(groups=groups, notes=notes)


def write_distance_records(records: Sequence[DistanceRecord], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "true_class", "predicted_class", "distance", "correct"])
        for r in records:
            writer.writerow(
                [r.slide_id, r.true_class, r.predicted_class,
                 f"{r.distance_to_own_anchor:.6f}", int(r.correct)]
            )
