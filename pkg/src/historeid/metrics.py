"""Retrieval metrics for subject classification.

Recall@k counts a slide as retrieved when its true patient appears
among the k highest-scored classes. All macro averages run over the
classes that actually have test slides; macro recall@1 then equals
balanced accuracy. Precision of a class that is never predicted is
defined as 0 rather than undefined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .models.training import SlidePrediction

DEFAULT_KS = (1, 5)


class MetricsError(ValueError):
    """Raised for unusable metric inputs."""


@dataclass
class MetricsReport:
    ks: tuple[int, ...]
    per_class_recall: dict[int, dict[int, float]]  # k -> class -> recall@k
    macro_recall: dict[int, float]  # k -> macro recall@k
    macro_precision: float
    macro_f1: float
    random_baseline: dict[int, float]  # k -> analytic k / n_classes
    n_test_slides: int
    n_classes_evaluated: int
    n_classes_total: int

    def scalar(self, name: str) -> float:
        """Access a headline metric by report column name."""
        if name.startswith("recall@"):
            return self.macro_recall[int(name.split("@")[1])]
        if name == "precision":
            return self.macro_precision
        if name == "f1":
            return self.macro_f1
        raise KeyError(name)


def compute_metrics(
    predictions: Sequence[SlidePrediction],
    truth: Mapping[str, int],
    ks: Sequence[int] = DEFAULT_KS,
) -> MetricsReport:
    """Score slide predictions against true patient classes.

    Classes with no test slide are excluded from every macro average.
    Precision and F1 derive from the top-1 confusion counts.
    """
    if not predictions:
        raise MetricsError("no predictions to score")
    missing = [p.slide_id for p in predictions if p.slide_id not in truth]
    if missing:
        raise MetricsError(f"predictions without truth labels: {missing[:5]}")
    n_classes = len(predictions[0].class_scores)
    bad_k = [k for k in ks if not 1 <= k <= n_classes]
    if bad_k:
        raise MetricsError(f"k values out of range 1..{n_classes}: {bad_k}")

    classes = sorted({truth[p.slide_id] for p in predictions})
    by_class: dict[int, list[SlidePrediction]] = {c: [] for c in classes}
    for p in predictions:
        by_class[truth[p.slide_id]].append(p)

    per_class_recall: dict[int, dict[int, float]] = {}
    macro_recall: dict[int, float] = {}
    for k in ks:
        per_class = {
            c: sum(c in p.topk[:k] for p in preds) / len(preds)
            for c, preds in by_class.items()
        }
        per_class_recall[int(k)] = per_class
        macro_recall[int(k)] = sum(per_class.values()) / len(per_class)

    predicted_counts: dict[int, int] = {}
    correct_counts: dict[int, int] = {}
    for p in predictions:
        predicted_counts[p.predicted_class] = predicted_counts.get(p.predicted_class, 0) + 1
        if p.predicted_class == truth[p.slide_id]:
            correct_counts[p.predicted_class] = correct_counts.get(p.predicted_class, 0) + 1

    precisions, f1s = [], []
    for c in classes:
        tp = correct_counts.get(c, 0)
        predicted = predicted_counts.get(c, 0)
        precision = tp / predicted if predicted else 0.0
        recall = per_class_recall[1][c] if 1 in per_class_recall else tp / len(by_class[c])
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        precisions.append(precision)
        f1s.append(f1)

    return MetricsReport(
        ks=tuple(int(k) for k in ks),
        per_class_recall=per_class_recall,
        macro_recall=macro_recall,
        macro_precision=sum(precisions) / len(precisions),
        macro_f1=sum(f1s) / len(f1s),
        random_baseline={int(k): k / n_classes for k in ks},
        n_test_slides=len(predictions),
        n_classes_evaluated=len(classes),
        n_classes_total=n_classes,
    )


def analytic_random_baseline(n_classes: int, k: int) -> float:
    """Probability that a uniformly random ranking hits within top k."""
    if not 1 <= k <= n_classes:
        raise MetricsError(f"k must lie in 1..{n_classes}")
    return k / n_classes


@dataclass
class RandomBaselineResult:
    analytic: float
    simulated_mean: float
    simulated_std: float
    n_sim: int

    @property
    def standard_error(self) -> float:
        return self.simulated_std / np.sqrt(self.n_sim)


def random_baseline(
    n_classes: int,
    test_composition: Mapping[int, int],
    k: int,
    n_sim: int = 10_000,
    rng: np.random.Generator | None = None,
) -> RandomBaselineResult:
    """Monte Carlo estimate of the random-guess macro recall@k.

    ``test_composition`` maps class -> number of test slides. Each
    simulation scores uniformly random rankings with
    :func:`compute_metrics`, so the simulated value exercises the same
    scoring path as real evaluations.
    """
    if n_sim < 1000:
        raise MetricsError("n_sim must be >= 1000")
    analytic = analytic_random_baseline(n_classes, k)
    if rng is None:
        rng = np.random.default_rng()

    slides = [
        (f"s{c}_{i}", c) for c in sorted(test_composition) for i in range(test_composition[c])
    ]
    if not slides:
        raise MetricsError("test composition is empty")
    truth = dict(slides)

    values = np.empty(n_sim)
    for sim in range(n_sim):
        scores = rng.random((len(slides), n_classes))
        scores /= scores.sum(axis=1, keepdims=True)
        rankings = np.argsort(-scores, axis=1)
        predictions = [
            SlidePrediction(
                slide_id=sid,
                class_scores=scores[i],
                predicted_class=int(rankings[i, 0]),
                topk=tuple(int(c) for c in rankings[i]),
            )
            for i, (sid, _) in enumerate(slides)
        ]
        values[sim] = compute_metrics(predictions, truth, ks=(k,)).macro_recall[k]

    return RandomBaselineResult(
        analytic=analytic,
        simulated_mean=float(values.mean()),
        simulated_std=float(values.std(ddof=1)),
        n_sim=n_sim,
    )
