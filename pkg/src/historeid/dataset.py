"""Cohort manifests, patient/class indexing, and train/val/test splits.

A cohort is described by a delimited manifest with one row per slide.
Patients contribute one class each; only patients with at least two
slides are usable, since a patient must be present in training to be
retrievable at test time.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = (
    "slide_id",
    "patient_id",
    "resection_ordinal",
    "days_since_first_resection",
    "image_path",
    "native_mpp",
)

MIN_SLIDES_PER_PATIENT = 2


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest data."""


class SplitError(ValueError):
    """Raised when a split cannot be constructed as requested."""


@dataclass(frozen=True)
class SlideManifestEntry:
    """One slide of one patient.

    ``resection_ordinal`` indexes the surgical resection the tissue came
    from, 0 being the earliest. ``native_mpp`` is the physical pixel
    size of the stored image in microns per pixel.
    """

    slide_id: str
    patient_id: str
    resection_ordinal: int
    days_since_first_resection: int | None
    image_path: Path
    native_mpp: float

    def __post_init__(self) -> None:
        if not self.slide_id:
            raise ManifestError("slide_id must be non-empty")
        if not self.patient_id:
            raise ManifestError("patient_id must be non-empty")
        if self.resection_ordinal < 0:
            raise ManifestError(
                f"slide {self.slide_id}: resection_ordinal must be >= 0"
            )
        if self.days_since_first_resection is not None and self.days_since_first_resection < 0:
            raise ManifestError(
                f"slide {self.slide_id}: days_since_first_resection must be >= 0"
            )
        if not self.native_mpp > 0:
            raise ManifestError(f"slide {self.slide_id}: native_mpp must be > 0")


class PatientIndex:
    """Ordered bijection between patient ids and class indices 0..N-1.

    Indices are assigned in lexicographic patient-id order so the
    mapping is reproducible from the entry list alone.
    """

    def __init__(self, patient_ids: Sequence[str]):
        ordered = sorted(set(patient_ids))
        if not ordered:
            raise ManifestError("cannot build a patient index from zero patients")
        self._ids: tuple[str, ...] = tuple(ordered)
        self._index: dict[str, int] = {pid: i for i, pid in enumerate(self._ids)}

    def __len__(self) -> int:
        return len(self._ids)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PatientIndex) and self._ids == other._ids

    def class_of(self, patient_id: str) -> int:
        return self._index[patient_id]

    def patient_of(self, class_index: int) -> str:
        return self._ids[class_index]

    @property
    def patient_ids(self) -> tuple[str, ...]:
        return self._ids

    def to_json(self) -> str:
        return json.dumps({"patient_ids": list(self._ids)})

    @classmethod
    def from_json(cls, text: str) -> "PatientIndex":
        payload = json.loads(text)
        return cls(payload["patient_ids"])


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/val/test slide-id sets for one experiment fold."""

    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]
    seed: int
    kind: str  # "monte_carlo" | "temporal"

    def __post_init__(self) -> None:
        if self.kind not in ("monte_carlo", "temporal"):
            raise SplitError(f"unknown split kind {self.kind!r}")
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise SplitError("train/val/test sets must be pairwise disjoint")

    @property
    def all_slides(self) -> frozenset[str]:
        return self.train | self.val | self.test

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "seed": self.seed,
                "train": sorted(self.train),
                "val": sorted(self.val),
                "test": sorted(self.test),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        payload = json.loads(text)
        return cls(
            train=frozenset(payload["train"]),
            val=frozenset(payload["val"]),
            test=frozenset(payload["test"]),
            seed=int(payload["seed"]),
            kind=payload["kind"],
        )


def _parse_row(row: Mapping[str, str], line_no: int, manifest_dir: Path) -> SlideManifestEntry:
    try:
        days_raw = row["days_since_first_resection"].strip()
        image_path = Path(row["image_path"].strip())
        if not image_path.is_absolute():
            image_path = manifest_dir / image_path
        return SlideManifestEntry(
            slide_id=row["slide_id"].strip(),
            patient_id=row["patient_id"].strip(),
            resection_ordinal=int(row["resection_ordinal"]),
            days_since_first_resection=int(days_raw) if days_raw else None,
            image_path=image_path,
            native_mpp=float(row["native_mpp"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(f"manifest line {line_no}: {exc}") from exc


def load_manifest(path: str | Path, check_images: str = "eager") -> list[SlideManifestEntry]:
    """Load and validate a slide manifest.

    Patients with fewer than ``MIN_SLIDES_PER_PATIENT`` slides are
    dropped with a warning: a single-slide patient cannot appear in both
    train and test. Relative image paths are resolved against the
    manifest's directory.

    ``check_images``: "eager" verifies each image file exists now;
    "lazy" defers to the first read.
    """
    path = Path(path)
    if check_images not in ("eager", "lazy"):
        raise ValueError(f"check_images must be 'eager' or 'lazy', got {check_images!r}")
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            logger.warning("manifest %s is empty", path)
            return []
        if tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"manifest header must be exactly {','.join(MANIFEST_COLUMNS)}, "
                f"got {','.join(reader.fieldnames)}"
            )
        entries = [_parse_row(row, i + 2, path.parent) for i, row in enumerate(reader)]

    seen: set[str] = set()
    for entry in entries:
        if entry.slide_id in seen:
            raise ManifestError(f"duplicate slide id {entry.slide_id!r}")
        seen.add(entry.slide_id)

    if check_images == "eager":
        for entry in entries:
            if not entry.image_path.exists():
                raise ManifestError(
                    f"slide {entry.slide_id}: image file not found: {entry.image_path}"
                )

    counts: dict[str, int] = {}
    for entry in entries:
        counts[entry.patient_id] = counts.get(entry.patient_id, 0) + 1
    excluded = {pid for pid, n in counts.items() if n < MIN_SLIDES_PER_PATIENT}
    if excluded:
        logger.warning(
            "excluding %d patient(s) with fewer than %d slides: %s",
            len(excluded),
            MIN_SLIDES_PER_PATIENT,
            ", ".join(sorted(excluded)),
        )
        entries = [e for e in entries if e.patient_id not in excluded]

    _check_ordinals(entries)
    if not entries:
        logger.warning("manifest %s yielded no usable slides", path)
    return entries


def _check_ordinals(entries: Iterable[SlideManifestEntry]) -> None:
    earliest: dict[str, int] = {}
    for e in entries:
        earliest[e.patient_id] = min(earliest.get(e.patient_id, e.resection_ordinal), e.resection_ordinal)
    bad = sorted(pid for pid, lo in earliest.items() if lo != 0)
    if bad:
        raise ManifestError(
            f"patients whose resection ordinals do not start at 0: {', '.join(bad)}"
        )


def write_manifest(entries: Sequence[SlideManifestEntry], path: str | Path) -> None:
    """Write entries in the standard manifest format. Image paths are
    written relative to the manifest directory when possible."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for e in entries:
            try:
                image = e.image_path.relative_to(path.parent)
            except ValueError:
                image = e.image_path
            writer.writerow(
                [
                    e.slide_id,
                    e.patient_id,
                    e.resection_ordinal,
                    "" if e.days_since_first_resection is None else e.days_since_first_resection,
                    image.as_posix(),
                    repr(e.native_mpp),
                ]
            )


def build_patient_index(entries: Sequence[SlideManifestEntry]) -> PatientIndex:
    if not entries:
        raise ManifestError("cannot build a patient index from an empty manifest")
    return PatientIndex([e.patient_id for e in entries])


def slide_labels(entries: Sequence[SlideManifestEntry], index: PatientIndex) -> dict[str, int]:
    """Map slide_id -> class index."""
    return {e.slide_id: index.class_of(e.patient_id) for e in entries}


def _split_targets(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer counts per part via largest-remainder apportionment."""
    raw = [n * r for r in ratios]
    base = [int(x) for x in raw]
    remainder = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: raw[i] - base[i], reverse=True)
    for i in order[:remainder]:
        base[i] += 1
    return base


def monte_carlo_split(
    entries: Sequence[SlideManifestEntry],
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> SplitAssignment:
    """Random slide-level split, constrained so every patient keeps at
    least one training slide.

    The constraint means train can exceed its ratio when many patients
    have few slides; val and test are then filled from the remaining
    pool, so a 2-slide patient contributes train plus one of val/test.
    """
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be positive and sum to 1, got {ratios}")
    if not entries:
        raise SplitError("cannot split an empty manifest")

    rng = np.random.default_rng(seed)
    by_patient: dict[str, list[str]] = {}
    for e in sorted(entries, key=lambda e: e.slide_id):
        by_patient.setdefault(e.patient_id, []).append(e.slide_id)

    train: set[str] = set()
    pool: list[str] = []
    for pid in sorted(by_patient):
        slides = by_patient[pid]
        keep = slides[int(rng.integers(len(slides)))]
        train.add(keep)
        pool.extend(s for s in slides if s != keep)

    rng.shuffle(pool)
    _, n_val, n_test = _split_targets(len(entries), ratios)
    val = set(pool[:n_val])
    test = set(pool[n_val : n_val + n_test])
    train.update(pool[n_val + n_test :])

    return SplitAssignment(
        train=frozenset(train),
        val=frozenset(val),
        test=frozenset(test),
        seed=seed,
        kind="monte_carlo",
    )


def temporal_split(
    entries: Sequence[SlideManifestEntry],
    val_fraction: float = 0.2,
    seed: int = 0,
) -> SplitAssignment:
    """Earliest-resection slides become train/val; all later-resection
    slides become the test set.

    Patients whose slides all come from the earliest resection stay in
    train/val and simply have no test slides. Every patient keeps at
    least one earliest-resection slide in train.
    """
    if not 0 <= val_fraction < 1:
        raise SplitError(f"val_fraction must be in [0, 1), got {val_fraction}")
    earliest = sorted(
        (e.slide_id for e in entries if e.resection_ordinal == 0)
    )
    later = frozenset(e.slide_id for e in entries if e.resection_ordinal >= 1)
    if not later:
        raise SplitError("temporal split impossible: no slide with resection_ordinal >= 1")

    patient_of = {e.slide_id: e.patient_id for e in entries}
    missing = sorted(
        {patient_of[s] for s in later}
        - {patient_of[s] for s in earliest}
    )
    if missing:
        raise SplitError(
            "temporal split impossible: patients with later-resection slides but no "
            f"earliest-resection slide: {', '.join(missing)}"
        )

    rng = np.random.default_rng(seed)
    order = list(earliest)
    rng.shuffle(order)

    train_count: dict[str, int] = {}
    for s in earliest:
        train_count[patient_of[s]] = train_count.get(patient_of[s], 0) + 1

    n_val = int(round(val_fraction * len(earliest)))
    val: set[str] = set()
    for s in order:
        if len(val) >= n_val:
            break
        pid = patient_of[s]
        if train_count[pid] > 1:
            val.add(s)
            train_count[pid] -= 1

    train = frozenset(set(earliest) - val)
    return SplitAssignment(
        train=train,
        val=frozenset(val),
        test=later,
        seed=seed,
        kind="temporal",
    )
