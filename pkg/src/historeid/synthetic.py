"""Deterministic synthetic slide cohorts for desk-scale verification.

Each patient owns a persistent morphology signature: band-limited
texture wavelengths plus nuclear-blob density/size/intensity
parameters. Identity lives in rotation-invariant statistics, while
every slide re-draws nuisance factors (pattern orientation, tissue
outline, blob placement, and a global stain shift inside the standard
augmentation envelope). Slides from later resections can blend the
signature toward a fresh one by a configurable drift factor, modelling
morphology change between surgeries.

Rendering is physically coherent with the stain model: two
concentration fields (nuclear and cytoplasmic) are mixed through the
canonical H&E absorption matrix, so stain estimation and augmentation
behave on synthetic slides as they would on scanned tissue.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import SlideManifestEntry, write_manifest
from .stain import CANONICAL_HE_MATRIX

# rng stream tags so every component draws from its own derived seed
_TAG_SIGNATURE = 101
_TAG_DRIFT = 102
_TAG_SLIDE = 103
_TAG_DAYS = 104

_EDGE_SOFTNESS_PX = 2.0
_MIN_EOSIN_LEVEL = 0.15
_REFERENCE_PATCH_AREA = 64.0 * 64.0


@dataclass(frozen=True)
class MorphologySignature:
    """Patient-persistent texture and blob statistics."""

    texture_wavelengths: tuple[float, ...]  # px
    texture_amplitudes: tuple[float, ...]
    blob_density: float  # expected blobs per 64x64 px
    blob_radius: float  # px
    blob_amplitude: float  # nuclear stain concentration peak
    eosin_base: float  # cytoplasm stain concentration

    def blend(self, other: "MorphologySignature", weight: float) -> "MorphologySignature":
        """Linear interpolation of all parameters; weight 0 returns self."""
        w = float(weight)
        mix = lambda a, b: (1.0 - w) * a + w * b
        return MorphologySignature(
            texture_wavelengths=tuple(
                mix(a, b) for a, b in zip(self.texture_wavelengths, other.texture_wavelengths)
            ),
            texture_amplitudes=tuple(
                mix(a, b) for a, b in zip(self.texture_amplitudes, other.texture_amplitudes)
            ),
            blob_density=mix(self.blob_density, other.blob_density),
            blob_radius=mix(self.blob_radius, other.blob_radius),
            blob_amplitude=mix(self.blob_amplitude, other.blob_amplitude),
            eosin_base=mix(self.eosin_base, other.eosin_base),
        )


@dataclass
class SyntheticCohort:
    """Generated manifest plus per-slide ground truth."""

    entries: list[SlideManifestEntry]
    manifest_path: Path
    tissue_truth: dict[str, np.ndarray]  # slide_id -> bool (H, W) tissue mask
    signatures: dict[str, MorphologySignature]  # patient_id -> base signature


# geometry parameter ranges; the floor on blob density keeps two stains
# present in essentially every patch. density and radius spread in log
# space so relative (scale-like) differences are even across bins
_WAVELENGTH_RANGE = (5.0, 24.0)
_DENSITY_RANGE = (4.0, 40.0)
_RADIUS_RANGE = (2.0, 14.0)


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _draw_signature(rng: np.random.Generator) -> MorphologySignature:
    """Fully random signature; used for morphology-drift targets."""
    return MorphologySignature(
        texture_wavelengths=tuple(rng.uniform(*_WAVELENGTH_RANGE, size=2)),
        texture_amplitudes=(float(rng.uniform(0.20, 0.35)), float(rng.uniform(0.08, 0.15))),
        blob_density=_log_uniform(rng, *_DENSITY_RANGE),
        blob_radius=_log_uniform(rng, *_RADIUS_RANGE),
        blob_amplitude=float(rng.uniform(0.55, 1.15)),
        eosin_base=float(rng.uniform(0.25, 0.60)),
    )


def _cohort_signatures(seed: int, n_patients: int) -> list[MorphologySignature]:
    """Stratified random signatures: each geometry parameter is drawn
    from a distinct bin per patient (bins shuffled per cohort), so any
    two patients differ markedly in density, radius, and dominant
    texture scale regardless of the seed. Color-level parameters stay
    fully random; they are deliberately masked by stain variation."""
    cohort_rng = np.random.default_rng([_TAG_SIGNATURE, seed])
    bins = {
        "radius": cohort_rng.permutation(n_patients),
        "density": cohort_rng.permutation(n_patients),
        "wavelength": cohort_rng.permutation(n_patients),
    }
    signatures = []
    for p in range(n_patients):
        rng = np.random.default_rng([_TAG_SIGNATURE, seed, p])

        def strat(name: str, lo: float, hi: float, log: bool = False) -> float:
            jitter = rng.uniform(0.25, 0.75)
            fraction = (bins[name][p] + jitter) / n_patients
            if log:
                return float(np.exp(np.log(lo) + fraction * (np.log(hi) - np.log(lo))))
            return lo + fraction * (hi - lo)

        signatures.append(
            MorphologySignature(
                texture_wavelengths=(
                    strat("wavelength", *_WAVELENGTH_RANGE),
                    float(rng.uniform(*_WAVELENGTH_RANGE)),
                ),
                texture_amplitudes=(
                    float(rng.uniform(0.20, 0.35)),
                    float(rng.uniform(0.08, 0.15)),
                ),
                blob_density=strat("density", *_DENSITY_RANGE, log=True),
                blob_radius=strat("radius", *_RADIUS_RANGE, log=True),
                blob_amplitude=float(rng.uniform(0.55, 1.15)),
                eosin_base=float(rng.uniform(0.25, 0.60)),
            )
        )
    return signatures


def _tissue_weight(size: int, rng: np.random.Generator) -> np.ndarray:
    """Soft indicator of an irregular elliptical tissue region."""
    cx, cy = (0.5 + rng.uniform(-0.06, 0.06, size=2)) * size
    a, b = rng.uniform(0.30, 0.42, size=2) * size
    theta = rng.uniform(0.0, np.pi)
    harmonics = rng.uniform(0.0, 0.05, size=4)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=4)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    xr = dx * np.cos(theta) + dy * np.sin(theta)
    yr = -dx * np.sin(theta) + dy * np.cos(theta)
    r_norm = np.sqrt((xr / a) ** 2 + (yr / b) ** 2)
    phi = np.arctan2(yr, xr)
    boundary = 1.0
    for m, (c, psi) in enumerate(zip(harmonics, phases), start=2):
        boundary = boundary + c * np.cos(m * phi + psi)
    edge = _EDGE_SOFTNESS_PX / min(a, b)
    return np.clip((boundary - r_norm) / edge, 0.0, 1.0)


def _texture_field(
    size: int, signature: MorphologySignature, rng: np.random.Generator
) -> np.ndarray:
    """Band-limited texture; wavelengths are identity, orientation is nuisance."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.zeros((size, size))
    for wavelength, amplitude in zip(
        signature.texture_wavelengths, signature.texture_amplitudes
    ):
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        carrier = (xx * np.cos(theta) + yy * np.sin(theta)) * (2.0 * np.pi / wavelength)
        field += amplitude * np.cos(carrier + phase)
    return field


def _blob_field(
    size: int, signature: MorphologySignature, rng: np.random.Generator
) -> np.ndarray:
    """Gaussian nuclear blobs with patient-specific density and radius."""
    expected = signature.blob_density * (size * size) / _REFERENCE_PATCH_AREA
    n_blobs = int(rng.poisson(expected))
    field = np.zeros((size, size))
    if n_blobs == 0:
        return field
    centers = rng.uniform(0.0, size, size=(n_blobs, 2))
    radii = signature.blob_radius * rng.uniform(0.8, 1.2, size=n_blobs)
    amps = signature.blob_amplitude * rng.uniform(0.8, 1.2, size=n_blobs)
    for (cx, cy), radius, amp in zip(centers, radii, amps):
        sigma = radius / 2.0
        half = int(np.ceil(3.0 * sigma))
        x0, x1 = max(0, int(cx) - half), min(size, int(cx) + half + 1)
        y0, y1 = max(0, int(cy) - half), min(size, int(cy) + half + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        field[y0:y1, x0:x1] += amp * np.exp(-d2 / (2.0 * sigma * sigma))
    return field


def render_slide(
    signature: MorphologySignature,
    image_size_px: int,
    rng: np.random.Generator,
    stain_shift_envelope: float = 0.08,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one slide; returns (uint8 RGB image, bool tissue mask).

    The per-slide stain shift draws alpha in [1-e, 1+e] and beta in
    [-e, e] per stain. The default envelope sits inside the standard
    0.2 training-augmentation envelope: slides from one lab drift less
    than the augmentation is designed to cover, which is what lets the
    augmentation neutralize the shift as a re-identification shortcut.
    """
    size = image_size_px
    tissue = _tissue_weight(size, rng)
    texture = _texture_field(size, signature, rng)
    blobs = _blob_field(size, signature, rng)

    e = stain_shift_envelope
    alpha = rng.uniform(1.0 - e, 1.0 + e, size=2)
    beta = rng.uniform(-e, e, size=2)

    nuclear = tissue * np.clip(alpha[0] * blobs + beta[0], 0.0, None)
    cytoplasm = tissue * np.maximum(
        alpha[1] * (signature.eosin_base + texture) + beta[1], _MIN_EOSIN_LEVEL
    )

    concentrations = np.stack([nuclear.ravel(), cytoplasm.ravel()])
    od = CANONICAL_HE_MATRIX.T @ concentrations
    intensity = 10.0 ** (-od.T.reshape(size, size, 3))
    image = np.clip(np.rint(intensity * 255.0), 0, 255).astype(np.uint8)
    return image, tissue >= 0.5


def _resection_ordinals(slides_per_patient: int, resections_per_patient: int) -> list[int]:
    """One slide per later resection; the earliest keeps the remainder
    (the primary resection typically yields the most blocks)."""
    n_later = resections_per_patient - 1
    ordinals = [0] * (slides_per_patient - n_later)
    ordinals.extend(range(1, resections_per_patient))
    return ordinals


def generate_synthetic_cohort(
    output_dir: str | Path,
    n_patients: int,
    slides_per_patient: int,
    resections_per_patient: int = 1,
    image_size_px: int = 256,
    seed: int = 0,
    drift: float = 0.0,
    native_mpp: float = 0.88,
) -> SyntheticCohort:
    """Generate a cohort of PNG slides plus a manifest on disk.

    All randomness derives from ``seed`` through per-patient and
    per-slide seed sequences, so equal arguments produce byte-identical
    files regardless of rendering order. ``drift`` in [0, 1] blends the
    signature of resections with ordinal >= 1 toward a fresh random
    signature; 0 keeps later resections on the original distribution.
    """
    if min(n_patients, slides_per_patient, resections_per_patient) < 1:
        raise ValueError("all cohort counts must be >= 1")
    if image_size_px < 256:
        raise ValueError("image_size_px must be >= 256")
    if not 0.0 <= drift <= 1.0:
        raise ValueError("drift must lie in [0, 1]")
    if slides_per_patient < resections_per_patient:
        raise ValueError("need at least one slide per resection")

    output_dir = Path(output_dir)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        (output_dir / "images").mkdir(exist_ok=True)
    except OSError as exc:
        raise ValueError(f"cannot create output directory {output_dir}: {exc}") from exc

    ordinals = _resection_ordinals(slides_per_patient, resections_per_patient)
    entries: list[SlideManifestEntry] = []
    truth: dict[str, np.ndarray] = {}
    signatures: dict[str, MorphologySignature] = {}
    cohort_signatures = _cohort_signatures(seed, n_patients)

    for p in range(n_patients):
        patient_id = f"P{p:03d}"
        base_signature = cohort_signatures[p]
        signatures[patient_id] = base_signature

        day_rng = np.random.default_rng([_TAG_DAYS, seed, p])
        gaps = day_rng.integers(90, 1500, size=max(ordinals) + 1)
        days_at = np.concatenate([[0], np.cumsum(gaps[1:])])

        per_ordinal: dict[int, MorphologySignature] = {0: base_signature}
        for r in sorted(set(ordinals) - {0}):
            target = _draw_signature(np.random.default_rng([_TAG_DRIFT, seed, p, r]))
            per_ordinal[r] = base_signature.blend(target, drift)

        for s, ordinal in enumerate(ordinals):
            slide_id = f"{patient_id}_R{ordinal}_S{s:02d}"
            slide_rng = np.random.default_rng([_TAG_SLIDE, seed, p, s])
            image, mask = render_slide(per_ordinal[ordinal], image_size_px, slide_rng)
            rel_path = Path("images") / f"{slide_id}.png"
            Image.fromarray(image).save(output_dir / rel_path)
            truth[slide_id] = mask
            entries.append(
                SlideManifestEntry(
                    slide_id=slide_id,
                    patient_id=patient_id,
                    resection_ordinal=ordinal,
                    days_since_first_resection=int(days_at[ordinal]),
                    image_path=output_dir / rel_path,
                    native_mpp=native_mpp,
                )
            )

    manifest_path = output_dir / "manifest.csv"
    write_manifest(entries, manifest_path)
    return SyntheticCohort(
        entries=entries,
        manifest_path=manifest_path,
        tissue_truth=truth,
        signatures=signatures,
    )
