"""Optical-density color math for two-stain brightfield images.

Pixel intensities relate to stain amounts through the Beer-Lambert law:
OD = -log10(I) is linear in the per-stain concentrations. A 2x3 stain
matrix (one unit absorption vector per stain) is estimated per image
with the Macenko procedure, concentrations are recovered by per-pixel
least squares, and training-time augmentation perturbs concentrations
channelwise with S' = alpha * S + beta before reconstructing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1.0 / 255.0
DEFAULT_OD_FLOOR = 0.15
DEFAULT_ANGLE_PERCENTILE = 1.0
DEFAULT_LAMBDA = 0.2
MIN_TISSUE_PIXELS = 100
# estimation cost grows with pixel count; beyond this the tissue pixels
# are strided down (deterministically) before the PCA/percentile steps
_MAX_ESTIMATION_PIXELS = 2048
# below this angular separation the two stain directions are treated as
# collinear and estimation fails
_MIN_ROW_SEPARATION_DEG = 1.0

# widely used H&E absorption directions; row 0 is hematoxylin-like.
# Used to order estimated rows and as a fallback for degenerate inputs.
CANONICAL_HE_MATRIX = np.array(
    [
        [0.650, 0.704, 0.286],
        [0.072, 0.990, 0.105],
    ]
)
CANONICAL_HE_MATRIX /= np.linalg.norm(CANONICAL_HE_MATRIX, axis=1, keepdims=True)


class StainEstimationError(ValueError):
    """Raised when a stain matrix cannot be estimated from an image."""


@dataclass
class StainModel:
    """Two unit stain absorption vectors plus per-stain reference scale.

    ``stain_matrix`` rows are unit-L2, componentwise non-negative, and
    ordered hematoxylin-like first. ``reference_max_concentration`` is
    the high-percentile concentration per stain of the fitted image.
    """

    stain_matrix: np.ndarray  # (2, 3)
    reference_max_concentration: np.ndarray  # (2,)

    def __post_init__(self) -> None:
        m = np.asarray(self.stain_matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise StainEstimationError(f"stain matrix must be 2x3, got {m.shape}")
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise StainEstimationError(f"stain matrix rows must be unit norm, got norms {norms}")
        if np.any(m < -1e-12):
            raise StainEstimationError("stain matrix rows must be non-negative")
        if _row_angle_deg(m) < _MIN_ROW_SEPARATION_DEG:
            raise StainEstimationError("stain matrix rows are nearly collinear")
        ref = np.asarray(self.reference_max_concentration, dtype=np.float64)
        if ref.shape != (2,) or np.any(ref <= 0):
            raise StainEstimationError("reference_max_concentration must be 2 positive reals")
        self.stain_matrix = m
        self.reference_max_concentration = ref


def _row_angle_deg(matrix: np.ndarray) -> float:
    cos = float(np.clip(np.dot(matrix[0], matrix[1]), -1.0, 1.0))
    return float(np.degrees(np.arccos(cos)))


def rgb_to_od(patch: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """OD = -log10(I), with intensities clamped below at ``epsilon``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    return -np.log10(np.maximum(np.asarray(patch, dtype=np.float64), epsilon))


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    """I = 10**(-OD), clipped to [0, 1]."""
    return np.clip(10.0 ** (-np.asarray(od, dtype=np.float64)), 0.0, 1.0)


def estimate_stain_model(
    patch: np.ndarray,
    od_floor: float = DEFAULT_OD_FLOOR,
    angle_percentile: float = DEFAULT_ANGLE_PERCENTILE,
    epsilon: float = DEFAULT_EPSILON,
) -> StainModel:
    """Macenko stain-vector estimation for a two-stain image.

    Low-OD (background) pixels are discarded, the remaining OD vectors
    are projected onto their top-2 principal plane, and the angular
    extremes at ``angle_percentile`` / 100 - ``angle_percentile`` give
    the two stain directions. Rows are oriented non-negative (absorption
    cannot be negative; small numerical negatives are clipped and the
    row renormalized) and ordered by similarity to the canonical
    hematoxylin direction.
    """
    od = rgb_to_od(patch, epsilon).reshape(-1, 3)
    tissue = od[np.linalg.norm(od, axis=1) > od_floor]
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise StainEstimationError(
            f"insufficient tissue for stain estimation: {tissue.shape[0]} pixels "
            f"above OD floor {od_floor}, need {MIN_TISSUE_PIXELS}"
        )
    if tissue.shape[0] > _MAX_ESTIMATION_PIXELS:
        step = int(np.ceil(tissue.shape[0] / _MAX_ESTIMATION_PIXELS))
        tissue = tissue[::step]

    covariance = np.cov(tissue.T)
    _, eigvecs = np.linalg.eigh(covariance)
    plane = eigvecs[:, [2, 1]]  # top-2 principal directions as columns

    projected = tissue @ plane
    # point the first in-plane axis into the data cloud so the angular
    # spread stays clear of the atan2 branch cut
    if projected[:, 0].mean() < 0:
        plane = plane * np.array([-1.0, 1.0])
        projected = tissue @ plane
    angles = np.arctan2(projected[:, 1], projected[:, 0])
    lo = np.percentile(angles, angle_percentile)
    hi = np.percentile(angles, 100.0 - angle_percentile)

    def _direction(phi: float) -> np.ndarray:
        v = plane @ np.array([np.cos(phi), np.sin(phi)])
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise StainEstimationError("degenerate stain direction")
        return v / norm

    v_lo, v_hi = _direction(lo), _direction(hi)
    pair = np.stack([v_lo, v_hi])
    if _row_angle_deg(pair) < _MIN_ROW_SEPARATION_DEG:
        raise StainEstimationError(
            "stain directions nearly collinear; image does not carry two stains"
        )

    similarity = pair @ CANONICAL_HE_MATRIX[0]
    if similarity[1] > similarity[0]:
        pair = pair[::-1]

    concentrations = _solve_concentrations(od, pair)
    reference = np.maximum(np.percentile(concentrations, 99, axis=1), 1e-6)
    return StainModel(stain_matrix=pair, reference_max_concentration=reference)


def _solve_concentrations(od_flat: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Least-squares solve of OD ~= matrix.T @ S for all pixels at once."""
    solution, _, rank, _ = np.linalg.lstsq(matrix.T, od_flat.T, rcond=None)
    if rank < 2:
        raise StainEstimationError("singular stain matrix")
    return np.clip(solution, 0.0, None)


def deconvolve(patch: np.ndarray, model: StainModel) -> np.ndarray:
    """Per-pixel stain concentrations, shape (2, n_pixels), clipped at 0."""
    od = rgb_to_od(patch).reshape(-1, 3)
    return _solve_concentrations(od, model.stain_matrix)


def reconstruct(
    concentrations: np.ndarray,
    model: StainModel,
    shape: tuple[int, int] | None = None,
) -> np.ndarray:
    """Invert deconvolution: I = 10**(-matrix.T @ S), clipped to [0, 1].

    ``shape`` gives the output (height, width); by default a square
    image is assumed.
    """
    s = np.asarray(concentrations, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != 2:
        raise ValueError(f"concentrations must have shape (2, n), got {s.shape}")
    n = s.shape[1]
    if shape is None:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ValueError("cannot infer a square shape; pass shape explicitly")
        shape = (side, side)
    od = model.stain_matrix.T @ s
    return od_to_rgb(od.T.reshape(shape[0], shape[1], 3))


def augment_stain(
    patch: np.ndarray,
    lam: float = DEFAULT_LAMBDA,
    rng: np.random.Generator | None = None,
    model: StainModel | None = None,
) -> np.ndarray:
    """Perturb stain concentrations: S' = alpha * S + beta per channel.

    alpha is drawn uniformly from [1-lam, 1+lam] and beta from
    [-lam, lam], independently per stain channel. When the stain matrix
    cannot be estimated (blank or single-stain patch) the input is
    returned unchanged so a training run never aborts; pass ``model``
    to reuse a slide-level estimate instead of fitting per patch.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if rng is None:
        rng = np.random.default_rng()
    if model is None:
        try:
            model = estimate_stain_model(patch)
        except StainEstimationError as exc:
            logger.warning("stain augmentation skipped: %s", exc)
            return patch
    concentrations = deconvolve(patch, model)
    alpha = rng.uniform(1.0 - lam, 1.0 + lam, size=2)
    beta = rng.uniform(-lam, lam, size=2)
    perturbed = np.clip(alpha[:, None] * concentrations + beta[:, None], 0.0, None)
    return reconstruct(perturbed, model, patch.shape[:2])


def random_flip(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply horizontal then vertical flips, each with probability 0.5."""
    out = patch
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


class CachedStainAugmenter:
    """Online stain augmentation with per-patch precomputation.

    The stain matrix and concentrations of a fixed patch never change,
    so they are computed once per patch key; each augmentation then
    only draws alpha/beta and reconstructs. Results are identical to
    :func:`augment_stain` (same draw order, same math); patches whose
    stain geometry is degenerate pass through unchanged.
    """

    def __init__(self, lam: float = DEFAULT_LAMBDA):
        if lam < 0:
            raise ValueError("lam must be >= 0")
        self.lam = lam
        self._cache: dict[object, tuple[StainModel, np.ndarray] | None] = {}

    def prepare(self, key: object, patch: np.ndarray) -> None:
        if key in self._cache:
            return
        try:
            model = estimate_stain_model(patch)
        except StainEstimationError as exc:
            logger.warning("stain augmentation disabled for %r: %s", key, exc)
            self._cache[key] = None
            return
        self._cache[key] = (model, deconvolve(patch, model))

    def augment(self, key: object, patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if key not in self._cache:
            self.prepare(key, patch)
        entry = self._cache[key]
        if entry is None:
            return patch
        model, concentrations = entry
        alpha = rng.uniform(1.0 - self.lam, 1.0 + self.lam, size=2)
        beta = rng.uniform(-self.lam, self.lam, size=2)
        perturbed = np.clip(alpha[:, None] * concentrations + beta[:, None], 0.0, None)
        return reconstruct(perturbed, model, patch.shape[:2])
