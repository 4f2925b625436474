"""Training loops for the two re-identification approaches.

Both trainers consume pre-extracted patch stacks keyed by slide id,
apply stain augmentation and flips online, optimize with Adam and
cross-entropy, and return the checkpoint with the lowest validation
loss. All randomness (batch order, bag composition, augmentation) is
derived from the config seed through namespaced sub-seeds, so runs are
reproducible and independent of worker scheduling.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from ..dataset import SplitAssignment
from ..stain import CachedStainAugmenter, random_flip
from .nets import (
    EncoderConfig,
    MILClassifier,
    PatchClassifier,
    ResNetEncoder,
    TinyPatchEncoder,
    build_encoder,
    patches_to_tensor,
)

logger = logging.getLogger(__name__)

# sub-seed namespaces; keep distinct so streams never collide
_SEED_BATCH_ORDER = 11
_SEED_AUGMENT = 12
_SEED_BAGS = 13
_SEED_VAL_BAG = 14
_SEED_PERMUTE = 15

DEFAULT_BAG_SIZE = 40
DEFAULT_INFERENCE_CAP = 500


class TrainingError(RuntimeError):
    """Raised for unusable training inputs or diverged optimization."""


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 30
    patience: int = 10
    batch_size: int = 64
    bags_per_slide_per_epoch: int = 1
    stain_lambda: float = 0.2
    augment: bool = True
    seed: int = 0
    optimizer: str = "adam"
    loss: str = "cross_entropy"

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be > 0")
        if self.max_epochs < 1 or self.batch_size < 1 or self.bags_per_slide_per_epoch < 1:
            raise TrainingError("max_epochs, batch_size, bags_per_slide_per_epoch must be >= 1")
        if self.patience < 0:
            raise TrainingError("patience must be >= 0")
        if self.optimizer != "adam":
            raise TrainingError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss != "cross_entropy":
            raise TrainingError(f"unsupported loss {self.loss!r}")


@dataclass(frozen=True)
class Bag:
    """Fixed-size multiset of patches from one slide with one label."""

    slide_id: str
    instances: np.ndarray  # (bag_size, h, w, 3)
    label: int
    instance_indices: tuple[int, ...] = ()


@dataclass(frozen=True)
class SlidePrediction:
    """Per-patient class scores for one slide with the full ranking."""

    slide_id: str
    class_scores: np.ndarray  # (n_classes,), sums to 1
    predicted_class: int
    topk: tuple[int, ...]  # descending score, ties broken by ascending class

    def __post_init__(self) -> None:
        total = float(np.sum(self.class_scores))
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"class scores must sum to 1, got {total}")
        if self.topk[0] != self.predicted_class:
            raise ValueError("predicted_class must head the ranking")

    @classmethod
    def from_scores(cls, slide_id: str, scores: np.ndarray) -> "SlidePrediction":
        scores = np.asarray(scores, dtype=np.float64)
        ranking = np.argsort(-scores, kind="stable")
        return cls(
            slide_id=slide_id,
            class_scores=scores,
            predicted_class=int(ranking[0]),
            topk=tuple(int(c) for c in ranking),
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_recall1: float


@dataclass
class TrainedModel:
    model: nn.Module
    history: list[EpochRecord]
    best_epoch: int
    n_classes: int
    kind: str  # "patch" | "mil"


def make_bags(
    patches: np.ndarray,
    slide_id: str,
    label: int,
    bag_size: int,
    n_bags: int,
    rng: np.random.Generator,
) -> list[Bag]:
    """Sample bags uniformly; without replacement when the slide has at
    least ``bag_size`` patches, with replacement otherwise."""
    n = len(patches)
    if n == 0:
        raise TrainingError(f"slide {slide_id}: no patches to build bags from")
    bags = []
    for _ in range(n_bags):
        idx = rng.choice(n, size=bag_size, replace=n < bag_size)
        bags.append(
            Bag(
                slide_id=slide_id,
                instances=patches[idx],
                label=label,
                instance_indices=tuple(int(i) for i in idx),
            )
        )
    return bags


def _augmented(
    augmenter: CachedStainAugmenter,
    key: object,
    patch: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    return random_flip(augmenter.augment(key, patch, rng), rng)


def _check_finite(loss: torch.Tensor, epoch: int, what: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(
            f"{what} loss became non-finite at epoch {epoch} ({float(loss)}); "
            "lower the learning rate or check the input data"
        )


def _macro_recall1(per_slide: Mapping[str, tuple[int, int]]) -> float:
    """Macro recall@1 from slide -> (true, predicted), over observed classes."""
    hits: dict[int, list[bool]] = {}
    for true, pred in per_slide.values():
        hits.setdefault(true, []).append(pred == true)
    if not hits:
        return 0.0
    return sum(sum(v) / len(v) for v in hits.values()) / len(hits)


def train_patch_classifier(
    patch_map: Mapping[str, np.ndarray],
    labels: Mapping[str, int],
    split: SplitAssignment,
    n_classes: int,
    encoder_config: EncoderConfig,
    config: TrainingConfig,
) -> TrainedModel:
    """Train the N-way patch classifier with online augmentation.

    Every training patch is stain-augmented and flipped each epoch.
    Model selection picks the epoch with minimal validation loss;
    training stops early after ``patience`` epochs without improvement.
    """
    train_slides = sorted(s for s in split.train if len(patch_map.get(s, ())) > 0)
    val_slides = sorted(s for s in split.val if len(patch_map.get(s, ())) > 0)
    if not train_slides:
        raise TrainingError("empty training set")

    items = [
        (sid, i, labels[sid]) for sid in train_slides for i in range(len(patch_map[sid]))
    ]
    present = {label for _, _, label in items}
    missing = sorted(set(range(n_classes)) - present)
    if missing:
        raise TrainingError(f"classes without any training patch: {missing}")

    torch.manual_seed(config.seed)
    model = PatchClassifier(build_encoder(encoder_config), n_classes)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    criterion = nn.CrossEntropyLoss()
    augmenter = CachedStainAugmenter(config.stain_lambda)

    history: list[EpochRecord] = []
    best_loss = float("inf")
    best_state: dict | None = None
    best_epoch = -1

    for epoch in range(config.max_epochs):
        model.train()
        order = np.random.default_rng(
            [_SEED_BATCH_ORDER, config.seed, epoch]
        ).permutation(len(items))
        running, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch_ids = order[start : start + config.batch_size]
            xs, ys = [], []
            for item_idx in batch_ids:
                sid, pi, label = items[item_idx]
                patch = patch_map[sid][pi].astype(np.float64)
                if config.augment:
                    rng = np.random.default_rng(
                        [_SEED_AUGMENT, config.seed, epoch, int(item_idx)]
                    )
                    patch = _augmented(augmenter, (sid, pi), patch, rng)
                xs.append(patch)
                ys.append(label)
            x = patches_to_tensor(np.stack(xs))
            y = torch.tensor(ys, dtype=torch.long)
            optimizer.zero_grad()
            loss = criterion(model(x), y)
            _check_finite(loss, epoch, "training")
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * len(batch_ids)
            seen += len(batch_ids)
        train_loss = running / seen

        val_loss, val_recall = _validate_patch(model, patch_map, labels, val_slides, criterion)
        if val_loss is None:
            val_loss, val_recall = train_loss, 0.0
        history.append(EpochRecord(epoch, train_loss, val_loss, val_recall))
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
        elif epoch - best_epoch >= config.patience:
            break

    model.load_state_dict(best_state)
    model.eval()
    return TrainedModel(model, history, best_epoch, n_classes, "patch")


def _validate_patch(
    model: PatchClassifier,
    patch_map: Mapping[str, np.ndarray],
    labels: Mapping[str, int],
    val_slides: Sequence[str],
    criterion: nn.Module,
) -> tuple[float | None, float]:
    if not val_slides:
        return None, 0.0
    model.eval()
    total, count = 0.0, 0
    outcomes: dict[str, tuple[int, int]] = {}
    with torch.no_grad():
        for sid in val_slides:
            x = patches_to_tensor(patch_map[sid])
            y = torch.full((len(x),), labels[sid], dtype=torch.long)
            logits = model(x)
            total += float(criterion(logits, y)) * len(x)
            count += len(x)
            mean_prob = torch.softmax(logits, dim=1).mean(dim=0).numpy()
            outcomes[sid] = (labels[sid], int(np.argmax(mean_prob)))
    return total / count, _macro_recall1(outcomes)


def train_mil(
    patch_map: Mapping[str, np.ndarray],
    labels: Mapping[str, int],
    split: SplitAssignment,
    n_classes: int,
    encoder: nn.Module,
    config: TrainingConfig,
    bag_size: int = DEFAULT_BAG_SIZE,
    attention_hidden: int = 64,
    inference_cap: int = DEFAULT_INFERENCE_CAP,
) -> TrainedModel:
    """Train gated-attention MIL over a frozen encoder.

    Each step draws a bag from one slide, augments every instance
    independently, encodes without gradients, pools with gated
    attention, and classifies against the patient label. The encoder's
    parameters are never updated.
    """
    train_slides = sorted(s for s in split.train if len(patch_map.get(s, ())) > 0)
    val_slides = sorted(s for s in split.val if len(patch_map.get(s, ())) > 0)
    if not train_slides:
        raise TrainingError("empty training set")
    present = {labels[s] for s in train_slides}
    missing = sorted(set(range(n_classes)) - present)
    if missing:
        raise TrainingError(f"classes without any training slide: {missing}")

    encoder.requires_grad_(False)
    encoder.eval()
    torch.manual_seed(config.seed)
    model = MILClassifier(encoder, n_classes, attention_hidden)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=config.learning_rate)
    criterion = nn.CrossEntropyLoss()
    augmenter = CachedStainAugmenter(config.stain_lambda)

    val_bags = {
        sid: _inference_bag(patch_map[sid], cap=inference_cap, seed=[_SEED_VAL_BAG, config.seed, i])
        for i, sid in enumerate(val_slides)
    }

    history: list[EpochRecord] = []
    best_loss = float("inf")
    best_state: dict | None = None
    best_epoch = -1

    for epoch in range(config.max_epochs):
        model.train()
        order = np.random.default_rng(
            [_SEED_BATCH_ORDER, config.seed, epoch]
        ).permutation(len(train_slides))
        running, steps = 0.0, 0
        for slide_pos in order:
            sid = train_slides[slide_pos]
            bag_rng = np.random.default_rng(
                [_SEED_BAGS, config.seed, epoch, int(slide_pos)]
            )
            bags = make_bags(
                patch_map[sid], sid, labels[sid], bag_size,
                config.bags_per_slide_per_epoch, bag_rng,
            )
            for bag_i, bag in enumerate(bags):
                if config.augment:
                    aug_rng = np.random.default_rng(
                        [_SEED_AUGMENT, config.seed, epoch, int(slide_pos), bag_i]
                    )
                    instances = np.stack(
                        [
                            _augmented(
                                augmenter, (sid, pi), inst.astype(np.float64), aug_rng
                            )
                            for pi, inst in zip(bag.instance_indices, bag.instances)
                        ]
                    )
                else:
                    instances = bag.instances
                x = patches_to_tensor(instances)
                y = torch.tensor([bag.label], dtype=torch.long)
                optimizer.zero_grad()
                logits, _ = model(x)
                loss = criterion(logits.unsqueeze(0), y)
                _check_finite(loss, epoch, "MIL training")
                loss.backward()
                optimizer.step()
                running += float(loss.detach())
                steps += 1
        train_loss = running / steps

        val_loss, val_recall = _validate_mil(model, val_bags, labels, criterion)
        if val_loss is None:
            val_loss, val_recall = train_loss, 0.0
        history.append(EpochRecord(epoch, train_loss, val_loss, val_recall))
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
        elif epoch - best_epoch >= config.patience:
            break

    model.load_state_dict(best_state)
    model.eval()
    return TrainedModel(model, history, best_epoch, n_classes, "mil")


def _validate_mil(
    model: MILClassifier,
    val_bags: Mapping[str, np.ndarray],
    labels: Mapping[str, int],
    criterion: nn.Module,
) -> tuple[float | None, float]:
    if not val_bags:
        return None, 0.0
    model.eval()
    total = 0.0
    outcomes: dict[str, tuple[int, int]] = {}
    with torch.no_grad():
        for sid, instances in val_bags.items():
            logits, _ = model(patches_to_tensor(instances))
            y = torch.tensor([labels[sid]], dtype=torch.long)
            total += float(criterion(logits.unsqueeze(0), y))
            outcomes[sid] = (labels[sid], int(torch.argmax(logits)))
    return total / len(val_bags), _macro_recall1(outcomes)


def _inference_bag(patches: np.ndarray, cap: int, seed) -> np.ndarray:
    """All patches of a slide, or a seeded uniform sample of ``cap``."""
    if len(patches) <= cap:
        return patches
    idx = np.sort(np.random.default_rng(seed).choice(len(patches), size=cap, replace=False))
    return patches[idx]


def predict_slide_patchwise(
    model: PatchClassifier,
    patches: np.ndarray,
    slide_id: str,
    aggregation: str = "mean_prob",
) -> SlidePrediction:
    """Aggregate per-patch probabilities into one slide-level prediction.

    ``mean_prob`` averages per-patch probability vectors (the default;
    it yields a full score vector for top-k ranking); ``majority`` votes
    with per-patch argmaxes.
    """
    if len(patches) == 0:
        raise TrainingError(f"slide {slide_id}: no patches to predict from")
    model.eval()
    with torch.no_grad():
        probs = torch.softmax(model(patches_to_tensor(patches)), dim=1).numpy()
    if aggregation == "mean_prob":
        scores = probs.mean(axis=0)
    elif aggregation == "majority":
        votes = np.bincount(np.argmax(probs, axis=1), minlength=probs.shape[1])
        scores = votes / votes.sum()
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    return SlidePrediction.from_scores(slide_id, scores)


def predict_slide_mil(
    model: MILClassifier,
    patches: np.ndarray,
    slide_id: str,
    cap: int = DEFAULT_INFERENCE_CAP,
    seed: int = 0,
) -> SlidePrediction:
    """One bag holding all tissue patches (seeded sample of ``cap`` when
    the slide has more), classified in a single forward pass."""
    if len(patches) == 0:
        raise TrainingError(f"slide {slide_id}: no patches to predict from")
    instances = _inference_bag(patches, cap=cap, seed=[_SEED_VAL_BAG, seed])
    model.eval()
    with torch.no_grad():
        logits, _ = model(patches_to_tensor(instances))
        scores = torch.softmax(logits, dim=0).numpy()
    return SlidePrediction.from_scores(slide_id, scores)


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_recall@1"])
        for rec in history:
            writer.writerow(
                [rec.epoch, f"{rec.train_loss:.6f}", f"{rec.val_loss:.6f}", f"{rec.val_recall1:.6f}"]
            )


def split_fingerprint(split: SplitAssignment) -> str:
    return hashlib.sha256(split.to_json().encode()).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    trained: TrainedModel,
    encoder_config: EncoderConfig,
    training_config: TrainingConfig,
    patient_index_json: str,
    split: SplitAssignment,
) -> None:
    """Self-describing checkpoint: parameters plus everything needed to
    rebuild the model and identify the run that produced it."""
    encoder = trained.model.encoder
    if isinstance(encoder, TinyPatchEncoder):
        arch = {
            "family": "tiny",
            "embedding_dim": encoder.embedding_dim,
            "width": encoder.width,
            "depth": encoder.depth,
        }
    else:
        arch = {"family": "resnet18"}
    payload = {
        "kind": trained.kind,
        "state_dict": trained.model.state_dict(),
        "n_classes": trained.n_classes,
        "encoder_arch": arch,
        "encoder_config": asdict(encoder_config),
        "training_config": asdict(training_config),
        "patient_index": patient_index_json,
        "split_fingerprint": split_fingerprint(split),
        "history": [asdict(r) for r in trained.history],
        "best_epoch": trained.best_epoch,
        "attention_hidden": getattr(trained.model, "attention_hidden", None),
    }
    torch.save(payload, path)


def _rebuild_encoder(arch: dict) -> nn.Module:
    """Architecture-only rebuild; weights come from the checkpoint state."""
    if arch["family"] == "tiny":
        return TinyPatchEncoder(arch["embedding_dim"], arch["width"], arch["depth"])
    import torchvision

    blank = torchvision.models.resnet18(weights=None)
    return ResNetEncoder(blank.state_dict())


def load_checkpoint(path: str | Path) -> tuple[TrainedModel, dict]:
    """Rebuild a trained model from a checkpoint; returns (model, metadata)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    encoder = _rebuild_encoder(payload["encoder_arch"])
    if payload["kind"] == "patch":
        model: nn.Module = PatchClassifier(encoder, payload["n_classes"])
    else:
        model = MILClassifier(encoder, payload["n_classes"], payload["attention_hidden"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    trained = TrainedModel(
        model=model,
        history=[EpochRecord(**r) for r in payload["history"]],
        best_epoch=payload["best_epoch"],
        n_classes=payload["n_classes"],
        kind=payload["kind"],
    )
    return trained, payload
