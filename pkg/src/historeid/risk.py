"""Publication risk assessment for histopathology image releases.

A small rule engine over a questionnaire about de-identification,
prior publications of the same patient, tumor provenance, and metadata
linkage. Rules fire in a fixed order and every verdict carries the
ordered rationale trail that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO

RISK_LEVELS = ("regulatory_violation", "no_direct_risk", "low", "elevated", "high")
_ESCALATION = {"no_direct_risk": "low", "low": "elevated", "elevated": "high", "high": "high"}


class QuestionnaireError(ValueError):
    """Raised when a reachable question was not answered."""


@dataclass(frozen=True)
class RiskQuestionnaire:
    """Answers feeding the assessment.

    ``phi_removed`` means metadata, filenames, slide tags, and in-image
    identifiers have all been cleared. The optional fields are only
    consulted (and only required) when the preceding answers make them
    reachable.
    """

    phi_removed: bool
    previously_published: bool = False
    same_tumor_as_published: bool | None = None
    other_tumor_available: bool | None = None
    metadata_published_with_images: bool = False
    prior_dataset_breached: bool | None = None


@dataclass
class RiskVerdict:
    level: str
    rationale: list[str] = field(default_factory=list)
    recommendations: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.level not in RISK_LEVELS:
            raise ValueError(f"unknown risk level {self.level!r}")
        if not self.rationale:
            raise ValueError("verdict requires a rationale trail")


def _require(value: bool | None, question: str) -> bool:
    if value is None:
        raise QuestionnaireError(f"question {question!r} is reachable but unanswered")
    return value


def assess(q: RiskQuestionnaire) -> RiskVerdict:
    """Pure rule evaluation; identical questionnaires yield identical verdicts.

    Rule order: incomplete de-identification is a regulatory violation;
    never-published patients carry no direct risk; published patients
    are rated low / elevated / high depending on whether the new images
    come from the same tumor and whether metadata accompanies them. A
    known breach of a prior dataset raises any non-violation verdict by
    one step.
    """
    rationale: list[str] = []
    recommendations: list[str] = []

    if not q.phi_removed:
        rationale.append(
            "identifying information is still present in metadata, filenames, "
            "slide tags, or the image itself: publishing violates data-protection law"
        )
        recommendations.append(
            "complete de-identification (file metadata, filenames, slide tags, in-image text) "
            "before any release"
        )
        return RiskVerdict("regulatory_violation", rationale, recommendations)
    rationale.append("de-identification is complete")

    if not q.previously_published:
        rationale.append(
            "no data from this patient has been published before, so the images "
            "cannot be linked to an existing dataset"
        )
        recommendations.append(
            "record this publication so future releases of the same patient can be assessed"
        )
        return RiskVerdict("no_direct_risk", rationale, recommendations)
    rationale.append("data from this patient exists in earlier publications")

    same_tumor = _require(q.same_tumor_as_published, "same_tumor_as_published")
    if not same_tumor:
        rationale.append(
            "the new images come from a different tumor than the published ones; "
            "cross-dataset matching is much harder between resections"
        )
        recommendations.append("prefer sections from tumors not present in earlier releases")
        level = "low"
    else:
        other_available = _require(q.other_tumor_available, "other_tumor_available")
        if other_available:
            recommendations.append(
                "sections from another tumor of this patient are available; using them "
                "instead would lower the linkage risk"
            )
        metadata = q.metadata_published_with_images
        if not metadata:
            rationale.append(
                "images of the same tumor are already public; slides from one tumor "
                "can be matched to each other with non-negligible accuracy"
            )
            level = "elevated"
        else:
            rationale.append(
                "same-tumor images plus accompanying metadata: the tumor appearance can "
                "act as a key joining the metadata of multiple datasets"
            )
            recommendations.append(
                "track which images and metadata of this patient are public; avoid "
                "publishing new metadata with same-tumor images"
            )
            level = "high"

    breached = _require(q.prior_dataset_breached, "prior_dataset_breached")
    if breached:
        escalated = _ESCALATION[level]
        rationale.append(
            "a dataset containing this patient suffered a privacy breach; linkable "
            f"information may already circulate, raising the level from {level} to {escalated}"
        )
        level = escalated

    return RiskVerdict(level, rationale, recommendations)


_PROMPTS: tuple[tuple[str, str], ...] = (
    ("phi_removed", "Has all identifying information been removed (metadata, filenames, slide tags, in-image text)?"),
    ("previously_published", "Has data from this patient been included in previous dataset publications?"),
    ("same_tumor_as_published", "Do the new images originate from the same tumor as the published ones?"),
    ("other_tumor_available", "Are sections from another tumor of this patient available?"),
    ("metadata_published_with_images", "Will medical metadata be published along with the images?"),
    ("prior_dataset_breached", "Has any prior dataset containing this patient been breached?"),
)


def _reachable(field_name: str, answers: dict) -> bool:
    if field_name in ("phi_removed",):
        return True
    if not answers.get("phi_removed", False):
        return False
    if field_name == "previously_published":
        return True
    if not answers.get("previously_published", False):
        return False
    if field_name in ("same_tumor_as_published", "prior_dataset_breached"):
        return True
    # other_tumor_available and metadata only matter for same-tumor images
    return bool(answers.get("same_tumor_as_published", False))


def _ask(prompt: str, source: IO[str], sink: IO[str]) -> bool:
    while True:
        sink.write(f"{prompt} [y/n] ")
        sink.flush()
        line = source.readline()
        if not line:
            raise EOFError("input ended before the questionnaire was complete")
        token = line.strip().lower()
        if token in ("y", "yes", "true", "1"):
            return True
        if token in ("n", "no", "false", "0"):
            return False
        sink.write("please answer 'y' or 'n'\n")


def interactive_assess(source: IO[str], sink: IO[str]) -> RiskVerdict:
    """Ask only the reachable questions in rule order, then print the verdict."""
    answers: dict[str, bool] = {}
    for field_name, prompt in _PROMPTS:
        if _reachable(field_name, answers):
            answers[field_name] = _ask(prompt, source, sink)
    verdict = assess(RiskQuestionnaire(**answers))
    sink.write(format_verdict(verdict))
    return verdict


def format_verdict(verdict: RiskVerdict) -> str:
    lines = [f"risk level: {verdict.level}", "rationale:"]
    lines += [f"  {i + 1}. {r}" for i, r in enumerate(verdict.rationale)]
    if verdict.recommendations:
        lines.append("recommendations:")
        lines += [f"  - {r}" for r in verdict.recommendations]
    return "\n".join(lines) + "\n"


def questionnaire_from_text(text: str) -> RiskQuestionnaire:
    """Parse 'field=yes/no' lines (blank lines and '#' comments ignored)."""
    valid = {name for name, _ in _PROMPTS}
    answers: dict[str, bool] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise QuestionnaireError(f"expected 'field=yes/no', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in valid:
            raise QuestionnaireError(f"unknown question {key!r}; valid: {sorted(valid)}")
        lowered = value.lower()
        if lowered in ("y", "yes", "true", "1"):
            answers[key] = True
        elif lowered in ("n", "no", "false", "0"):
            answers[key] = False
        else:
            raise QuestionnaireError(f"answer for {key!r} must be yes or no, got {value!r}")
    if "phi_removed" not in answers:
        raise QuestionnaireError("question 'phi_removed' must be answered")
    return RiskQuestionnaire(**answers)
