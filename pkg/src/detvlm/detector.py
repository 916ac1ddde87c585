"""Detector screening stage: produce per-image proposals and stratify them
against the ontology by the high-confidence threshold.

Components confirmed strictly above the threshold skip the VLM entirely;
everything else becomes a verification candidate. Proposals at or below the
threshold are discarded as unreliable rather than carried downstream.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol

from .core import (
    ComponentOntology,
    ImageRef,
    ValidationError,
    iter_jsonl,
)
from ._transport import HttpJsonClient

DEFAULT_TAU_HIGH = 0.6


@dataclass(frozen=True)
class DetectionProposal:
    """One raw detector output: component, optional box, confidence."""

    component: str
    confidence: float
    bbox: tuple[float, float, float, float] | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(
                f"proposal for {self.component!r}: confidence {self.confidence} outside [0, 1]"
            )
        if self.bbox is not None:
            object.__setattr__(self, "bbox", tuple(self.bbox))
            if len(self.bbox) != 4:
                raise ValidationError(f"proposal for {self.component!r}: bbox needs 4 values")
            if self.bbox[2] <= 0 or self.bbox[3] <= 0:
                raise ValidationError(
                    f"proposal for {self.component!r}: bbox width/height must be positive"
                )


@dataclass(frozen=True)
class Stratification:
    """Per-image partition of the ontology: confirmed hits vs. components
    the VLM must verify, plus the discarded low-confidence proposals."""

    confirmed: Mapping[str, float]
    verify: frozenset[str]
    discarded: tuple[DetectionProposal, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "confirmed", dict(self.confirmed))
        object.__setattr__(self, "verify", frozenset(self.verify))
        object.__setattr__(self, "discarded", tuple(self.discarded))


class DetectorBackend(Protocol):
    def detect(self, image: ImageRef) -> list[DetectionProposal]:
        ...


def best_per_component(proposals: Iterable[DetectionProposal]) -> dict[str, float]:
    """Reduce raw proposals to the strongest confidence per component."""
    best: dict[str, float] = {}
    for proposal in proposals:
        current = best.get(proposal.component)
        if current is None or proposal.confidence > current:
            best[proposal.component] = proposal.confidence
    return best


def stratify(
    best: Mapping[str, float],
    ontology: ComponentOntology,
    tau_high: float = DEFAULT_TAU_HIGH,
) -> Stratification:
    """Partition the ontology against the detector's best confidences.

    A component is confirmed only when its confidence is strictly above
    ``tau_high``; ties and misses go to the verification set. Entries at or
    below the threshold are kept in ``discarded`` for audit only.

    Detections for components the detector was never trained on, or for ids
    missing from the ontology, are configuration errors.
    """
    if not 0.0 <= tau_high <= 1.0:
        raise ValidationError(f"tau_high {tau_high} outside [0, 1]")
    confirmed: dict[str, float] = {}
    discarded: list[DetectionProposal] = []
    for component_id, confidence in best.items():
        if component_id not in ontology:
            raise ValidationError(f"detector reported unknown component {component_id!r}")
        if not ontology.get(component_id).detector_known:
            raise ValidationError(
                f"detector reported {component_id!r}, which is outside its training ontology"
            )
        if confidence > tau_high:
            confirmed[component_id] = confidence
        else:
            discarded.append(DetectionProposal(component=component_id, confidence=confidence))
    verify = frozenset(cid for cid in ontology.ids() if cid not in confirmed)
    return Stratification(confirmed=confirmed, verify=verify, discarded=tuple(discarded))


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class ScriptedDetector:
    """Deterministic mock detector driven by a rule list.

    Rules are ``{"image_id", "component", "confidence", "bbox"?}``; detect
    returns that image's proposals in rule order, unmerged. Pure and
    lock-free, so safe under any concurrency.
    """

    def __init__(self, rules: Iterable[dict[str, Any]]) -> None:
        self._proposals_by_image: dict[str, list[DetectionProposal]] = {}
        for index, rule in enumerate(rules):
            try:
                image_id = rule["image_id"]
                proposal = DetectionProposal(
                    component=rule["component"],
                    confidence=rule["confidence"],
                    bbox=tuple(rule["bbox"]) if rule.get("bbox") is not None else None,
                )
            except (TypeError, KeyError) as exc:
                raise ValidationError(f"detector script rule {index}: missing field") from exc
            self._proposals_by_image.setdefault(image_id, []).append(proposal)

    @classmethod
    def from_path(cls, path: str | Path) -> "ScriptedDetector":
        return cls(entry for _, entry in iter_jsonl(path))

    def detect(self, image: ImageRef) -> list[DetectionProposal]:
        return list(self._proposals_by_image.get(image.image_id, ()))


class RemoteDetector:
    """HTTP client for a detection service.

    Sends the image bytes base64-encoded and maps the response proposals
    back to domain objects. In-flight requests are bounded and transient
    failures retried with exponential backoff.
    """

    def __init__(
        self,
        base_url: str,
        *,
        max_attempts: int = 3,
        max_in_flight: int = 4,
        timeout: float = 60.0,
        **client_kwargs: Any,
    ) -> None:
        self._http = HttpJsonClient(
            base_url,
            max_attempts=max_attempts,
            max_in_flight=max_in_flight,
            timeout=timeout,
            **client_kwargs,
        )

    def detect(self, image: ImageRef) -> list[DetectionProposal]:
        from .vlm import read_image_bytes

        data = read_image_bytes(image)
        body = self._http.post_json(
            "/detect",
            {"image_id": image.image_id, "image_b64": base64.b64encode(data).decode("ascii")},
        )
        if not isinstance(body, dict) or not isinstance(body.get("proposals"), list):
            raise ValidationError("detector response missing 'proposals' list")
        proposals = []
        for entry in body["proposals"]:
            proposals.append(
                DetectionProposal(
                    component=entry["component"],
                    confidence=entry["confidence"],
                    bbox=tuple(entry["bbox"]) if entry.get("bbox") is not None else None,
                )
            )
        return proposals

    def close(self) -> None:
        self._http.close()
