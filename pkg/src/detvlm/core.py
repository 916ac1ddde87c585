"""Domain model shared by every stage: component ontology, image references,
and the per-image retrieval records the pipeline emits.

All types here are immutable after construction and safe to share across
worker threads without locking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Any, Iterator

NA_STATE = "N/A"
UNKNOWN_STATE = "unknown"


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class DetVLMError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(DetVLMError):
    """Bad ontology, config, query, or any other operator-supplied input."""


class BackendError(DetVLMError):
    """A detector or VLM backend failed after exhausting its retries."""


class QuotaExceededError(BackendError):
    """The remote backend rejected us for quota reasons; fatal for the run."""


class ImageReadError(DetVLMError):
    """The referenced image bytes could not be read or decoded."""


class RecordsError(DetVLMError):
    """A records file is malformed or cannot be read/written."""


class PipelineError(DetVLMError):
    """Internal coverage invariant violated while fusing one image."""


# ---------------------------------------------------------------------------
# Ontology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentSpec:
    """One target component: a stable machine id plus everything the prompt
    and detector stages need to know about it.

    ``detector_known=False`` marks a zero-shot attribute: the detector was
    never trained on it, so it can only ever be resolved by the VLM stage.
    """

    id: str
    display_name: str
    detector_known: bool = True
    state_options: tuple[str, ...] = ()
    spatial_hint: str | None = None
    feature_hint: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("component id must be nonempty")
        if not self.display_name:
            raise ValidationError(f"component {self.id!r}: display_name must be nonempty")
        object.__setattr__(self, "state_options", tuple(self.state_options))
        seen: set[str] = set()
        for option in self.state_options:
            if not option:
                raise ValidationError(f"component {self.id!r}: empty state option")
            if option in seen:
                raise ValidationError(
                    f"component {self.id!r}: duplicate state option {option!r}"
                )
            seen.add(option)
        # Empty-string hints behave like missing hints.
        object.__setattr__(self, "spatial_hint", self.spatial_hint or None)
        object.__setattr__(self, "feature_hint", self.feature_hint or None)


@dataclass(frozen=True)
class ComponentOntology:
    """The ordered list of components one run searches for."""

    components: tuple[ComponentSpec, ...]
    version: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "components", tuple(self.components))
        if not self.components:
            raise ValidationError("ontology must declare at least one component")
        seen: set[str] = set()
        for spec in self.components:
            if spec.id in seen:
                raise ValidationError(f"duplicate component id {spec.id!r}")
            seen.add(spec.id)

    def ids(self) -> tuple[str, ...]:
        return tuple(spec.id for spec in self.components)

    def get(self, component_id: str) -> ComponentSpec:
        for spec in self.components:
            if spec.id == component_id:
                return spec
        raise KeyError(component_id)

    def __contains__(self, component_id: str) -> bool:
        return any(spec.id == component_id for spec in self.components)

    def __len__(self) -> int:
        return len(self.components)


@dataclass(frozen=True)
class ImageRef:
    """Opaque handle to one image; backends decide how to resolve ``uri``."""

    image_id: str
    uri: str = ""

    def __post_init__(self) -> None:
        if not self.image_id:
            raise ValidationError("image_id must be nonempty")


# ---------------------------------------------------------------------------
# Retrieval results
# ---------------------------------------------------------------------------


class Source(Enum):
    """Which stage decided a component's existence."""

    DETECTOR = "detector"
    VLM = "vlm"


@dataclass(frozen=True)
class RetrievalRecord:
    """The fused verdict for one component in one image."""

    component: str
    exists: int
    state: str = NA_STATE
    confidence: float = 0.0
    source: Source = Source.VLM
    retries_used: int = 0

    def __post_init__(self) -> None:
        if self.exists not in (0, 1):
            raise ValidationError(f"{self.component}: exists must be 0 or 1")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(
                f"{self.component}: confidence {self.confidence} outside [0, 1]"
            )
        if self.exists == 0 and self.state != NA_STATE:
            raise ValidationError(
                f"{self.component}: absent component must carry state {NA_STATE!r}"
            )
        if self.retries_used < 0:
            raise ValidationError(f"{self.component}: retries_used must be >= 0")


@dataclass(frozen=True)
class ImageResult:
    """All component records for one image, in ontology order."""

    image_id: str
    records: tuple[RetrievalRecord, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))

    def record_for(self, component_id: str) -> RetrievalRecord | None:
        for record in self.records:
            if record.component == component_id:
                return record
        return None


def validate_image_result(result: ImageResult, ontology: ComponentOntology) -> None:
    """Check the one-record-per-component invariant against an ontology.

    Raises ValidationError naming the offending component.
    """
    seen: set[str] = set()
    for record in result.records:
        if record.component not in ontology:
            raise ValidationError(
                f"{result.image_id}: record for unknown component {record.component!r}"
            )
        if record.component in seen:
            raise ValidationError(
                f"{result.image_id}: duplicate record for {record.component!r}"
            )
        seen.add(record.component)
        if record.state not in (NA_STATE, UNKNOWN_STATE):
            options = ontology.get(record.component).state_options
            if record.state not in options:
                raise ValidationError(
                    f"{result.image_id}: {record.component!r} has state "
                    f"{record.state!r} outside its options"
                )
    missing = set(ontology.ids()) - seen
    if missing:
        raise ValidationError(
            f"{result.image_id}: missing records for {sorted(missing)}"
        )


# ---------------------------------------------------------------------------
# Document I/O
# ---------------------------------------------------------------------------


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, Any]]:
    """Yield (line_number, parsed_object) for each nonempty line of a JSON
    Lines file. Malformed lines raise RecordsError naming the line.
    """
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordsError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc


def load_ontology(source: str | Path | IO[str]) -> ComponentOntology:
    """Parse and validate an ontology document.

    ``source`` may be a path or an open text stream holding a JSON object of
    the form ``{"version": str, "components": [...]}``.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as handle:
            text = handle.read()
    else:
        text = source.read()
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"ontology document is not valid JSON: {exc.msg}") from exc
    if not isinstance(document, dict) or "components" not in document:
        raise ValidationError('ontology document must be an object with a "components" list')
    entries = document["components"]
    if not isinstance(entries, list):
        raise ValidationError('"components" must be a list')
    components = []
    for index, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ValidationError(f"component entry {index} is not an object")
        try:
            components.append(
                ComponentSpec(
                    id=entry["id"],
                    display_name=entry["display_name"],
                    detector_known=bool(entry["detector_known"]),
                    state_options=tuple(entry.get("state_options", ())),
                    spatial_hint=entry.get("spatial_hint"),
                    feature_hint=entry.get("feature_hint"),
                )
            )
        except KeyError as exc:
            name = entry.get("id", f"entry {index}")
            raise ValidationError(f"component {name!r}: missing field {exc.args[0]!r}") from exc
    return ComponentOntology(
        components=tuple(components), version=str(document.get("version", ""))
    )


def ontology_to_json(ontology: ComponentOntology) -> dict[str, Any]:
    """Serialize an ontology back to its document form (round-trips with
    load_ontology)."""
    components = []
    for spec in ontology.components:
        entry: dict[str, Any] = {
            "id": spec.id,
            "display_name": spec.display_name,
            "detector_known": spec.detector_known,
            "state_options": list(spec.state_options),
        }
        if spec.spatial_hint is not None:
            entry["spatial_hint"] = spec.spatial_hint
        if spec.feature_hint is not None:
            entry["feature_hint"] = spec.feature_hint
        components.append(entry)
    return {"version": ontology.version, "components": components}


def load_manifest(path: str | Path) -> list[ImageRef]:
    """Load a JSON Lines manifest of ``{"image_id", "uri"}`` entries."""
    images: list[ImageRef] = []
    seen: set[str] = set()
    for lineno, entry in iter_jsonl(path):
        if not isinstance(entry, dict) or "image_id" not in entry:
            raise ValidationError(f"{path}: line {lineno}: manifest entry needs image_id")
        image_id = entry["image_id"]
        if image_id in seen:
            raise ValidationError(f"{path}: line {lineno}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        images.append(ImageRef(image_id=image_id, uri=entry.get("uri", "")))
    return images
