"""Per-image orchestration: detect, stratify, verify the missed components
through the VLM (with one refinement retry on ambiguity), query states for
everything confirmed to exist, and fuse the two stages into records.

Images in a batch are independent and run on a bounded worker pool; within
one image the steps are sequential because stage two depends on stage one.
Result emission preserves manifest order regardless of completion order.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Mapping

from .core import (
    NA_STATE,
    UNKNOWN_STATE,
    BackendError,
    ComponentOntology,
    ComponentSpec,
    ImageReadError,
    ImageRef,
    ImageResult,
    PipelineError,
    QuotaExceededError,
    RetrievalRecord,
    Source,
    ValidationError,
)
from .detector import DetectorBackend, Stratification, best_per_component, stratify
from .prompts import PromptInstance, PromptTemplates, existence_prompt, optimize_prompt, state_prompt
from .vlm import ExistenceVerdict, VlmBackend, classify_existence, classify_state


@dataclass(frozen=True)
class PipelineConfig:
    """Run-wide knobs.

    The three VLM confidence constants are calibration values for records
    whose existence was decided by the VLM: full confidence for a direct
    verdict, discounted after a refinement retry, and a floor for
    components that stayed ambiguous.
    """

    tau_high: float = 0.6
    vlm_conf_direct: float = 0.90
    vlm_conf_after_retry: float = 0.75
    vlm_conf_unresolved: float = 0.50
    max_side: int = 1024
    worker_count: int = 4

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_high <= 1.0:
            raise ValidationError(f"tau_high {self.tau_high} outside [0, 1]")
        ordered = (
            0.0
            <= self.vlm_conf_unresolved
            <= self.vlm_conf_after_retry
            <= self.vlm_conf_direct
            <= 1.0
        )
        if not ordered:
            raise ValidationError(
                "VLM confidences must satisfy 0 <= unresolved <= after_retry <= direct <= 1"
            )
        if self.max_side < 1:
            raise ValidationError("max_side must be positive")
        if self.worker_count < 1:
            raise ValidationError("worker_count must be positive")

    @classmethod
    def from_path(cls, path: str | Path) -> "PipelineConfig":
        """Load a flat JSON object mirroring the config fields."""
        with open(path, "r", encoding="utf-8") as handle:
            try:
                raw = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: config is not valid JSON: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**raw)


@dataclass(frozen=True)
class Backends:
    detector: DetectorBackend
    vlm: VlmBackend


@dataclass(frozen=True)
class VerificationOutcome:
    """Result of the existence check for one verification candidate."""

    component: str
    verdict: ExistenceVerdict
    retries_used: int
    prompts: tuple[PromptInstance, ...]


@dataclass(frozen=True)
class StateAnswer:
    component: str
    state: str
    raw_reply: str = ""


class RunLog:
    """Thread-safe JSON Lines audit log of every backend call."""

    def __init__(self, stream: IO[str]) -> None:
        self._stream = stream
        self._lock = threading.Lock()

    def write(self, entry: Mapping[str, Any]) -> None:
        line = json.dumps(dict(entry), ensure_ascii=False, separators=(",", ":"))
        with self._lock:
            self._stream.write(line + "\n")
            self._stream.flush()


def _log(log: RunLog | None, **entry: Any) -> None:
    if log is not None:
        log.write(entry)


def _asked(
    backends: Backends,
    image: ImageRef,
    prompt: PromptInstance,
    kind: str,
    config: PipelineConfig,
    log: RunLog | None,
) -> str:
    started = time.monotonic()
    reply = backends.vlm.ask(image, prompt.text, config.max_side)
    _log(
        log,
        image_id=image.image_id,
        kind=kind,
        prompt=prompt.text,
        reply=reply.text,
        duration_ms=int((time.monotonic() - started) * 1000),
    )
    return reply.text


def verify_component(
    image: ImageRef,
    component: ComponentSpec,
    backends: Backends,
    config: PipelineConfig,
    log: RunLog | None = None,
    templates: PromptTemplates = PromptTemplates(),
) -> VerificationOutcome:
    """Ask the VLM whether a missed component exists.

    An ambiguous first reply triggers exactly one prompt refinement and
    re-ask; the second verdict is final either way, so a component costs at
    most two existence calls.
    """
    first = existence_prompt(component, templates)
    verdict = classify_existence(_asked(backends, image, first, "existence", config, log))
    if verdict is not ExistenceVerdict.AMBIGUOUS:
        return VerificationOutcome(
            component=component.id, verdict=verdict, retries_used=0, prompts=(first,)
        )
    refined = optimize_prompt(first, component)
    verdict = classify_existence(_asked(backends, image, refined, "existence", config, log))
    return VerificationOutcome(
        component=component.id, verdict=verdict, retries_used=1, prompts=(first, refined)
    )


def state_of(
    image: ImageRef,
    component: ComponentSpec,
    backends: Backends,
    config: PipelineConfig,
    log: RunLog | None = None,
    templates: PromptTemplates = PromptTemplates(),
) -> StateAnswer:
    """Query the state of a component already confirmed to exist.

    One prompt, no retry: an unmatched or failed reply resolves to
    "unknown" so the record stays well-formed.
    """
    prompt = state_prompt(component, templates)
    try:
        reply = _asked(backends, image, prompt, "state", config, log)
    except QuotaExceededError:
        raise
    except (BackendError, ImageReadError) as exc:
        _log(log, image_id=image.image_id, kind="error", component=component.id, error=str(exc))
        return StateAnswer(component=component.id, state=UNKNOWN_STATE)
    label = classify_state(reply, component.state_options)
    return StateAnswer(
        component=component.id,
        state=label if label is not None else UNKNOWN_STATE,
        raw_reply=reply,
    )


def _vlm_confidence(outcome: VerificationOutcome, config: PipelineConfig) -> float:
    if outcome.verdict is ExistenceVerdict.AMBIGUOUS:
        return config.vlm_conf_unresolved
    return config.vlm_conf_after_retry if outcome.retries_used else config.vlm_conf_direct


def fuse(
    strat: Stratification,
    outcomes: Iterable[VerificationOutcome],
    states: Mapping[str, str],
    ontology: ComponentOntology,
    config: PipelineConfig,
    failed: Iterable[str] = (),
) -> list[RetrievalRecord]:
    """Combine both stages into one record per ontology component.

    Authority follows the deciding stage: confirmed hits keep the detector's
    confidence, verification candidates take the VLM verdict with the
    configured confidence scheme. Persistent ambiguity conservatively maps
    to non-existence at the unresolved confidence floor. ``failed`` lists
    candidates whose VLM calls errored out; they become zero-confidence
    absent records.
    """
    failed_set = set(failed)
    by_component = {outcome.component: outcome for outcome in outcomes}
    covered = set(by_component) | failed_set
    if covered != set(strat.verify):
        raise PipelineError(
            f"verification outcomes cover {sorted(covered)} but stratification "
            f"requires {sorted(strat.verify)}"
        )
    state_owed = set()
    records: list[RetrievalRecord] = []
    for spec in ontology.components:
        cid = spec.id
        if cid in strat.confirmed:
            exists, confidence, source, retries = 1, strat.confirmed[cid], Source.DETECTOR, 0
        elif cid in failed_set:
            exists, confidence, source, retries = 0, 0.0, Source.VLM, 0
        else:
            outcome = by_component[cid]
            confidence = _vlm_confidence(outcome, config)
            exists = 1 if outcome.verdict is ExistenceVerdict.YES else 0
            source, retries = Source.VLM, outcome.retries_used
        state = NA_STATE
        if exists == 1 and spec.state_options:
            state_owed.add(cid)
            if cid not in states:
                raise PipelineError(f"missing state answer for existing component {cid!r}")
            state = states[cid]
        records.append(
            RetrievalRecord(
                component=cid,
                exists=exists,
                state=state,
                confidence=confidence,
                source=source,
                retries_used=retries,
            )
        )
    extra = set(states) - state_owed
    if extra:
        raise PipelineError(f"state answers for non-existing components {sorted(extra)}")
    return records


def _all_failed_result(image: ImageRef, ontology: ComponentOntology) -> ImageResult:
    records = tuple(
        RetrievalRecord(component=spec.id, exists=0, state=NA_STATE, confidence=0.0)
        for spec in ontology.components
    )
    return ImageResult(image_id=image.image_id, records=records)


def process_image(
    image: ImageRef,
    ontology: ComponentOntology,
    backends: Backends,
    config: PipelineConfig = PipelineConfig(),
    log: RunLog | None = None,
    templates: PromptTemplates = PromptTemplates(),
) -> ImageResult:
    """Run the full two-stage flow for one image.

    A detector failure fails the whole image (every record zeroed); a VLM
    failure on one component fails only that component's record. Quota
    exhaustion is never swallowed.
    """
    try:
        started = time.monotonic()
        proposals = backends.detector.detect(image)
        _log(
            log,
            image_id=image.image_id,
            kind="detect",
            duration_ms=int((time.monotonic() - started) * 1000),
        )
    except QuotaExceededError:
        raise
    except (BackendError, ImageReadError) as exc:
        _log(log, image_id=image.image_id, kind="error", error=str(exc))
        return _all_failed_result(image, ontology)

    strat = stratify(best_per_component(proposals), ontology, config.tau_high)

    outcomes: list[VerificationOutcome] = []
    failed: set[str] = set()
    existing: set[str] = set(strat.confirmed)
    for spec in ontology.components:
        if spec.id not in strat.verify:
            continue
        try:
            outcome = verify_component(image, spec, backends, config, log, templates)
        except QuotaExceededError:
            raise
        except (BackendError, ImageReadError) as exc:
            _log(log, image_id=image.image_id, kind="error", component=spec.id, error=str(exc))
            failed.add(spec.id)
            continue
        outcomes.append(outcome)
        if outcome.verdict is ExistenceVerdict.YES:
            existing.add(spec.id)

    states: dict[str, str] = {}
    for spec in ontology.components:
        if spec.id in existing and spec.state_options:
            states[spec.id] = state_of(image, spec, backends, config, log, templates).state

    records = fuse(strat, outcomes, states, ontology, config, failed=failed)
    return ImageResult(image_id=image.image_id, records=tuple(records))


def run_pipeline(
    images: Iterable[ImageRef],
    ontology: ComponentOntology,
    backends: Backends,
    config: PipelineConfig = PipelineConfig(),
    log: RunLog | None = None,
    templates: PromptTemplates = PromptTemplates(),
) -> Iterator[ImageResult]:
    """Process a batch on ``config.worker_count`` workers, yielding results
    in input order."""
    image_list = list(images)
    if config.worker_count == 1:
        for image in image_list:
            yield process_image(image, ontology, backends, config, log, templates)
        return
    with ThreadPoolExecutor(max_workers=config.worker_count) as pool:
        yield from pool.map(
            lambda image: process_image(image, ontology, backends, config, log, templates),
            image_list,
        )
