"""Shared test machinery: ontology factories, a recording VLM proxy, random
small-instance generation, and a straight-line reference interpreter used
as the oracle for the orchestrated pipeline."""

from __future__ import annotations

import random
from typing import Any

from detvlm.core import (
    NA_STATE,
    UNKNOWN_STATE,
    ComponentOntology,
    ComponentSpec,
    ImageRef,
    ImageResult,
    RetrievalRecord,
    Source,
)
from detvlm.pipeline import PipelineConfig
from detvlm.prompts import existence_prompt, optimize_prompt, state_prompt
from detvlm.vlm import ExistenceVerdict, classify_existence, classify_state


def spec(
    component_id: str,
    display: str | None = None,
    detector_known: bool = True,
    state_options: tuple[str, ...] = (),
    spatial_hint: str | None = None,
    feature_hint: str | None = None,
) -> ComponentSpec:
    return ComponentSpec(
        id=component_id,
        display_name=display or component_id.replace("_", " "),
        detector_known=detector_known,
        state_options=state_options,
        spatial_hint=spatial_hint,
        feature_hint=feature_hint,
    )


def ontology(*specs: ComponentSpec, version: str = "test") -> ComponentOntology:
    return ComponentOntology(components=tuple(specs), version=version)


def vehicle_ontology() -> ComponentOntology:
    """Small three-component ontology plus one zero-shot attribute."""
    return ontology(
        spec("chepai", "License plate"),
        spec("sun_visor", "sun visor", state_options=("raised", "lowered"),
             spatial_hint="top-left corner"),
        spec("chebiao", "vehicle emblem"),
        spec("mask", "driver wearing a mask", detector_known=False),
    )


class RecordingVlm:
    """Pass-through wrapper that keeps every (image_id, prompt) asked."""

    def __init__(self, inner: Any) -> None:
        self.inner = inner
        self.calls: list[tuple[str, str]] = []

    def ask(self, image: ImageRef, prompt: str, max_side: int = 1024):
        self.calls.append((image.image_id, prompt))
        return self.inner.ask(image, prompt, max_side)

    def existence_calls(self) -> list[tuple[str, str]]:
        return [c for c in self.calls if not c[1].startswith("What is the state")]


# ---------------------------------------------------------------------------
# Random small instances
# ---------------------------------------------------------------------------

_DISPLAYS = ("alpha panel", "bravo grille", "charlie latch", "delta lamp", "echo vent")
_OPTION_SETS = ((), ("open", "closed"), ("raised", "lowered"), ("occluded", "clear", "partial"))
_EXISTENCE_REPLIES = (
    "Yes", "yes, clearly", "Yes.", "No", "no.", "No, nothing there",
    "It is unclear", "I cannot tell", "hard to say", "maybe", "",
)


def random_instance(rng: random.Random) -> tuple[ComponentOntology, ImageRef, list, list, PipelineConfig]:
    """One randomized scenario: ontology (up to 5 components), scripted
    detector and VLM rules for a single image, and a random threshold."""
    n = rng.randint(1, 5)
    specs = []
    for i in range(n):
        display = _DISPLAYS[i]
        hint_kind = rng.choice(("none", "spatial", "feature"))
        specs.append(
            ComponentSpec(
                id=f"c{i}",
                display_name=display,
                detector_known=rng.random() < 0.8,
                state_options=rng.choice(_OPTION_SETS),
                spatial_hint=f"upper {display} region" if hint_kind == "spatial" else None,
                feature_hint=f"{display} with checkered trim" if hint_kind == "feature" else None,
            )
        )
    onto = ComponentOntology(components=tuple(specs), version="random")
    image = ImageRef(image_id=f"img_{rng.randrange(10**9)}")
    config = PipelineConfig(tau_high=round(rng.random(), 3), worker_count=1)

    detector_rules = []
    for s in specs:
        if not s.detector_known:
            continue
        for _ in range(rng.randint(0, 2)):
            detector_rules.append(
                {"image_id": image.image_id, "component": s.id,
                 "confidence": round(rng.random(), 3)}
            )

    vlm_rules = []
    for s in specs:
        plain_key = f"Is there a {s.display_name} in this image"
        # Refined-prompt rules go first: the spatially refined text still
        # contains the plain question, so order decides the match.
        if s.spatial_hint is not None:
            refined_key = f"Focus on the {s.spatial_hint} of the image. Is there a {s.display_name}"
            vlm_rules.append(
                {"image_id": image.image_id, "prompt_contains": refined_key,
                 "reply": rng.choice(_EXISTENCE_REPLIES)}
            )
        elif s.feature_hint is not None:
            refined_key = f"Is there a {s.feature_hint}"
            vlm_rules.append(
                {"image_id": image.image_id, "prompt_contains": refined_key,
                 "reply": rng.choice(_EXISTENCE_REPLIES)}
            )
        vlm_rules.append(
            {"image_id": image.image_id, "prompt_contains": plain_key,
             "reply": rng.choice(_EXISTENCE_REPLIES)}
        )
        if s.state_options and rng.random() < 0.8:
            state_replies = [
                rng.choice(s.state_options),
                f"The {s.display_name} is {rng.choice(s.state_options)}.",
                "hard to say",
            ]
            vlm_rules.append(
                {"image_id": image.image_id,
                 "prompt_contains": f"What is the state of the {s.display_name}",
                 "reply": rng.choice(state_replies)}
            )
    return onto, image, detector_rules, vlm_rules, config


# ---------------------------------------------------------------------------
# Straight-line reference interpreter
# ---------------------------------------------------------------------------


def reference_image_result(
    image: ImageRef,
    onto: ComponentOntology,
    detector: Any,
    vlm: Any,
    config: PipelineConfig,
) -> tuple[ImageResult, int]:
    """Literal single-pass re-derivation of one image's records.

    Returns the expected result plus the number of VLM existence calls the
    flow must have made (verification candidates plus ambiguous retries).
    """
    proposals = detector.detect(image)
    existence_calls = 0
    records = []
    for s in onto.components:
        confidences = [p.confidence for p in proposals if p.component == s.id]
        best = max(confidences) if confidences else None
        if best is not None and best > config.tau_high:
            exists, confidence, source, retries = 1, best, Source.DETECTOR, 0
        else:
            source = Source.VLM
            first = existence_prompt(s)
            existence_calls += 1
            verdict = classify_existence(vlm.ask(image, first.text, config.max_side).text)
            retries = 0
            if verdict is ExistenceVerdict.AMBIGUOUS:
                refined = optimize_prompt(first, s)
                existence_calls += 1
                verdict = classify_existence(vlm.ask(image, refined.text, config.max_side).text)
                retries = 1
            if verdict is ExistenceVerdict.AMBIGUOUS:
                exists, confidence = 0, config.vlm_conf_unresolved
            else:
                exists = 1 if verdict is ExistenceVerdict.YES else 0
                confidence = (
                    config.vlm_conf_after_retry if retries else config.vlm_conf_direct
                )
        state = NA_STATE
        if exists == 1 and s.state_options:
            reply = vlm.ask(image, state_prompt(s).text, config.max_side).text
            label = classify_state(reply, s.state_options)
            state = label if label is not None else UNKNOWN_STATE
        records.append(
            RetrievalRecord(
                component=s.id,
                exists=exists,
                state=state,
                confidence=confidence,
                source=source,
                retries_used=retries,
            )
        )
    return ImageResult(image_id=image.image_id, records=tuple(records)), existence_calls
