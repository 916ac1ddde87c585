"""Prompt rendering for the VLM stage.

Two prompt families exist: existence checks ("Answer only Yes or No.") and
forced-choice state questions. A prompt can be refined exactly once with a
component's spatial or feature hint after an ambiguous first reply.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

from .core import ComponentSpec, ValidationError

EXISTENCE_TEMPLATE = "Is there a {display_name} in this image? Answer only Yes or No."
STATE_TEMPLATE = "What is the state of the {display_name}? Choose from {options}."

SPATIAL_PREFIX = "Focus on the {spatial_hint} of the image. "
FEATURE_TEMPLATE = "Look carefully. Is there a {feature_hint}? Answer only Yes or No."


class PromptKind(Enum):
    EXISTENCE = "existence"
    STATE = "state"


class HintKind(Enum):
    NONE = "none"
    SPATIAL = "spatial"
    FEATURE = "feature"


@dataclass(frozen=True)
class PromptInstance:
    """A rendered prompt plus its refinement provenance.

    ``optimized`` records that the one allowed refinement round was applied;
    ``hint_used`` says which hint (if any) drove it.
    """

    kind: PromptKind
    component: str
    text: str
    optimized: bool = False
    hint_used: HintKind = HintKind.NONE


@dataclass(frozen=True)
class PromptTemplates:
    """Operator-overridable templates; placeholders are {display_name} and,
    for the state template, {options}."""

    existence: str = EXISTENCE_TEMPLATE
    state: str = STATE_TEMPLATE


def load_templates(path: str | Path) -> PromptTemplates:
    """Read a template-override file: a JSON map of kind -> template."""
    with open(path, "r", encoding="utf-8") as handle:
        try:
            overrides = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: template file is not valid JSON: {exc.msg}") from exc
    if not isinstance(overrides, dict):
        raise ValidationError(f"{path}: template file must be a JSON object")
    unknown = set(overrides) - {"existence", "state"}
    if unknown:
        raise ValidationError(f"{path}: unknown template kinds {sorted(unknown)}")
    return PromptTemplates(
        existence=overrides.get("existence", EXISTENCE_TEMPLATE),
        state=overrides.get("state", STATE_TEMPLATE),
    )


def existence_prompt(
    component: ComponentSpec, templates: PromptTemplates = PromptTemplates()
) -> PromptInstance:
    """Render the yes/no existence question for a component."""
    return PromptInstance(
        kind=PromptKind.EXISTENCE,
        component=component.id,
        text=templates.existence.format(display_name=component.display_name),
    )


def state_prompt(
    component: ComponentSpec, templates: PromptTemplates = PromptTemplates()
) -> PromptInstance:
    """Render the forced-choice state question; requires state options."""
    if not component.state_options:
        raise ValueError(f"component {component.id!r} has no state options")
    return PromptInstance(
        kind=PromptKind.STATE,
        component=component.id,
        text=templates.state.format(
            display_name=component.display_name,
            options=", ".join(component.state_options),
        ),
    )


def optimize_prompt(original: PromptInstance, component: ComponentSpec) -> PromptInstance:
    """Apply the single refinement round to a prompt.

    Spatial hints take priority: they prepend a locative cue and keep the
    original question. Feature hints rewrite the question around the
    component's defining visual features. Without hints the text is kept
    and the instance is only marked as refined.
    """
    if original.optimized:
        raise ValueError(f"prompt for {original.component!r} was already refined")
    if component.spatial_hint is not None:
        return replace(
            original,
            text=SPATIAL_PREFIX.format(spatial_hint=component.spatial_hint) + original.text,
            optimized=True,
            hint_used=HintKind.SPATIAL,
        )
    if component.feature_hint is not None:
        return replace(
            original,
            text=FEATURE_TEMPLATE.format(feature_hint=component.feature_hint),
            optimized=True,
            hint_used=HintKind.FEATURE,
        )
    return replace(original, optimized=True, hint_used=HintKind.NONE)
