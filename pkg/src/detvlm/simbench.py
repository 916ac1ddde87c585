"""Synthetic error-model benchmark for the two-stage architecture.

A world of Bernoulli component trials is generated from an error model and
seed, turned into scripted detector/VLM mocks, and pushed through the real
pipeline and the real scoring harness; nothing is short-circuited. The
headline check compares empirical fused recall against the closed form
r + (1 - r) * s: the detector finds a present component with probability r,
and the VLM recovers a miss with probability s.

Every trial consumes a fixed number of uniform draws from a per-image
substream of the seed, so runs are reproducible and parameter sweeps share
their randomness.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass
from typing import Any

from .core import ComponentOntology, ComponentSpec, ImageRef, ValidationError
from .detector import ScriptedDetector
from .evaluation import (
    GroundTruth,
    MetricsRow,
    TruthEntry,
    binary_metrics,
    confusion_counts,
)
from .pipeline import Backends, PipelineConfig, run_pipeline
from .vlm import RawReply, ScriptedVlm

_WORDS = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet")

AMBIGUOUS_FIRST_REPLY = "It is unclear"


@dataclass(frozen=True)
class ErrorModel:
    """Independent Bernoulli error rates for both stages.

    ``det_recall``: a present component is confirmed by the detector.
    ``det_fp_rate``: an absent component is (wrongly) confirmed.
    ``vlm_sensitivity`` / ``vlm_specificity``: the mock VLM answers
    correctly for present / absent components it is asked about.
    ``vlm_ambiguity``: any first reply is ambiguous, forcing the retry.
    """

    det_recall: float = 0.8
    det_fp_rate: float = 0.0
    vlm_sensitivity: float = 0.8
    vlm_specificity: float = 1.0
    vlm_ambiguity: float = 0.0
    prevalence: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        for name in (
            "det_recall",
            "det_fp_rate",
            "vlm_sensitivity",
            "vlm_specificity",
            "vlm_ambiguity",
            "prevalence",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} {value} outside [0, 1]")


def expected_fused_recall(det_recall: float, vlm_sensitivity: float) -> float:
    """Closed-form recall of the fused pipeline: detector hits plus VLM
    recoveries of detector misses."""
    if not 0.0 <= det_recall <= 1.0 or not 0.0 <= vlm_sensitivity <= 1.0:
        raise ValidationError("arguments must lie in [0, 1]")
    return det_recall + (1.0 - det_recall) * vlm_sensitivity


def simulation_ontology(n_components: int = 5) -> ComponentOntology:
    """Synthetic ontology whose display names and feature hints never
    collide as substrings, so scripted replies can target the plain and the
    refined prompt independently."""
    if not 1 <= n_components <= len(_WORDS):
        raise ValidationError(f"n_components must be in [1, {len(_WORDS)}]")
    return ComponentOntology(
        components=tuple(
            ComponentSpec(
                id=f"part_{word}",
                display_name=f"{word} unit",
                detector_known=True,
                feature_hint=f"{word} unit with ridged housing",
            )
            for word in _WORDS[:n_components]
        ),
        version="simbench",
    )


@dataclass(frozen=True)
class SimWorld:
    """A fully materialized synthetic run: manifest, ground truth, and the
    scripted backend rules that realize the drawn outcomes."""

    images: tuple[ImageRef, ...]
    truth: GroundTruth
    detector_rules: tuple[dict[str, Any], ...]
    vlm_rules: tuple[dict[str, Any], ...]
    present_pairs: frozenset[tuple[str, str]]
    confirmed_pairs: frozenset[tuple[str, str]]


def build_world(
    model: ErrorModel,
    images: int,
    ontology: ComponentOntology,
    tau_high: float = 0.6,
) -> SimWorld:
    """Draw every trial outcome and encode it as mock-backend rules.

    Per (image, component), in ontology order, exactly five uniforms are
    consumed: presence, detector outcome, detector confidence, first-reply
    ambiguity, and the final VLM answer.
    """
    if images < 1:
        raise ValidationError("images must be >= 1")
    refs: list[ImageRef] = []
    truth: GroundTruth = {}
    detector_rules: list[dict[str, Any]] = []
    vlm_rules: list[dict[str, Any]] = []
    present_pairs: set[tuple[str, str]] = set()
    confirmed_pairs: set[tuple[str, str]] = set()
    for index in range(images):
        image_id = f"sim_{index:06d}"
        refs.append(ImageRef(image_id=image_id))
        rng = random.Random(f"{model.seed}:{index}")
        present_map: dict[str, bool] = {}
        for spec in ontology.components:
            u_present, u_det, u_conf, u_amb, u_ans = (rng.random() for _ in range(5))
            present = u_present < model.prevalence
            present_map[spec.id] = present
            if present:
                present_pairs.add((image_id, spec.id))
            proposed = u_det < (model.det_recall if present else model.det_fp_rate)
            if proposed:
                # Map into (tau, 1] so the proposal clears the strict threshold.
                confidence = tau_high + (1.0 - tau_high) * (0.5 + u_conf / 2.0)
                detector_rules.append(
                    {"image_id": image_id, "component": spec.id, "confidence": confidence}
                )
                if confidence > tau_high:
                    confirmed_pairs.add((image_id, spec.id))
            correct = model.vlm_sensitivity if present else model.vlm_specificity
            says_present = (u_ans < correct) if present else (u_ans >= correct)
            final_reply = "Yes" if says_present else "No"
            plain_key = f"Is there a {spec.display_name} in this image"
            if u_amb < model.vlm_ambiguity:
                refined_key = f"Is there a {spec.feature_hint}"
                vlm_rules.append(
                    {"image_id": image_id, "prompt_contains": plain_key, "reply": AMBIGUOUS_FIRST_REPLY}
                )
                vlm_rules.append(
                    {"image_id": image_id, "prompt_contains": refined_key, "reply": final_reply}
                )
            else:
                vlm_rules.append(
                    {"image_id": image_id, "prompt_contains": plain_key, "reply": final_reply}
                )
        truth[image_id] = TruthEntry(image_id=image_id, present=present_map)
    return SimWorld(
        images=tuple(refs),
        truth=truth,
        detector_rules=tuple(detector_rules),
        vlm_rules=tuple(vlm_rules),
        present_pairs=frozenset(present_pairs),
        confirmed_pairs=frozenset(confirmed_pairs),
    )


class _CountingVlm:
    """Wraps the scripted VLM to attribute existence calls to components."""

    def __init__(self, inner: ScriptedVlm, ontology: ComponentOntology,
                 present_pairs: frozenset[tuple[str, str]]) -> None:
        self._inner = inner
        self._displays = [(spec.display_name, spec.id) for spec in ontology.components]
        self._present_pairs = present_pairs
        self._lock = threading.Lock()
        self.existence_calls_total = 0
        self.existence_calls_present = 0

    def ask(self, image: ImageRef, prompt: str, max_side: int = 1024) -> RawReply:
        if not prompt.startswith("What is the state"):
            component = next(
                (cid for display, cid in self._displays if display in prompt), None
            )
            with self._lock:
                self.existence_calls_total += 1
                if component is not None and (image.image_id, component) in self._present_pairs:
                    self.existence_calls_present += 1
        return self._inner.ask(image, prompt, max_side)


@dataclass(frozen=True)
class SimulationOutcome:
    per_component: tuple[tuple[str, MetricsRow], ...]
    fused_recall: float
    detector_recall: float
    expected_recall: float
    images: int
    trials: int
    existence_calls_total: int
    existence_calls_present: int


def run_simulation(
    model: ErrorModel,
    images: int,
    ontology: ComponentOntology | None = None,
    config: PipelineConfig | None = None,
) -> SimulationOutcome:
    """Generate a world, run the genuine pipeline over it, and score the
    records with the genuine harness. Deterministic given the model seed."""
    ontology = ontology or simulation_ontology()
    config = config or PipelineConfig()
    world = build_world(model, images, ontology, tau_high=config.tau_high)
    vlm = _CountingVlm(ScriptedVlm(world.vlm_rules), ontology, world.present_pairs)
    backends = Backends(detector=ScriptedDetector(world.detector_rules), vlm=vlm)
    results = list(run_pipeline(world.images, ontology, backends, config))

    rows: list[tuple[str, MetricsRow]] = []
    pooled_tp = pooled_fn = 0
    for spec in ontology.components:
        matrix = confusion_counts(results, world.truth, spec.id)
        rows.append((spec.id, binary_metrics(matrix)))
        pooled_tp += matrix.tp
        pooled_fn += matrix.fn
    present_total = len(world.present_pairs)
    fused_recall = pooled_tp / (pooled_tp + pooled_fn) if pooled_tp + pooled_fn else 0.0
    detector_hits = len(world.confirmed_pairs & world.present_pairs)
    detector_recall = detector_hits / present_total if present_total else 0.0
    return SimulationOutcome(
        per_component=tuple(rows),
        fused_recall=fused_recall,
        detector_recall=detector_recall,
        expected_recall=expected_fused_recall(model.det_recall, model.vlm_sensitivity),
        images=images,
        trials=images * len(ontology),
        existence_calls_total=vlm.existence_calls_total,
        existence_calls_present=vlm.existence_calls_present,
    )
