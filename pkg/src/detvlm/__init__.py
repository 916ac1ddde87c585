"""Two-stage fine-grained image retrieval: a detector screens components by
confidence, a VLM verifies the misses and answers state questions, and the
fused per-image records feed a query engine and scoring harness."""

from .core import (
    NA_STATE,
    UNKNOWN_STATE,
    BackendError,
    ComponentOntology,
    ComponentSpec,
    DetVLMError,
    ImageReadError,
    ImageRef,
    ImageResult,
    PipelineError,
    QuotaExceededError,
    RecordsError,
    RetrievalRecord,
    Source,
    ValidationError,
    load_manifest,
    load_ontology,
    ontology_to_json,
    validate_image_result,
)
from .detector import (
    DetectionProposal,
    RemoteDetector,
    ScriptedDetector,
    Stratification,
    best_per_component,
    stratify,
)
from .evaluation import (
    ConfusionMatrix,
    MetricsRow,
    StateTask,
    binary_metrics,
    confusion_counts,
    load_ground_truth,
    macro_average,
    report,
)
from .pipeline import (
    Backends,
    PipelineConfig,
    RunLog,
    StateAnswer,
    VerificationOutcome,
    fuse,
    process_image,
    run_pipeline,
    state_of,
    verify_component,
)
from .prompts import (
    HintKind,
    PromptInstance,
    PromptKind,
    PromptTemplates,
    existence_prompt,
    optimize_prompt,
    state_prompt,
)
from .query import QuerySpec, QuerySyntaxError, evaluate_query, parse_query, validate_query
from .simbench import ErrorModel, SimulationOutcome, expected_fused_recall, run_simulation
from .store import LoadedRecords, append_results, load_results
from .vlm import (
    ExistenceVerdict,
    RawReply,
    RemoteVlm,
    ScriptedVlm,
    classify_existence,
    classify_state,
)

__version__ = "0.1.0"
