"""Schema-constrained staged supervision and dense-scene benchmark tooling."""

from .schema import (
    DatasetSample,
    FieldSpanTable,
    Flag,
    QType,
    QuestionRecord,
    Source,
    Stage,
    StagedStep,
    StructuredAnnotation,
    Triplet,
    parse_annotation,
    render_target,
    validate_consistency,
)
from .spanmask import (
    LogProbTrace,
    MaskArtifact,
    RenderedTarget,
    Tokenization,
    compute_mask,
    emit_artifacts,
    masked_nll,
)
from .curriculum import MixConfig, PhasePlan, PhaseSpec, ablation_plan, default_plan, mix_sampler
from .metrics import EvalReport, Prediction, aggregate, scene_graph_f1, score_choice
from .provider import ChatRequest, ProviderHandle, Role, complete, mock_provider

__version__ = "0.1.0"

__all__ = [
    "ChatRequest",
    "DatasetSample",
    "EvalReport",
    "FieldSpanTable",
    "Flag",
    "LogProbTrace",
    "MaskArtifact",
    "MixConfig",
    "PhasePlan",
    "PhaseSpec",
    "Prediction",
    "ProviderHandle",
    "QType",
    "QuestionRecord",
    "RenderedTarget",
    "Role",
    "Source",
    "Stage",
    "StagedStep",
    "StructuredAnnotation",
    "Tokenization",
    "Triplet",
    "ablation_plan",
    "aggregate",
    "complete",
    "compute_mask",
    "default_plan",
    "emit_artifacts",
    "masked_nll",
    "mock_provider",
    "parse_annotation",
    "render_target",
    "scene_graph_f1",
    "score_choice",
    "validate_consistency",
]
