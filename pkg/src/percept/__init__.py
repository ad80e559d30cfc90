"""Training-free personal concept recognition.

Enroll user-specific concepts (reference image + name + category) into a
multimodal fingerprint database, then identify which concept a query image
shows via fused embedding retrieval, attribute-focused reasoning, cross-modal
verification, and gated pairwise matching.
"""

from .db import (
    ConceptDatabase,
    ConceptRecord,
    DatabaseManifest,
    Embedding,
    ReferenceImage,
)
from .encoders import (
    EncoderBackendConfig,
    MockEncoder,
    RemoteEncoder,
    build_encoder,
    mock_image_bytes,
)
from .enrollment import enroll_concept, enroll_with_privileged_attributes
from .evalkit import (
    RecognitionStats,
    SplitSpec,
    build_split,
    hard_recall,
    recognition_metrics,
    run_eval,
    vqa_accuracy,
)
from .inference import (
    Gateways,
    InferenceTrace,
    PersonalizedAnswer,
    PipelineConfig,
    QueryTask,
    answer_query,
    attribute_verify,
    cot_select,
    infer_concept,
    pairwise_refine,
)
from .protocol import (
    CotVerdict,
    EnrollmentReply,
    PairwiseReply,
    parse_cot,
    parse_enrollment,
    parse_pairwise,
    render_cot_prompt,
    render_enrollment_prompt,
    render_pairwise_prompt,
)
from .retrieval import (
    FUSED,
    IMAGE_ONLY,
    TEXT_ONLY,
    CandidateSet,
    RetrievalMode,
    cosine,
    fuse,
    hit_at_k,
    retrieve,
)
from .vlm import (
    ChatRequest,
    ChatResponse,
    RemoteVlm,
    ScriptedTurn,
    ScriptedVlm,
    VlmBackendConfig,
    build_vlm,
)

__version__ = "0.1.0"

__all__ = [
    "ConceptDatabase",
    "ConceptRecord",
    "DatabaseManifest",
    "Embedding",
    "ReferenceImage",
    "EncoderBackendConfig",
    "MockEncoder",
    "RemoteEncoder",
    "build_encoder",
    "mock_image_bytes",
    "enroll_concept",
    "enroll_with_privileged_attributes",
    "RecognitionStats",
    "SplitSpec",
    "build_split",
    "hard_recall",
    "recognition_metrics",
    "run_eval",
    "vqa_accuracy",
    "Gateways",
    "InferenceTrace",
    "PersonalizedAnswer",
    "PipelineConfig",
    "QueryTask",
    "answer_query",
    "attribute_verify",
    "cot_select",
    "infer_concept",
    "pairwise_refine",
    "CotVerdict",
    "EnrollmentReply",
    "PairwiseReply",
    "parse_cot",
    "parse_enrollment",
    "parse_pairwise",
    "render_cot_prompt",
    "render_enrollment_prompt",
    "render_pairwise_prompt",
    "FUSED",
    "IMAGE_ONLY",
    "TEXT_ONLY",
    "CandidateSet",
    "RetrievalMode",
    "cosine",
    "fuse",
    "hit_at_k",
    "retrieve",
    "ChatRequest",
    "ChatResponse",
    "RemoteVlm",
    "ScriptedTurn",
    "ScriptedVlm",
    "VlmBackendConfig",
    "build_vlm",
]
