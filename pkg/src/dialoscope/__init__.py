"""Dialogue satisfaction evaluation with LLM judges.

Rate task-oriented dialogues on a 1-5 satisfaction scale through a
pluggable completion backend, either by reading candidate-token
log-probabilities at the score position or by parsing generated text,
with optional in-context examples retrieved by BM25, embedding cosine,
or random draw; report the full table of classification and correlation
metrics.
"""

from .backend import (
    CachedBackend,
    CacheKey,
    CompletionBackend,
    CompletionRequest,
    CompletionResponse,
    HttpBackend,
    ReplayBackend,
    ResponseCache,
    TokenCandidates,
)
from .corpus import (
    BinaryLabel,
    DatasetSplit,
    Dialogue,
    Speaker,
    Turn,
    binarize,
    defect_rate,
    load_dataset,
    save_dataset,
    serialize_dialogue,
    split_dataset,
)
from .exceptions import (
    BackendError,
    CapabilityError,
    ConfigError,
    DataError,
    DialoscopeError,
    ProtocolError,
    TransportError,
    UndefinedCorrelationError,
)
from .harness import (
    AggregateReport,
    ExperimentConfig,
    RunArtifact,
    aggregate_random_runs,
    emit_report,
    load_artifact,
    run_all_seeds,
    run_experiment,
)
from .metrics import (
    ClassMetrics,
    ConfusionCounts,
    MetricsReport,
    build_report,
    class_metrics,
    confusion,
    f1_micro,
    pearson,
    spearman,
)
from .prompting import (
    AssembledPrompt,
    InContextExample,
    fit_to_budget,
    render_few_shot,
    render_zero_shot,
)
from .retrieval import (
    Bm25Index,
    SelectionResult,
    bm25_score,
    build_bm25_index,
    cosine_similarity,
    load_embeddings,
    select_bm25,
    select_embedding,
    select_random,
    tokenize,
)
from .scoring import (
    RatingDistribution,
    RatingVocabulary,
    ScoredDialogue,
    compute_weights,
    extract_rating_distribution,
    parse_generated_rating,
    round_to_likert,
    score_generation,
    score_logits,
    weighted_rating,
)

__version__ = "0.1.0"
