"""Concept-library evolution for concept-bottleneck image classification.

The loop alternates between fitting a linear adapter over concept-image
scores and querying a chat model to disambiguate the class pairs the
current library confuses, with each pair's proposal history fed back into
the next query.
"""

from .concepts import (
    Concept,
    ConceptLibrary,
    ConceptOrigin,
    DatasetManifest,
    LabelSet,
    init_concepts,
    merge_concepts,
)
from .adapter import (
    AdapterWeights,
    FitConfig,
    PredictionMatrix,
    accuracy,
    evaluate,
    fit,
    zero_shot_weights,
)
from .config import RunConfig
from .evolution import (
    HistoryBank,
    HistoryRound,
    PairSample,
    build_disambiguation_prompt,
    compute_sample_prob,
    concept_evol,
    record_followup,
    subsample_pairs,
    update_history,
)
from .heuristics import (
    ConfusionReport,
    agglomerative_confusion,
    emd_confusion,
    labeled_confusion,
    pca_corr_confusion,
    pearson_confusion,
    topk_confusion,
)
from .orchestrator import IterationRecord, RunResult, resume, run
from .scoring import ScoreMatrix, incremental_columns, score
from .simworld import SyntheticWorld, generate_world, initial_library, simulated_score

__version__ = "0.1.0"

__all__ = [
    "AdapterWeights", "Concept", "ConceptLibrary", "ConceptOrigin",
    "ConfusionReport", "DatasetManifest", "FitConfig", "HistoryBank",
    "HistoryRound", "IterationRecord", "LabelSet", "PairSample",
    "PredictionMatrix", "RunConfig", "RunResult", "ScoreMatrix",
    "SyntheticWorld", "accuracy", "agglomerative_confusion",
    "build_disambiguation_prompt", "compute_sample_prob", "concept_evol",
    "emd_confusion", "evaluate", "fit", "generate_world", "incremental_columns",
    "init_concepts", "initial_library", "labeled_confusion", "merge_concepts",
    "pca_corr_confusion", "pearson_confusion", "record_followup", "resume",
    "run", "score", "simulated_score", "subsample_pairs", "topk_confusion",
    "update_history", "zero_shot_weights",
]
