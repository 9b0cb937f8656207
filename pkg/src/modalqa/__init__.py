"""Multi-agent multimodal question answering over text, tables and images.

Three agent roles run per instance: one expert per available modality distils
evidence, one synthesizer per modality answers from that evidence plus the raw
remaining inputs, and an aggregator reconciles the candidate answers.
"""

from .backends import (
    Backend,
    CachingBackend,
    ChatMessage,
    GenParams,
    HttpBackend,
    ResponseCache,
    ScriptedBackend,
    prompt_hash,
)
from .baselines import BaselineConfig, ToTConfig, run_capcot, run_cot, run_tot
from .core import (
    DecisionRule,
    ImageRef,
    Modality,
    QAInstance,
    RunTrace,
    TableData,
    available_modalities,
    linearize_table,
    load_instances,
    load_traces,
)
from .evaluation import ScoreReport, exact_match, normalize_answer, render_report, score_run
from .pipeline import PipelineConfig, run_batch, run_pipeline
from .robustness import PerturbKind, PerturbSpec, perturb_dataset

__version__ = "0.1.0"

__all__ = [
    "Backend", "BaselineConfig", "CachingBackend", "ChatMessage", "DecisionRule", "GenParams",
    "HttpBackend", "ImageRef", "Modality", "PerturbKind", "PerturbSpec", "PipelineConfig",
    "QAInstance", "ResponseCache", "RunTrace", "ScoreReport", "ScriptedBackend", "TableData",
    "ToTConfig", "available_modalities", "exact_match", "linearize_table", "load_instances",
    "load_traces", "normalize_answer", "perturb_dataset", "prompt_hash", "render_report",
    "run_batch", "run_capcot", "run_cot", "run_pipeline", "run_tot", "score_run",
]
