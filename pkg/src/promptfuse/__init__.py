"""Few-shot multimodal prompt orchestration.

Pipeline pieces: distribution-consistent few-shot sampling, unified
multimodal cloze prompts with retrieved demonstrations, verbalizer
classification, and probabilistic fusion of per-prompt posteriors, all
scored through a pluggable backend (deterministic stub or remote HTTP
service).
"""

from .backend import (
    Backend,
    HttpBackend,
    StubBackend,
    check_backend_conformance,
    resolve_backend,
)
from .data import (
    BUILTIN_LABEL_SPACES,
    DatasetManifest,
    Instance,
    LabelSpace,
    class_histogram,
    joint_histogram,
    load_manifest,
    write_manifest,
)
from .errors import (
    BackendError,
    ConfigError,
    DataError,
    ParseError,
    PromptfuseError,
    ValidationError,
)
from .experiment import ExperimentConfig, load_config_file, run_experiment
from .fusion import (
    LabelDistribution,
    PriorEstimate,
    average_fuse,
    distribution_from_scores,
    empirical_prior,
    fuse,
    pinned_prior,
    predict,
    uniform_prior,
)
from .metrics import AggregateReport, RunResult, accuracy, aggregate, weighted_f1
from .retrieval import compose_embedding_input, cosine, select_demonstrations
from .sampling import (
    AllocationPlan,
    FewShotSplit,
    allocate_counts,
    allocate_counts_joint,
    draw_split,
)
from .templates import (
    AssembledPrompt,
    PromptTemplate,
    RenderedPrompt,
    assemble,
    builtin_templates,
    render_demonstration,
    render_query,
    truncate_assembled,
)

__version__ = "0.1.0"
