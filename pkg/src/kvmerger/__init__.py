"""KV-cache compression laboratory.

Similarity-constrained merging of cached attention states, eviction
baselines at matched memory budgets, and an output-perturbation harness,
all over a portable binary trace format.
"""

from .attention import AttnOutput, aggregated_scores, attention, gqa_aggregate, prepare_head
from .baselines import EvictionResult, h2o_evict, recent_only_evict
from .errors import (
    ConfigError,
    InvariantViolation,
    KVMergerError,
    TraceCorruptionError,
    TraceDataError,
    TraceFormatError,
    UndefinedSimilarityError,
)
from .identify import (
    MergePartition,
    identify_merge_sets,
    oracle_optimal_partition,
    partition_objective,
    select_protected,
)
from .merge import (
    MergeWeights,
    average_merge_set,
    compress_head,
    gaussian_weights,
    merge_set,
    resolve_sigma,
    select_pivot,
)
from .metrics import CompressionReport, compare_policies, compress_trace, output_perturbation
from .model import (
    FixedPointSigma,
    FixedSigma,
    HeadCache,
    MergeConfig,
    Trace,
    synth_trace,
)
from .rope import (
    RopeParams,
    apply_rope,
    apply_rope_matrix,
    predicted_postrope_similarity,
    subpair_similarity,
    verify_lemma32,
)
from .similarity import (
    SimilarityProfile,
    cosine_similarity,
    layer_compression_profile,
    similarity_profile,
)
from .traceio import load_trace, save_trace

__version__ = "0.1.0"
