"""Evolving cross-domain spatiotemporal learner.

Sample groups from related domains are reordered easy-to-hard by probe
gradients, absorbed one by one into a shared elastic container whose
dropout and weight decay are released with difficulty, and gated by the
distance between contrastively trained domain signatures. Unrelated
groups are trained in isolation so they cannot pollute the shared model.
"""
from .backbone import (
    ArchitectureConfig,
    GraphSpec,
    ModelParams,
    OptimizerState,
    WindowBatch,
    adam_step,
    backward,
    forward,
    masked_mae_loss,
    normalize_adjacency,
    train_to_convergence,
)
from .container import (
    ActivenessMatrix,
    CommonContainerState,
    ElasticSchedule,
    release_probability,
    sample_activeness,
    schedule,
    train_on_group,
)
from .coupler import (
    EvolveConfig,
    EvolutionState,
    assemble_loss,
    build_registry,
    evolve,
    gate,
    incorporate,
)
from .curriculum import (
    GradientProfile,
    ProbeConfig,
    difficulty,
    profile_group,
    reorder,
    select_bench,
)
from .datagen import (
    CsvSchema,
    DomainGroup,
    SyntheticConfig,
    gen_domains,
    gen_graph,
    load_csv,
    temporal_domain_split,
    window_and_split,
)
from .harness import ExperimentConfig, Metrics, metrics, run_ablation, run_full, run_zero_shot, sweep
from .info_audit import (
    HistogramEstimator,
    build_entropy_report,
    conditional_entropy_chain,
    entropy,
    ib_objective,
    mutual_information,
)
from .personality import (
    DomainEmbedding,
    Extractor,
    contrastive_loss,
    distance,
    embed,
    init_extractor,
    reinstantiate,
    train_extractor,
)

__version__ = "0.1.0"
