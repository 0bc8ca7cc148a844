"""Analogical training for disentangled generative models, plus the
unsupervised subspace-score disentanglement metric."""

from .latent import (
    AnalogicalPair,
    LatentSpec,
    TraversalSequence,
    build_traversal,
    sample_analogical_batch,
    sample_prior,
)
from .models import (
    ModelBundle,
    ModelFamilyError,
    NetSpec,
    build_bundle,
    classify_relation,
    discriminate,
    encode,
    generate,
)
from .objectives import (
    LossReport,
    ToyWorld,
    analogical_loss,
    combined_step_loss,
    critic_loss,
    elbo_loss,
    generator_adversarial_loss,
    supervised_analogical_loss,
    verify_bound,
)
from .data import (
    DatasetHandle,
    SyntheticFactorSpec,
    iterate_batches,
    load_dataset,
    render_synthetic,
)
from .subspace_score import (
    MetricClusters,
    MetricParams,
    SubspaceScoreReport,
    cluster,
    generate_metric_clusters,
    nmi,
    omp_self_expression,
    projection_distance,
    subspace_score,
)

__version__ = "0.1.0"
