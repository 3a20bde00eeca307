"""Desk-scale dataset distillation by BatchNorm statistic matching.

Pipeline: squeeze a dataset into a pretrained model (supervised or
contrastive), align it with a frozen-backbone linear probe, recover a tiny
synthetic dataset by matching the model's BN running statistics, relabel the
synthetic crops with teacher softmax outputs, then train and evaluate
students on the result.
"""

__version__ = "0.1.0"

from .netcore import (  # noqa: F401
    BNStatSnapshot,
    BatchStatRecord,
    NetworkSpec,
    Provenance,
    TrainedBackbone,
    build_network,
    extract_bn_statistics,
    forward_with_batch_stats,
    load_checkpoint,
    save_checkpoint,
)
from .data import ImageDataset, generate_synthetic_dataset, resolve_dataset  # noqa: F401
from .squeeze import (  # noqa: F401
    AugmentationPolicy,
    PretrainConfig,
    ProbeConfig,
    info_nce_loss,
    linear_probe,
    pretrain_contrastive,
    pretrain_supervised,
)
from .bnstats import (  # noqa: F401
    channel_variance,
    compare_informativeness,
    empirical_differential_entropy,
    gaussian_entropy,
    informativeness_report,
)
from .recover import (  # noqa: F401
    LossTrajectory,
    RecoveryConfig,
    SyntheticBatch,
    bn_matching_loss,
    init_synthetic,
    recover_dataset,
    recovery_objective,
)
from .relabel import (  # noqa: F401
    CropRecord,
    DistilledDataset,
    RRCParams,
    build_distilled,
    generate_crops,
    load_distilled,
    pack_distilled,
    soft_labels,
)
from .posttrain import (  # noqa: F401
    EvalReport,
    PostTrainConfig,
    deviation_gap,
    evaluate,
    soft_cross_entropy,
    train_on_distilled,
)
from .analysis import (  # noqa: F401
    clustering_purity,
    cluster_images,
    emit_plots,
    kmeans_cluster,
    pca_reduce,
)
from .pipeline import (  # noqa: F401
    ExperimentConfig,
    PipelineError,
    RelabelConfig,
    compare_teachers,
    run_pipeline,
)
