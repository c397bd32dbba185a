"""Trajectory-aligned pooling of convolutional feature maps.

Samples feature sequences along tracked trajectories, pools them by
averaging or rank pooling (exact and closed-form approximate), encodes the
descriptors as Fisher Vectors against a PCA + GMM model, aggregates
per-frame vectors at the video level, and classifies with one-vs-all
linear SVMs.
"""

from .classify import (
    EvalReport,
    LinearSvmModel,
    mean_average_precision,
    predict_probs,
    top1_accuracy,
    train_ovr,
)
from .core import (
    DescriptorSet,
    Direction,
    FeatureMapVolume,
    LabeledVideoTable,
    LabelEntry,
    PoolingKind,
    StreamTag,
    Trajectory,
    VolumeGeometry,
    read_label_table,
    read_trajectories,
    read_volume,
    synth_ordered_pair_dataset,
    write_label_table,
    write_trajectories,
    write_volume,
)
from .encode import (
    EncodingModel,
    FisherVector,
    GmmModel,
    PcaModel,
    fisher_vector,
    fit_gmm,
    fit_pca,
    frame_fisher_vectors,
    pca_transform,
    power_l2_normalize,
)
from .errors import (
    DegeneracyError,
    EptError,
    FormatError,
    InsufficientDataError,
    SizeMismatchError,
    StageError,
    ValidationError,
)
from .normalize import NormalizationKind, in_channel_normalize, in_voxel_normalize
from .pipeline import PipelineConfig, run_pipeline, synth_experiment
from .trajpool import (
    RankPoolConfig,
    approx_rank_pool,
    average_pool,
    cumulative_normalized,
    exact_rank_pool,
    pool_trajectories,
    sample_sequence,
)
from .videopool import Provenance, VideoVector, fuse, video_ap, video_hap, video_rp

__version__ = "0.1.0"
