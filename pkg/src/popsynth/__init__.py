"""Joint synthesis of population records and activity-location chains."""

__version__ = "0.1.0"

from .schema import (  # noqa: E402
    RecordBatch, TabularSchema, TokenVocabulary, TrajectorySeq, ZoneRegistry,
    build_vocabulary, filter_radius, ingest_population, ingest_trajectories,
)
from .transforms import DataTransformer, GaussianMixture, fit_gmm, gumbel_softmax  # noqa: E402
from .gan import CTGANSynthesizer, TrainConfig  # noqa: E402
from .seqgen import TrajectoryGenerator, sample_trajectories, train_seq  # noqa: E402
from .matcher import OriginMatcher, build_cost_matrix, hungarian, merge  # noqa: E402
from .metrics import pearson, r2_zero_intercept, srmse  # noqa: E402
from .pipeline import PipelineConfig, run_pipeline  # noqa: E402

__all__ = [
    "RecordBatch", "TabularSchema", "TokenVocabulary", "TrajectorySeq", "ZoneRegistry",
    "build_vocabulary", "filter_radius", "ingest_population", "ingest_trajectories",
    "DataTransformer", "GaussianMixture", "fit_gmm", "gumbel_softmax",
    "CTGANSynthesizer", "TrainConfig", "TrajectoryGenerator", "sample_trajectories",
    "train_seq", "OriginMatcher", "build_cost_matrix", "hungarian", "merge",
    "pearson", "r2_zero_intercept", "srmse", "PipelineConfig", "run_pipeline",
]
