"""Dual feature-space semantic anomaly detection.

A sample is embedded twice: once as the penultimate-layer feature of a frozen
pretrained vision transformer, once as the vector of per-block teacher-student
discrepancies of students trained only on normal data. Each space is modeled
by a Gaussian; the normality score is the sum of the two log-likelihoods.
"""

from .backbone import (
    BackboneSpec,
    BlockOutput,
    IdentityBackbone,
    ImageBatch,
    MOCK_SPEC,
    VIT_B16_SPEC,
    VitBackbone,
    block_outputs,
    extract_pretrained,
    load_backbone,
    make_mock_backbone,
    preprocess,
    save_backbone,
)
from .benchmark import (
    EvalSplit,
    ExperimentReport,
    PipelineConfig,
    Variant,
    ablation_runner,
    auroc,
    make_multimodal_split,
    make_unimodal_split,
    parse_variant,
    run_experiment,
    score_pipeline,
    table3_variants,
    write_report_csv,
    write_report_json,
)
from .cache import FeatureCache, cache_key
from .datasets import (
    DatasetHandle,
    gaussian_blob_features,
    get_dataset,
    list_datasets,
    make_blob_image_dataset,
    register_dataset,
    spectrum_features,
)
from .density import (
    FeatureMatrix,
    GaussianModel,
    GMMModel,
    ScoreVector,
    WhitenTransform,
    apply_whitener,
    combined_score,
    fit_gaussian,
    fit_gmm,
    fit_whitener,
    gaussian_log_likelihood,
    gmm_log_likelihood,
    knn_score,
    load_model,
    save_model,
)
from .diagnostics import ConfusionReport, auroc_inflation_demo, confusion_report, toy_confusion_demo
from .distillation import (
    DiscrepancyMatrix,
    StudentEnsemble,
    TrainConfig,
    default_block_indices,
    discrepancy_features,
    load_ensemble,
    save_ensemble,
    train_students,
)
from .exceptions import ConfigError, DataError, DualspaceError, NumericalError

__version__ = "0.1.0"
