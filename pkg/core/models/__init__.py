"""
MVFCNN Core Models

Exports for the layer graph, run configuration, dataset and result schemas.
"""

# Layer graph (network architecture as data)
from core.models.layers import (
    NETWORK_INPUT,
    # Layer kinds
    ConvLayer,
    ReluLayer,
    MaxPoolLayer,
    FlattenLayer,
    FcLayer,
    DropoutLayer,
    UpsampleLayer,
    FuseLayer,
    LayerSpec,
    # Main model
    NetworkSpec,
    # Type guards
    is_classifier_head,
)

# Run configuration and presets
from core.models.training import (
    STAGE_ORDER,
    SgdConfig,
    StageConfig,
    FcnTrainingConfig,
    CnnTrainingConfig,
    SynthConfig,
    RunConfig,
    FULL_SCALE_OBJECT_CNN_SGD,
    FULL_SCALE_FCN_STAGES,
    VGG16_WIDTHS,
    VGG16_HEAD_WIDTH,
)

# Dataset records
from core.models.micrograph import (
    MATRIX_CLASS,
    NOT_SEGMENTED,
    CLASS_NAMES,
    CLASS_COLORS,
    class_names,
    MicrographSample,
    ManifestEntry,
    DatasetManifest,
)

# Classification results and reports
from core.models.results import (
    ObjectClassification,
    ImageClassification,
    PixelMetrics,
    ObjectMetrics,
    ImageMetrics,
    MetricsReport,
)

__all__ = [
    # Layer graph
    "NETWORK_INPUT",
    "ConvLayer",
    "ReluLayer",
    "MaxPoolLayer",
    "FlattenLayer",
    "FcLayer",
    "DropoutLayer",
    "UpsampleLayer",
    "FuseLayer",
    "LayerSpec",
    "NetworkSpec",
    "is_classifier_head",
    # Run configuration
    "STAGE_ORDER",
    "SgdConfig",
    "StageConfig",
    "FcnTrainingConfig",
    "CnnTrainingConfig",
    "SynthConfig",
    "RunConfig",
    "FULL_SCALE_OBJECT_CNN_SGD",
    "FULL_SCALE_FCN_STAGES",
    "VGG16_WIDTHS",
    "VGG16_HEAD_WIDTH",
    # Dataset
    "MATRIX_CLASS",
    "NOT_SEGMENTED",
    "CLASS_NAMES",
    "CLASS_COLORS",
    "class_names",
    "MicrographSample",
    "ManifestEntry",
    "DatasetManifest",
    # Results
    "ObjectClassification",
    "ImageClassification",
    "PixelMetrics",
    "ObjectMetrics",
    "ImageMetrics",
    "MetricsReport",
]
