"""
Training module initialization
"""

from .domain_transform import (
    TransformTrainConfig,
    load_generator,
    reconstruct,
    save_generator,
    train_transform,
    translate_dataset,
)
from .aligner import (
    AlignerModel,
    AlignerTrainConfig,
    DegradationSpec,
    augment,
    extract_features,
    infer,
    load_aligner,
    predict_offset,
    save_aligner,
    train_da3,
)
from .history import plot_training_curves
