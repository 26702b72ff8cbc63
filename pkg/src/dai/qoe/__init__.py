from .forest import (ForestParams, RandomForestModel, Tree, load_model, predict, serialize_model,
                     train_forest)
from .labels import FEATURES, TARGETS, QoeGear, QoeLabel, Sample, build_dataset, discretize, feature_vector
from .metrics import accuracy, confusion_matrix, macro_f1, micro_f1, per_class_f1, r2_from_moments, r2_score

__all__ = [
    "FEATURES", "TARGETS", "ForestParams", "QoeGear", "QoeLabel", "RandomForestModel", "Sample", "Tree",
    "accuracy", "build_dataset", "confusion_matrix", "discretize", "feature_vector", "load_model",
    "macro_f1", "micro_f1", "per_class_f1", "predict", "r2_from_moments", "r2_score", "serialize_model",
    "train_forest",
]
