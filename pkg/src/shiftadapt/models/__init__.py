from .base import (
    Features,
    LinearConfig,
    MlpConfig,
    ModelParams,
    OptimizerSpec,
    RegularizerSpec,
    RiskValues,
    TrainConfig,
    TrainingDiverged,
    TrainingError,
    erm_weights,
    features_of,
)
from .erm import fit_weighted, gradient, predict, train, weighted_erm_loss
from .forest import forest_predict, forest_train
from .knn import knn_fit, knn_predict
from .learners import FittedLearner, LearnerSpec
from .network import linear_params

__all__ = [
    "Features", "FittedLearner", "LearnerSpec", "LinearConfig", "MlpConfig", "ModelParams", "OptimizerSpec",
    "RegularizerSpec", "RiskValues", "TrainConfig", "TrainingDiverged", "TrainingError", "erm_weights",
    "features_of", "fit_weighted", "forest_predict", "forest_train", "gradient", "knn_fit", "knn_predict",
    "linear_params", "predict", "train", "weighted_erm_loss",
]
