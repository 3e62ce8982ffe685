"""Tree-3 tree networks, LeNet-5 and single-route (pruned) backpropagation in numpy."""

from .estimators import LeNet5Classifier, PixelScaler, TenTreeClassifier, Tree3Classifier
from .gradients import backward_pruned_tree3, backward_reference, compute_gradients
from .models import (Geometry, LeNet5Config, Tree3Config, count_gradient_instances, count_routes,
                     forward, init_params)
from .plans import TrainPlan, builtin_plans, get_plan
from .tensor_core import Activation
from .training import evaluate, load_checkpoint, run_replicates, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Activation", "Geometry", "LeNet5Classifier", "LeNet5Config", "PixelScaler",
    "TenTreeClassifier", "TrainPlan", "Tree3Classifier", "Tree3Config", "backward_pruned_tree3",
    "backward_reference", "builtin_plans", "compute_gradients", "count_gradient_instances",
    "count_routes", "evaluate", "forward", "get_plan", "init_params", "load_checkpoint",
    "run_replicates", "save_checkpoint", "train",
]
