"""Domain generalization on a small numpy autodiff engine.

Modules: ``autodiff`` (tape, double backward, HVP), ``model`` (feature net and
fixed/trainable heads), ``data`` (synthetic multi-domain generator, scenarios),
``trainers`` (SGD baseline, fixed head, MLDG, MetaReg), ``evaluation``
(leave-one-domain-out benchmark, KL shift, eigenprojection), ``cli``.
"""

from .autodiff import ParamSet, Tensor, Tape, grad, hessian_vector_product, value_and_grad
from .data import MultiDomainDataset, SyntheticConfig, generate_synthetic, make_scenario
from .evaluation import RunSettings, evaluate_accuracy, run_benchmark, select_best_model
from .model import FeatureNetSpec, build_model, classify, forward
from .trainers import TrainConfig, profile_config

__version__ = "0.1.0"
