"""Angular adversarial training on a small numpy autodiff engine."""

from .attacks import AttackSpec, pgd_attack, project_linf, spsa_attack
from .autodiff import Tensor, backward, finite_diff_check
from .data import Dataset, gen_blobs
from .hypersphere import HypersphereHead, MarginConfig, cosine_logits, margin_ce_loss
from .models import Classifier, ModelSpec, init_parameters
from .regularizers import sep_loss, wfc_loss
from .training import TrainSpec, fit, spec_for_objective

__version__ = "0.1.0"
