"""Monte Carlo audits of contrastive-learning supervised-loss bounds under class-mean shift."""

from .auditor import BoundReport, audit_theorem_4_1, audit_theorem_4_5, audit_theorem_B_1, fit_encoder, jensen_chain
from .classifier import MeanClassifier, Task, class_means, sup_loss_mean
from .complexity import gen_bound, intra_class_deviation, rademacher_linear, spectral_norm
from .encoder import LinearEncoder
from .io import DataError, EmbeddingSet, read_embeddings, write_embeddings
from .latent_model import ClassDistribution, ClassPrior, LatentModel
from .losses import HINGE, LOGISTIC, MarginLossKind, margin_loss, ntxent_batch, unsup_loss
from .recovery import hungarian, kmeans, recover_pseudo_means, shift_accuracy_table
from .shift import ShiftProfile, bias_actual, bias_sup, hull_project

__version__ = "0.1.0"
