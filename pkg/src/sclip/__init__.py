"""Semi-supervised two-tower contrastive training with optimal-transport
caption pseudo-labels and partial-label keyword pseudo-labels."""

from .core_math import cosine_matrix, cross_entropy, normalize_rows, softmax_classifier
from .sinkhorn import TransportPlan, cost_from_embeddings, marginal_residual, solve
from .pseudo import (
    KeywordCatalog,
    PseudoLabelMatrix,
    caption_pseudo_labels,
    hard_pl,
    keyword_candidates,
    keyword_pseudo_labels,
    nearest_labeled,
    pseudo_embeddings,
    soft_pl,
)
from .losses import (
    LossValue,
    caption_loss,
    clip_loss,
    hardmax_keyword_loss,
    keyword_loss,
    total_loss,
)

__version__ = "0.1.0"
