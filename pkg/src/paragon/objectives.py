"""Scalarized multi-objective training losses.

Accuracy is the pairwise BPR loss.  Diversity is a differentiable smoothing
of alpha-DCG built on soft ranks: the rank of each item and the per-category
prior-coverage counts are replaced by sigmoid-relaxed sums over score
differences, so the loss is differentiable in the scores everywhere.  A task
is a preference-weight vector; its total loss is the weighted sum of the
per-utility losses.

All functions accept an optional leading batch dimension and reduce only
over the candidate/category axes, returning one value per instance.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError


@dataclass(frozen=True)
class DiversityConfig:
    """Hyperparameters of the smoothed alpha-DCG loss.

    alpha: redundancy discount in (0,1); each repeated coverage of a category
    multiplies the gain by (1 - alpha).
    temperature: sigmoid temperature of the soft ranks; lower is closer to
    the hard metric.
    literal_product_gain: replace the exponential gain (1-alpha)^C by the
    literal product (1-alpha)*C, for comparison only.
    """

    alpha: float = 0.5
    temperature: float = 1.0
    literal_product_gain: bool = False

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError(f"alpha must be in (0,1), got {self.alpha}")
        if not (self.temperature > 0.0):
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class TaskWeights:
    """Per-utility preference weights defining one task.

    Index 1 is accuracy, 2 is diversity, optional 3 is fairness.  Components
    live in [0,1]; the sweep protocol additionally uses diversity = 1 - accuracy.
    """

    accuracy: float
    diversity: float
    fairness: float | None = None

    def __post_init__(self):
        for name in ("accuracy", "diversity", "fairness"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} weight must be in [0,1], got {v}")

    @property
    def dims(self):
        return 2 if self.fairness is None else 3

    def as_tuple(self):
        if self.fairness is None:
            return (self.accuracy, self.diversity)
        return (self.accuracy, self.diversity, self.fairness)

    @classmethod
    def from_sequence(cls, seq):
        seq = [float(x) for x in seq]
        if len(seq) == 2:
            return cls(seq[0], seq[1])
        if len(seq) == 3:
            return cls(seq[0], seq[1], seq[2])
        raise ConfigError(f"preference weights need 2 or 3 components, got {len(seq)}")


def bpr_loss(pos_score, neg_scores):
    """Mean over negatives of -log sigmoid(pos - neg).

    pos_score: (...,) tensor; neg_scores: (..., N) tensor, N >= 1.
    Returns a (...,) tensor (scalar inputs give a 0-d tensor).
    """
    pos = torch.as_tensor(pos_score)
    neg = torch.as_tensor(neg_scores)
    if neg.shape[-1] == 0:
        raise ValueError("bpr_loss needs at least one negative score")
    return (-F.logsigmoid(pos.unsqueeze(-1) - neg)).mean(dim=-1)


def _pair_sigmoid(s, temperature):
    """Matrix M[..., k, j] = sigmoid((s_j - s_k)/T) with a zero diagonal."""
    if not torch.isfinite(s).all():
        raise FloatingPointError("non-finite score passed to soft ranking")
    diff = (s.unsqueeze(-2) - s.unsqueeze(-1)) / temperature
    m = torch.sigmoid(diff)
    eye = torch.eye(s.shape[-1], dtype=s.dtype, device=s.device)
    return m * (1.0 - eye)


def soft_rank(s, temperature):
    """Soft rank of every item: 1 + sum_{j != k} sigmoid((s_j - s_k)/T).

    Ranks lie in [1, n] and always sum to n(n+1)/2 because
    sigmoid(x) + sigmoid(-x) = 1.
    """
    s = torch.as_tensor(s)
    if s.shape[-1] < 1:
        raise ValueError("soft_rank needs at least one score")
    return 1.0 + _pair_sigmoid(s, temperature).sum(dim=-1)


def prior_coverage(s, y, temperature):
    """Soft count of how often each category is covered above each item.

    C[..., k, l] = sum_{j != k} y[..., j, l] * sigmoid((s_j - s_k)/T).
    """
    s = torch.as_tensor(s)
    y = torch.as_tensor(y, dtype=s.dtype)
    if y.shape[:-1] != s.shape:
        raise ValueError(f"label matrix shape {tuple(y.shape)} does not match scores {tuple(s.shape)}")
    return _pair_sigmoid(s, temperature) @ y


def diversity_loss(s, y, cfg=DiversityConfig()):
    """Negated smoothed alpha-DCG of the candidate list.

    loss = -sum_k sum_l y[k,l] * (1-alpha)^C[k,l] / log2(1 + Rank_k)

    The gain uses (1-alpha) as an exponential redundancy discount; set
    cfg.literal_product_gain for the product form.  The loss depends only on
    score differences, so it is invariant to adding a constant to all scores.
    """
    s = torch.as_tensor(s)
    y = torch.as_tensor(y, dtype=s.dtype)
    m = _pair_sigmoid(s, cfg.temperature)
    rank = 1.0 + m.sum(dim=-1)
    cov = m @ y
    if cfg.literal_product_gain:
        gain = y * (1.0 - cfg.alpha) * cov
    else:
        gain = y * torch.exp(cov * torch.log(torch.tensor(1.0 - cfg.alpha, dtype=s.dtype)))
    discount = torch.log2(1.0 + rank)
    return -(gain / discount.unsqueeze(-1)).sum(dim=(-2, -1))


def group_gap_loss(per_sample_loss, group_ids):
    """Squared difference of the mean per-sample loss between two groups.

    Used as the differentiable fairness utility: driving the gap between
    group-mean accuracy losses to zero narrows the inter-group metric gap.
    Batches containing a single group contribute zero.
    """
    loss = torch.as_tensor(per_sample_loss)
    gid = torch.as_tensor(group_ids)
    mask0 = gid == 0
    mask1 = gid == 1
    if not bool(mask0.any()) or not bool(mask1.any()):
        return torch.zeros((), dtype=loss.dtype, device=loss.device)
    return (loss[mask0].mean() - loss[mask1].mean()) ** 2


def scalarized_loss(w: TaskWeights, l_acc, l_div, l_fair=None):
    """Preference-weighted total loss: w1*accuracy + w2*diversity [+ w3*fairness]."""
    total = w.accuracy * torch.as_tensor(l_acc) + w.diversity * torch.as_tensor(l_div)
    if w.fairness is not None:
        if l_fair is None:
            raise ValueError("task has a fairness weight but no fairness loss given")
        total = total + w.fairness * torch.as_tensor(l_fair)
    return total
