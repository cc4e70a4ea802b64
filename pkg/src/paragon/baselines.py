"""Comparison methods: on-demand retraining, linear parameter soup, and
maximal-marginal-relevance reranking."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError
from .farm import TuneConfig, tune_adapter
from .models import AdapterTensor
from .objectives import TaskWeights


def retrain_task(w: TaskWeights, model, ds, config: TuneConfig, diagnostics=None):
    """Tune a task-specific adapter from scratch (the reference method).

    Identical optimization to corpus farming, run on demand; ``diagnostics``
    captures wall-clock seconds for response-time comparisons.
    """
    return tune_adapter(w, model, ds, config, diagnostics=diagnostics)


@dataclass(frozen=True)
class SoupEndpoints:
    """The two expert adapters merged at test time: one tuned for pure
    accuracy (w=(1,0)) and one for pure diversity (w=(0,1))."""

    accuracy: AdapterTensor
    diversity: AdapterTensor

    def __post_init__(self):
        if self.accuracy.manifest != self.diversity.manifest:
            raise ShapeError("soup endpoints must share one adapter manifest")


def soup_merge(endpoints: SoupEndpoints, w: TaskWeights):
    """Elementwise linear merge: w_acc * theta_acc + w_div * theta_div."""
    values = (w.accuracy * endpoints.accuracy.values
              + w.diversity * endpoints.diversity.values)
    return AdapterTensor(values=values.astype(np.float32),
                         manifest=endpoints.accuracy.manifest)


def mmr_rerank(scores, y, lam, k):
    """Greedy MMR selection over candidates.

    Relevance scores are min-max normalized, similarity is the Jaccard
    similarity of category sets, and each step picks the item maximizing
    lam * rel(i) - (1 - lam) * max_{j selected} sim(i, j).  Returns the k
    selected positions in rank order.
    """
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must be in [0,1], got {lam}")
    scores = np.asarray(scores, dtype=np.float64)
    if k > scores.shape[0]:
        raise ValueError(f"k={k} exceeds candidate count {scores.shape[0]}")
    span = scores.max() - scores.min()
    rel = (scores - scores.min()) / span if span > 0 else np.zeros_like(scores)
    return kernels.mmr_select(rel, np.asarray(y, dtype=np.float64), lam, k)
