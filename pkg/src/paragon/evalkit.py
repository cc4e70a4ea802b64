"""Evaluation math: NDCG@k, alpha-NDCG@k, weighted reward, 2-D hypervolume,
Pearson correlation, the inter-group absolute difference, and report types.

Pure functions over NumPy arrays; orchestration of full sweeps lives in
``sweep.py``.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError
from .objectives import TaskWeights


def rank_candidates(scores, tie_break=None):
    """Indices of candidates in descending score order.

    Ties break on ``tie_break`` ascending (pass item ids for a neutral,
    deterministic order), then on position.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if tie_break is None:
        tie_break = np.arange(scores.shape[0])
    return np.lexsort((np.asarray(tie_break), -scores))


def ndcg_at_k(ranked, target, k):
    """Single-relevant-item NDCG: 1/log2(1+rank) if the target is in the top
    k, else 0.  ``ranked`` is an item sequence, best first."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    for pos, item in enumerate(ranked[:k]):
        if item == target:
            return float(1.0 / np.log2(2.0 + pos))
    return 0.0


def alpha_ndcg_at_k(ranked, y, alpha, k):
    """Hard alpha-NDCG@k: alpha-DCG of the ranking divided by the greedy-ideal
    alpha-DCG over the same candidates, clipped to [0,1].

    ranked: positions into ``y`` in rank order; y: (n, m) binary labels.
    """
    y = np.asarray(y, dtype=np.float64)
    ranked = np.asarray(ranked, dtype=np.int64)
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if ranked.shape[0] < min(k, y.shape[0]) or ranked.shape[0] > y.shape[0]:
        raise ValueError(
            f"ranking covers {ranked.shape[0]} items but labels cover {y.shape[0]}"
        )
    dcg = kernels.alpha_dcg_at_k(y[ranked], alpha, k)
    ideal = kernels.ideal_alpha_dcg_at_k(y, alpha, k)
    if ideal <= 0.0:
        return 0.0
    return float(min(1.0, dcg / ideal))


def weighted_reward(w, utilities):
    """Preference-weighted sum of utility values."""
    wv = np.asarray(w.as_tuple() if isinstance(w, TaskWeights) else w, dtype=np.float64)
    uv = np.asarray(utilities, dtype=np.float64)
    if wv.shape != uv.shape:
        raise ValueError(f"weights {wv.shape} and utilities {uv.shape} differ")
    return float(wv @ uv)


def hypervolume_2d(points, ref=(0.0, 0.0)):
    """Area dominated by the Pareto-maximal subset relative to ``ref``.

    Points must have non-negative coordinates; dominated points contribute
    nothing.  Only the (0,0) reference is supported.
    """
    if tuple(ref) != (0.0, 0.0):
        raise ValueError("only the (0,0) reference point is supported")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.size == 0:
        return 0.0
    if (pts < 0).any():
        raise ValueError("hypervolume points must be non-negative")
    order = np.lexsort((-pts[:, 1], -pts[:, 0]))
    hv = 0.0
    best_y = 0.0
    for x, y in pts[order]:
        if y > best_y:
            hv += x * (y - best_y)
            best_y = y
    return float(hv)


def pearson_r(a, b):
    """Sample Pearson correlation; raises on constant series instead of
    silently returning 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 2:
        raise ValueError("pearson_r needs two equal-length series of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        raise FloatingPointError("correlation undefined for a constant series")
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


def absolute_difference(metric_by_group):
    """|m1 - m2| between exactly two groups."""
    if len(metric_by_group) != 2:
        raise ValueError(f"expected exactly 2 groups, got {len(metric_by_group)}")
    a, b = metric_by_group.values()
    return float(abs(a - b))


# -- reports ----------------------------------------------------------------

@dataclass
class TaskResult:
    weights: tuple
    ndcg_at_10: float
    alpha_ndcg_at_10: float
    ad: float | None = None
    latency_ms: float | None = None

    def __post_init__(self):
        for name in ("ndcg_at_10", "alpha_ndcg_at_10", "ad"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0 + 1e-9):
                raise ValueError(f"{name}={v} outside [0,1]")


@dataclass
class SweepReport:
    method: str
    dataset_digest: str
    results: list                      # TaskResult, grid order
    avg_hv: float | None = None
    pearson_r_a: float | None = None
    pearson_r_d: float | None = None
    reference: str | None = None
    normalization: dict | None = None  # the min/max bounds used for HV
    meta: dict = field(default_factory=dict)

    @property
    def ndcg_series(self):
        return np.array([r.ndcg_at_10 for r in self.results])

    @property
    def alpha_ndcg_series(self):
        return np.array([r.alpha_ndcg_at_10 for r in self.results])

    @property
    def accuracy_weights(self):
        return np.array([r.weights[0] for r in self.results])

    def to_dict(self):
        return {
            "method": self.method,
            "dataset_digest": self.dataset_digest,
            "results": [asdict(r) for r in self.results],
            "avg_hv": self.avg_hv,
            "pearson_r_a": self.pearson_r_a,
            "pearson_r_d": self.pearson_r_d,
            "reference": self.reference,
            "normalization": self.normalization,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        results = [TaskResult(weights=tuple(r["weights"]), ndcg_at_10=r["ndcg_at_10"],
                              alpha_ndcg_at_10=r["alpha_ndcg_at_10"], ad=r.get("ad"),
                              latency_ms=r.get("latency_ms"))
                   for r in d["results"]]
        return cls(method=d["method"], dataset_digest=d["dataset_digest"],
                   results=results, avg_hv=d.get("avg_hv"),
                   pearson_r_a=d.get("pearson_r_a"), pearson_r_d=d.get("pearson_r_d"),
                   reference=d.get("reference"), normalization=d.get("normalization"),
                   meta=d.get("meta", {}))

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _minmax(lo, hi, v):
    if hi <= lo:
        return np.zeros_like(np.asarray(v, dtype=np.float64))
    return (np.asarray(v, dtype=np.float64) - lo) / (hi - lo)


def finalize_reports(reports, reference=None):
    """Attach Avg.HV (under joint min-max bounds over all given reports) and
    Pearson correlations against the reference report.

    Avg.HV is the mean over grid tasks of the hypervolume of that task's
    single normalized (accuracy, diversity) point against (0,0).
    """
    all_ndcg = np.concatenate([r.ndcg_series for r in reports])
    all_andcg = np.concatenate([r.alpha_ndcg_series for r in reports])
    bounds = {
        "ndcg": (float(all_ndcg.min()), float(all_ndcg.max())),
        "alpha_ndcg": (float(all_andcg.min()), float(all_andcg.max())),
    }
    for rep in reports:
        na = _minmax(*bounds["ndcg"], rep.ndcg_series)
        nd = _minmax(*bounds["alpha_ndcg"], rep.alpha_ndcg_series)
        rep.avg_hv = float(np.mean([hypervolume_2d([(x, y)]) for x, y in zip(na, nd)]))
        rep.normalization = bounds
        if reference is not None and rep is not reference:
            rep.pearson_r_a = pearson_r(rep.ndcg_series, reference.ndcg_series)
            rep.pearson_r_d = pearson_r(rep.alpha_ndcg_series, reference.alpha_ndcg_series)
            rep.reference = reference.method
    return reports


def plot_data_table(reports):
    """Tabular plot data: one row per accuracy weight, one column per
    metric/method pair.  Returns (header, rows)."""
    if not reports:
        raise ConfigError("no reports to tabulate")
    x = reports[0].accuracy_weights
    header = ["w_acc"]
    columns = [x]
    for rep in reports:
        if not np.allclose(rep.accuracy_weights, x):
            raise ConfigError("reports cover different grids")
        header += [f"ndcg@10:{rep.method}", f"alpha_ndcg@10:{rep.method}"]
        columns += [rep.ndcg_series, rep.alpha_ndcg_series]
        if any(r.ad is not None for r in rep.results):
            header.append(f"ad:{rep.method}")
            columns.append(np.array([r.ad if r.ad is not None else np.nan
                                     for r in rep.results]))
    rows = np.column_stack(columns)
    return header, rows


def write_plot_data(path, reports):
    header, rows = plot_data_table(reports)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(f"{v:.6f}" for v in row) + "\n")
    return path


def benchmark_latency(fn, trials, warmup=1):
    """Wall-clock timing of fn(); returns (mean_ms, std_ms, samples_ms).

    Runs ``warmup`` unrecorded calls first so cold caches do not pollute the
    first trial.
    """
    if trials < 3:
        raise ValueError("need at least 3 trials")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    arr = np.asarray(samples)
    return float(arr.mean()), float(arr.std()), samples
