"""Adapter farming: tune one adapter per sampled preference-weight task
against the frozen backbone and collect the (weights, flattened adapter)
pairs into the generator's training corpus.

Each adapter starts from the no-op initialization and trains for a fixed
budget, so corpus records have uniform provenance.  Adapter vectors are
z-normalized per coordinate before generator training; the statistics are
stored with the corpus and are part of every generator checkpoint.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .artifacts import digest, load_artifact, save_artifact
from .data import dataset_digest
from .errors import ConfigError, CorpusError, ShapeError, TuningError
from .models import (
    Adapter,
    AdapterTensor,
    _needs_times,
    _pair_batch,
    flatten_adapter,
    model_checksum,
    training_pairs,
)
from .objectives import (
    DiversityConfig,
    TaskWeights,
    bpr_loss,
    diversity_loss,
    group_gap_loss,
    scalarized_loss,
)


@dataclass(frozen=True)
class TaskGrid:
    """Task sampling scheme for the corpus and the sweep protocol."""

    scheme: str = "grid"          # grid | uniform
    count: int = 100              # uniform scheme only
    step: float = 0.1             # grid scheme only
    seed: int = 0
    fairness: bool = False        # add a third weight: grid uses {0,1}, uniform U[0,1]

    def __post_init__(self):
        if self.scheme not in ("grid", "uniform"):
            raise ConfigError(f"unknown task sampling scheme {self.scheme!r}")
        if self.scheme == "grid":
            n = 1.0 / self.step
            if abs(n - round(n)) > 1e-9:
                raise ConfigError(f"grid step {self.step} does not divide 1")


def sample_tasks(grid: TaskGrid):
    """Sample preference-weight tasks.

    grid scheme: accuracy weight 0..1 in ``step`` intervals with
    diversity = 1 - accuracy (duplicated across {0,1} fairness when enabled).
    uniform scheme: components drawn independently from [0,1], deterministic
    under the seed.
    """
    if grid.scheme == "grid":
        n = int(round(1.0 / grid.step))
        accs = [round(i * grid.step, 10) for i in range(n + 1)]
        if grid.fairness:
            return [TaskWeights(a, round(1.0 - a, 10), f)
                    for f in (0.0, 1.0) for a in accs]
        return [TaskWeights(a, round(1.0 - a, 10)) for a in accs]
    rng = np.random.default_rng(grid.seed)
    dims = 3 if grid.fairness else 2
    draws = rng.uniform(0.0, 1.0, size=(grid.count, dims))
    return [TaskWeights.from_sequence(row) for row in draws]


@dataclass(frozen=True)
class TuneConfig:
    epochs: int = 12
    batch_size: int = 128
    lr: float = 1e-2
    alpha: float = 0.5
    temperature: float = 1.0
    seed: int = 0
    # init and batch order are shared across tasks by default so the tuned
    # adapter is a deterministic function of the weights; per-task batch
    # noise otherwise swamps the weight-dependent signal and the generator
    # would be left modelling optimizer noise (set data_seed=None to shuffle
    # per task via ``seed`` instead)
    init_seed: int = 1234
    data_seed: int | None = 77

    def diversity(self):
        return DiversityConfig(alpha=self.alpha, temperature=self.temperature)


def _group_ids(ds):
    labels = sorted({g for g in ds.user_groups if g is not None})
    if len(labels) != 2:
        return None
    lookup = {labels[0]: 0, labels[1]: 1}
    return np.array([lookup.get(g, -1) for g in ds.user_groups], dtype=np.int64)


def tune_adapter(w: TaskWeights, model, ds, config: TuneConfig, diagnostics=None):
    """Gradient-descent the scalarized task loss over a fresh adapter.

    The backbone stays frozen; only the adapter trains.  Returns the tuned
    AdapterTensor.  ``diagnostics``, if given, is filled with the initial and
    final loss and the wall-clock seconds.
    """
    t0 = time.perf_counter()
    model.freeze()
    torch.manual_seed(config.init_seed)
    adapter = Adapter(model.config.embed_dim, model.config.adapter_hidden)
    opt = torch.optim.Adam(adapter.parameters(), lr=config.lr)
    div_cfg = config.diversity()
    order_seed = config.seed if config.data_seed is None else config.data_seed
    rng = np.random.default_rng(order_seed)
    pairs = training_pairs(ds)
    groups = _group_ids(ds) if w.fairness is not None else None
    if w.fairness is not None and groups is None:
        raise ConfigError("task has a fairness weight but the dataset lacks two groups")

    initial = None
    final = None
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = [pairs[i] for i in order[start : start + config.batch_size]]
            hists, times, cands = _pair_batch(ds, chunk)
            items, tstamps = model.pad_histories(hists, times if _needs_times(model) else None)
            with torch.no_grad():
                h = model.encode(items, tstamps if _needs_times(model) else None)
            scores = model.score_states(adapter(h), cands)
            acc = bpr_loss(scores[:, 0], scores[:, 1:])
            div = diversity_loss(scores, ds.categories_of(cands), div_cfg)
            fair = None
            if groups is not None:
                gid = torch.as_tensor(groups[[u for u, _ in chunk]])
                fair = group_gap_loss(acc, gid)
            loss = scalarized_loss(w, acc.mean(), div.mean(), fair)
            if not torch.isfinite(loss):
                raise TuningError(f"adapter tuning diverged for task {w.as_tuple()}",
                                  step=epoch)
            if initial is None:
                initial = float(loss.detach())
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        final = float(np.mean(epoch_losses)) if epoch_losses else initial
    if diagnostics is not None:
        diagnostics.update(initial_loss=initial, final_loss=final,
                           seconds=time.perf_counter() - t0)
    return flatten_adapter(adapter)


# -- corpus -------------------------------------------------------------------

@dataclass
class NormStats:
    """Per-coordinate z-normalization; coordinates with ~zero spread are
    masked (scaled by 1) so normalize/denormalize stays invertible."""

    mean: np.ndarray
    std: np.ndarray

    EPS = 1e-8

    @classmethod
    def fit(cls, matrix):
        mean = matrix.mean(axis=0).astype(np.float32)
        std = matrix.std(axis=0).astype(np.float32)
        std = np.where(std > cls.EPS, std, 1.0).astype(np.float32)
        return cls(mean=mean, std=std)

    def normalize(self, values):
        return ((values - self.mean) / self.std).astype(np.float32)

    def denormalize(self, values):
        return (values * self.std + self.mean).astype(np.float32)


@dataclass
class AdapterCorpus:
    weights: np.ndarray            # (N, p) float32
    adapters: np.ndarray           # (N, D) float32
    manifest: tuple                # shared AdapterTensor manifest
    stats: NormStats
    provenance: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.weights.shape[0]

    @property
    def weight_dims(self):
        return self.weights.shape[1]

    @property
    def dim(self):
        return self.adapters.shape[1]

    def record(self, i):
        return (TaskWeights.from_sequence(self.weights[i]),
                AdapterTensor(values=self.adapters[i].copy(), manifest=self.manifest))

    def content_hash(self):
        return digest({
            "weights": self.weights.tobytes().hex(),
            "adapters": self.adapters.tobytes().hex(),
            "manifest": [[n, list(s)] for n, s in self.manifest],
        })


def build_corpus(tasks, model, ds, config: TuneConfig, progress=False):
    """Tune one adapter per task and assemble the corpus with normalization
    stats and provenance (backbone checksum, seeds, tuning config)."""
    if len(tasks) < 2:
        raise CorpusError(f"need at least 2 tasks, got {len(tasks)}")
    backbone_before = model_checksum(model)
    seeds = np.random.SeedSequence(config.seed).generate_state(len(tasks))
    rows_w, rows_a = [], []
    manifest = None
    timings = []
    for i, w in enumerate(tasks):
        diag = {}
        try:
            tensor = tune_adapter(
                w, model, ds,
                TuneConfig(**{**config.__dict__, "seed": int(seeds[i])}),
                diagnostics=diag,
            )
        except Exception as exc:
            raise CorpusError(f"tuning failed for task {w.as_tuple()}: {exc}") from exc
        if manifest is None:
            manifest = tensor.manifest
        elif manifest != tensor.manifest:
            raise ShapeError("adapters in one corpus must share a manifest")
        rows_w.append(np.asarray(w.as_tuple(), dtype=np.float32))
        rows_a.append(tensor.values)
        timings.append(diag["seconds"])
        if progress:
            print(f"  adapter {i + 1}/{len(tasks)} w={w.as_tuple()} "
                  f"({diag['seconds']:.1f}s)")
    backbone_after = model_checksum(model)
    if backbone_after != backbone_before:
        raise CorpusError("backbone parameters changed during farming")

    adapters = np.stack(rows_a)
    return AdapterCorpus(
        weights=np.stack(rows_w),
        adapters=adapters,
        manifest=manifest,
        stats=NormStats.fit(adapters),
        provenance={
            "backbone_checksum": backbone_before,
            "dataset_digest": dataset_digest(ds),
            "tune_config": {**config.__dict__},
            "task_seeds": [int(s) for s in seeds],
            "mean_tune_seconds": float(np.mean(timings)) if timings else None,
        },
    )


def save_corpus(path, corpus: AdapterCorpus):
    """Corpus file: manifest header + records blob, one row per task laid out
    as the weight vector followed by the flattened adapter."""
    records = np.concatenate([corpus.weights, corpus.adapters], axis=1)
    meta = {
        "manifest": [[n, list(s)] for n, s in corpus.manifest],
        "weight_dims": corpus.weight_dims,
        "provenance": corpus.provenance,
        "config_hash": digest(corpus.provenance.get("tune_config", {})),
    }
    save_artifact(path, "adapter-corpus", meta,
                  {"records": records.astype(np.float32),
                   "mean": corpus.stats.mean, "std": corpus.stats.std})


def load_corpus(path):
    kind, meta, tensors = load_artifact(path)
    if kind != "adapter-corpus":
        raise ShapeError(f"{path}: expected adapter corpus, found {kind!r}")
    p = meta["weight_dims"]
    records = tensors["records"]
    return AdapterCorpus(
        weights=records[:, :p].copy(),
        adapters=records[:, p:].copy(),
        manifest=tuple((n, tuple(s)) for n, s in meta["manifest"]),
        stats=NormStats(mean=tensors["mean"], std=tensors["std"]),
        provenance=meta["provenance"],
    )
