"""Sweep orchestration: run every method over the preference grid, evaluate
per-task metrics, and run the robustness and response-time studies."""

import time
from dataclasses import dataclass

import numpy as np
import torch

from .baselines import SoupEndpoints, mmr_rerank, retrain_task, soup_merge
from .data import dataset_digest
from .diffusion import DiffusionSchedule, GeneratorBundle, sample_adapter
from .errors import ConfigError, DependencyError
from .evalkit import (
    SweepReport,
    TaskResult,
    absolute_difference,
    alpha_ndcg_at_k,
    benchmark_latency,
    ndcg_at_k,
    rank_candidates,
)
from .farm import AdapterCorpus, NormStats, TaskGrid, TuneConfig, sample_tasks
from .hypernet import HypernetBundle, hypernet_predict
from .models import AdapterTensor, encode_users, evaluate_ranking, unflatten_adapter

METHODS = ("paragon", "retrain", "soup", "mmr", "hypernet")


@dataclass
class SweepAssets:
    """Everything a sweep might need; methods check for their own piece."""

    backbone: object
    generator: GeneratorBundle | None = None
    sample_schedule: DiffusionSchedule | None = None
    guidance: float | None = None
    hypernet: HypernetBundle | None = None
    soup: SoupEndpoints | None = None
    tune_config: TuneConfig | None = None
    seed: int = 0
    alpha: float = 0.5


def _task_seed(base, index):
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def produce_adapter(method, w, assets: SweepAssets, ds, task_index=0):
    """Adapter for one task under one method; returns (AdapterTensor, seconds).

    The mmr method has no adapter (it post-processes backbone scores) and
    returns (None, 0.0).
    """
    t0 = time.perf_counter()
    if method == "paragon":
        if assets.generator is None:
            raise DependencyError("generator checkpoint", "train-generator")
        adapter = sample_adapter(w, assets.generator, sched=assets.sample_schedule,
                                 guidance=assets.guidance,
                                 seed=_task_seed(assets.seed, task_index))
    elif method == "retrain":
        if assets.tune_config is None:
            raise DependencyError("tuning configuration", "farm-adapters")
        cfg = TuneConfig(**{**assets.tune_config.__dict__,
                            "seed": _task_seed(assets.seed, task_index)})
        adapter = retrain_task(w, assets.backbone, ds, cfg)
    elif method == "soup":
        if assets.soup is None:
            raise DependencyError("soup endpoint adapters", "farm-adapters")
        adapter = soup_merge(assets.soup, w)
    elif method == "hypernet":
        if assets.hypernet is None:
            raise DependencyError("hypernetwork checkpoint", "train-generator")
        adapter = hypernet_predict(assets.hypernet, w)
    elif method == "mmr":
        return None, 0.0
    else:
        raise ConfigError(f"unknown method {method!r}; pick one of {METHODS}")
    return adapter, time.perf_counter() - t0


def evaluate_mmr(model, ds, lam, split="test", alpha=0.5, k=10):
    """Backbone scores reranked per user by MMR with the given lambda."""
    states = encode_users(model, ds, split)
    cands_all = np.stack([ds.eval_candidates(u, split) for u in range(ds.n_users)])
    with torch.no_grad():
        scores_all = model.score_states(states, cands_all).numpy()
    ndcgs = np.zeros(ds.n_users)
    andcgs = np.zeros(ds.n_users)
    for u in range(ds.n_users):
        cands = cands_all[u]
        y = ds.categories_of(cands)
        base_order = rank_candidates(scores_all[u], tie_break=cands)
        # only the top k matter for @k metrics; the ideal still sees all candidates
        order = base_order[mmr_rerank(scores_all[u][base_order], y[base_order],
                                      lam, min(k, len(cands)))]
        ndcgs[u] = ndcg_at_k(cands[order], cands[0], k)
        andcgs[u] = alpha_ndcg_at_k(order, y, alpha, k)
    out = {"ndcg_at_10": float(ndcgs.mean()), "alpha_ndcg_at_10": float(andcgs.mean())}
    if ds.has_groups:
        groups = np.array([g if g is not None else "" for g in ds.user_groups])
        out["by_group"] = {
            g: {"ndcg_at_10": float(ndcgs[groups == g].mean())}
            for g in sorted(set(groups))
        }
    return out


def _group_ad(metrics):
    by_group = metrics.get("by_group")
    if not by_group or len(by_group) != 2:
        return None
    return absolute_difference({g: v["ndcg_at_10"] for g, v in by_group.items()})


def run_sweep(method, ds, assets: SweepAssets, grid=TaskGrid(), split="test",
              progress=False):
    """One TaskResult per grid task; aggregate fields (Avg.HV, Pearson r-a/r-d)
    are attached later by evalkit.finalize_reports under joint normalization."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; pick one of {METHODS}")
    tasks = sample_tasks(grid)
    results = []
    for i, w in enumerate(tasks):
        if method == "mmr":
            t0 = time.perf_counter()
            metrics = evaluate_mmr(assets.backbone, ds, lam=w.accuracy, split=split,
                                   alpha=assets.alpha)
            seconds = time.perf_counter() - t0
        else:
            adapter, seconds = produce_adapter(method, w, assets, ds, task_index=i)
            metrics = evaluate_ranking(assets.backbone, ds, split, adapter=adapter,
                                       alpha=assets.alpha)
        results.append(TaskResult(
            weights=w.as_tuple(),
            ndcg_at_10=metrics["ndcg_at_10"],
            alpha_ndcg_at_10=metrics["alpha_ndcg_at_10"],
            ad=_group_ad(metrics),
            latency_ms=seconds * 1e3,
        ))
        if progress:
            print(f"  task {i + 1}/{len(tasks)} w={w.as_tuple()} "
                  f"ndcg={results[-1].ndcg_at_10:.4f} "
                  f"andcg={results[-1].alpha_ndcg_at_10:.4f}")
    return SweepReport(
        method=method,
        dataset_digest=dataset_digest(ds),
        results=results,
        meta={"split": split, "alpha": assets.alpha, "seed": assets.seed,
              "grid": {**grid.__dict__}},
    )


def perturbation_study(adapters_by_method, model, ds, stats: NormStats, sigma,
                       n_seeds=10, split="test", alpha=0.5, base_seed=0):
    """Gaussian-perturbation robustness: identical noise magnitude for every
    method, applied in normalized parameter units.

    adapters_by_method: method -> list of AdapterTensor (e.g. one per grid
    task).  Returns method -> {delta_ndcg, delta_alpha_ndcg, per_task arrays}.
    """
    out = {}
    for method, adapters in adapters_by_method.items():
        d_ndcg, d_andcg = [], []
        for a_idx, adapter in enumerate(adapters):
            base = evaluate_ranking(model, ds, split, adapter=adapter, alpha=alpha)
            normed = stats.normalize(adapter.values)
            for s in range(n_seeds):
                rng = np.random.default_rng([base_seed, a_idx, s])
                noise = rng.standard_normal(normed.shape).astype(np.float32)
                noisy = AdapterTensor(
                    values=stats.denormalize(normed + sigma * noise),
                    manifest=adapter.manifest,
                )
                pert = evaluate_ranking(model, ds, split, adapter=noisy, alpha=alpha)
                d_ndcg.append(abs(pert["ndcg_at_10"] - base["ndcg_at_10"]))
                d_andcg.append(abs(pert["alpha_ndcg_at_10"] - base["alpha_ndcg_at_10"]))
        out[method] = {
            "delta_ndcg": float(np.mean(d_ndcg)),
            "delta_alpha_ndcg": float(np.mean(d_andcg)),
            "n": len(d_ndcg),
            "sigma": sigma,
        }
    return out


def method_latency(method, w, assets: SweepAssets, ds, trials=5):
    """Wall-clock time from receiving preference weights to a loadable
    adapter (for mmr: to a reranked list)."""
    if method == "mmr":
        fn = lambda: evaluate_mmr(assets.backbone, ds, lam=w.accuracy)
    else:
        fn = lambda: produce_adapter(method, w, assets, ds)
    mean_ms, std_ms, samples = benchmark_latency(fn, trials)
    return {"method": method, "mean_ms": mean_ms, "std_ms": std_ms,
            "samples_ms": samples, "trials": trials}
