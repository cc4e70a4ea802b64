"""MLP hypernetwork baseline: a feed-forward regression from preference
weights to the normalized flattened adapter vector.

Serves as the discriminative counterpart of the diffusion generator in the
robustness study; prediction is deterministic.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .artifacts import load_artifact, save_artifact
from .errors import ConfigError, ShapeError, TrainingError
from .farm import AdapterCorpus, NormStats
from .models import AdapterTensor
from .objectives import TaskWeights


@dataclass(frozen=True)
class HypernetConfig:
    hidden: int = 256
    layers: int = 2
    steps: int = 3000
    lr: float = 1e-3
    seed: int = 0


class _Mlp(nn.Module):
    def __init__(self, cond_dims, dim, hidden, layers):
        super().__init__()
        widths = [cond_dims] + [hidden] * layers
        body = []
        for a, b in zip(widths[:-1], widths[1:]):
            body += [nn.Linear(a, b), nn.ReLU()]
        self.body = nn.Sequential(*body)
        self.head = nn.Linear(widths[-1], dim)

    def forward(self, w):
        return self.head(self.body(w))


@dataclass
class HypernetBundle:
    net: _Mlp
    stats: NormStats
    manifest: tuple
    cond_dims: int
    meta: dict = field(default_factory=dict)


def hypernet_fit(corpus: AdapterCorpus, config: HypernetConfig = HypernetConfig()):
    """Least-squares fit of weights -> normalized adapter vector."""
    if corpus.size < 2:
        raise TrainingError("hypernetwork needs at least 2 corpus records")
    torch.manual_seed(config.seed)
    net = _Mlp(corpus.weight_dims, corpus.dim, config.hidden, config.layers)
    w = torch.from_numpy(corpus.weights.astype(np.float32))
    target = torch.from_numpy(corpus.stats.normalize(corpus.adapters))
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    final = None
    for step in range(config.steps):
        loss = F.mse_loss(net(w), target)
        if not torch.isfinite(loss):
            raise TrainingError("hypernetwork training diverged", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        final = float(loss.detach())
    net.eval()
    return HypernetBundle(
        net=net,
        stats=corpus.stats,
        manifest=corpus.manifest,
        cond_dims=corpus.weight_dims,
        meta={"config": {**config.__dict__}, "train_mse": final,
              "corpus_hash": corpus.content_hash()},
    )


def hypernet_predict(bundle: HypernetBundle, w):
    """Predict an adapter for the given preference weights."""
    if isinstance(w, TaskWeights):
        w = w.as_tuple()
    w = np.asarray(w, dtype=np.float32)
    if w.shape != (bundle.cond_dims,):
        raise ConfigError(f"weights must have {bundle.cond_dims} components")
    with torch.no_grad():
        pred = bundle.net(torch.from_numpy(w)[None, :])[0].numpy()
    return AdapterTensor(values=bundle.stats.denormalize(pred).astype(np.float32),
                         manifest=tuple((n, tuple(s)) for n, s in bundle.manifest))


def save_hypernet(path, bundle: HypernetBundle):
    meta = {
        "manifest": [[n, list(s)] for n, s in bundle.manifest],
        "cond_dims": bundle.cond_dims,
        "meta": bundle.meta,
        "dim": bundle.net.head.out_features,
        "hidden": bundle.net.head.in_features,
        "layers": sum(1 for m in bundle.net.body if isinstance(m, nn.Linear)),
    }
    tensors = {f"state.{k}": v.detach().cpu().numpy().astype(np.float32)
               for k, v in bundle.net.state_dict().items()}
    tensors["stats.mean"] = bundle.stats.mean
    tensors["stats.std"] = bundle.stats.std
    save_artifact(path, "hypernet-checkpoint", meta, tensors)


def load_hypernet(path):
    kind, meta, tensors = load_artifact(path)
    if kind != "hypernet-checkpoint":
        raise ShapeError(f"{path}: expected hypernet checkpoint, found {kind!r}")
    net = _Mlp(meta["cond_dims"], meta["dim"], meta["hidden"], meta["layers"])
    net.load_state_dict({k[len("state."):]: torch.from_numpy(v)
                         for k, v in tensors.items() if k.startswith("state.")})
    net.eval()
    return HypernetBundle(
        net=net,
        stats=NormStats(mean=tensors["stats.mean"], std=tensors["stats.std"]),
        manifest=tuple((n, tuple(s)) for n, s in meta["manifest"]),
        cond_dims=meta["cond_dims"],
        meta=meta["meta"],
    )
