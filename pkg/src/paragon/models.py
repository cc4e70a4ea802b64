"""Sequential recommender backbones and the residual adapter.

Three backbone variants sit behind one scoring interface: a self-attentive
encoder, a recurrent (GRU) encoder, and a time-interval-aware attention
variant that adds bucketized-interval biases to the attention logits.  All of
them embed the (truncated, left-padded) history, produce one final user state,
and score candidates by dot product with their item embeddings.

The adapter is a two-layer bottleneck applied to the final user state through
a residual connection.  Its output projection is zero-initialized, so a fresh
adapter is an exact no-op.  Adapters are carried around in a flattened
"matrix" form (AdapterTensor) with a fixed shape manifest, which is also the
unit the parameter generator produces.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .artifacts import load_artifact, save_artifact
from .errors import ConfigError, ShapeError, TrainingError
from .evalkit import alpha_ndcg_at_k, ndcg_at_k, rank_candidates
from .objectives import bpr_loss

ARCHS = ("attn", "recurrent", "time_attn")


@dataclass(frozen=True)
class BackboneConfig:
    arch: str = "attn"
    embed_dim: int = 64
    num_blocks: int = 1
    num_heads: int = 1
    max_history: int = 20
    dropout: float = 0.1
    adapter_hidden: int = 16
    time_buckets: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown backbone arch {self.arch!r}; pick one of {ARCHS}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")


# -- adapter -----------------------------------------------------------------

class Adapter(nn.Module):
    """Bottleneck residual adapter on the final user state.

    The up-projection starts at zero so the initial adapter leaves scores
    bit-identical to the backbone alone.
    """

    def __init__(self, dim, hidden):
        super().__init__()
        self.down = nn.Linear(dim, hidden)
        self.up = nn.Linear(hidden, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, h):
        return h + self.up(F.relu(self.down(h)))


@dataclass(frozen=True)
class AdapterTensor:
    """Flattened adapter parameters plus their shape manifest.

    The manifest fixes the flatten order: state-dict registration order of
    the Adapter module (down.weight, down.bias, up.weight, up.bias).
    """

    values: np.ndarray
    manifest: tuple   # ((name, (dims...)), ...)

    def __post_init__(self):
        expected = sum(int(np.prod(shape)) for _, shape in self.manifest)
        if self.values.ndim != 1 or self.values.shape[0] != expected:
            raise ShapeError(
                f"flattened length {self.values.shape} does not match manifest total {expected}"
            )

    @property
    def length(self):
        return self.values.shape[0]

    def manifest_key(self):
        return tuple((name, tuple(shape)) for name, shape in self.manifest)


def adapter_manifest(dim, hidden):
    return (
        ("down.weight", (hidden, dim)),
        ("down.bias", (hidden,)),
        ("up.weight", (dim, hidden)),
        ("up.bias", (dim,)),
    )


def flatten_adapter(adapter):
    """Flatten an Adapter module (or its state dict) into an AdapterTensor."""
    state = adapter.state_dict() if isinstance(adapter, nn.Module) else adapter
    manifest = tuple((name, tuple(t.shape)) for name, t in state.items())
    flat = np.concatenate([t.detach().cpu().numpy().astype(np.float32).reshape(-1)
                           for t in state.values()])
    return AdapterTensor(values=flat, manifest=manifest)


def unflatten_adapter(tensor: AdapterTensor):
    """Inverse of flatten_adapter: AdapterTensor -> dict of torch tensors."""
    out = {}
    offset = 0
    for name, shape in tensor.manifest:
        size = int(np.prod(shape))
        chunk = tensor.values[offset : offset + size]
        if chunk.shape[0] != size:
            raise ShapeError(f"manifest entry {name} overruns the flattened vector")
        out[name] = torch.from_numpy(chunk.reshape(shape).copy())
        offset += size
    if offset != tensor.length:
        raise ShapeError(f"manifest covers {offset} values, vector has {tensor.length}")
    return out


def zero_adapter_tensor(dim, hidden):
    manifest = adapter_manifest(dim, hidden)
    total = sum(int(np.prod(s)) for _, s in manifest)
    return AdapterTensor(values=np.zeros(total, dtype=np.float32), manifest=manifest)


def adapter_module_from_tensor(tensor: AdapterTensor):
    shapes = dict(tensor.manifest)
    hidden, dim = shapes["down.weight"]
    adapter = Adapter(dim, hidden)
    adapter.load_state_dict(unflatten_adapter(tensor))
    return adapter


def apply_adapter_state(h, state):
    """Functional residual adapter: h + up(relu(down(h))).

    Stateless, so concurrent readers can share one backbone while using
    different adapters.
    """
    z = F.relu(F.linear(h, state["down.weight"], state["down.bias"]))
    return h + F.linear(z, state["up.weight"], state["up.bias"])


# -- backbones ----------------------------------------------------------------

class _CausalSelfAttention(nn.Module):
    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad_mask, attn_bias=None):
        b, length, dim = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, length, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, length, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, length, self.heads, self.head_dim).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(length, length, dtype=torch.bool), diagonal=1)
        logits = logits.masked_fill(causal, -1e9)
        logits = logits.masked_fill(pad_mask[:, None, None, :], -1e9)
        if attn_bias is not None:
            logits = logits + attn_bias
        attn = self.drop(torch.softmax(logits, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(b, length, dim)
        return self.out(out)


class _Block(nn.Module):
    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = _CausalSelfAttention(dim, heads, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad_mask, attn_bias=None):
        x = x + self.attn(self.ln1(x), pad_mask, attn_bias)
        x = x + self.drop(self.ff(self.ln2(x)))
        return x


class SeqRecommender(nn.Module):
    """Backbone: history encoder + item embeddings; item index 0 is padding,
    catalog items are shifted by +1 internally."""

    def __init__(self, n_items, config: BackboneConfig):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        self.n_items = n_items
        d = config.embed_dim
        self.item_emb = nn.Embedding(n_items + 1, d, padding_idx=0)
        nn.init.normal_(self.item_emb.weight, std=0.02)
        with torch.no_grad():
            self.item_emb.weight[0].zero_()
        self.drop = nn.Dropout(config.dropout)
        if config.arch in ("attn", "time_attn"):
            self.pos_emb = nn.Embedding(config.max_history + 1, d, padding_idx=0)
            nn.init.normal_(self.pos_emb.weight, std=0.02)
            with torch.no_grad():
                self.pos_emb.weight[0].zero_()
            self.blocks = nn.ModuleList(
                [_Block(d, config.num_heads, config.dropout) for _ in range(config.num_blocks)]
            )
            self.final_ln = nn.LayerNorm(d)
        if config.arch == "time_attn":
            # scalar attention bias per (interval bucket, head)
            self.interval_bias = nn.Embedding(config.time_buckets, config.num_heads)
            nn.init.zeros_(self.interval_bias.weight)
        if config.arch == "recurrent":
            self.gru = nn.GRU(d, d, num_layers=config.num_blocks, batch_first=True)

    # -- input prep ----------------------------------------------------------

    def pad_histories(self, histories, times=None):
        """Left-pad item-index histories to max_history. Returns (items, timestamps)
        int64 tensors of shape (B, L); padding slots are 0."""
        length = self.config.max_history
        batch = np.zeros((len(histories), length), dtype=np.int64)
        tbatch = np.zeros((len(histories), length), dtype=np.int64)
        for i, hist in enumerate(histories):
            hist = np.asarray(hist, dtype=np.int64)[-length:]
            if hist.size and (hist.min() < 0 or hist.max() >= self.n_items):
                raise KeyError(f"history contains unknown item index (catalog size {self.n_items})")
            batch[i, length - len(hist):] = hist + 1
            if times is not None:
                tbatch[i, length - len(hist):] = np.asarray(times[i])[-length:]
        return torch.from_numpy(batch), torch.from_numpy(tbatch)

    def _interval_buckets(self, tstamps, pad_mask):
        """log2-bucketized |t_j - t_k| in days, clipped to the table size."""
        days = (tstamps[:, None, :] - tstamps[:, :, None]).abs() / 86_400.0
        buckets = torch.log2(1.0 + days).long().clamp_(0, self.config.time_buckets - 1)
        buckets = buckets.masked_fill(pad_mask[:, None, :], 0)
        return buckets

    def encode(self, items, tstamps=None):
        """Final user state for left-padded histories: (B, L) -> (B, D)."""
        pad_mask = items == 0
        x = self.item_emb(items) * math.sqrt(self.config.embed_dim)
        if self.config.arch == "recurrent":
            # shift to right-padding so padding never warms the hidden state
            b, length = items.shape
            pad = pad_mask.sum(dim=1)
            idx = (torch.arange(length) + pad[:, None]) % length
            x = x.gather(1, idx[:, :, None].expand(-1, -1, x.shape[-1]))
            out, _ = self.gru(self.drop(x))
            return out[torch.arange(b), (length - pad - 1).clamp(min=0)]
        positions = torch.arange(1, items.shape[1] + 1).expand_as(items)
        x = self.drop(x + self.pos_emb(positions * (~pad_mask).long()))
        attn_bias = None
        if self.config.arch == "time_attn":
            if tstamps is None:
                raise ConfigError("time_attn backbone needs timestamps")
            buckets = self._interval_buckets(tstamps, pad_mask)
            attn_bias = self.interval_bias(buckets).permute(0, 3, 1, 2)
        x = x.masked_fill(pad_mask.unsqueeze(-1), 0.0)
        for block in self.blocks:
            x = block(x, pad_mask, attn_bias)
        return self.final_ln(x[:, -1])

    def score_states(self, states, candidates):
        """Dot-product scores: (B, D) states x (B, C) candidate indices -> (B, C)."""
        cand = torch.as_tensor(candidates, dtype=torch.long)
        if cand.min() < 0 or cand.max() >= self.n_items:
            raise KeyError(f"unknown candidate item index (catalog size {self.n_items})")
        emb = self.item_emb(cand + 1)
        return (emb * states.unsqueeze(1)).sum(dim=-1)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def model_checksum(model):
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().astype(np.float32).tobytes())
    return h.hexdigest()


def score(model, history, candidates, adapter=None, times=None):
    """Score candidate items for one user history.

    adapter: optional AdapterTensor applied through the residual connection.
    Returns a float32 array with one score per candidate.
    """
    model.eval()
    with torch.no_grad():
        items, tstamps = model.pad_histories([history], [times] if times is not None else None)
        h = model.encode(items, tstamps if times is not None else None)
        if adapter is not None:
            h = apply_adapter_state(h, unflatten_adapter(adapter))
        return model.score_states(h, np.asarray(candidates)[None, :])[0].numpy()


def _needs_times(model):
    return model.config.arch == "time_attn"


def encode_users(model, ds, split, users=None, adapter_state=None, batch_size=256):
    """User states for an evaluation split; returns (n, D) tensor (no grad)."""
    users = range(ds.n_users) if users is None else users
    hist_fn = ds.valid_history if split == "valid" else ds.test_history
    states = []
    model.eval()
    with torch.no_grad():
        batch, times = [], []
        def flush():
            if not batch:
                return
            items, tstamps = model.pad_histories(batch, times if _needs_times(model) else None)
            h = model.encode(items, tstamps if _needs_times(model) else None)
            if adapter_state is not None:
                h = apply_adapter_state(h, adapter_state)
            states.append(h)
            batch.clear()
            times.clear()
        for u in users:
            hist = hist_fn(u)
            batch.append(hist)
            if _needs_times(model):
                n_all = len(ds.user_items[u])
                cut = n_all - 2 if split == "valid" else n_all - 1
                times.append(ds.user_times[u][:cut][-ds.max_history:])
            if len(batch) == batch_size:
                flush()
        flush()
    return torch.cat(states) if states else torch.zeros((0, model.config.embed_dim))


def evaluate_ranking(model, ds, split="valid", adapter=None, alpha=0.5, k=10,
                     per_user=False):
    """NDCG@k and alpha-NDCG@k over an evaluation split.

    Returns a dict with mean metrics (plus per-group means when the dataset
    has group labels); with per_user=True, also the raw per-user arrays.
    """
    state = unflatten_adapter(adapter) if adapter is not None else None
    states = encode_users(model, ds, split, adapter_state=state)
    cands_all = np.stack([ds.eval_candidates(u, split) for u in range(ds.n_users)])
    with torch.no_grad():
        scores_all = model.score_states(states, cands_all).numpy()
    ndcgs = np.zeros(ds.n_users)
    andcgs = np.zeros(ds.n_users)
    for u in range(ds.n_users):
        cands = cands_all[u]
        order = rank_candidates(scores_all[u], tie_break=cands)
        ndcgs[u] = ndcg_at_k(cands[order], cands[0], k)
        andcgs[u] = alpha_ndcg_at_k(order, ds.categories_of(cands), alpha, k)
    out = {"ndcg_at_10": float(ndcgs.mean()), "alpha_ndcg_at_10": float(andcgs.mean())}
    if ds.has_groups:
        out["by_group"] = {}
        groups = np.array([g if g is not None else "" for g in ds.user_groups])
        for g in sorted(set(groups)):
            mask = groups == g
            out["by_group"][g] = {
                "ndcg_at_10": float(ndcgs[mask].mean()),
                "alpha_ndcg_at_10": float(andcgs[mask].mean()),
            }
    if per_user:
        out["per_user"] = {"ndcg": ndcgs, "alpha_ndcg": andcgs}
    return out


# -- backbone training ---------------------------------------------------------

@dataclass(frozen=True)
class BackboneTrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 0


def training_pairs(ds):
    """All (user, pair-index) training examples."""
    return [(u, k) for u in range(ds.n_users) for k in range(ds.n_train_pairs(u))]


def _pair_batch(ds, pairs):
    histories, times, cands = [], [], []
    for u, k in pairs:
        histories.append(ds.train_history(u, k))
        prefix_times = ds.user_times[u][: len(ds.train_prefix(u))]
        lo = max(0, (k + 1) - ds.max_history)
        times.append(prefix_times[lo : k + 1])
        cands.append(ds.train_candidates(u, k))
    return histories, times, np.stack(cands)


def train_backbone(ds, config: BackboneConfig, train_cfg: BackboneTrainConfig):
    """Train a backbone with BPR on the training pairs; keeps the checkpoint
    with the best validation NDCG@10 (which must beat the untrained model).

    Returns (model, history) where history records per-epoch loss and NDCG.
    """
    torch.manual_seed(train_cfg.seed)
    model = SeqRecommender(ds.n_items, config)
    rng = np.random.default_rng(train_cfg.seed)
    pairs = training_pairs(ds)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)

    init_ndcg = evaluate_ranking(model, ds, "valid")["ndcg_at_10"]
    best = {"ndcg": init_ndcg, "state": {k: v.clone() for k, v in model.state_dict().items()},
            "epoch": -1}
    history = {"train_loss": [], "valid_ndcg": [], "init_ndcg": init_ndcg}

    for epoch in range(train_cfg.epochs):
        model.train()
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            chunk = [pairs[i] for i in order[start : start + train_cfg.batch_size]]
            hists, times, cands = _pair_batch(ds, chunk)
            items, tstamps = model.pad_histories(hists, times if _needs_times(model) else None)
            h = model.encode(items, tstamps if _needs_times(model) else None)
            scores = model.score_states(h, cands)
            loss = bpr_loss(scores[:, 0], scores[:, 1:]).mean()
            if not torch.isfinite(loss):
                raise TrainingError("backbone training loss became non-finite",
                                    step=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        valid_ndcg = evaluate_ranking(model, ds, "valid")["ndcg_at_10"]
        history["train_loss"].append(float(np.mean(losses)))
        history["valid_ndcg"].append(valid_ndcg)
        if train_cfg.log_every and (epoch + 1) % train_cfg.log_every == 0:
            print(f"epoch {epoch + 1}: loss {history['train_loss'][-1]:.4f} "
                  f"valid ndcg@10 {valid_ndcg:.4f}")
        if valid_ndcg > best["ndcg"]:
            best = {"ndcg": valid_ndcg,
                    "state": {k: v.clone() for k, v in model.state_dict().items()},
                    "epoch": epoch}

    if train_cfg.epochs > 0:
        model.load_state_dict(best["state"])
    history["best_epoch"] = best["epoch"]
    history["best_ndcg"] = best["ndcg"]
    model.eval()
    return model, history


# -- checkpoints ----------------------------------------------------------------

def save_backbone(path, model, extra_meta=None):
    meta = {
        "config": {**model.config.__dict__},
        "n_items": model.n_items,
        **(extra_meta or {}),
    }
    tensors = {name: t.detach().cpu().numpy().astype(np.float32)
               for name, t in model.state_dict().items()}
    save_artifact(path, "backbone-checkpoint", meta, tensors)


def load_backbone(path):
    kind, meta, tensors = load_artifact(path)
    if kind != "backbone-checkpoint":
        raise ShapeError(f"{path}: expected backbone checkpoint, found {kind!r}")
    config = BackboneConfig(**meta["config"])
    model = SeqRecommender(meta["n_items"], config)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model, meta
