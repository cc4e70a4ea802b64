"""Conditional diffusion over flattened adapter parameters.

A small transformer denoiser treats the normalized adapter vector as a
sequence of fixed-width tokens and predicts the forward-process noise,
conditioned on the task's preference weights and the diffusion timestep.
Condition dropout during training (classifier-free guidance) makes the same
network serve as the unconditional model via a learned null embedding, and
sampling mixes the two branches with a guidance scale.

Five conditioning strategies are supported: condition token prepended (pre),
prepended and appended (pre_post), a learned gate injecting the condition
before or after the blocks (pre_adaptive / post_adaptive), and per-block
modulation of the normalization scale and shift (adaptive_norm).
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .artifacts import digest, load_artifact, save_artifact
from .errors import ConfigError, ShapeError, TrainingError
from .farm import AdapterCorpus, NormStats
from .models import AdapterTensor
from .objectives import TaskWeights

STRATEGIES = ("pre", "pre_post", "pre_adaptive", "post_adaptive", "adaptive_norm")


# -- schedule -------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule: per-step beta_t with cumulative signal level alpha_bar_t.

    ``timesteps`` carries the original step values fed to the denoiser's time
    embedding, so a strided sampling schedule still queries the network at
    the step values it was trained on.  ``sigma_rule`` picks the reverse-step
    noise level: "beta" uses sqrt(beta_t), "posterior" the smaller
    sqrt(beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)).
    """

    betas: np.ndarray
    alpha_bars: np.ndarray
    timesteps: np.ndarray
    kind: str
    sigma_rule: str = "posterior"

    def __post_init__(self):
        if len(self.betas) < 1:
            raise ConfigError("schedule needs at least one step")
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ConfigError("every beta must lie in (0,1)")
        if not (np.diff(self.alpha_bars) < 0).all() or not (self.alpha_bars < 1).all():
            raise ConfigError("alpha_bar must be strictly decreasing and < 1")
        if self.sigma_rule not in ("beta", "posterior"):
            raise ConfigError(f"unknown sigma rule {self.sigma_rule!r}")

    @property
    def steps(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def sigmas(self):
        if self.sigma_rule == "beta":
            return np.sqrt(self.betas)
        prev = np.concatenate(([1.0], self.alpha_bars[:-1]))
        return np.sqrt(self.betas * (1.0 - prev) / (1.0 - self.alpha_bars))


def make_schedule(steps, kind="linear", beta_start=1e-4, beta_end=0.02,
                  sigma_rule="posterior"):
    """Standard schedules: ``linear`` betas or the squared-cosine alpha_bar."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        alpha_bars = np.cumprod(1.0 - betas)
    elif kind == "cosine":
        def f(t):
            return math.cos((t / steps + 0.008) / 1.008 * math.pi / 2) ** 2
        alpha_bars = np.array([f(t + 1) / f(0) for t in range(steps)])
        prev = np.concatenate(([1.0], alpha_bars[:-1]))
        betas = np.clip(1.0 - alpha_bars / prev, 1e-8, 0.999)
        alpha_bars = np.cumprod(1.0 - betas)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(betas=betas, alpha_bars=alpha_bars,
                             timesteps=np.arange(1, steps + 1), kind=kind,
                             sigma_rule=sigma_rule)


def strided_schedule(sched, n):
    """Respaced sub-schedule over ``n`` steps with the effective betas implied
    by the kept alpha_bars; sampling runs the same update rule unchanged."""
    if not (1 <= n <= sched.steps):
        raise ConfigError(f"cannot stride a {sched.steps}-step schedule to {n}")
    idx = np.unique(np.round(np.linspace(0, sched.steps - 1, n)).astype(int))
    abar = sched.alpha_bars[idx]
    prev = np.concatenate(([1.0], abar[:-1]))
    betas = 1.0 - abar / prev
    return DiffusionSchedule(betas=betas, alpha_bars=abar,
                             timesteps=sched.timesteps[idx], kind=sched.kind,
                             sigma_rule=sched.sigma_rule)


def forward_noise(theta0, t, eps, sched):
    """theta_t = sqrt(alpha_bar_t) * theta0 + sqrt(1 - alpha_bar_t) * eps.

    ``t`` is a (batched) 1-based position in the schedule.
    """
    theta0 = torch.as_tensor(theta0)
    eps = torch.as_tensor(eps)
    if eps.shape != theta0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != signal shape {tuple(theta0.shape)}")
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if (t < 1).any() or (t > sched.steps).any():
        raise ConfigError(f"step out of range 1..{sched.steps}")
    abar = torch.as_tensor(sched.alpha_bars[t - 1], dtype=theta0.dtype)
    while abar.ndim < theta0.ndim:
        abar = abar.unsqueeze(-1)
    return torch.sqrt(abar) * theta0 + torch.sqrt(1.0 - abar) * eps


# -- denoiser ---------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    strategy: str = "adaptive_norm"
    token_width: int = 64
    d_model: int = 64
    depth: int = 2
    heads: int = 4
    cond_dims: int = 2
    p_uncond: float = 0.1
    guidance: float = 0.4

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown conditioning strategy {self.strategy!r}; "
                              f"pick one of {STRATEGIES}")
        if not (0.0 <= self.p_uncond <= 1.0):
            raise ConfigError(f"p_uncond must be in [0,1], got {self.p_uncond}")
        if not (0.0 <= self.guidance <= 1.0):
            raise ConfigError(f"guidance must be in [0,1], got {self.guidance}")


def _sinusoidal(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _SelfAttention(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, n, d))


class _DenoiserBlock(nn.Module):
    """Pre-LN transformer block; with ``modulated`` the condition vector
    shifts/scales both layer norms and gates both residual branches."""

    def __init__(self, d, heads, modulated):
        super().__init__()
        self.modulated = modulated
        self.ln1 = nn.LayerNorm(d, elementwise_affine=not modulated)
        self.attn = _SelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d, elementwise_affine=not modulated)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        if modulated:
            self.ada = nn.Linear(d, 6 * d)
            nn.init.zeros_(self.ada.weight)
            nn.init.zeros_(self.ada.bias)

    def forward(self, x, c=None):
        if self.modulated:
            sh1, sc1, g1, sh2, sc2, g2 = self.ada(F.silu(c)).chunk(6, dim=-1)
            h = self.ln1(x) * (1 + sc1[:, None]) + sh1[:, None]
            x = x + (1 + g1[:, None]) * self.attn(h)
            h = self.ln2(x) * (1 + sc2[:, None]) + sh2[:, None]
            x = x + (1 + g2[:, None]) * self.mlp(h)
        else:
            x = x + self.attn(self.ln1(x))
            x = x + self.mlp(self.ln2(x))
        return x


class _CondEncoder(nn.Module):
    """Embed each preference-weight component, then aggregate with a learned
    single-query attention into one condition vector."""

    def __init__(self, cond_dims, d):
        super().__init__()
        self.value_proj = nn.Linear(1, d)
        self.comp_emb = nn.Parameter(torch.randn(cond_dims, d) * 0.02)
        self.query = nn.Parameter(torch.randn(d) * 0.02)
        self.out = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))

    def forward(self, w):
        tokens = self.value_proj(w.unsqueeze(-1)) + self.comp_emb  # (B, p, d)
        logits = tokens @ self.query / math.sqrt(self.query.shape[0])
        agg = (torch.softmax(logits, dim=-1).unsqueeze(-1) * tokens).sum(dim=1)
        return self.out(agg)


class ParamDenoiser(nn.Module):
    """Noise predictor over tokenized flattened adapter vectors."""

    def __init__(self, dim, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.dim = dim
        self.n_tokens = math.ceil(dim / cfg.token_width)
        self.pad = self.n_tokens * cfg.token_width - dim
        d = cfg.d_model
        self.in_proj = nn.Linear(cfg.token_width, d)
        self.pos_emb = nn.Parameter(torch.randn(self.n_tokens, d) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.cond_encoder = _CondEncoder(cfg.cond_dims, d)
        self.null_cond = nn.Parameter(torch.randn(d) * 0.02)
        modulated = cfg.strategy == "adaptive_norm"
        self.blocks = nn.ModuleList(
            [_DenoiserBlock(d, cfg.heads, modulated) for _ in range(cfg.depth)]
        )
        if cfg.strategy in ("pre_adaptive", "post_adaptive"):
            self.gate = nn.Parameter(torch.zeros(d))
            self.gate_proj = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.final_ln = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.token_width)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def condition(self, w, null_mask=None):
        """Condition vector; samples flagged in null_mask use the learned
        null embedding (the unconditional branch)."""
        if w is None:
            raise ConfigError("pass weights or a null mask")
        c = self.cond_encoder(w)
        if null_mask is not None:
            c = torch.where(null_mask[:, None], self.null_cond.expand_as(c), c)
        return c

    def forward(self, theta_t, t, w=None, null_mask=None):
        """Predict the noise for (B, dim) inputs at (B,) original timestep
        values; w is (B, cond_dims) or None for a fully unconditional batch."""
        if theta_t.shape[-1] != self.dim:
            raise ShapeError(f"denoiser built for dim {self.dim}, got {theta_t.shape[-1]}")
        b = theta_t.shape[0]
        if w is None:
            w = torch.zeros(b, self.cfg.cond_dims, dtype=theta_t.dtype)
            null_mask = torch.ones(b, dtype=torch.bool)
        c = self.condition(w, null_mask)

        x = F.pad(theta_t, (0, self.pad)).view(b, self.n_tokens, self.cfg.token_width)
        x = self.in_proj(x) + self.pos_emb
        t_emb = self.time_mlp(_sinusoidal(torch.as_tensor(t).reshape(b), self.cfg.d_model))
        x = x + t_emb[:, None, :]

        strategy = self.cfg.strategy
        n_pre = n_post = 0
        if strategy == "pre":
            x = torch.cat([c[:, None, :], x], dim=1)
            n_pre = 1
        elif strategy == "pre_post":
            x = torch.cat([c[:, None, :], x, c[:, None, :]], dim=1)
            n_pre = n_post = 1
        elif strategy == "pre_adaptive":
            x = x + torch.sigmoid(self.gate) * self.gate_proj(c)[:, None, :]

        for block in self.blocks:
            x = block(x, c if strategy == "adaptive_norm" else None)

        if strategy == "post_adaptive":
            x = x + torch.sigmoid(self.gate) * self.gate_proj(c)[:, None, :]

        x = x[:, n_pre : x.shape[1] - n_post]
        out = self.out_proj(self.final_ln(x)).reshape(b, -1)
        return out[:, : self.dim]


# -- generator bundle ---------------------------------------------------------------

@dataclass
class GeneratorBundle:
    denoiser: ParamDenoiser
    schedule: DiffusionSchedule
    stats: NormStats
    manifest: tuple
    config: DenoiserConfig
    meta: dict = field(default_factory=dict)

    def content_hash(self):
        state = self.denoiser.state_dict()
        return digest({
            "state": {k: v.detach().cpu().numpy().astype(np.float32).tobytes().hex()
                      for k, v in state.items()},
            "config": {**self.config.__dict__},
            "schedule": self.schedule.betas.tobytes().hex(),
        })


@dataclass(frozen=True)
class GeneratorTrainConfig:
    steps: int = 4000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 0


def train_generator(corpus: AdapterCorpus, cfg: DenoiserConfig, sched: DiffusionSchedule,
                    train: GeneratorTrainConfig):
    """Train the denoiser on the normalized corpus with condition dropout.

    Minimizes E || eps - eps_hat(theta_t, w, t) ||^2 where w is replaced by
    the null embedding with probability p_uncond per sample.
    """
    if corpus.size < 1:
        raise TrainingError("cannot train a generator on an empty corpus")
    if corpus.weight_dims != cfg.cond_dims:
        raise ConfigError(f"corpus has {corpus.weight_dims}-dim weights but the "
                          f"denoiser expects {cfg.cond_dims}")
    torch.manual_seed(train.seed)
    denoiser = ParamDenoiser(corpus.dim, cfg)
    data = torch.from_numpy(corpus.stats.normalize(corpus.adapters))
    weights = torch.from_numpy(corpus.weights.astype(np.float32))
    opt = torch.optim.Adam(denoiser.parameters(), lr=train.lr)
    g = torch.Generator().manual_seed(train.seed)
    losses = []
    for step in range(train.steps):
        idx = torch.randint(corpus.size, (train.batch_size,), generator=g)
        t_pos = torch.randint(1, sched.steps + 1, (train.batch_size,), generator=g)
        eps = torch.randn(train.batch_size, corpus.dim, generator=g)
        theta_t = forward_noise(data[idx], t_pos.numpy(), eps, sched)
        null_mask = torch.rand(train.batch_size, generator=g) < cfg.p_uncond
        t_vals = torch.as_tensor(sched.timesteps[t_pos.numpy() - 1])
        pred = denoiser(theta_t, t_vals, weights[idx], null_mask)
        loss = F.mse_loss(pred, eps)
        if not torch.isfinite(loss):
            raise TrainingError("generator training loss became non-finite", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if train.log_every and (step + 1) % train.log_every == 0:
            recent = float(np.mean(losses[-train.log_every:]))
            print(f"step {step + 1}: loss {recent:.4f}")
    denoiser.eval()
    return GeneratorBundle(
        denoiser=denoiser,
        schedule=sched,
        stats=corpus.stats,
        manifest=corpus.manifest,
        config=cfg,
        meta={
            "corpus_hash": corpus.content_hash(),
            "seed": train.seed,
            "train_steps": train.steps,
            "final_loss": float(np.mean(losses[-100:])) if losses else None,
            "loss_curve": losses[:: max(1, len(losses) // 200)],
        },
    )


def sample_adapter(w, generator: GeneratorBundle, sched=None, guidance=None, seed=0):
    """Generate one adapter for preference weights ``w``.

    Iterates the reverse process from pure noise, mixing conditional and
    unconditional noise predictions with the guidance scale; guidance 0 is
    exactly conditional-only sampling.  Deterministic under (w, seed).
    """
    if isinstance(w, TaskWeights):
        w = w.as_tuple()
    w = np.asarray(w, dtype=np.float32)
    if w.shape != (generator.config.cond_dims,):
        raise ConfigError(f"weights must have {generator.config.cond_dims} components")
    gamma = generator.config.guidance if guidance is None else float(guidance)
    if not (0.0 <= gamma <= 1.0):
        raise ConfigError(f"guidance must be in [0,1], got {gamma}")
    sched = generator.schedule if sched is None else sched
    denoiser = generator.denoiser
    if sched.timesteps.max() > generator.schedule.steps:
        raise ConfigError("sampling schedule exceeds the training schedule")

    g = torch.Generator().manual_seed(seed)
    wt = torch.from_numpy(w)[None, :]
    sigmas = sched.sigmas
    denoiser.eval()
    with torch.no_grad():
        theta = torch.randn(1, denoiser.dim, generator=g)
        for i in range(sched.steps - 1, -1, -1):
            t_val = torch.as_tensor([sched.timesteps[i]])
            eps_c = denoiser(theta, t_val, wt)
            if gamma == 0.0:
                eps = eps_c
            else:
                eps_u = denoiser(theta, t_val, wt,
                                 null_mask=torch.ones(1, dtype=torch.bool))
                eps = (1.0 + gamma) * eps_c - gamma * eps_u
            beta = sched.betas[i]
            abar = sched.alpha_bars[i]
            theta = (theta - beta / math.sqrt(1.0 - abar) * eps) / math.sqrt(1.0 - beta)
            if i > 0:
                theta = theta + sigmas[i] * torch.randn(1, denoiser.dim, generator=g)
    values = generator.stats.denormalize(theta[0].numpy())
    return AdapterTensor(values=values.astype(np.float32),
                         manifest=tuple((n, tuple(s)) for n, s in generator.manifest))


# -- persistence ----------------------------------------------------------------------

def save_generator(path, bundle: GeneratorBundle):
    meta = {
        "config": {**bundle.config.__dict__},
        "manifest": [[n, list(s)] for n, s in bundle.manifest],
        "schedule_kind": bundle.schedule.kind,
        "sigma_rule": bundle.schedule.sigma_rule,
        "meta": bundle.meta,
        "dim": bundle.denoiser.dim,
    }
    tensors = {f"state.{k}": v.detach().cpu().numpy().astype(np.float32)
               for k, v in bundle.denoiser.state_dict().items()}
    tensors["schedule.betas"] = bundle.schedule.betas
    tensors["schedule.alpha_bars"] = bundle.schedule.alpha_bars
    tensors["schedule.timesteps"] = bundle.schedule.timesteps.astype(np.int64)
    tensors["stats.mean"] = bundle.stats.mean
    tensors["stats.std"] = bundle.stats.std
    save_artifact(path, "generator-checkpoint", meta, tensors)


def load_generator(path):
    kind, meta, tensors = load_artifact(path)
    if kind != "generator-checkpoint":
        raise ShapeError(f"{path}: expected generator checkpoint, found {kind!r}")
    cfg = DenoiserConfig(**meta["config"])
    denoiser = ParamDenoiser(meta["dim"], cfg)
    state = {k[len("state."):]: torch.from_numpy(v)
             for k, v in tensors.items() if k.startswith("state.")}
    denoiser.load_state_dict(state)
    denoiser.eval()
    sched = DiffusionSchedule(
        betas=tensors["schedule.betas"].astype(np.float64),
        alpha_bars=tensors["schedule.alpha_bars"].astype(np.float64),
        timesteps=tensors["schedule.timesteps"],
        kind=meta["schedule_kind"],
        sigma_rule=meta.get("sigma_rule", "posterior"),
    )
    return GeneratorBundle(
        denoiser=denoiser,
        schedule=sched,
        stats=NormStats(mean=tensors["stats.mean"], std=tensors["stats.std"]),
        manifest=tuple((n, tuple(s)) for n, s in meta["manifest"]),
        config=cfg,
        meta=meta["meta"],
    )
