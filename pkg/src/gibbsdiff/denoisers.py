"""Reverse-step denoisers.

A denoiser maps ``(Z_t, mask, t, ctx)`` to the mean and log-variance of a
diagonal Gaussian over ``Z_{t-1}``. The chain overwrites unmasked rows, so
implementations may emit anything there.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .energy import energy_discrete_batch
from .problems import ProblemInstance, build_constraint_graph
from .state import CLAMP_LOGIT, DTYPE, clamp_pattern, given_tensors, softmax_decode

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0


class DenoiserError(RuntimeError):
    pass


@dataclass
class ReverseStepOutput:
    mu: torch.Tensor
    logvar: torch.Tensor


@dataclass
class DenoiserContext:
    """Instance-derived conditioning shared by every step of a chain.

    ``adjacency`` is (n, n) or (B, n, n) and includes self loops.
    """

    instance: ProblemInstance | list
    adjacency: torch.Tensor
    positions: torch.Tensor
    frozen: torch.Tensor
    pattern: torch.Tensor


def make_context(instance) -> DenoiserContext:
    """Context for one instance, or a stacked context for a list of same-shape instances."""
    if isinstance(instance, ProblemInstance):
        adj = torch.as_tensor(build_constraint_graph(instance).with_self_loops())
        frozen, pattern = given_tensors(instance)
        pos = torch.as_tensor(instance.position_array())
        return DenoiserContext(instance, adj, pos, frozen, pattern)
    parts = [make_context(i) for i in instance]
    return DenoiserContext(
        list(instance),
        torch.stack([p.adjacency for p in parts]),
        parts[0].positions,
        torch.stack([p.frozen for p in parts]),
        torch.stack([p.pattern for p in parts]),
    )


def _check_input(Z, mask, ctx):
    n = ctx.positions.shape[0]
    if Z.dim() != 3 or Z.shape[1] != n or mask.shape != Z.shape[:2]:
        raise DenoiserError(f"expected Z (B, {n}, K) and mask (B, {n}); got {tuple(Z.shape)}, {tuple(mask.shape)}")


class EchoDenoiser:
    """mu = Z_t, logvar = 0."""

    def predict(self, Z, mask, t, ctx, rng=None) -> ReverseStepOutput:
        _check_input(Z, mask, ctx)
        return ReverseStepOutput(Z.clone(), torch.zeros_like(Z))


class ConstantDenoiser:
    """Proposes a fixed logit pattern regardless of the state."""

    def __init__(self, mu: torch.Tensor, logvar: float = LOGVAR_MIN):
        self.mu = torch.as_tensor(mu, dtype=DTYPE)
        self.logvar = float(logvar)

    def predict(self, Z, mask, t, ctx, rng=None) -> ReverseStepOutput:
        _check_input(Z, mask, ctx)
        mu = self.mu.expand_as(Z).clone()
        return ReverseStepOutput(mu, torch.full_like(Z, self.logvar))


class DecodedTableDenoiser:
    """Output depends on Z_t only through its decoded assignment.

    ``table`` maps an assignment tuple to ``(mu (n, K), logvar (n, K))``.
    Used to check trajectory marginals against an exact kernel.
    """

    def __init__(self, table):
        self.table = table

    def predict(self, Z, mask, t, ctx, rng=None) -> ReverseStepOutput:
        _check_input(Z, mask, ctx)
        assign = Z.argmax(dim=-1)
        mus, lvs = [], []
        for row in assign.tolist():
            mu, lv = self.table(tuple(row))
            mus.append(torch.as_tensor(mu, dtype=DTYPE))
            lvs.append(torch.as_tensor(lv, dtype=DTYPE))
        return ReverseStepOutput(torch.stack(mus), torch.stack(lvs))


class OracleGibbsDenoiser:
    """Exact conditional Boltzmann resampling of the masked block.

    Holding the decoded unmasked variables fixed, enumerates every assignment
    of the masked block, draws one from exp(-H / tau) and returns its clamp
    pattern with the floor log-variance.
    """

    max_block_bits = 16

    def __init__(self, instance: ProblemInstance, tau: float, lam=None, G: float = CLAMP_LOGIT):
        if tau <= 0:
            raise DenoiserError("oracle temperature must be positive")
        self.instance = instance
        self.tau = float(tau)
        self.lam = lam
        self.G = G
        self._blocks: dict[int, np.ndarray] = {}

    def _block_values(self, size: int) -> np.ndarray:
        if size not in self._blocks:
            K = self.instance.K
            self._blocks[size] = np.array(list(itertools.product(range(K), repeat=size)), dtype=np.int64).reshape(-1, size)
        return self._blocks[size]

    def conditional(self, assign: np.ndarray, block: np.ndarray):
        """Return ``(candidates, probs)`` for resampling ``block`` given ``assign``."""
        size = len(block)
        if size * math.log2(max(self.instance.K, 2)) > self.max_block_bits:
            raise DenoiserError(
                f"block of {size} variables is too large to enumerate "
                f"(limit {self.max_block_bits} bits of joint assignments); lower rho_max or use a trained model"
            )
        vals = self._block_values(size)
        cand = np.repeat(assign[None], len(vals), axis=0)
        cand[:, block] = vals
        energy = energy_discrete_batch(cand, self.instance, self.lam)[0]
        logits = -(energy - energy.min()) / self.tau
        p = np.exp(logits)
        return cand, p / p.sum()

    def predict(self, Z, mask, t, ctx, rng=None) -> ReverseStepOutput:
        _check_input(Z, mask, ctx)
        assign = Z.argmax(dim=-1).numpy()
        out = assign.copy()
        for b in range(Z.shape[0]):
            block = np.flatnonzero(mask[b].numpy())
            if block.size == 0:
                continue
            cand, p = self.conditional(assign[b], block)
            u = float(torch.rand((), generator=rng, dtype=DTYPE))
            pick = min(int(np.searchsorted(np.cumsum(p), u, side="right")), len(p) - 1)
            out[b] = cand[pick]
        mu = clamp_pattern(torch.as_tensor(out), self.instance.K, self.G)
        return ReverseStepOutput(mu, torch.full_like(mu, LOGVAR_MIN))


# --------------------------------------------------------------------------
# Constraint-graph-biased attention denoiser
# --------------------------------------------------------------------------


@dataclass
class AttentionDenoiserConfig:
    K: int = 3
    layers: int = 2
    heads: int = 2
    dim: int = 32
    ff_mult: int = 4
    dropout: float = 0.1
    rpe_bias: float = -2.0  # c <= 0; -inf gives hard masking
    learn_rpe: bool = True
    pos_dims: int = 1  # number of index dimensions per variable
    pe_size: int = 16  # sinusoidal features per index dimension
    use_ape: bool = True
    hard_values: bool = False  # embed argmax one-hot instead of softmax rows
    zero_init_heads: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise DenoiserError("embedding dim must be divisible by the head count")
        if self.rpe_bias > 0:
            raise DenoiserError("RPE bias c must be <= 0")
        if self.learn_rpe and not math.isfinite(self.rpe_bias):
            raise DenoiserError("a learned RPE bias needs a finite initial value")

    def to_dict(self) -> dict:
        d = asdict(self)
        if not math.isfinite(d["rpe_bias"]):
            d["rpe_bias"] = "-inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionDenoiserConfig":
        d = dict(d)
        if d.get("rpe_bias") == "-inf":
            d["rpe_bias"] = -math.inf
        return cls(**d)


def sinusoidal(index: torch.Tensor, size: int) -> torch.Tensor:
    """Standard sin/cos features of integer positions, shape (..., size)."""
    half = size // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    ang = index.to(DTYPE)[..., None] * freq
    return torch.cat([ang.sin(), ang.cos()], dim=-1)


class BiasedSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, h, bias):
        B, n, d = h.shape
        q, k, v = self.qkv(h).view(B, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if bias is not None:
            scores = scores + bias[:, None]
        attn = self.drop(torch.softmax(scores, dim=-1))
        z = (attn @ v).transpose(1, 2).reshape(B, n, d)
        return self.out(z), attn


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ff_mult: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = BiasedSelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ff_mult * dim, dim),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, h, bias):
        a, _ = self.attn(self.norm1(h), bias)
        h = h + self.drop(a)
        return h + self.drop(self.ff(self.norm2(h)))


class AttentionDenoiser(nn.Module):
    """Transformer over one token per variable with constraint-graph attention bias.

    Token input: value embedding of the relaxed row, plus absolute positional
    encoding of the variable's index tuple, plus a learned vector when the
    variable is masked. Attention logits get ``c * [(i, j) not in E]``.
    """

    def __init__(self, config: AttentionDenoiserConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            if seed is not None:
                torch.manual_seed(seed)
            self._build(config)

    def _build(self, config):
        d = config.dim
        self.value_embed = nn.Parameter(torch.randn(config.K, d, dtype=DTYPE) / math.sqrt(d))
        self.mask_embed = nn.Parameter(torch.randn(d, dtype=DTYPE) / math.sqrt(d))
        self.ape = nn.Linear(config.pos_dims * config.pe_size, d)
        if config.learn_rpe:
            # c = -softplus(raw) keeps the bias non-positive
            raw = math.log(math.expm1(-config.rpe_bias)) if config.rpe_bias < 0 else -30.0
            self.rpe_raw = nn.Parameter(torch.tensor(raw, dtype=DTYPE))
        self.layers = nn.ModuleList(
            EncoderLayer(d, config.heads, config.ff_mult, config.dropout) for _ in range(config.layers)
        )
        self.norm = nn.LayerNorm(d)
        self.mu_head = nn.Linear(d, config.K)
        self.logvar_head = nn.Linear(d, config.K)
        self.to(DTYPE)
        if config.zero_init_heads:
            for head in (self.mu_head, self.logvar_head):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    @property
    def rpe_c(self) -> torch.Tensor | float:
        if self.config.learn_rpe:
            return -nn.functional.softplus(self.rpe_raw)
        return self.config.rpe_bias

    def attention_bias(self, adjacency: torch.Tensor) -> torch.Tensor | None:
        adj = adjacency if adjacency.dim() == 3 else adjacency[None]
        c = self.rpe_c
        if not self.config.learn_rpe:
            if c == 0:
                return None
            if not math.isfinite(c):
                return torch.zeros(adj.shape, dtype=DTYPE).masked_fill(~adj, -math.inf)
        return c * (~adj).to(DTYPE)

    def embed(self, Z, mask, ctx):
        if self.config.hard_values:
            X = nn.functional.one_hot(Z.argmax(dim=-1), self.config.K).to(DTYPE)
        else:
            X = softmax_decode(Z)
        h = X @ self.value_embed + mask[..., None].to(DTYPE) * self.mask_embed
        if self.config.use_ape:
            if ctx.positions.shape[-1] != self.config.pos_dims:
                raise DenoiserError(
                    f"model expects {self.config.pos_dims} index dimensions per variable, instance has {ctx.positions.shape[-1]}"
                )
            pe = sinusoidal(ctx.positions, self.config.pe_size).flatten(-2)
            h = h + self.ape(pe)
        return h

    def forward(self, Z, mask, ctx):
        _check_input(Z, mask, ctx)
        h = self.embed(Z, mask, ctx)
        bias = self.attention_bias(ctx.adjacency)
        for li, layer in enumerate(self.layers):
            h = layer(h, bias)
            if not torch.isfinite(h).all():
                raise DenoiserError(f"non-finite activations after layer {li}")
        h = self.norm(h)
        return ReverseStepOutput(self.mu_head(h), self.logvar_head(h))

    def predict(self, Z, mask, t, ctx, rng=None) -> ReverseStepOutput:
        return self(Z, mask, ctx)

    def param_inventory(self) -> list[tuple[str, list[int]]]:
        return [(name, list(p.shape)) for name, p in self.named_parameters()]

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def save_checkpoint(path, model: AttentionDenoiser, **extra) -> None:
    payload = {
        "format": "gibbsdiff-attention-v1",
        "config": model.config.to_dict(),
        "inventory": model.param_inventory(),
        "state_dict": model.state_dict(),
    }
    payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[AttentionDenoiser, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != "gibbsdiff-attention-v1":
        raise DenoiserError(f"{path} is not an attention-denoiser checkpoint")
    model = AttentionDenoiser(AttentionDenoiserConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload
