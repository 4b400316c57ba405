"""Mask-augmented forward and reverse kernels and the reverse sampling chain."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import integrate, special

from .denoisers import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    DenoiserContext,
    ReverseStepOutput,
    make_context,
)
from .energy import energy_discrete_batch
from .masking import AdaptivePolicy, MaskSampler, MaskSchedule, mask_log_prob
from .problems import ProblemInstance
from .state import DTYPE, clamp_pattern, init_base, make_generator


class ChainError(RuntimeError):
    def __init__(self, message, step=None, partial=None):
        super().__init__(message if step is None else f"step t={step}: {message}")
        self.step = step
        self.partial = partial


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------


def forward_step(Z_prev: torch.Tensor, mask: torch.Tensor, sigma: float, rng=None) -> torch.Tensor:
    """Z_t = Z_{t-1} + m~ * eps, eps ~ N(0, sigma^2 I); unmasked rows are copied."""
    noise = sigma * torch.randn(Z_prev.shape, generator=rng, dtype=DTYPE)
    return torch.where(mask[..., None], Z_prev + noise, Z_prev)


def log_prob_forward(Z_t, Z_prev, mask, sigma: float) -> torch.Tensor:
    """log p(Z_t | Z_{t-1}, m) over masked coordinates; -inf if an unmasked row moved."""
    m = mask[..., None].expand_as(Z_t)
    moved = ((Z_t != Z_prev) & ~m).flatten(-2).any(dim=-1)
    diff = (Z_t - Z_prev) * m
    d = m.flatten(-2).sum(dim=-1).to(DTYPE)
    lp = -0.5 * (diff**2).flatten(-2).sum(dim=-1) / sigma**2 - d * (0.5 * math.log(2 * math.pi) + math.log(sigma))
    return torch.where(moved, torch.full_like(lp, -math.inf), lp)


def clamp_logvar(logvar: torch.Tensor) -> torch.Tensor:
    return logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


def reverse_step(denoiser, Z_t, mask, t, ctx, rng=None, out: ReverseStepOutput | None = None):
    """One masked reverse transition; returns ``(Z_{t-1}, ReverseStepOutput)``.

    Masked rows are drawn as mu + sigma * eps (reparameterised, so gradients
    flow into mu and logvar); unmasked rows are copied bit-exactly. The
    returned output has mu = Z_t and logvar = -inf on unmasked rows.
    """
    if out is None:
        out = denoiser.predict(Z_t, mask, t, ctx, rng=rng)
    if not (torch.isfinite(out.mu).all() and not torch.isnan(out.logvar).any()):
        raise ChainError("denoiser produced non-finite parameters", step=t)
    logvar = clamp_logvar(out.logvar)
    eps = torch.randn(Z_t.shape, generator=rng, dtype=DTYPE)
    proposal = out.mu + torch.exp(0.5 * logvar) * eps
    m = mask[..., None]
    Z_prev = torch.where(m, proposal, Z_t)
    effective = ReverseStepOutput(
        torch.where(m, out.mu, Z_t),
        torch.where(m, logvar, torch.full_like(logvar, -math.inf)),
    )
    return Z_prev, effective


# --------------------------------------------------------------------------
# Reverse chain
# --------------------------------------------------------------------------


@dataclass
class ChainConfig:
    T: int = 100
    base_s: float = 1.0
    sigma_fwd: float = 1.0
    schedule: str = "geometric"
    rho_min: float = 0.3
    rho_max: float = 0.9
    strategy: str = "uniform"
    eps: float = 1e-3
    num_parallel: int = 1
    seed: int = 0
    keep_logits: bool = True
    lam: float | None = None

    def mask_schedule(self) -> MaskSchedule:
        return MaskSchedule(self.schedule, self.rho_min, self.rho_max, self.T)

    def policy(self) -> AdaptivePolicy:
        return AdaptivePolicy(self.strategy, self.eps)


@dataclass
class Trajectory:
    """States of a batch of chains, indexed from Z_T (position 0) down to Z_0."""

    ts: list[int]
    assignments: list[np.ndarray]  # each (B, n)
    energies: list[np.ndarray]  # discrete energy per chain
    feasible: list[np.ndarray]
    masks: list[np.ndarray] = field(default_factory=list)  # (B, n) per step
    logits: list[torch.Tensor] = field(default_factory=list)
    mask_logq: list[np.ndarray] = field(default_factory=list)
    mask_logp: list[np.ndarray] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.assignments[-1]

    @property
    def steps(self) -> int:
        return len(self.masks)

    def chain(self, b: int) -> dict:
        """Per-chain view as plain lists."""
        return {
            "t": list(self.ts),
            "assign": [a[b] for a in self.assignments],
            "energy": [float(e[b]) for e in self.energies],
            "mask": [m[b] for m in self.masks],
        }


class ChainRunner:
    """Holds the evolving state of a batch of reverse chains on one instance."""

    def __init__(self, denoiser, instance: ProblemInstance, config: ChainConfig, ctx: DenoiserContext | None = None):
        if isinstance(denoiser, torch.nn.Module):
            denoiser.eval()
        self.denoiser = denoiser
        self.instance = instance
        self.config = config
        self.ctx = make_context(instance) if ctx is None else ctx
        self.rng = make_generator(config.seed)
        self.sampler = MaskSampler(instance, config.policy(), config.mask_schedule())
        self.Z = init_base(instance, config.base_s, self.rng, batch=config.num_parallel)
        self.traj = Trajectory([], [], [], [])
        self._record(self.Z, config.T)

    def _record(self, Z, t):
        assign = Z.argmax(dim=-1).numpy()
        energy, _, _, feas = energy_discrete_batch(assign, self.instance, self.config.lam)
        self.traj.ts.append(t)
        self.traj.assignments.append(assign)
        self.traj.energies.append(energy)
        self.traj.feasible.append(feas)
        if self.config.keep_logits:
            self.traj.logits.append(Z.clone())

    @torch.no_grad()
    def step(self, t: int) -> None:
        mask, rates = self.sampler.sample(t, self.Z, self.rng)
        try:
            Z_prev, _ = reverse_step(self.denoiser, self.Z, mask, t, self.ctx, self.rng)
        except ChainError as exc:
            exc.partial = self.traj
            raise
        if rates is not None:
            self.traj.mask_logq.append(mask_log_prob(rates, mask).numpy())
            fwd = self.sampler.schedule_rates(t, mask.shape[0])
            self.traj.mask_logp.append(mask_log_prob(fwd, mask).numpy())
        self.traj.masks.append(mask.numpy())
        self.Z = Z_prev
        self._record(Z_prev, t - 1)


def dump_trajectory(traj: Trajectory, out_dir, chain: int = 0) -> list[Path]:
    """Write ``logits.csv`` (t, var, k, logit) and ``decoded.csv`` (t, var, decoded_value)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "decoded.csv"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "var", "decoded_value"])
        for t, A in zip(traj.ts, traj.assignments):
            for i, v in enumerate(A[chain]):
                w.writerow([t, i, int(v)])
    if traj.logits:
        paths.append(out / "logits.csv")
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "var", "k", "logit"])
            for t, Z in zip(traj.ts, traj.logits):
                for i, row in enumerate(Z[chain].tolist()):
                    for k, z in enumerate(row):
                        w.writerow([t, i, k, repr(z)])
    return paths


def sample_chain(denoiser, instance: ProblemInstance, config: ChainConfig, ctx=None) -> Trajectory:
    """Base draw, then T masked reverse steps t = T..1."""
    if config.T < 0:
        raise ChainError("T must be non-negative")
    runner = ChainRunner(denoiser, instance, config, ctx)
    for t in range(config.T, 0, -1):
        runner.step(t)
    return runner.traj


# --------------------------------------------------------------------------
# Mask-marginalisation check
# --------------------------------------------------------------------------


def argmax_probs(mu: np.ndarray, std: np.ndarray) -> np.ndarray:
    """P(argmax_k (mu_k + std_k eps_k) = k) for independent Gaussian coordinates."""
    K = len(mu)
    if K == 1:
        return np.ones(1)
    if K == 2:
        z = (mu[0] - mu[1]) / math.hypot(std[0], std[1])
        p0 = 0.5 * special.erfc(-z / math.sqrt(2))
        return np.array([p0, 1.0 - p0])
    out = np.empty(K)
    for k in range(K):
        others = [j for j in range(K) if j != k]

        def integrand(u, k=k, others=others):
            x = mu[k] + std[k] * u
            val = math.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)
            for j in others:
                val *= 0.5 * special.erfc(-(x - mu[j]) / (std[j] * math.sqrt(2)))
            return val

        out[k] = integrate.quad(integrand, -12, 12, epsabs=1e-12, limit=200)[0]
    return out / out.sum()


def exact_trajectory_distribution(denoiser, instance: ProblemInstance, config: ChainConfig) -> dict:
    """Law of the decoded trajectory X_T..X_0, with masks summed out step by step.

    Requires a denoiser whose output depends on Z_t only through argmax(Z_t);
    it is queried at the clamp pattern of each decoded state.
    """
    n, K = instance.n_vars, instance.K
    free = instance.free_mask
    sched = config.mask_schedule()
    ctx = make_context(instance)
    states = [tuple(s) for s in itertools.product(range(K), repeat=n)]
    states = [s for s in states if all(s[i] == v for i, v in instance.givens.items())]
    n_free = int(free.sum())
    p_base = {s: 1.0 / K**n_free for s in states}
    masks = [np.array(m, dtype=bool) for m in itertools.product([False, True], repeat=n)]
    masks = [m for m in masks if not (m & ~free).any()]

    kernel_cache: dict = {}

    def kernel(t, x):
        key = (t, x)
        if key in kernel_cache:
            return kernel_cache[key]
        rho = sched.rate(t)
        Zc = clamp_pattern(torch.tensor(x), K)[None]
        row = {}
        for m in masks:
            k_on = int(m.sum())
            pm = rho**k_on * (1 - rho) ** (n_free - k_on)
            if pm == 0:
                continue
            out = denoiser.predict(Zc, torch.as_tensor(m)[None], t, ctx)
            mu = out.mu[0].numpy()
            std = np.exp(0.5 * clamp_logvar(out.logvar[0]).numpy())
            per_var = [argmax_probs(mu[i], std[i]) if m[i] else None for i in range(n)]
            for y in states:
                p = pm
                for i in range(n):
                    if m[i]:
                        p *= per_var[i][y[i]]
                    elif y[i] != x[i]:
                        p = 0.0
                        break
                if p:
                    row[y] = row.get(y, 0.0) + p
        kernel_cache[key] = row
        return row

    dist = {(s,): p for s, p in p_base.items()}
    for t in range(config.T, 0, -1):
        nxt = {}
        for path, p in dist.items():
            for y, q in kernel(t, path[-1]).items():
                nxt[path + (y,)] = nxt.get(path + (y,), 0.0) + p * q
        dist = nxt
    return dist


def marginal_equivalence_check(
    denoiser,
    instance: ProblemInstance,
    T: int,
    n_samples: int,
    config: ChainConfig | None = None,
) -> float:
    """TV distance between sampled decoded trajectories and the mask-summed kernel."""
    if instance.n_vars * math.log2(max(instance.K, 2)) > 12 or instance.n_vars > 4 or T > 4:
        raise ChainError("instance too large for exhaustive mask marginalisation (n <= 4, T <= 4)")
    if T == 0:
        return 0.0
    base = config or ChainConfig()
    cfg = ChainConfig(**{**base.__dict__, "T": T, "num_parallel": n_samples, "keep_logits": False})
    traj = sample_chain(denoiser, instance, cfg)
    paths = np.stack(traj.assignments, axis=1)  # (B, T+1, n)
    counts: dict = {}
    for row in paths:
        key = tuple(tuple(int(v) for v in s) for s in row)
        counts[key] = counts.get(key, 0) + 1
    exact = exact_trajectory_distribution(denoiser, instance, cfg)
    keys = set(exact) | set(counts)
    return 0.5 * sum(abs(counts.get(k, 0) / n_samples - exact.get(k, 0.0)) for k in keys)
