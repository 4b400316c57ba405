"""Mask-rate schedules and block (mask) selection strategies."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .energy import violation_scores
from .problems import ProblemInstance, build_constraint_graph, constraint_scopes
from .state import DTYPE, softmax_decode

SCHEDULE_KINDS = ("linear", "geometric")
STRATEGIES = ("uniform", "margin", "critical", "related")


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSchedule:
    kind: str = "geometric"
    rho_min: float = 0.3
    rho_max: float = 0.9
    T: int = 100

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise PolicyError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 < self.rho_min <= self.rho_max <= 1.0:
            raise PolicyError(f"need 0 < rho_min <= rho_max <= 1, got ({self.rho_min}, {self.rho_max})")
        if self.T < 0:
            raise PolicyError("T must be non-negative")

    def rate(self, t: int) -> float:
        return schedule_rate(self, t)


def schedule_rate(sched: MaskSchedule, t: int) -> float:
    if not 0 <= t <= sched.T:
        raise PolicyError(f"t={t} outside [0, {sched.T}]")
    if t == sched.T:
        return sched.rho_max
    if t == 0 or sched.T == 0:
        return sched.rho_min
    frac = t / sched.T
    if sched.kind == "linear":
        return sched.rho_min + (sched.rho_max - sched.rho_min) * frac
    return sched.rho_min * (sched.rho_max / sched.rho_min) ** frac


@dataclass(frozen=True)
class AdaptivePolicy:
    strategy: str = "uniform"
    eps: float = 1e-3

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise PolicyError(f"unknown mask strategy {self.strategy!r}")
        if self.eps <= 0:
            raise PolicyError("smoothing eps must be positive")


def margin_scores(Z: torch.Tensor) -> torch.Tensor:
    """|p(top1) - p(top2)| per variable, from the row softmax of ``Z``."""
    if Z.shape[-1] < 2:
        raise PolicyError("margin needs at least two domain values")
    top2 = softmax_decode(Z).topk(2, dim=-1).values
    return (top2[..., 0] - top2[..., 1]).abs()


def adaptive_rates(scores, rho: float, n: int | None = None, tol: float = 1e-6) -> np.ndarray:
    """Per-variable rates proportional to ``scores`` with mean ``rho``.

    Rates are clipped to 1 and the clipped excess is pushed onto the
    remaining entries (in proportion to their scores, or evenly when those
    scores are all zero) until the mean budget is met.
    """
    s = np.asarray(scores, dtype=float)
    if (s < 0).any():
        raise PolicyError("mask scores must be non-negative")
    n = s.size if n is None else n
    if n == 0:
        return s.copy()
    if s.sum() <= 0:
        return np.full(n, rho)
    s = s / s.max()  # scale-free, and keeps subnormal scores from overflowing
    target = min(rho, 1.0) * n
    r = target * s / s.sum()
    for _ in range(n + 1):
        clipped = r >= 1.0
        r = np.minimum(r, 1.0)
        excess = target - r.sum()
        if excess <= tol * n or clipped.all():
            break
        free = ~clipped
        w = s * free
        if w.sum() <= 0:
            w = free.astype(float)
        r = r + excess * w / w.sum()
    return r


def mask_log_prob(rates: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """log prod_i Bernoulli(m_i; r_i), summed over the last axis."""
    r = rates.to(DTYPE)
    on = torch.where(mask, torch.log(r), torch.log1p(-r))
    # rate-0 entries that are off contribute log 1 = 0 exactly
    on = torch.where(~mask & (r == 0), torch.zeros_like(on), on)
    return on.sum(dim=-1)


def calibrate_eta(instance: ProblemInstance, rho: float, degree=None, tol: float = 1e-6) -> float:
    """Constraint-level rate whose expected variable coverage is ``rho``."""
    if not 0.0 < rho <= 1.0:
        raise PolicyError("rho must lie in (0, 1]")
    if degree is None:
        degree = build_constraint_graph(instance).degree
    deg = np.asarray(degree)[instance.free_mask]
    if (deg == 0).any():
        warnings.warn(
            f"{int((deg == 0).sum())} free variables belong to no constraint; "
            "the related-variable strategy never masks them",
            stacklevel=2,
        )
        deg = deg[deg > 0]
    if deg.size == 0:
        return 1.0

    def coverage(eta):
        return float(np.mean(1.0 - (1.0 - eta) ** deg))

    if coverage(1.0) <= rho:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        c = coverage(mid)
        if abs(c - rho) < tol * 1e-3:
            return mid
        if c < rho:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class MaskSampler:
    """Samples block masks for a batch of chains on one instance.

    Caches the instance structure (free variables, scope incidence, degrees)
    so per-step sampling stays cheap.
    """

    def __init__(self, instance: ProblemInstance, policy: AdaptivePolicy, sched: MaskSchedule):
        self.instance = instance
        self.policy = policy
        self.sched = sched
        self.free = torch.as_tensor(instance.free_mask)
        if policy.strategy == "related":
            scopes = constraint_scopes(instance)
            inc = torch.zeros(len(scopes), instance.n_vars, dtype=DTYPE)
            for j, sc in enumerate(scopes):
                inc[j, list(sc)] = 1.0
            self.incidence = inc
            self.degree = build_constraint_graph(instance).degree
            self._eta_cache: dict[float, float] = {}

    def schedule_rates(self, t: int, batch: int) -> torch.Tensor:
        rho = schedule_rate(self.sched, t)
        return (self.free.to(DTYPE) * rho).expand(batch, -1).clone()

    def rates(self, t: int, Z: torch.Tensor) -> torch.Tensor | None:
        """Per-variable rates used by the reverse sampler (None for ``related``)."""
        B = Z.shape[0]
        strat = self.policy.strategy
        if strat == "uniform":
            return self.schedule_rates(t, B)
        if strat == "related":
            return None
        rho = schedule_rate(self.sched, t)
        free = self.instance.free_mask
        if strat == "margin":
            c = margin_scores(Z).detach().numpy()
            raw = [(row[free].max() - row[free]) + self.policy.eps if free.any() else row[free] for row in c]
        else:
            v = violation_scores(Z.detach().argmax(dim=-1).numpy(), self.instance)
            raw = [row[free] + self.policy.eps for row in v]
        out = torch.zeros(B, self.instance.n_vars, dtype=DTYPE)
        for b, s in enumerate(raw):
            out[b, torch.as_tensor(free)] = torch.as_tensor(adaptive_rates(s, rho), dtype=DTYPE)
        return out

    def eta(self, t: int) -> float:
        rho = schedule_rate(self.sched, t)
        if rho not in self._eta_cache:
            self._eta_cache[rho] = calibrate_eta(self.instance, rho, self.degree)
        return self._eta_cache[rho]

    def sample(self, t: int, Z: torch.Tensor, rng: torch.Generator):
        """Return ``(mask (B, n) bool, rates or None)`` for reverse step ``t``."""
        B, n = Z.shape[0], Z.shape[1]
        if self.policy.strategy == "related":
            eta = self.eta(t)
            C = self.incidence.shape[0]
            picked = (torch.rand(B, C, generator=rng, dtype=DTYPE) < eta).to(DTYPE)
            mask = (picked @ self.incidence) > 0 if C else torch.zeros(B, n, dtype=torch.bool)
            return mask & self.free, None
        r = self.rates(t, Z)
        mask = torch.rand(B, n, generator=rng, dtype=DTYPE) < r
        return mask & self.free, r


def sample_mask(
    policy: AdaptivePolicy,
    sched: MaskSchedule,
    t: int,
    Z: torch.Tensor,
    instance: ProblemInstance,
    rng: torch.Generator,
) -> torch.Tensor:
    """One-shot mask draw for a (B, n, K) or (n, K) state."""
    single = Z.dim() == 2
    Zb = Z[None] if single else Z
    mask, _ = MaskSampler(instance, policy, sched).sample(t, Zb, rng)
    return mask[0] if single else mask


def broadcast_mask(mask: torch.Tensor, K: int) -> torch.Tensor:
    """Variable-level mask (..., n) -> logit-level mask (..., n, K)."""
    return mask[..., None].expand(*mask.shape, K)
