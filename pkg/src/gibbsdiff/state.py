"""Logit-space states, simplex decoding and the clamped Gaussian base draw."""

from __future__ import annotations

import torch

from .problems import ProblemInstance

DTYPE = torch.float64

# softmax of (+G, -G, ...) is one-hot to double precision without overflow
CLAMP_LOGIT = 20.0


class StateError(ValueError):
    pass


def make_generator(seed: int | None) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(0 if seed is None else int(seed))
    return gen


def softmax_decode(Z: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax over the last axis. Works on (n, K) or (B, n, K)."""
    if not torch.isfinite(Z).all():
        raise StateError("logit state contains non-finite entries")
    shifted = Z - Z.max(dim=-1, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def argmax_assign(X: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest value
    return torch.argmax(X, dim=-1)


def onehot(assign, K: int) -> torch.Tensor:
    a = torch.as_tensor(assign, dtype=torch.long)
    return torch.nn.functional.one_hot(a, K).to(DTYPE)


def clamp_pattern(values, K: int, G: float = CLAMP_LOGIT) -> torch.Tensor:
    """Logit rows with +G at each value's column and -G elsewhere."""
    return G * (2.0 * onehot(values, K) - 1.0)


def given_tensors(instance: ProblemInstance, G: float = CLAMP_LOGIT):
    """``(frozen (n,) bool, pattern (n, K))`` for the instance's givens."""
    n, K = instance.n_vars, instance.K
    frozen = torch.zeros(n, dtype=torch.bool)
    pattern = torch.zeros(n, K, dtype=DTYPE)
    if instance.givens:
        idx = torch.tensor(sorted(instance.givens))
        vals = torch.tensor([instance.givens[i] for i in sorted(instance.givens)])
        frozen[idx] = True
        pattern[idx] = clamp_pattern(vals, K, G)
    return frozen, pattern


def init_base(
    instance: ProblemInstance,
    s: float = 1.0,
    rng: torch.Generator | None = None,
    batch: int | None = None,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Draw Z_T ~ N(0, s^2 I) and clamp given rows.

    ``bias`` is an optional constant (n, K) offset added before clamping;
    unused unless a caller supplies it.
    """
    if s <= 0:
        raise StateError("base scale s must be positive")
    shape = (instance.n_vars, instance.K) if batch is None else (batch, instance.n_vars, instance.K)
    Z = s * torch.randn(shape, generator=rng, dtype=DTYPE)
    if bias is not None:
        Z = Z + bias
    frozen, pattern = given_tensors(instance)
    if frozen.any():
        Z = torch.where(frozen[:, None], pattern, Z)
    return Z
