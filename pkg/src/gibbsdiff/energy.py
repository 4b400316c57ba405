"""Relaxed and discrete energies, H = f + sum_j lambda_j phi_j.

Relaxed forms act on row-stochastic ``X`` (torch, differentiable); discrete
forms act on integer assignments (numpy, vectorized over a leading batch).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .problems import (
    ALL_DIFFERENT,
    AT_MOST_ONE,
    MAXCUT_EDGES,
    MIS_SET_SIZE,
    NOT_EQUAL,
    ProblemInstance,
)
from .state import DTYPE, onehot


class FormulationError(ValueError):
    pass


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyReport:
    total: float
    objective: float
    penalties: tuple[float, ...]
    feasible: bool

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Table of continuous penalties
# --------------------------------------------------------------------------


def penalty_alldiff(X: torch.Tensor, scope) -> torch.Tensor:
    """sum_k |1 - sum_{i in scope} x[i, k]|; requires |scope| == K."""
    K = X.shape[-1]
    if len(scope) != K:
        raise FormulationError(f"AllDifferent penalty needs |scope| == K ({len(scope)} != {K})")
    col = X[..., list(scope), :].sum(dim=-2)
    return (1.0 - col).abs().sum(dim=-1)


def penalty_not_equal(X: torch.Tensor, i: int, j: int) -> torch.Tensor:
    return (X[..., i, :] * X[..., j, :]).sum(dim=-1)


def penalty_at_most_one(X: torch.Tensor, i: int, j: int) -> torch.Tensor:
    if X.shape[-1] != 2:
        raise FormulationError("AtMostOneSelected penalty requires K = 2")
    return X[..., i, 1] * X[..., j, 1]


def _penalty(X, constraint):
    if constraint.kind == ALL_DIFFERENT:
        return penalty_alldiff(X, constraint.scope)
    i, j = constraint.scope
    if constraint.kind == NOT_EQUAL:
        return penalty_not_equal(X, i, j)
    return penalty_at_most_one(X, i, j)


def objective_relaxed(X: torch.Tensor, instance: ProblemInstance) -> torch.Tensor:
    """Relaxed objective; coincides with the discrete one on one-hot rows."""
    if instance.objective == MAXCUT_EDGES:
        if not instance.edges:
            return X.new_zeros(X.shape[:-2])
        u = [e[0] for e in instance.edges]
        v = [e[1] for e in instance.edges]
        same = (X[..., u, :] * X[..., v, :]).sum(dim=-1)
        return -(1.0 - same).sum(dim=-1)
    if instance.objective == MIS_SET_SIZE:
        return -X[..., :, 1].sum(dim=-1)
    return X.new_zeros(X.shape[:-2])


def _weights(instance: ProblemInstance, lam) -> np.ndarray:
    m = len(instance.constraints)
    if lam is None:
        return np.asarray(instance.penalty_weights, dtype=float)
    return np.full(m, float(lam))


def energy_relaxed(X: torch.Tensor, instance: ProblemInstance, lam=None) -> EnergyReport:
    """Energy report for a single relaxed assignment ``X`` of shape (n, K)."""
    weights = _weights(instance, lam)
    pens = [float(_penalty(X, c)) for c in instance.constraints]
    f = float(objective_relaxed(X, instance))
    total = f + float(np.dot(weights, pens)) if pens else f
    feasible = energy_discrete(X.argmax(dim=-1).numpy(), instance, lam).feasible
    return EnergyReport(total, f, tuple(pens), feasible)


def energy_relaxed_value(X: torch.Tensor, instance: ProblemInstance, lam=None) -> torch.Tensor:
    """Differentiable scalar (or batch) energy via the per-constraint loop."""
    weights = _weights(instance, lam)
    total = objective_relaxed(X, instance)
    for w, c in zip(weights, instance.constraints):
        total = total + w * _penalty(X, c)
    return total


# --------------------------------------------------------------------------
# Discrete energy
# --------------------------------------------------------------------------


def _check_assign(A: np.ndarray, instance: ProblemInstance) -> np.ndarray:
    A = np.asarray(A)
    if A.shape[-1] != instance.n_vars:
        raise AssignmentError(f"assignment has {A.shape[-1]} entries, expected {instance.n_vars}")
    if A.size and (A.min() < 0 or A.max() >= instance.K):
        raise AssignmentError(f"assignment value outside domain [0, {instance.K})")
    return A.astype(np.int64)


def penalty_matrix(A, instance: ProblemInstance) -> np.ndarray:
    """Discrete penalties phi_hat, shape (B, m), for a batch ``A`` of shape (B, n)."""
    A = np.atleast_2d(_check_assign(A, instance))
    B, m, K = A.shape[0], len(instance.constraints), instance.K
    out = np.zeros((B, m))
    kinds = [c.kind for c in instance.constraints]
    for kind in (NOT_EQUAL, AT_MOST_ONE):
        idx = [j for j, k in enumerate(kinds) if k == kind]
        if not idx:
            continue
        sc = np.array([instance.constraints[j].scope for j in idx])
        a, b = A[:, sc[:, 0]], A[:, sc[:, 1]]
        out[:, idx] = (a == b) if kind == NOT_EQUAL else (a == 1) & (b == 1)
    idx = [j for j, k in enumerate(kinds) if k == ALL_DIFFERENT]
    if idx:
        sc = [instance.constraints[j].scope for j in idx]
        if any(len(s) != K for s in sc):
            raise FormulationError("AllDifferent penalty needs |scope| == K")
        vals = A[:, np.array(sc)]  # (B, G, K)
        counts = (vals[..., None] == np.arange(K)).sum(axis=-2)
        out[:, idx] = np.abs(1 - counts).sum(axis=-1)
    return out


def objective_discrete(A, instance: ProblemInstance) -> np.ndarray:
    A = np.atleast_2d(_check_assign(A, instance))
    if instance.objective == MAXCUT_EDGES:
        if not instance.edges:
            return np.zeros(A.shape[0])
        e = np.asarray(instance.edges)
        return -(A[:, e[:, 0]] != A[:, e[:, 1]]).sum(axis=1).astype(float)
    if instance.objective == MIS_SET_SIZE:
        return -A.sum(axis=1).astype(float)
    return np.zeros(A.shape[0])


def energy_discrete_batch(A, instance: ProblemInstance, lam=None):
    """``(total, objective, penalty_sum_weighted, feasible)`` arrays over a batch."""
    pens = penalty_matrix(A, instance)
    f = objective_discrete(A, instance)
    w = _weights(instance, lam)
    weighted = pens @ w if pens.shape[1] else np.zeros(len(f))
    feasible = ~(pens > 0).any(axis=1)
    return f + weighted, f, weighted, feasible


def energy_discrete(X, instance: ProblemInstance, lam=None) -> EnergyReport:
    A = _check_assign(X, instance)
    if A.ndim != 1:
        raise AssignmentError("energy_discrete expects a single assignment; use energy_discrete_batch")
    pens = penalty_matrix(A[None], instance)[0]
    f = float(objective_discrete(A[None], instance)[0])
    total = f + float(np.dot(_weights(instance, lam), pens)) if len(pens) else f
    return EnergyReport(total, f, tuple(float(p) for p in pens), bool(not (pens > 0).any()))


def violation_scores(A, instance: ProblemInstance) -> np.ndarray:
    """Per-variable count of violated constraints (uncut edges for MaxCut).

    Accepts (n,) or (B, n); returns the matching shape.
    """
    A_arr = np.asarray(A)
    batch = np.atleast_2d(_check_assign(A_arr, instance))
    B, n = batch.shape
    v = np.zeros((B, n))
    pens = penalty_matrix(batch, instance)
    for j, c in enumerate(instance.constraints):
        viol = pens[:, j] > 0
        if viol.any():
            v[:, list(c.scope)] += viol[:, None]
    if instance.objective == MAXCUT_EDGES and instance.edges:
        e = np.asarray(instance.edges)
        uncut = batch[:, e[:, 0]] == batch[:, e[:, 1]]
        np.add.at(v.T, e[:, 0], uncut.T)
        np.add.at(v.T, e[:, 1], uncut.T)
    return v if A_arr.ndim == 2 else v[0]


# --------------------------------------------------------------------------
# Tensorized relaxed energy over a batch of same-shape instances
# --------------------------------------------------------------------------


class TensorEnergy:
    """Relaxed energy for one instance or a stack of instances with equal (n, K).

    Pairwise constraints become weighted adjacency matrices and AllDifferent
    groups become an incidence matrix, so ``__call__`` is a handful of einsums.
    """

    def __init__(self, instances, lam=None):
        if isinstance(instances, ProblemInstance):
            instances = [instances]
            self.stacked = False
        else:
            self.stacked = True
        n, K = instances[0].n_vars, instances[0].K
        if any(i.n_vars != n or i.K != K for i in instances):
            raise FormulationError("stacked instances must share n and K")
        B = len(instances)
        self.n, self.K = n, K
        ne = torch.zeros(B, n, n, dtype=DTYPE)
        amo = torch.zeros(B, n, n, dtype=DTYPE)
        cut = torch.zeros(B, n, n, dtype=DTYPE)
        mis = torch.zeros(B, n, dtype=DTYPE)
        n_groups = max(sum(c.kind == ALL_DIFFERENT for c in inst.constraints) for inst in instances)
        groups = torch.zeros(B, n_groups, n, dtype=DTYPE)
        gweights = torch.zeros(B, n_groups, dtype=DTYPE)
        for b, inst in enumerate(instances):
            w = _weights(inst, lam)
            g = 0
            for lamj, c in zip(w, inst.constraints):
                if c.kind == ALL_DIFFERENT:
                    if len(c.scope) != K:
                        raise FormulationError("AllDifferent penalty needs |scope| == K")
                    groups[b, g, list(c.scope)] = 1.0
                    gweights[b, g] = lamj
                    g += 1
                else:
                    i, j = c.scope
                    target = ne if c.kind == NOT_EQUAL else amo
                    target[b, i, j] += lamj
                    target[b, j, i] += lamj
            if inst.objective == MAXCUT_EDGES:
                for i, j in inst.edges:
                    cut[b, i, j] += 1.0
                    cut[b, j, i] += 1.0
            elif inst.objective == MIS_SET_SIZE:
                mis[b] = 1.0
        self.ne, self.amo, self.cut, self.mis = ne, amo, cut, mis
        self.groups, self.gweights = groups, gweights
        self.has_groups = n_groups > 0

    def __call__(self, X: torch.Tensor) -> torch.Tensor:
        """Energy per batch row. ``X`` is (B, n, K); a single instance broadcasts over B."""
        if not self.stacked:
            sl = slice(0, 1)
            ne, amo, cut, mis = self.ne[sl], self.amo[sl], self.cut[sl], self.mis[sl]
            groups, gweights = self.groups[sl], self.gweights[sl]
        else:
            ne, amo, cut, mis = self.ne, self.amo, self.cut, self.mis
            groups, gweights = self.groups, self.gweights
        gram = X @ X.transpose(-1, -2)  # (B, n, n) row inner products
        e = 0.5 * (ne * gram).sum(dim=(-1, -2))
        x1 = X[..., 1] if self.K > 1 else X[..., 0] * 0
        e = e + 0.5 * (amo * (x1[..., :, None] * x1[..., None, :])).sum(dim=(-1, -2))
        e = e - 0.5 * (cut * (1.0 - gram)).sum(dim=(-1, -2))
        e = e - (mis * x1).sum(dim=-1)
        if self.has_groups:
            colsum = groups @ X  # (B, G, K)
            e = e + (gweights * (1.0 - colsum).abs().sum(dim=-1)).sum(dim=-1)
        return e


def onehot_energy(assign, instance: ProblemInstance, lam=None) -> float:
    """Relaxed energy of the one-hot embedding of ``assign``."""
    X = onehot(assign, instance.K)
    return float(energy_relaxed_value(X, instance, lam))
