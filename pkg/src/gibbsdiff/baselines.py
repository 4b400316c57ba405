"""Enumeration oracles and non-learned baselines (QUBO encodings, annealing, greedy coloring)."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .energy import energy_discrete_batch
from .problems import ProblemInstance, sudoku_groups

MAX_ENUM_BITS = 20
SUDOKU_QUBO_LAMBDA = 3.0


class EnumerationError(ValueError):
    pass


# --------------------------------------------------------------------------
# Exhaustive enumeration
# --------------------------------------------------------------------------


def _enumerate(instance: ProblemInstance) -> np.ndarray:
    """All assignments agreeing with the givens, shape (K^free, n)."""
    free = np.flatnonzero(instance.free_mask)
    bits = len(free) * math.log2(max(instance.K, 2))
    if bits > MAX_ENUM_BITS:
        raise EnumerationError(
            f"{len(free)} free variables with K={instance.K} need {bits:.1f} bits; "
            f"enumeration is limited to {MAX_ENUM_BITS}"
        )
    base = np.zeros(instance.n_vars, dtype=np.int64)
    for i, v in instance.givens.items():
        base[i] = v
    vals = np.array(list(itertools.product(range(instance.K), repeat=len(free))), dtype=np.int64)
    out = np.repeat(base[None], len(vals), axis=0)
    if len(free):
        out[:, free] = vals
    return out


def brute_force(instance: ProblemInstance, lam=None, atol: float = 1e-9):
    """Return ``(optimal energy, optimal assignments (M, n))`` by full scan."""
    A = _enumerate(instance)
    energy = energy_discrete_batch(A, instance, lam)[0]
    best = float(energy.min())
    return best, A[energy <= best + atol]


@dataclass(frozen=True)
class BoltzmannTable:
    assignments: np.ndarray
    probs: np.ndarray
    energies: np.ndarray
    log_Z: float

    @property
    def Z(self) -> float:
        return math.exp(self.log_Z) if self.log_Z < 700 else math.inf

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return {tuple(int(v) for v in a): float(p) for a, p in zip(self.assignments, self.probs)}


def boltzmann_exact(instance: ProblemInstance, tau: float, lam=None) -> BoltzmannTable:
    if not tau > 0:
        raise EnumerationError("temperature must be positive")
    A = _enumerate(instance)
    energy = energy_discrete_batch(A, instance, lam)[0]
    logits = -energy / tau
    log_Z = float(logsumexp(logits))
    return BoltzmannTable(A, np.exp(logits - log_Z), energy, log_Z)


# --------------------------------------------------------------------------
# QUBO encodings
# --------------------------------------------------------------------------


@dataclass
class Qubo:
    """E(x) = constant + sum_i h_i x_i + sum_{i<j} q_ij x_i x_j, with some bits clamped.

    ``ground`` is the energy every valid full encoding of a feasible solution
    attains; ``penalty(x) = energy(x) - ground`` is zero exactly on those.
    """

    n_bits: int
    linear: dict[int, float] = field(default_factory=dict)
    quadratic: dict[tuple[int, int], float] = field(default_factory=dict)
    clamped: dict[int, int] = field(default_factory=dict)
    constant: float = 0.0
    ground: float = 0.0

    def __post_init__(self):
        quad: dict[tuple[int, int], float] = {}
        for (i, j), v in self.quadratic.items():
            if i == j:
                # x_i^2 = x_i on binaries
                self.linear[i] = self.linear.get(i, 0.0) + v
                continue
            key = (min(i, j), max(i, j))
            quad[key] = quad.get(key, 0.0) + v
        self.quadratic = quad
        for i in list(self.linear) + [k for pair in quad for k in pair] + list(self.clamped):
            if not 0 <= i < self.n_bits:
                raise ValueError(f"bit index {i} outside [0, {self.n_bits})")
        if any(v not in (0, 1) for v in self.clamped.values()):
            raise ValueError("clamped bits take values 0 or 1")

    def free_bits(self) -> np.ndarray:
        mask = np.ones(self.n_bits, dtype=bool)
        mask[list(self.clamped)] = False
        return np.flatnonzero(mask)

    def with_clamps(self, x) -> np.ndarray:
        x = np.array(x, dtype=np.int64)
        for i, v in self.clamped.items():
            x[..., i] = v
        return x

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        h = np.zeros(self.n_bits)
        for i, v in self.linear.items():
            h[i] += v
        J = np.zeros((self.n_bits, self.n_bits))
        for (i, j), v in self.quadratic.items():
            J[i, j] += v
            J[j, i] += v
        return h, J

    def energy(self, x) -> np.ndarray | float:
        """Energy of one bitstring (n_bits,) or a batch (B, n_bits); clamps are enforced."""
        x = self.with_clamps(x).astype(float)
        h, J = self.dense()
        e = self.constant + x @ h + 0.5 * np.einsum("...i,ij,...j->...", x, J, x)
        return float(e) if np.ndim(e) == 0 else e

    def penalty(self, x):
        return self.energy(x) - self.ground

    def freeze(self) -> "Qubo":
        """Fold the clamped bits into linear and constant terms."""
        lin = {i: v for i, v in self.linear.items() if i not in self.clamped}
        const = self.constant + sum(v * self.clamped[i] for i, v in self.linear.items() if i in self.clamped)
        quad = {}
        for (i, j), v in self.quadratic.items():
            ci, cj = i in self.clamped, j in self.clamped
            if ci and cj:
                const += v * self.clamped[i] * self.clamped[j]
            elif ci:
                lin[j] = lin.get(j, 0.0) + v * self.clamped[i]
            elif cj:
                lin[i] = lin.get(i, 0.0) + v * self.clamped[j]
            else:
                quad[(i, j)] = v
        return Qubo(self.n_bits, lin, quad, dict(self.clamped), const, self.ground)

    def to_triplets(self) -> str:
        """Sparse ``i j value`` lines (diagonal = linear); clamps and constant as comments."""
        lines = [f"# n_bits {self.n_bits}", f"# constant {self.constant!r}", f"# ground {self.ground!r}"]
        lines += [f"# clamp {i} {v}" for i, v in sorted(self.clamped.items())]
        lines += [f"{i} {i} {v!r}" for i, v in sorted(self.linear.items()) if v != 0]
        lines += [f"{i} {j} {v!r}" for (i, j), v in sorted(self.quadratic.items()) if v != 0]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_triplets(cls, text: str) -> "Qubo":
        n_bits, constant, ground, clamped, lin, quad = None, 0.0, 0.0, {}, {}, {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            parts = raw.split()
            if not parts:
                continue
            if parts[0] == "#":
                if parts[1] == "n_bits":
                    n_bits = int(parts[2])
                elif parts[1] == "constant":
                    constant = float(parts[2])
                elif parts[1] == "ground":
                    ground = float(parts[2])
                elif parts[1] == "clamp":
                    clamped[int(parts[2])] = int(parts[3])
                continue
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 'i j value'")
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
            if i == j:
                lin[i] = lin.get(i, 0.0) + v
            else:
                quad[(i, j)] = quad.get((i, j), 0.0) + v
        if n_bits is None:
            raise ValueError("missing '# n_bits' header")
        return cls(n_bits, lin, quad, clamped, constant, ground)


def onehot_bits(assign, K: int) -> np.ndarray:
    a = np.asarray(assign, dtype=np.int64)
    bits = np.zeros(a.shape[:-1] + (a.shape[-1] * K,), dtype=np.int64)
    idx = np.arange(a.shape[-1]) * K + a
    np.put_along_axis(bits, np.broadcast_to(idx, a.shape), 1, axis=-1)
    return bits


def decode_bits(bits, n: int, K: int) -> np.ndarray | None:
    """Assignment encoded by ``bits`` if every variable has exactly one bit set, else None."""
    b = np.asarray(bits).reshape(n, K)
    if not (b.sum(axis=1) == 1).all():
        return None
    return b.argmax(axis=1)


@lru_cache(maxsize=4)
def sudoku_conflict_pairs(side: int) -> tuple[tuple[int, int], ...]:
    """Conflicting (bit, bit) pairs for a side x side board, bits indexed cell * side + digit."""
    pairs = set()
    for group in sudoku_groups(side):
        for a, b in itertools.combinations(group, 2):
            for d in range(side):
                pairs.add((a * side + d, b * side + d))
    for cell in range(side * side):
        for d1, d2 in itertools.combinations(range(side), 2):
            pairs.add((cell * side + d1, cell * side + d2))
    return tuple(sorted((min(p), max(p)) for p in pairs))


def qubo_from_sudoku(instance: ProblemInstance, lam: float = SUDOKU_QUBO_LAMBDA) -> Qubo:
    if instance.family != "sudoku":
        raise ValueError("qubo_from_sudoku needs a sudoku instance")
    side = instance.K
    n_cells = instance.n_vars
    linear = {b: -1.0 for b in range(n_cells * side)}
    quad = {p: float(lam) for p in sudoku_conflict_pairs(side)}
    clamped = {}
    for cell, d in instance.givens.items():
        for k in range(side):
            clamped[cell * side + k] = int(k == d)
    return Qubo(n_cells * side, linear, quad, clamped, 0.0, ground=-float(n_cells))


def qubo_from_coloring(instance: ProblemInstance) -> Qubo:
    """One-hot penalty sum_v (1 - sum_k x_vk)^2 expanded, plus same-color edge products."""
    if instance.family != "coloring":
        raise ValueError("qubo_from_coloring needs a coloring instance")
    K, n = instance.K, instance.n_vars
    # (1 - s)^2 = 1 - 2 s + s^2 and s^2 = sum_k x_k + 2 sum_{k<l} x_k x_l on binaries
    linear = {v * K + k: -1.0 for v in range(n) for k in range(K)}
    quad: dict[tuple[int, int], float] = {}
    for v in range(n):
        for k, l in itertools.combinations(range(K), 2):
            quad[(v * K + k, v * K + l)] = 2.0
    for u, v in instance.edges:
        for k in range(K):
            key = (min(u, v) * K + k, max(u, v) * K + k)
            quad[key] = quad.get(key, 0.0) + 1.0
    clamped = {}
    for v, c in instance.givens.items():
        for k in range(K):
            clamped[v * K + k] = int(k == c)
    return Qubo(n * K, linear, quad, clamped, float(n), ground=0.0)


# --------------------------------------------------------------------------
# Simulated annealing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnealConfig:
    sweeps: int = 1000
    T0: float = 1.0
    T_end: float = 0.01
    restarts: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.sweeps < 1:
            raise ValueError("sweeps must be >= 1")
        if not 0 < self.T_end <= self.T0:
            raise ValueError("need 0 < T_end <= T0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    def temperature(self, sweep: int) -> float:
        if self.sweeps == 1:
            return self.T_end
        return self.T0 * (self.T_end / self.T0) ** (sweep / (self.sweeps - 1))


@dataclass
class AnnealResult:
    best_bits: np.ndarray
    best_energy: float
    trace: np.ndarray  # (sweeps,) lowest current energy over restarts after each sweep
    restart_best: np.ndarray  # (restarts,)


def simulated_annealing(qubo: Qubo, config: AnnealConfig = AnnealConfig()) -> AnnealResult:
    """Single-bit-flip Metropolis sweeps, all restarts advanced together.

    Each restart draws its initial state and acceptance uniforms from its own
    child stream of ``config.seed``. Clamped bits are never proposed.
    """
    q = qubo.freeze()
    h, J = q.dense()
    free = q.free_bits()
    R = config.restarts
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(R)]
    x = np.zeros((R, q.n_bits))
    for i, v in q.clamped.items():
        x[:, i] = v
    for r in range(R):
        x[r, free] = rngs[r].integers(0, 2, size=len(free))
    field_ = h + x @ J  # local field h_i + sum_j J_ij x_j
    E = np.array([q.energy(row) for row in x])
    best_E, best_x = E.copy(), x.copy()
    trace = np.empty(config.sweeps)
    for s in range(config.sweeps):
        T = config.temperature(s)
        u = np.stack([g.random(len(free)) for g in rngs], axis=1)  # (free, R)
        for k, i in enumerate(free):
            delta = (1.0 - 2.0 * x[:, i]) * field_[:, i]
            accept = (delta <= 0) | (u[k] < np.exp(-np.maximum(delta, 0.0) / T))
            if not accept.any():
                continue
            step = np.where(accept, 1.0 - 2.0 * x[:, i], 0.0)
            x[:, i] += step
            field_ += step[:, None] * J[i][None, :]
            E += np.where(accept, delta, 0.0)
            better = E < best_E - 1e-12
            if better.any():
                best_E[better] = E[better]
                best_x[better] = x[better]
        trace[s] = E.min()
    r = int(np.argmin(best_E))
    # recompute from scratch to shed accumulated rounding
    best = float(q.energy(best_x[r]))
    return AnnealResult(best_x[r].astype(np.int64), best, trace, best_E)


# --------------------------------------------------------------------------
# Greedy coloring
# --------------------------------------------------------------------------


def greedy_coloring(edges, k: int, n: int | None = None) -> np.ndarray | None:
    """Largest-degree-first greedy coloring with the smallest free color; None on failure."""
    if k < 1:
        raise ValueError("k must be >= 1")
    edges = list(edges)
    if n is None:
        n = 1 + max((max(e) for e in edges), default=-1)
    adj: list[set[int]] = [set() for _ in range(n)]
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    order = sorted(range(n), key=lambda v: (-len(adj[v]), v))
    color = np.full(n, -1, dtype=np.int64)
    for v in order:
        used = {color[u] for u in adj[v]}
        c = next((c for c in range(k) if c not in used), None)
        if c is None:
            return None
        color[v] = c
    return color
