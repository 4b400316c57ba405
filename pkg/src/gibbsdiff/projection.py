"""Two-component PCA projection of solver trajectories over the unfixed variables."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .problems import ProblemInstance
from .state import softmax_decode


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class PCAMap:
    mean: np.ndarray
    components: np.ndarray  # (c, d), orthonormal rows
    explained_variance: np.ndarray
    explained_ratio: np.ndarray

    def transform(self, points) -> np.ndarray:
        P = np.atleast_2d(np.asarray(points, dtype=float))
        return (P - self.mean) @ self.components.T


def pca_fit(points, components: int = 2) -> PCAMap:
    """Top principal directions of the sample covariance.

    Each component is signed so its largest-magnitude entry is positive
    (first such entry on ties), which keeps exported coordinates reproducible.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2:
        raise ProjectionError("points must be a 2D array (count, dimension)")
    if P.shape[0] < max(2, components):
        raise ProjectionError(f"need at least {max(2, components)} points, got {P.shape[0]}")
    if P.shape[1] < components:
        raise ProjectionError(f"dimension {P.shape[1]} is below the {components} requested components")
    mean = P.mean(axis=0)
    C = np.cov(P - mean, rowvar=False, bias=False)
    C = np.atleast_2d(C)
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(vals)[::-1][:components]
    comps = vecs[:, order].T.copy()
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1
    var = np.clip(vals[order], 0.0, None)
    total = np.clip(vals, 0.0, None).sum()
    ratio = var / total if total > 0 else np.zeros_like(var)
    return PCAMap(mean, comps, var, ratio)


def reduce_state(X: np.ndarray, free: np.ndarray) -> np.ndarray:
    """(..., n, K) probabilities -> (..., U*K) over the unfixed rows."""
    X = np.asarray(X, dtype=float)
    return X[..., free, :].reshape(*X.shape[:-2], -1)


def background_cloud(instance: ProblemInstance, target, n_background: int, seed: int, corruption=(0.1, 0.9)):
    """Random assignments plus partially corrupted targets, as one-hot (N, n, K) arrays.

    Half of the cloud (rounded up) is uniformly random on the unfixed
    variables; the rest copies ``target`` and redraws a uniform fraction in
    ``corruption`` of the unfixed variables.
    """
    rng = np.random.default_rng(seed)
    free = np.flatnonzero(instance.free_mask)
    K = instance.K
    target = np.asarray(target, dtype=np.int64)
    n_random = (n_background + 1) // 2
    A = np.repeat(target[None], n_background, axis=0)
    A[:n_random, free] = rng.integers(0, K, size=(n_random, len(free)))
    lo, hi = corruption
    for b in range(n_random, n_background):
        frac = rng.uniform(lo, hi)
        count = max(1, int(round(frac * len(free))))
        cells = rng.choice(free, size=count, replace=False)
        A[b, cells] = rng.integers(0, K, size=count)
    return np.eye(K)[A], A


def export_trajectory(
    trajectories,
    instance: ProblemInstance,
    target,
    out_dir,
    n_background: int = 2000,
    seed: int = 0,
    corruption=(0.1, 0.9),
) -> dict:
    """Fit PCA on a background cloud and write points.csv, background.csv and anchors.csv.

    ``trajectories`` is a list of Trajectory objects; when logits were kept,
    the per-step softmax rows are projected, otherwise one-hot decodes.
    """
    free = np.flatnonzero(instance.free_mask)
    if free.size == 0:
        raise ProjectionError("instance has no unfixed variables to project")
    K = instance.K
    target = np.asarray(target, dtype=np.int64)
    bg_X, bg_A = background_cloud(instance, target, n_background, seed, corruption)
    fmap = pca_fit(reduce_state(bg_X, free))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    bg_xy = fmap.transform(reduce_state(bg_X, free))
    bg_acc = (bg_A[:, free] == target[free]).sum(axis=1)
    with open(out / "background.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "accuracy"])
        for (x, y), a in zip(bg_xy, bg_acc):
            w.writerow([repr(float(x)), repr(float(y)), int(a)])

    rows = []
    for r, traj in enumerate(trajectories):
        for pos, t in enumerate(traj.ts):
            if traj.logits:
                probs = softmax_decode(traj.logits[pos]).numpy()
            else:
                probs = np.eye(K)[traj.assignments[pos]]
            xy = fmap.transform(reduce_state(probs, free))
            acc = (traj.assignments[pos][:, free] == target[free]).sum(axis=1)
            for b in range(xy.shape[0]):
                rows.append((r, b, t, float(xy[b, 0]), float(xy[b, 1]), int(acc[b])))
    with open(out / "points.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "chain", "t", "x", "y", "accuracy"])
        for run, chain, t, x, y, a in rows:
            w.writerow([run, chain, t, repr(x), repr(y), a])

    target_xy = fmap.transform(reduce_state(np.eye(K)[target], free))[0]
    noise_xy = fmap.transform(np.full(len(free) * K, 1.0 / K))[0]
    with open(out / "anchors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "x", "y"])
        w.writerow(["target", repr(float(target_xy[0])), repr(float(target_xy[1]))])
        w.writerow(["noise", repr(float(noise_xy[0])), repr(float(noise_xy[1]))])
    return {
        "map": fmap,
        "target_xy": target_xy,
        "noise_xy": noise_xy,
        "n_points": len(rows),
        "files": [str(out / f) for f in ("points.csv", "background.csv", "anchors.csv")],
    }
