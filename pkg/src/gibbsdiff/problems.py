"""Problem instances: Sudoku, graph coloring, MIS and MaxCut.

Every instance is a set of variables sharing one domain ``{0, ..., K-1}``,
a list of typed constraints with per-constraint penalty weights, an optional
objective and a map of clamped givens.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ALL_DIFFERENT = "all_different"
NOT_EQUAL = "not_equal"
AT_MOST_ONE = "at_most_one"
CONSTRAINT_KINDS = (ALL_DIFFERENT, NOT_EQUAL, AT_MOST_ONE)

MAXCUT_EDGES = "maxcut_edges"
MIS_SET_SIZE = "mis_set_size"

FAMILIES = ("sudoku", "coloring", "mis", "maxcut")

DEFAULT_COP_LAMBDA = 1.01


class InstanceError(ValueError):
    """Raised for malformed instances or unparsable instance files."""


@dataclass(frozen=True)
class Constraint:
    kind: str
    scope: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise InstanceError(f"unknown constraint kind {self.kind!r}")
        if len(set(self.scope)) != len(self.scope):
            raise InstanceError(f"duplicate index in scope {self.scope}")
        if self.kind in (NOT_EQUAL, AT_MOST_ONE) and len(self.scope) != 2:
            raise InstanceError(f"{self.kind} needs exactly two distinct variables")


@dataclass(frozen=True)
class ProblemInstance:
    family: str
    n_vars: int
    K: int
    constraints: tuple[Constraint, ...]
    penalty_weights: tuple[float, ...]
    objective: str | None = None
    edges: tuple[tuple[int, int], ...] = ()
    givens: dict[int, int] = field(default_factory=dict)
    positions: tuple[tuple[int, ...], ...] = ()
    instance_id: str = ""
    seed: int | None = None
    edge_prob: float | None = None

    def __post_init__(self):
        if self.n_vars < 1 or self.K < 1:
            raise InstanceError("instance needs at least one variable and one value")
        if len(self.penalty_weights) != len(self.constraints):
            raise InstanceError("one penalty weight per constraint is required")
        for lam in self.penalty_weights:
            if lam < 0:
                raise InstanceError(f"negative penalty weight {lam}")
        for c in self.constraints:
            for i in c.scope:
                if not 0 <= i < self.n_vars:
                    raise InstanceError(f"scope index {i} outside [0, {self.n_vars})")
            if c.kind == ALL_DIFFERENT and len(c.scope) > self.K:
                raise InstanceError("AllDifferent scope longer than the domain")
            if c.kind == AT_MOST_ONE and self.K != 2:
                raise InstanceError("AtMostOneSelected requires K = 2")
        for i, v in self.givens.items():
            if not 0 <= i < self.n_vars or not 0 <= v < self.K:
                raise InstanceError(f"given ({i}, {v}) out of range")
        if self.positions and len(self.positions) != self.n_vars:
            raise InstanceError("positions must list one index tuple per variable")

    @property
    def free_mask(self) -> np.ndarray:
        """Boolean vector, True for variables that are not clamped."""
        free = np.ones(self.n_vars, dtype=bool)
        free[list(self.givens)] = False
        return free

    def position_array(self) -> np.ndarray:
        if self.positions:
            return np.asarray(self.positions, dtype=np.int64)
        return np.arange(self.n_vars, dtype=np.int64)[:, None]

    def to_dict(self) -> dict:
        doc = {
            "family": self.family,
            "n": self.n_vars,
            "K": self.K,
            "seed": self.seed,
            "instance_id": self.instance_id,
        }
        if self.family == "sudoku":
            doc["givens"] = serialize_sudoku(self)
        else:
            doc["edges"] = [list(e) for e in self.edges]
            doc["edge_prob"] = self.edge_prob
            if self.penalty_weights:
                doc["lambda"] = self.penalty_weights[0]
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def instance_from_dict(doc: dict) -> ProblemInstance:
    family = doc["family"]
    if family == "sudoku":
        inst = load_sudoku(doc["givens"])
    else:
        edges = [tuple(e) for e in doc["edges"]]
        inst = graph_instance(
            family,
            doc["n"],
            edges,
            k=doc["K"],
            lam=doc.get("lambda"),
            seed=doc.get("seed"),
            edge_prob=doc.get("edge_prob"),
            instance_id=doc.get("instance_id", ""),
        )
    if inst.n_vars != doc["n"] or inst.K != doc["K"]:
        raise InstanceError("instance document disagrees with its own n/K fields")
    return inst


# --------------------------------------------------------------------------
# Sudoku
# --------------------------------------------------------------------------


def sudoku_groups(side: int) -> list[tuple[int, ...]]:
    box = math.isqrt(side)
    rows = [tuple(r * side + c for c in range(side)) for r in range(side)]
    cols = [tuple(r * side + c for r in range(side)) for c in range(side)]
    boxes = []
    for br in range(box):
        for bc in range(box):
            boxes.append(
                tuple(
                    (br * box + a) * side + bc * box + b
                    for a in range(box)
                    for b in range(box)
                )
            )
    return rows + cols + boxes


def load_sudoku(text: str, side: int | None = None) -> ProblemInstance:
    """Parse a board string, ``'0'`` marks a blank cell.

    Digits ``1..side`` map to values ``0..side-1``.
    """
    text = text.strip()
    if side is None:
        side = {16: 4, 81: 9}.get(len(text))
        if side is None:
            raise InstanceError(f"expected 16 or 81 characters, got {len(text)}")
    if side not in (4, 9):
        raise InstanceError(f"unsupported Sudoku side {side}")
    if len(text) != side * side:
        raise InstanceError(
            f"expected {side * side} characters, got {len(text)}"
        )
    givens = {}
    for pos, ch in enumerate(text):
        if not ch.isdigit() or int(ch) > side:
            raise InstanceError(f"invalid character {ch!r} at position {pos}")
        if ch != "0":
            givens[pos] = int(ch) - 1
    groups = sudoku_groups(side)
    constraints = tuple(Constraint(ALL_DIFFERENT, g) for g in groups)
    return ProblemInstance(
        family="sudoku",
        n_vars=side * side,
        K=side,
        constraints=constraints,
        penalty_weights=(1.0,) * len(constraints),
        givens=givens,
        positions=tuple((p // side, p % side) for p in range(side * side)),
    )


def serialize_sudoku(instance: ProblemInstance) -> str:
    cells = ["0"] * instance.n_vars
    for i, v in instance.givens.items():
        cells[i] = str(v + 1)
    return "".join(cells)


def read_sudoku_file(path) -> list[ProblemInstance]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        # tolerate "puzzle,solution" csv rows
        puzzle = line.split(",")[0].replace(".", "0")
        try:
            inst = load_sudoku(puzzle)
        except InstanceError as exc:
            raise InstanceError(f"line {lineno}: {exc}") from None
        out.append(_with_id(inst, f"{Path(path).stem}:{lineno}"))
    return out


def _with_id(inst: ProblemInstance, instance_id: str) -> ProblemInstance:
    from dataclasses import replace

    return replace(inst, instance_id=instance_id)


# --------------------------------------------------------------------------
# Graph families
# --------------------------------------------------------------------------


def canonical_edges(edges) -> tuple[tuple[int, int], ...]:
    out = set()
    for u, v in edges:
        u, v = int(u), int(v)
        if u == v:
            raise InstanceError(f"self-loop on vertex {u}")
        out.add((min(u, v), max(u, v)))
    return tuple(sorted(out))


def graph_instance(
    family: str,
    n: int,
    edges,
    k: int = 3,
    lam: float | None = None,
    seed: int | None = None,
    edge_prob: float | None = None,
    instance_id: str = "",
) -> ProblemInstance:
    """Build a coloring / MIS / MaxCut instance from an explicit edge list."""
    if n < 2:
        raise InstanceError("graph instances need n >= 2")
    edges = canonical_edges(edges)
    for u, v in edges:
        if v >= n:
            raise InstanceError(f"edge ({u}, {v}) references a vertex >= n={n}")
    if family == "coloring":
        K, objective = k, None
        constraints = tuple(Constraint(NOT_EQUAL, e) for e in edges)
        lam = 1.0 if lam is None else lam
    elif family == "mis":
        K, objective = 2, MIS_SET_SIZE
        constraints = tuple(Constraint(AT_MOST_ONE, e) for e in edges)
        lam = DEFAULT_COP_LAMBDA if lam is None else lam
    elif family == "maxcut":
        K, objective = 2, MAXCUT_EDGES
        constraints = ()
        lam = DEFAULT_COP_LAMBDA if lam is None else lam
    else:
        raise InstanceError(f"unknown graph family {family!r}")
    return ProblemInstance(
        family=family,
        n_vars=n,
        K=K,
        constraints=constraints,
        penalty_weights=(float(lam),) * len(constraints),
        objective=objective,
        edges=edges,
        instance_id=instance_id,
        seed=seed,
        edge_prob=edge_prob,
    )


def er_edges(n: int, edge_prob: float, seed: int) -> tuple[tuple[int, int], ...]:
    if not 0.0 <= edge_prob <= 1.0:
        raise InstanceError(f"edge_prob {edge_prob} outside [0, 1]")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < edge_prob
    return tuple((int(a), int(b)) for a, b in zip(iu[keep], ju[keep]))


def gen_graph_instance(
    family: str,
    n: int,
    edge_prob: float,
    seed: int,
    k: int = 3,
    lam: float | None = None,
) -> ProblemInstance:
    """Erdos-Renyi G(n, p) instance, deterministic in (family, n, p, seed)."""
    if n < 2:
        raise InstanceError("graph instances need n >= 2")
    edges = er_edges(n, edge_prob, seed)
    return graph_instance(
        family,
        n,
        edges,
        k=k,
        lam=lam,
        seed=seed,
        edge_prob=edge_prob,
        instance_id=f"{family}-n{n}-p{edge_prob:g}-s{seed}",
    )


def load_dimacs(path) -> tuple[int, list[tuple[int, int]]]:
    """Read a DIMACS ``p edge`` file into ``(n, edges)`` with 0-indexed vertices."""
    n = m = None
    edges = []
    seen = set()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0] == "c":
            continue
        if parts[0] == "p":
            if len(parts) != 4 or parts[1] not in ("edge", "col"):
                raise InstanceError(f"line {lineno}: malformed header {raw!r}")
            n, m = int(parts[2]), int(parts[3])
        elif parts[0] == "e":
            if n is None:
                raise InstanceError(f"line {lineno}: edge before 'p edge' header")
            if len(parts) != 3:
                raise InstanceError(f"line {lineno}: malformed edge line {raw!r}")
            u, v = int(parts[1]), int(parts[2])
            if not (1 <= u <= n and 1 <= v <= n):
                raise InstanceError(f"line {lineno}: vertex index out of range 1..{n}")
            if u == v:
                raise InstanceError(f"line {lineno}: self-loop on vertex {u}")
            key = (min(u, v) - 1, max(u, v) - 1)
            if key in seen:
                raise InstanceError(f"line {lineno}: duplicate edge {u} {v}")
            seen.add(key)
            edges.append(key)
        else:
            raise InstanceError(f"line {lineno}: unrecognised record {parts[0]!r}")
    if n is None:
        raise InstanceError("missing 'p edge n m' header")
    if len(edges) != m:
        raise InstanceError(f"header declares {m} edges, found {len(edges)}")
    return n, sorted(edges)


def write_dimacs(path, n: int, edges) -> None:
    lines = [f"p edge {n} {len(edges)}"]
    lines += [f"e {u + 1} {v + 1}" for u, v in edges]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Constraint graph
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstraintGraph:
    adjacency: np.ndarray  # (n, n) bool, symmetric, no self loops
    incidence: tuple[tuple[int, ...], ...]  # var -> constraint indices
    degree: np.ndarray  # deg_c(i)

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])

    def with_self_loops(self) -> np.ndarray:
        return self.adjacency | np.eye(len(self.adjacency), dtype=bool)


def constraint_scopes(instance: ProblemInstance) -> list[tuple[int, ...]]:
    """Scopes of every constraint, with MaxCut objective edges counted as constraints."""
    scopes = [c.scope for c in instance.constraints]
    if instance.objective == MAXCUT_EDGES:
        scopes += list(instance.edges)
    return scopes


def build_constraint_graph(instance: ProblemInstance) -> ConstraintGraph:
    n = instance.n_vars
    adj = np.zeros((n, n), dtype=bool)
    incidence: list[list[int]] = [[] for _ in range(n)]
    for j, scope in enumerate(constraint_scopes(instance)):
        idx = np.asarray(scope)
        adj[np.ix_(idx, idx)] = True
        for i in scope:
            incidence[i].append(j)
    np.fill_diagonal(adj, False)
    degree = np.array([len(x) for x in incidence], dtype=np.int64)
    return ConstraintGraph(adj, tuple(tuple(x) for x in incidence), degree)
