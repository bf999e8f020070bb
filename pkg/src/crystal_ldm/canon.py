"""Bond graphs, fragment decomposition and canonical atom ordering.

The canonical order comes from colour refinement seeded by element numbers,
followed by individualisation-refinement over the first non-singleton cell.
Every leaf of the search tree yields a relabelled graph. The
lexicographically smallest relabelling wins. Automorphisms found along the
way (leaves with equal certificates) prune sibling branches in the same
orbit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .crystal import CrystalStructure, pairwise_min_image
from .elements import COVALENT_RADII, is_metal

MAX_CANON_NODES = 64


class CanonError(RuntimeError):
    pass


@dataclass(frozen=True)
class BondGraph:
    colors: np.ndarray  # node colours (element numbers)
    edges: np.ndarray  # E x 2, i < j, sorted, unique

    def __post_init__(self):
        colors = np.asarray(self.colors, dtype=np.int64).reshape(-1)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        n = len(colors)
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ValueError("edge index out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
            edges = np.sort(edges, axis=1)
            edges = np.unique(edges, axis=0)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "edges", edges)

    @property
    def n(self) -> int:
        return len(self.colors)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges:
            adj[i].append(int(j))
            adj[j].append(int(i))
        return adj

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    def relabel(self, order) -> "BondGraph":
        """Graph whose node k is old node ``order[k]``."""
        order = np.asarray(order, dtype=np.int64)
        pos = np.empty_like(order)
        pos[order] = np.arange(len(order))
        return BondGraph(self.colors[order], pos[self.edges] if self.edges.size else self.edges)

    def same_as(self, other: "BondGraph") -> bool:
        return (np.array_equal(self.colors, other.colors)
                and self.edges.shape == other.edges.shape and np.array_equal(self.edges, other.edges))


def infer_bonds(s: CrystalStructure, factor: float = 1.2) -> BondGraph:
    """Bond i-j iff the minimum-image distance is within ``factor`` x radius sum."""
    _, dist = pairwise_min_image(s.frac, s.lattice)
    r = COVALENT_RADII[s.atom_types]
    thresh = factor * (r[:, None] + r[None, :])
    ii, jj = np.nonzero(np.triu(dist <= thresh, k=1))
    return BondGraph(s.atom_types, np.stack([ii, jj], axis=1))


def components(bg: BondGraph) -> list[np.ndarray]:
    """Connected components as sorted index arrays, in order of smallest member."""
    if bg.n == 0:
        return []
    e = bg.edges
    m = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(bg.n, bg.n)) if e.size else \
        coo_matrix((bg.n, bg.n))
    _, lab = connected_components(m, directed=False)
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(lab):
        groups.setdefault(int(c), []).append(i)
    return sorted((np.array(g) for g in groups.values()), key=lambda g: g[0])


# -- canonical labelling ----------------------------------------------------
def _refine(colors: list[int], adj: list[list[int]]) -> list[int]:
    """Equitable refinement; colours are ranks, so the result is label invariant."""
    cur = colors
    n_cells = len(set(cur))
    while True:
        sigs = [(cur[v], tuple(sorted(cur[u] for u in adj[v]))) for v in range(len(cur))]
        ranks = {s: k for k, s in enumerate(sorted(set(sigs)))}
        nxt = [ranks[s] for s in sigs]
        if len(ranks) == n_cells:
            return nxt
        cur, n_cells = nxt, len(ranks)


def _certificate(order: list[int], colors0: list[int], adj: list[list[int]]):
    pos = {v: k for k, v in enumerate(order)}
    edges = sorted((min(pos[v], pos[u]), max(pos[v], pos[u])) for v in order for u in adj[v] if pos[v] < pos[u])
    return tuple(colors0[v] for v in order), tuple(edges)


class _Search:
    def __init__(self, colors0: list[int], adj: list[list[int]]):
        self.colors0 = colors0
        self.adj = adj
        self.best = None
        self.best_order = None
        self.best_path: list[int] = []
        self.autos: list[list[int]] = []
        self.leaves = 0

    def run(self) -> list[int]:
        ranks = {c: k for k, c in enumerate(sorted(set(self.colors0)))}
        self._visit(_refine([ranks[c] for c in self.colors0], self.adj), [])
        return self.best_order

    def _visit(self, colors: list[int], path: list[int]) -> int | None:
        """DFS over the search tree.

        Returns a depth to unwind to when an automorphism makes the rest of
        the current subtree redundant, else None.
        """
        n = len(colors)
        if len(path) > n:
            raise CanonError("individualisation depth exceeded node count")
        counts: dict[int, int] = {}
        for c in colors:
            counts[c] = counts.get(c, 0) + 1
        multi = [c for c, k in counts.items() if k > 1]
        if not multi:
            order = sorted(range(n), key=lambda v: colors[v])
            cert = _certificate(order, self.colors0, self.adj)
            self.leaves += 1
            if self.best is None or cert < self.best:
                self.best, self.best_order, self.best_path = cert, order, list(path)
                return None
            if cert == self.best:
                gamma = [0] * n
                for a, b in zip(self.best_order, order):
                    gamma[a] = b
                self.autos.append(gamma)
                # the subtree below the divergence point maps onto an explored one
                return next(k for k, (a, b) in enumerate(zip(path, self.best_path)) if a != b)
            return None
        target = min(multi)
        cell = [v for v in range(n) if colors[v] == target]
        done: list[int] = []
        depth = len(path)
        for v in cell:
            if done and self._same_orbit(v, done, path):
                continue
            done.append(v)
            split = [2 * c for c in colors]
            split[v] -= 1
            jump = self._visit(_refine(split, self.adj), path + [v])
            if jump is not None and jump < depth:
                return jump
        return None

    def _same_orbit(self, v: int, reps: list[int], path: list[int]) -> bool:
        gens = [g for g in self.autos if all(g[p] == p for p in path)]
        if not gens:
            return False
        seen = {v}
        stack = [v]
        while stack:
            x = stack.pop()
            for g in gens:
                y = g[x]
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        return any(r in seen for r in reps)


def _canon_component(bg: BondGraph, members: np.ndarray):
    """Canonical order (global indices) and certificate of one component."""
    local = {int(v): k for k, v in enumerate(members)}
    adj_all = bg.neighbors()
    adj = [[local[u] for u in adj_all[v]] for v in members]
    colors0 = [int(bg.colors[v]) for v in members]
    order = _Search(colors0, adj).run()
    return [int(members[k]) for k in order], _certificate(order, colors0, adj)


def canonical_fragments(bg: BondGraph) -> list[np.ndarray]:
    """Components in canonical order, each listing its atoms in canonical order.

    Components are sorted by (size, canonical certificate).
    """
    if bg.n > MAX_CANON_NODES:
        raise CanonError(f"canonical ordering is capped at {MAX_CANON_NODES} atoms, got {bg.n}")
    parts = []
    for comp in components(bg):
        order, cert = _canon_component(bg, comp)
        parts.append((len(comp), cert, order))
    parts.sort(key=lambda p: (p[0], p[1]))
    return [np.array(p[2], dtype=np.int64) for p in parts]


def fragments(bg: BondGraph) -> list[np.ndarray]:
    """Connected components (sorted index arrays) in canonical fragment order."""
    return [np.sort(f) for f in canonical_fragments(bg)]


def canonical_order(bg: BondGraph) -> np.ndarray:
    """Permutation whose k-th entry is the atom placed at position k."""
    frs = canonical_fragments(bg)
    return np.concatenate(frs) if frs else np.zeros(0, dtype=np.int64)


def check_permutation(order, n: int) -> np.ndarray:
    order = np.asarray(order)
    if order.shape != (n,) or not np.issubdtype(order.dtype, np.integer) \
            or not np.array_equal(np.sort(order), np.arange(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}")
    return order.astype(np.int64)


def apply_order(s: CrystalStructure, order) -> CrystalStructure:
    order = check_permutation(order, s.n_atoms)
    return s.with_(atom_types=s.atom_types[order], frac=s.frac[order])


def invert_order(order) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return inv


# -- labelled fragments -----------------------------------------------------
@dataclass(frozen=True)
class Fragment:
    atoms: np.ndarray
    role: str  # "metal" or "organic"


def labeled_fragments(s: CrystalStructure, bg: BondGraph | None = None) -> list[Fragment]:
    """Components after deleting metal-nonmetal bonds, tagged by metal content."""
    bg = bg if bg is not None else infer_bonds(s)
    metal = np.array([is_metal(int(z)) for z in s.atom_types])
    e = bg.edges
    keep = metal[e[:, 0]] == metal[e[:, 1]] if e.size else np.zeros(0, bool)
    cut = BondGraph(bg.colors, e[keep])
    out = []
    for comp in components(cut):
        out.append(Fragment(comp, "metal" if metal[comp].any() else "organic"))
    return out
