"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
from collections import Counter

import numpy as np

from crystal_ldm.crystal import CrystalStructure, params_to_matrix
from crystal_ldm.featurize import HierGraph
from crystal_ldm.tensor import Tensor


def random_lattice(rng, lo=3.0, hi=9.0, skew=0.35) -> np.ndarray:
    lengths = rng.uniform(lo, hi, 3)
    angles = np.pi / 2 + rng.uniform(-skew, skew, 3)
    return np.concatenate([lengths, angles])


def random_structure(rng, n_lo=1, n_hi=8, elements=(1, 6, 7, 8, 29, 30)) -> CrystalStructure:
    n = int(rng.integers(n_lo, n_hi + 1))
    while True:
        lat = random_lattice(rng)
        try:
            params_to_matrix(lat)
            break
        except ValueError:
            continue
    return CrystalStructure(rng.choice(elements, n), rng.random((n, 3)), lat)


def random_hier_graph(rng, n, widths=(3, 2, 2, 3)) -> HierGraph:
    """Random sparse local graph with one global node linked to every atom."""
    m = int(rng.integers(1, 3 * n + 1))
    return HierGraph(
        local_nodes=rng.normal(size=(n, widths[0])),
        local_edges=rng.normal(size=(m, widths[1])),
        local_senders=rng.integers(0, n, m),
        local_receivers=rng.integers(0, n, m),
        global_nodes=rng.normal(size=(1, widths[2])),
        global_edges=rng.normal(size=(n, widths[3])),
        global_senders=np.zeros(n, dtype=np.int64),
        global_receivers=np.arange(n) + 1,
    )


def brute_knn(s: CrystalStructure, k: int, reach: int = 3):
    """Per sender, the sorted distances of the k nearest images over offsets in {-reach..reach}^3."""
    m = s.matrix
    offs = np.array(list(itertools.product(range(-reach, reach + 1), repeat=3)), dtype=np.float64)
    out = []
    for i in range(s.n_atoms):
        cands = []
        for j in range(s.n_atoms):
            for o in offs:
                if i == j and not o.any():
                    continue
                cands.append((float(np.linalg.norm((s.frac[j] + o - s.frac[i]) @ m)), j, tuple(o.astype(int))))
        cands.sort(key=lambda c: c[0])
        out.append(cands[:k])
    return out


def brute_min_image(f_i, f_j, lattice, reach: int = 3) -> float:
    m = params_to_matrix(lattice)
    d = np.asarray(f_j) - np.asarray(f_i)
    offs = np.array(list(itertools.product(range(-reach, reach + 1), repeat=3)), dtype=np.float64)
    return float(np.min(np.linalg.norm((d + offs) @ m, axis=1)))


_UNIMODULAR = None


def unimodular_matrices(lo=-2, hi=2) -> np.ndarray:
    """All 3x3 integer matrices with entries in [lo, hi] and determinant +-1."""
    global _UNIMODULAR
    if _UNIMODULAR is None:
        vals = np.arange(lo, hi + 1)
        rows = np.array(list(itertools.product(vals, repeat=3)))
        rows = rows[np.any(rows != 0, axis=1)]
        mats = []
        # enumerate the first two rows, then solve for valid third rows in bulk
        for a in rows:
            cross_b = np.cross(a, rows)  # a x b for every b
            dets = cross_b @ rows.T  # (a x b) . c
            bi, ci = np.nonzero(np.abs(dets) == 1)
            for b, c in zip(bi, ci):
                mats.append((a, rows[b], rows[c]))
        _UNIMODULAR = np.array(mats, dtype=np.float64)
    return _UNIMODULAR


def exhaustive_min_lengths(m: np.ndarray) -> np.ndarray:
    """Sorted basis lengths minimising the length sum over the unimodular search space."""
    mats = unimodular_matrices()
    bases = mats @ m
    lengths = np.sort(np.linalg.norm(bases, axis=2), axis=1)
    best = np.argmin(lengths.sum(axis=1))
    return lengths[best]


def shortest_lattice_vectors(m: np.ndarray, reach: int = 4) -> np.ndarray:
    """The three successive minima of a 3-D lattice by enumeration."""
    coeffs = np.array(list(itertools.product(range(-reach, reach + 1), repeat=3)), dtype=np.float64)
    coeffs = coeffs[np.any(coeffs != 0, axis=1)]
    vecs = coeffs @ m
    order = np.argsort(np.linalg.norm(vecs, axis=1), kind="stable")
    picked = []
    for k in order:
        cand = picked + [vecs[k]]
        if np.linalg.matrix_rank(np.array(cand), tol=1e-8) == len(cand):
            picked = cand
            if len(picked) == 3:
                break
    return np.sort(np.linalg.norm(np.array(picked), axis=1))


def vnu_bruteforce(sample_ids, train_ids, valid_flags):
    """Pairwise-comparison accounting written without Counters or sets.

    A ``None`` id (identifier failure) is neither unique nor novel.
    """
    n = len(sample_ids)
    unique = novel = nu = v = vnu = 0
    for i in range(n):
        ok = sample_ids[i] is not None
        dup = any(sample_ids[j] == sample_ids[i] for j in range(n) if j != i)
        u = ok and not dup
        nv = ok and all(sample_ids[i] != t for t in train_ids)
        unique += u
        novel += nv
        nu += u and nv
        v += bool(valid_flags[i])
        vnu += u and nv and bool(valid_flags[i])
    return dict(total=n, unique=unique, novel=novel, nu=nu, valid=v, vnu=vnu)


def directional_fd_check(loss_fn, params: dict[str, Tensor], rng, n_points: int, h: float = 1e-5):
    """Compare analytic directional derivatives against central differences.

    ``loss_fn()`` rebuilds the graph from the current parameter values.
    Returns the worst relative error over ``n_points`` random directions.
    """
    names = sorted(params)
    worst = 0.0
    for _ in range(n_points):
        for p in params.values():
            p.grad = None
        loss = loss_fn()
        loss.backward()
        grads = {k: (params[k].grad if params[k].grad is not None else np.zeros_like(params[k].data))
                 for k in names}
        direction = {k: rng.standard_normal(params[k].data.shape) for k in names}
        analytic = sum(float((grads[k] * direction[k]).sum()) for k in names)
        saved = {k: params[k].data.copy() for k in names}
        for k in names:
            params[k].data[...] = saved[k] + h * direction[k]
        up = loss_fn().item()
        for k in names:
            params[k].data[...] = saved[k] - h * direction[k]
        down = loss_fn().item()
        for k in names:
            params[k].data[...] = saved[k]
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def multiset(ids) -> Counter:
    return Counter(ids)
