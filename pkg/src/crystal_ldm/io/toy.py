"""Synthetic framework-like crystals for desk-scale training.

Each structure has one or two metal sites. Every site is bridged to its own
periodic image along one to three cell axes by a short linker chain, so the
bond graph is a small periodic framework. A fraction of structures also carry
a free water molecule, which the validity checks flag as a lone molecule.
"""

from __future__ import annotations

import itertools

import numpy as np

from ..crystal import CrystalStructure, standardize, wrap_fractional

METAL_CHOICES = (29, 30, 27, 28, 26, 25, 12, 40, 13, 48)

# chain atoms from one metal towards its image; ``h`` marks chain positions carrying an H
LINKERS = {
    "C": dict(chain=(6,), h=()),
    "CC": dict(chain=(6, 6), h=()),
    "OCO": dict(chain=(8, 6, 8), h=(1,)),
    "NCCN": dict(chain=(7, 6, 6, 7), h=(1, 2)),
    "OCCO": dict(chain=(8, 6, 6, 8), h=(1, 2)),
}
METAL_BOND = 2.0
CHAIN_BOND = 1.35
CH_BOND = 1.0
SOLVENT_PROB = 0.1


def _linker_size(name: str) -> int:
    spec = LINKERS[name]
    return len(spec["chain"]) + len(spec["h"])


def _motifs():
    names = sorted(LINKERS)
    out = []
    for axes_choice in itertools.product([None] + names, repeat=3):
        if all(a is None for a in axes_choice):
            continue
        for sites in (1, 2):
            for solvent in (False, True):
                if solvent and sites == 2:
                    continue
                n = sites * (1 + sum(_linker_size(a) for a in axes_choice if a)) + 3 * solvent
                out.append((axes_choice, sites, solvent, n))
    return out


_MOTIFS = _motifs()


def _build(rng: np.random.Generator, axes_choice, sites: int, solvent: bool) -> CrystalStructure:
    lengths = np.empty(3)
    for k, name in enumerate(axes_choice):
        if name is None:
            lengths[k] = rng.uniform(4.5, 6.0)
        else:
            lengths[k] = 2 * METAL_BOND + (len(LINKERS[name]["chain"]) - 1) * CHAIN_BOND
    metals = rng.choice(METAL_CHOICES, size=sites, replace=False)
    origins = [np.zeros(3), 0.5 * lengths][:sites]
    types, cart = [], []
    for metal, origin in zip(metals, origins):
        types.append(int(metal))
        cart.append(origin.copy())
        for k, name in enumerate(axes_choice):
            if name is None:
                continue
            spec = LINKERS[name]
            side = (k + 1) % 3
            for p, z in enumerate(spec["chain"]):
                pos = origin.copy()
                pos[k] += METAL_BOND + p * CHAIN_BOND
                types.append(z)
                cart.append(pos)
                if p in spec["h"]:
                    hpos = pos.copy()
                    hpos[side] += CH_BOND
                    types.append(1)
                    cart.append(hpos)
    if solvent:
        center = 0.5 * lengths
        for z, d in ((8, (0.0, 0.0, 0.0)), (1, (0.96, 0.0, 0.0)), (1, (-0.24, 0.93, 0.0))):
            types.append(z)
            cart.append(center + np.array(d))
    cart = np.array(cart) + rng.normal(0.0, 0.03, size=(len(cart), 3))
    frac = cart / lengths
    angles = np.radians(90.0 + rng.uniform(-6.0, 6.0, size=3))
    frac = wrap_fractional(frac + rng.uniform(0.0, 1.0, size=3))
    lattice = np.concatenate([lengths, angles])
    return standardize(np.array(types), frac, lattice)


def toy_dataset(seed: int, count: int, size_range=(2, 24)) -> list[CrystalStructure]:
    """Deterministic list of ``count`` framework-like structures."""
    lo, hi = size_range
    if not (2 <= lo <= hi <= 64):
        raise ValueError(f"size_range must lie within [2, 64], got {size_range}")
    plain = [m for m in _MOTIFS if lo <= m[3] <= hi and not m[2]]
    wet = [m for m in _MOTIFS if lo <= m[3] <= hi and m[2]]
    if not plain and not wet:
        raise ValueError(f"no toy motif has an atom count in {size_range}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        pool = wet if (wet and (rng.random() < SOLVENT_PROB or not plain)) else plain
        axes_choice, sites, solvent, _ = pool[int(rng.integers(len(pool)))]
        out.append(_build(rng, axes_choice, sites, solvent))
    return out
