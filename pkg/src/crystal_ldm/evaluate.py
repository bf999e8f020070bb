"""Validity flags, structure identifiers, VNU accounting, rediscovery and histograms."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .canon import BondGraph, components, infer_bonds, labeled_fragments
from .crystal import CrystalStructure, image_offsets, niggli_reduce
from .elements import COVALENT_RADII, SYMBOLS, is_metal

# (min, max) bond counts; None means unchecked on that side
COORDINATION_BOUNDS = {6: (2, 4), 7: (1, 4), 1: (None, 1)}


@dataclass(frozen=True)
class ValidityReport:
    has_carbon: bool
    has_hydrogen: bool
    has_metal: bool
    has_atomic_overlap: bool
    has_overcoord_C: bool
    has_overcoord_N: bool
    has_overcoord_H: bool
    has_undercoord_C: bool
    has_undercoord_N: bool
    has_lone_molecule: bool

    POSITIVE = ("has_carbon", "has_hydrogen", "has_metal")

    @property
    def overall_valid(self) -> bool:
        return all(getattr(self, f.name) == (f.name in self.POSITIVE) for f in fields(self))

    def bits(self) -> str:
        return "".join("1" if getattr(self, f.name) else "0" for f in fields(self))


def _all_image_distances(s: CrystalStructure, reach: int = 2) -> np.ndarray:
    """N x N x K distances to every image within ``reach`` cells; the self zero-image is inf."""
    offs = image_offsets(reach)
    d = s.frac[None, :, None, :] + offs[None, None, :, :] - s.frac[:, None, None, :]
    cart = d @ s.matrix
    dist = np.linalg.norm(cart, axis=-1)
    zero = int(np.flatnonzero(np.all(offs == 0, axis=1))[0])
    dist[np.arange(s.n_atoms), np.arange(s.n_atoms), zero] = np.inf
    return dist


def coordination_numbers(s: CrystalStructure, factor: float = 1.2) -> np.ndarray:
    """Bond counts including every periodic image within the radius threshold."""
    r = COVALENT_RADII[s.atom_types]
    thresh = factor * (r[:, None] + r[None, :])
    return (_all_image_distances(s) <= thresh[:, :, None]).sum(axis=(1, 2))


def validity_check(s: CrystalStructure, bond_factor: float = 1.2, overlap_factor: float = 0.5,
                   bonds: BondGraph | None = None) -> ValidityReport:
    types = s.atom_types
    r = COVALENT_RADII[types]
    dist = _all_image_distances(s)
    overlap = bool((dist < (overlap_factor * (r[:, None] + r[None, :]))[:, :, None]).any())
    cn = coordination_numbers(s, bond_factor)
    flags = {}
    for z, sym in ((6, "C"), (7, "N"), (1, "H")):
        lo, hi = COORDINATION_BOUNDS[z]
        sel = cn[types == z]
        flags[f"has_overcoord_{sym}"] = bool(hi is not None and np.any(sel > hi))
        if sym != "H":
            flags[f"has_undercoord_{sym}"] = bool(lo is not None and np.any(sel < lo))
    bg = bonds if bonds is not None else infer_bonds(s, bond_factor)
    metal = np.array([is_metal(int(z)) for z in types])
    lone = any(not metal[c].any() for c in components(bg))
    return ValidityReport(
        has_carbon=bool(np.any(types == 6)),
        has_hydrogen=bool(np.any(types == 1)),
        has_metal=bool(metal.any()),
        has_atomic_overlap=overlap,
        has_lone_molecule=lone,
        **flags,
    )


# -- identifiers ------------------------------------------------------------
def hill_formula(types) -> str:
    c = Counter(int(z) for z in types)
    syms = {SYMBOLS[z]: n for z, n in c.items()}
    if "C" in syms:
        order = ["C"] + (["H"] if "H" in syms else []) + sorted(k for k in syms if k not in ("C", "H"))
    else:
        order = sorted(syms)
    return "".join(k + (str(syms[k]) if syms[k] > 1 else "") for k in order)


def lattice_family(lattice, len_tol: float = 0.01, ang_tol_deg: float = 0.5) -> str:
    lat = niggli_reduce(lattice)
    a = lat[:3]
    ang = np.degrees(lat[3:])

    def eq(x, y):
        return abs(x - y) <= len_tol * max(x, y)

    right = np.abs(ang - 90.0) <= ang_tol_deg
    # pairs of axes (i, j) and the angle between them: alpha=(b,c), beta=(a,c), gamma=(a,b)
    pairs = {(1, 2): 0, (0, 2): 1, (0, 1): 2}
    if right.all():
        n_eq = sum(eq(a[i], a[j]) for i, j in pairs)
        if n_eq == 3:
            return "cubic"
        return "tetragonal" if n_eq >= 1 else "orthorhombic"
    for (i, j), k in pairs.items():
        others = [m for m in range(3) if m != k]
        if (eq(a[i], a[j]) and abs(ang[k] - 120.0) <= ang_tol_deg
                and right[others].all()):
            return "hexagonal"
    if right.sum() == 2:
        return "monoclinic"
    return "triclinic"


def structure_id(s: CrystalStructure, bond_factor: float = 1.2) -> str:
    """Distinct fragment formulas with role tags, metal fragments first, then the lattice family."""
    frags = labeled_fragments(s, infer_bonds(s, bond_factor))
    parts = sorted({(0 if f.role == "metal" else 1, hill_formula(s.atom_types[f.atoms]), f.role)
                    for f in frags})
    body = "|".join(f"{formula}[{role}]" for _, formula, role in parts)
    return f"{body}|{lattice_family(s.lattice)}"


def id_components(structure_id_str: str) -> list[str]:
    """Fragment tokens of an identifier (lattice tag dropped)."""
    return structure_id_str.split("|")[:-1]


# -- VNU --------------------------------------------------------------------
@dataclass(frozen=True)
class VnuReport:
    total: int
    id_exists: int
    valid: int
    unique: int
    novel: int
    nu: int
    vnu: int

    def rates(self) -> dict[str, float]:
        t = max(self.total, 1)
        return {k: getattr(self, k) / t for k in ("id_exists", "valid", "unique", "novel", "nu", "vnu")}

    def to_dict(self) -> dict:
        return {**asdict(self), "rates": self.rates()}


def vnu(sample_ids: Sequence[str | None], train_ids, valid_flags: Sequence[bool]) -> VnuReport:
    """Unique: the id occurs exactly once among samples. Novel: the id is absent from training.

    ``None`` ids (identifier failure) count toward the total only.
    """
    if len(sample_ids) != len(valid_flags):
        raise ValueError(f"{len(sample_ids)} ids but {len(valid_flags)} validity flags")
    train = set(train_ids)
    freq = Counter(i for i in sample_ids if i is not None)
    uniq = [i is not None and freq[i] == 1 for i in sample_ids]
    nov = [i is not None and i not in train for i in sample_ids]
    val = [bool(v) for v in valid_flags]
    nu = [u and n for u, n in zip(uniq, nov)]
    return VnuReport(
        total=len(sample_ids),
        id_exists=sum(i is not None for i in sample_ids),
        valid=sum(val),
        unique=sum(uniq),
        novel=sum(nov),
        nu=sum(nu),
        vnu=sum(x and v for x, v in zip(nu, val)),
    )


@dataclass(frozen=True)
class RediscoveryReport:
    unique: int
    unique_novel: int
    rediscovered: int
    rate: float | None

    def formatted(self) -> str:
        if self.rate is None:
            return f"{self.rediscovered} (undefined)"
        return f"{self.rediscovered} ({100 * self.rate:.1f}%)"


def rediscovery(sample_components, train_components, reference_components) -> RediscoveryReport:
    uniq = set(sample_components)
    un = uniq - set(train_components)
    red = un & set(reference_components)
    return RediscoveryReport(len(uniq), len(un), len(red), len(red) / len(un) if un else None)


def rediscovery_from_counts(unique_novel: int, rediscovered: int) -> RediscoveryReport:
    if not 0 <= rediscovered <= unique_novel:
        raise ValueError("need 0 <= rediscovered <= unique_novel")
    return RediscoveryReport(unique_novel, unique_novel, rediscovered,
                             rediscovered / unique_novel if unique_novel else None)


# -- histograms -------------------------------------------------------------
@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray
    underflow: int
    overflow: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow


def histogram(values, bin_edges) -> Histogram:
    """Half-open bins ``[e_k, e_k+1)``; values outside the edges are tallied separately."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing with at least two entries")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    idx = np.searchsorted(edges, v, side="right") - 1
    inside = (idx >= 0) & (idx < len(edges) - 1)
    counts = np.bincount(idx[inside], minlength=len(edges) - 1)
    return Histogram(counts, int(np.sum(v < edges[0])), int(np.sum(v >= edges[-1])))


# -- report serialisation ---------------------------------------------------
def report_line(path: str, sid: str | None, report: ValidityReport | None) -> str:
    bits = report.bits() if report is not None else "-"
    return f"{path}\t{sid if sid is not None else '-'}\t{bits}"


def summary_document(v: VnuReport, red: RediscoveryReport | None = None) -> str:
    doc = {"vnu": v.to_dict()}
    if red is not None:
        doc["rediscovery"] = {**asdict(red), "formatted": red.formatted()}
    return json.dumps(doc, indent=2, sort_keys=True)
