"""Crystal structure model and lattice geometry.

Lattices are ``(a, b, c, alpha, beta, gamma)`` with lengths in Angstrom and
angles in radians. Basis matrices hold the lattice vectors as rows, so a
fractional row vector ``f`` maps to cartesian ``f @ M``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools

import numpy as np

ANGLE_MIN = np.pi / 3
ANGLE_MAX = 2 * np.pi / 3
_ANGLE_SLACK = 1e-9


class LatticeError(ValueError):
    pass


class NiggliError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CrystalStructure:
    """``(A, F, L)``: element numbers, wrapped fractional positions, lattice."""

    atom_types: np.ndarray
    frac: np.ndarray
    lattice: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        types = np.asarray(self.atom_types, dtype=np.int64).reshape(-1)
        frac = np.asarray(self.frac, dtype=np.float64).reshape(-1, 3)
        lat = np.asarray(self.lattice, dtype=np.float64).reshape(6)
        object.__setattr__(self, "atom_types", types)
        object.__setattr__(self, "frac", frac)
        object.__setattr__(self, "lattice", lat)
        self.validate()

    @property
    def n_atoms(self) -> int:
        return len(self.atom_types)

    def validate(self) -> None:
        if len(self.atom_types) != len(self.frac):
            raise ValueError(f"{len(self.atom_types)} atom types but {len(self.frac)} positions")
        if len(self.atom_types) == 0:
            raise ValueError("empty structure")
        if np.any(self.atom_types < 1):
            raise ValueError("element numbers must be >= 1")
        if not np.all(np.isfinite(self.frac)) or np.any(self.frac < 0) or np.any(self.frac >= 1):
            raise ValueError("fractional coordinates must lie in [0, 1)")
        check_lattice(self.lattice)

    def with_(self, **changes) -> "CrystalStructure":
        kw = dict(atom_types=self.atom_types, frac=self.frac, lattice=self.lattice, meta=self.meta)
        kw.update(changes)
        return CrystalStructure(**kw)

    def same_as(self, other: "CrystalStructure", tol: float = 0.0) -> bool:
        if self.n_atoms != other.n_atoms or not np.array_equal(self.atom_types, other.atom_types):
            return False
        if tol == 0.0:
            return np.array_equal(self.frac, other.frac) and np.array_equal(self.lattice, other.lattice)
        return (np.allclose(self.frac, other.frac, rtol=0, atol=tol)
                and np.allclose(self.lattice, other.lattice, rtol=0, atol=tol))

    @property
    def matrix(self) -> np.ndarray:
        return params_to_matrix(self.lattice)

    @property
    def cartesian(self) -> np.ndarray:
        return self.frac @ self.matrix


def check_lattice(lattice) -> None:
    lat = np.asarray(lattice, dtype=np.float64)
    if lat.shape != (6,) or not np.all(np.isfinite(lat)):
        raise LatticeError(f"lattice must be 6 finite numbers, got {lat!r}")
    if np.any(lat[:3] <= 0):
        raise LatticeError(f"lattice lengths must be positive: {lat[:3]}")
    ang = lat[3:]
    if np.any(ang < ANGLE_MIN - _ANGLE_SLACK) or np.any(ang > ANGLE_MAX + _ANGLE_SLACK):
        raise LatticeError(f"lattice angles {np.degrees(ang)} deg outside [60, 120]")
    params_to_matrix(lat)


def params_to_matrix(lattice) -> np.ndarray:
    """Row basis with ``a`` along x and ``b`` in the xy-plane (right-handed)."""
    a, b, c, al, be, ga = np.asarray(lattice, dtype=np.float64)
    ca, cb, cg = np.cos(al), np.cos(be), np.cos(ga)
    sg = np.sin(ga)
    if sg <= 0:
        raise LatticeError(f"degenerate gamma {ga}")
    cy = (ca - cb * cg) / sg
    cz2 = 1.0 - cb * cb - cy * cy
    if not cz2 > 1e-12:
        raise LatticeError(f"angles {np.degrees([al, be, ga])} give non-positive volume")
    return np.array([
        [a, 0.0, 0.0],
        [b * cg, b * sg, 0.0],
        [c * cb, c * cy, c * np.sqrt(cz2)],
    ])


def matrix_to_params(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    lengths = np.linalg.norm(m, axis=1)

    def ang(u, v):
        cosv = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
        return np.arccos(np.clip(cosv, -1.0, 1.0))

    return np.array([*lengths, ang(m[1], m[2]), ang(m[0], m[2]), ang(m[0], m[1])])


def cell_volume(lattice) -> float:
    return float(np.linalg.det(params_to_matrix(lattice)))


def wrap_fractional(f) -> np.ndarray:
    """Map coordinates into [0, 1) by subtracting integers."""
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite fractional coordinate")
    out = f - np.floor(f)
    # -1e-17 - floor(-1e-17) rounds to exactly 1.0
    return np.where(out >= 1.0, 0.0, out)


def random_translate(s: CrystalStructure, u) -> CrystalStructure:
    u = np.asarray(u, dtype=np.float64).reshape(3)
    return s.with_(frac=wrap_fractional(s.frac + u))


def _needs_wide_search(lattice) -> bool:
    ang = np.asarray(lattice)[3:]
    return bool(np.any(ang - ANGLE_MIN < 0.1) or np.any(ANGLE_MAX - ang < 0.1))


def image_offsets(reach: int) -> np.ndarray:
    r = range(-reach, reach + 1)
    return np.array(list(itertools.product(r, r, r)), dtype=np.float64)


def min_image_displacement(f_i, f_j, lattice) -> np.ndarray:
    """Cartesian vector from ``f_i`` to the nearest periodic image of ``f_j``."""
    m = params_to_matrix(lattice)
    d = np.asarray(f_j, dtype=np.float64) - np.asarray(f_i, dtype=np.float64)
    d = d - np.round(d)
    offsets = image_offsets(2 if _needs_wide_search(lattice) else 1)
    cands = (d + offsets) @ m
    k = int(np.argmin(np.einsum("ij,ij->i", cands, cands)))
    return cands[k]


def pairwise_min_image(frac, lattice) -> tuple[np.ndarray, np.ndarray]:
    """All-pairs minimum-image displacement (N, N, 3) and distance (N, N)."""
    m = params_to_matrix(lattice)
    frac = np.asarray(frac, dtype=np.float64)
    d = frac[None, :, :] - frac[:, None, :]
    d = d - np.round(d)
    offsets = image_offsets(2 if _needs_wide_search(lattice) else 1)
    cands = (d[:, :, None, :] + offsets[None, None]) @ m  # (N, N, K, 3)
    d2 = np.einsum("ijkl,ijkl->ijk", cands, cands)
    best = np.argmin(d2, axis=2)
    n = len(frac)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    disp = cands[ii, jj, best]
    return disp, np.sqrt(d2[ii, jj, best])


def normalize_lattice_lengths(lattice, n_atoms: int) -> np.ndarray:
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    return np.log(np.asarray(lattice, dtype=np.float64)[:3] / n_atoms ** (1.0 / 3.0))


# -- Niggli reduction ------------------------------------------------------
def _g6(m: np.ndarray) -> tuple[float, ...]:
    a, b, c = m
    return (a @ a, b @ b, c @ c, 2 * (b @ c), 2 * (a @ c), 2 * (a @ b))


def _sgn(x: float, eps: float) -> int:
    return 1 if x > eps else (-1 if x < -eps else 0)


def niggli_reduce_matrix(m, max_iter: int = 1000, rel_eps: float = 1e-7):
    """Krivy-Gruber reduction with epsilon comparisons.

    Operates on the basis vectors directly and returns ``(reduced_rows, T)``
    with ``reduced_rows = T @ m`` and ``T`` an integer matrix of determinant +1.
    """
    m = np.array(m, dtype=np.float64)
    vol = abs(np.linalg.det(m))
    if not vol > 0:
        raise LatticeError("singular lattice basis")
    eps = rel_eps * vol ** (2.0 / 3.0)
    t = np.eye(3, dtype=np.int64)

    def apply(op):
        nonlocal m, t
        op = np.asarray(op, dtype=np.int64)
        m = op @ m
        t = op @ t

    for _ in range(max_iter):
        A, B, C, xi, eta, zeta = _g6(m)
        # A1
        if A > B + eps or (abs(A - B) <= eps and abs(xi) > abs(eta) + eps):
            apply([[0, -1, 0], [-1, 0, 0], [0, 0, -1]])
            continue
        # A2
        if B > C + eps or (abs(B - C) <= eps and abs(eta) > abs(zeta) + eps):
            apply([[-1, 0, 0], [0, 0, -1], [0, -1, 0]])
            continue
        sx, se, sz = _sgn(xi, eps), _sgn(eta, eps), _sgn(zeta, eps)
        if sx * se * sz > 0:
            # A3: all three dot products made positive
            apply(np.diag([sx, se, sz]))
        else:
            # A4: all three made non-positive
            i, j, k = (-1 if sx > 0 else 1), (-1 if se > 0 else 1), (-1 if sz > 0 else 1)
            if i * j * k < 0:
                if sz == 0:
                    k = -k
                elif se == 0:
                    j = -j
                elif sx == 0:
                    i = -i
            if i * j * k > 0:
                apply(np.diag([i, j, k]))
        A, B, C, xi, eta, zeta = _g6(m)
        # A5
        if (abs(xi) > B + eps or (abs(xi - B) <= eps and 2 * eta < zeta - eps)
                or (abs(xi + B) <= eps and zeta < -eps)):
            apply([[1, 0, 0], [0, 1, 0], [0, -int(np.sign(xi)), 1]])
            continue
        # A6
        if (abs(eta) > A + eps or (abs(eta - A) <= eps and 2 * xi < zeta - eps)
                or (abs(eta + A) <= eps and zeta < -eps)):
            apply([[1, 0, 0], [0, 1, 0], [-int(np.sign(eta)), 0, 1]])
            continue
        # A7
        if (abs(zeta) > A + eps or (abs(zeta - A) <= eps and 2 * xi < eta - eps)
                or (abs(zeta + A) <= eps and eta < -eps)):
            apply([[1, 0, 0], [-int(np.sign(zeta)), 1, 0], [0, 0, 1]])
            continue
        # A8
        s = xi + eta + zeta + A + B
        if s < -eps or (abs(s) <= eps and 2 * (A + eta) + zeta > eps):
            apply([[1, 0, 0], [0, 1, 0], [1, 1, 1]])
            continue
        break
    else:
        raise NiggliError(
            f"Niggli reduction did not converge in {max_iter} iterations for cell "
            f"{matrix_to_params(m)}"
        )
    if np.linalg.det(m) < 0:
        apply(-np.eye(3))
    return m, t


def niggli_reduce(lattice) -> np.ndarray:
    """Return Niggli-reduced lattice parameters (a <= b <= c)."""
    lat = np.asarray(lattice, dtype=np.float64)
    m = params_to_matrix(lat)
    red, t = niggli_reduce_matrix(m)
    if np.array_equal(t, np.eye(3, dtype=np.int64)):
        return lat.copy()
    return matrix_to_params(red)


def niggli_reduce_structure(s_types, s_frac, lattice) -> tuple[np.ndarray, np.ndarray]:
    """Reduce a raw cell and carry fractional coordinates along.

    Returns ``(frac_reduced, lattice_reduced)``. The lattice need not satisfy
    the angle bounds beforehand; callers check them afterwards.
    """
    lat = np.asarray(lattice, dtype=np.float64)
    m = params_to_matrix(lat)
    red, t = niggli_reduce_matrix(m)
    frac = np.asarray(s_frac, dtype=np.float64)
    if np.array_equal(t, np.eye(3, dtype=np.int64)):
        return wrap_fractional(frac), lat.copy()
    # f @ m = f' @ (t @ m)  =>  f' = f @ inv(t)
    t_inv = np.rint(np.linalg.inv(t.astype(np.float64)))
    return wrap_fractional(frac @ t_inv), matrix_to_params(red)


def standardize(atom_types, frac, lattice, meta=None) -> CrystalStructure:
    """Niggli-reduce a raw cell and build a validated structure.

    Cells whose reduced angles still fall outside [pi/3, 2pi/3] are rejected.
    """
    frac_r, lat_r = niggli_reduce_structure(atom_types, frac, lattice)
    ang = lat_r[3:]
    if np.any(ang < ANGLE_MIN - _ANGLE_SLACK) or np.any(ang > ANGLE_MAX + _ANGLE_SLACK):
        raise LatticeError(f"reduced cell angles {np.degrees(ang)} deg outside [60, 120]")
    lat_r[3:] = np.clip(ang, ANGLE_MIN, ANGLE_MAX)
    return CrystalStructure(atom_types, frac_r, lat_r, meta or {})
