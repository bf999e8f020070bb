"""Element symbols, covalent radii and the metal set."""

from __future__ import annotations

from importlib import resources

import numpy as np


def _load_table():
    text = resources.files("crystal_ldm").joinpath("data/covalent_radii.txt").read_text()
    symbols, radii = {}, {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        z, sym, r = line.split()
        symbols[int(z)] = sym
        radii[int(z)] = float(r)
    return symbols, radii


SYMBOLS, _RADII = _load_table()
MAX_Z = max(SYMBOLS)
NUMBERS = {s: z for z, s in SYMBOLS.items()}
COVALENT_RADII = np.zeros(MAX_Z + 1)
for _z, _r in _RADII.items():
    COVALENT_RADII[_z] = _r

_ALKALI = {3, 11, 19, 37, 55, 87}
_ALKALINE_EARTH = {4, 12, 20, 38, 56, 88}
_TRANSITION = set(range(21, 31)) | set(range(39, 49)) | set(range(72, 81))
_POST_TRANSITION = {13, 31, 49, 50, 81, 82, 83, 84}
_F_BLOCK = set(range(57, 72)) | set(range(89, 97))
METALS = frozenset(_ALKALI | _ALKALINE_EARTH | _TRANSITION | _POST_TRANSITION | _F_BLOCK)


def symbol_to_number(sym: str) -> int:
    """Element number for a symbol; case-insensitive on the second letter."""
    key = sym[:1].upper() + sym[1:].lower()
    if key not in NUMBERS:
        raise KeyError(sym)
    return NUMBERS[key]


def is_metal(z: int) -> bool:
    return int(z) in METALS
