"""Reader/writer for the P1 subset of CIF: cell parameters plus an atom-site loop."""

from __future__ import annotations

import re
import shlex
from pathlib import Path

import numpy as np

from ..crystal import CrystalStructure, LatticeError, standardize
from ..elements import SYMBOLS, symbol_to_number

_CELL_KEYS = (
    "_cell_length_a", "_cell_length_b", "_cell_length_c",
    "_cell_angle_alpha", "_cell_angle_beta", "_cell_angle_gamma",
)
_SYMOP_KEYS = ("_symmetry_equiv_pos_as_xyz", "_space_group_symop_operation_xyz")
_SPACEGROUP_KEYS = ("_symmetry_space_group_name_h-m", "_space_group_name_h-m_alt")
_SYMBOL_RE = re.compile(r"[A-Za-z]{1,2}")


class CifParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _tokens(line: str, lineno: int) -> list[str]:
    try:
        lex = shlex.shlex(line, posix=True)
        lex.whitespace_split = True
        lex.commenters = "#"
        return list(lex)
    except ValueError as exc:
        raise CifParseError(f"unbalanced quotes ({exc})", lineno) from None


def _number(tok: str, lineno: int) -> float:
    """Parse a CIF numeric value, dropping a trailing standard uncertainty ``(n)``."""
    core = tok.split("(", 1)[0]
    try:
        return float(core)
    except ValueError:
        raise CifParseError(f"expected a number, got {tok!r}", lineno) from None


def _element(tok: str, lineno: int) -> int:
    m = _SYMBOL_RE.match(tok)
    if m:
        sym = m.group(0)
        for cand in (sym, sym[:1]):
            try:
                return symbol_to_number(cand)
            except KeyError:
                continue
    raise CifParseError(f"unknown element symbol {tok!r}", lineno)


def parse_cif(text: str) -> CrystalStructure:
    """Parse CIF text into a Niggli-reduced :class:`CrystalStructure`."""
    lines = text.splitlines()
    scalars: dict[str, tuple[str, int]] = {}
    loops: list[tuple[list[str], list[tuple[list[str], int]]]] = []
    i = 0
    n = len(lines)
    while i < n:
        lineno = i + 1
        toks = _tokens(lines[i], lineno)
        i += 1
        if not toks:
            continue
        head = toks[0].lower()
        if head.startswith("data_"):
            continue
        if head == "loop_":
            headers: list[str] = []
            while i < n:
                t = _tokens(lines[i], i + 1)
                if t and t[0].startswith("_"):
                    headers.append(t[0].lower())
                    i += 1
                else:
                    break
            rows = []
            while i < n:
                t = _tokens(lines[i], i + 1)
                if not t:
                    i += 1
                    if rows:
                        break
                    continue
                if t[0].startswith("_") or t[0].lower() in ("loop_",) or t[0].lower().startswith("data_"):
                    break
                rows.append((t, i + 1))
                i += 1
            loops.append((headers, rows))
            continue
        if head.startswith("_"):
            if len(toks) < 2:
                raise CifParseError(f"tag {toks[0]} has no value", lineno)
            scalars[head] = (toks[1], lineno)
            continue
        raise CifParseError(f"unexpected content {lines[i - 1].strip()!r}", lineno)

    for key in _SPACEGROUP_KEYS:
        if key in scalars:
            val, ln = scalars[key]
            if val.replace(" ", "").upper() != "P1":
                raise CifParseError(f"space group {val!r} not supported (P1 only)", ln)

    lattice = []
    for key in _CELL_KEYS:
        if key not in scalars:
            raise CifParseError(f"missing required tag {key}")
        lattice.append(_number(*scalars[key]))
    lattice = np.array(lattice)
    lattice[3:] = np.radians(lattice[3:])

    site = None
    for headers, rows in loops:
        for h in headers:
            if h in _SYMOP_KEYS:
                col = headers.index(h)
                for row, ln in rows:
                    if len(row) != len(headers):
                        raise CifParseError(f"row has {len(row)} fields, {len(headers)} declared", ln)
                    op = row[col].replace(" ", "").lower()
                    if op != "x,y,z":
                        raise CifParseError(f"symmetry operation {row[col]!r} not supported", ln)
        if "_atom_site_fract_x" in headers:
            site = (headers, rows)
    if site is None:
        raise CifParseError("missing atom-site loop with _atom_site_fract_x/y/z")
    headers, rows = site
    for key in ("_atom_site_fract_y", "_atom_site_fract_z"):
        if key not in headers:
            raise CifParseError(f"missing required tag {key}")
    if "_atom_site_type_symbol" in headers:
        sym_col = headers.index("_atom_site_type_symbol")
    elif "_atom_site_label" in headers:
        sym_col = headers.index("_atom_site_label")
    else:
        raise CifParseError("atom-site loop needs _atom_site_type_symbol or _atom_site_label")
    cx, cy, cz = (headers.index(f"_atom_site_fract_{a}") for a in "xyz")
    types, frac = [], []
    for row, ln in rows:
        if len(row) != len(headers):
            raise CifParseError(f"row has {len(row)} fields, {len(headers)} declared", ln)
        types.append(_element(row[sym_col], ln))
        frac.append([_number(row[cx], ln), _number(row[cy], ln), _number(row[cz], ln)])
    if not types:
        raise CifParseError("atom-site loop has no rows")
    try:
        s = standardize(np.array(types), np.array(frac), lattice)
    except (LatticeError, ValueError) as exc:
        raise CifParseError(str(exc)) from None
    return _as_written(s)


def _as_written(s: CrystalStructure) -> CrystalStructure:
    """Snap values to what :func:`write_cif` prints, so parse(write(parse(t))) == parse(t)."""
    frac = np.vectorize(lambda x: float(_fmt_frac(x)))(s.frac) if s.n_atoms else s.frac
    lat = s.lattice.copy()
    lat[:3] = [float(_fmt_num(x)) for x in lat[:3]]
    lat[3:] = np.radians([float(_fmt_num(x)) for x in np.degrees(lat[3:])])
    return s.with_(frac=frac.reshape(s.frac.shape), lattice=lat)


def _fmt_num(x: float) -> str:
    return f"{x:.9f}"


def _fmt_frac(x: float) -> str:
    s = f"{x:.9f}"
    return "0.000000000" if s == "1.000000000" else s


def write_cif(s: CrystalStructure, name: str = "crystal") -> str:
    """Deterministic P1 CIF text; coordinates carry 9 decimals."""
    if s.n_atoms == 0:
        raise ValueError("cannot write an empty structure")
    a, b, c = s.lattice[:3]
    al, be, ga = np.degrees(s.lattice[3:])
    out = [
        f"data_{name}",
        "_symmetry_space_group_name_H-M   'P 1'",
        f"_cell_length_a   {_fmt_num(a)}",
        f"_cell_length_b   {_fmt_num(b)}",
        f"_cell_length_c   {_fmt_num(c)}",
        f"_cell_angle_alpha   {_fmt_num(al)}",
        f"_cell_angle_beta   {_fmt_num(be)}",
        f"_cell_angle_gamma   {_fmt_num(ga)}",
        "loop_",
        " _symmetry_equiv_pos_as_xyz",
        " 'x, y, z'",
        "loop_",
        " _atom_site_label",
        " _atom_site_type_symbol",
        " _atom_site_fract_x",
        " _atom_site_fract_y",
        " _atom_site_fract_z",
    ]
    for k, (z, f) in enumerate(zip(s.atom_types, s.frac)):
        sym = SYMBOLS[int(z)]
        out.append(f" {sym}{k + 1} {sym} {_fmt_frac(f[0])} {_fmt_frac(f[1])} {_fmt_frac(f[2])}")
    return "\n".join(out) + "\n"


def read_cif(path) -> CrystalStructure:
    return parse_cif(Path(path).read_text())
