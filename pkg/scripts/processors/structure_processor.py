import itertools
import logging
import math
import re
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np
from ase.data import atomic_numbers, covalent_radii

from errors import CifParseError, StructureParseError, XyzParseError

# Sites closer than this (Å, same element) after symmetry expansion are one site
DUPLICATE_SITE_TOLERANCE = 1e-3

CELL_TAGS = (
    "_cell_length_a",
    "_cell_length_b",
    "_cell_length_c",
    "_cell_angle_alpha",
    "_cell_angle_beta",
    "_cell_angle_gamma",
)
FRACT_TAGS = ("_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z")
SYMOP_TAGS = ("_symmetry_equiv_pos_as_xyz", "_space_group_symop_operation_xyz")


def validate_element(symbol: str) -> str:
    """Return the canonical element symbol or raise for unknown ones."""
    cleaned = symbol.strip()
    cleaned = cleaned[:1].upper() + cleaned[1:].lower()
    if cleaned not in atomic_numbers or atomic_numbers[cleaned] == 0:
        raise StructureParseError(f"unknown element symbol '{symbol}'")
    if not covalent_radii[atomic_numbers[cleaned]] > 0:
        raise StructureParseError(f"no tabulated covalent radius for element '{symbol}'")
    return cleaned


@dataclass(frozen=True)
class Lattice:
    """Periodic cell. Lengths in Å, angles in degrees.

    The cell matrix holds the lattice vectors as rows with a along +x and b in
    the xy-plane, so it is lower triangular and ``cart = frac @ matrix``.
    """

    a: float
    b: float
    c: float
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        for name in ("a", "b", "c"):
            if not getattr(self, name) > 0:
                raise StructureParseError(f"lattice length {name} must be positive, got {getattr(self, name)}")
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not 0.0 < value < 180.0:
                raise StructureParseError(f"lattice angle {name} must lie in (0, 180), got {value}")
        if not self.volume > 0:
            raise StructureParseError("lattice angles do not describe a cell with positive volume")

    @property
    def matrix(self) -> np.ndarray:
        alpha, beta, gamma = np.radians([self.alpha, self.beta, self.gamma])
        cos_a, cos_b, cos_g = np.cos(alpha), np.cos(beta), np.cos(gamma)
        sin_g = np.sin(gamma)
        cy = (cos_a - cos_b * cos_g) / sin_g
        cz_sq = 1.0 - cos_b**2 - cy**2
        cz = math.sqrt(cz_sq) if cz_sq > 0 else float("nan")
        return np.array(
            [
                [self.a, 0.0, 0.0],
                [self.b * cos_g, self.b * sin_g, 0.0],
                [self.c * cos_b, self.c * cy, self.c * cz],
            ]
        )

    @property
    def volume(self) -> float:
        det = float(np.linalg.det(self.matrix))
        return det if math.isfinite(det) else 0.0


class SymmetryOp(NamedTuple):
    rotation: tuple
    translation: tuple
    source: str

    def apply(self, frac) -> np.ndarray:
        rot = np.array(self.rotation, dtype=float)
        shift = np.array([float(t) for t in self.translation])
        return rot @ np.asarray(frac, dtype=float) + shift

    @property
    def is_identity(self) -> bool:
        return self.rotation == ((1, 0, 0), (0, 1, 0), (0, 0, 1)) and all(t == 0 for t in self.translation)


IDENTITY_OP = SymmetryOp(((1, 0, 0), (0, 1, 0), (0, 0, 1)), (Fraction(0),) * 3, "x,y,z")

_TERM_RE = re.compile(r"[+-]?[^+-]+")


def parse_symmetry_op(text: str) -> SymmetryOp:
    """Parse an operator triplet such as ``-x, y+1/2, -z``."""
    compact = text.replace(" ", "").replace("'", "").replace('"', "").lower()
    parts = compact.split(",")
    if len(parts) != 3 or any(not p for p in parts):
        raise CifParseError(f"malformed symmetry operator '{text}'")

    rotation = []
    translation = []
    for part in parts:
        row = [0, 0, 0]
        shift = Fraction(0)
        terms = _TERM_RE.findall(part)
        if "".join(terms) != part:
            raise CifParseError(f"malformed symmetry operator '{text}'")
        for term in terms:
            sign = -1 if term.startswith("-") else 1
            body = term.lstrip("+-")
            if body in ("x", "y", "z"):
                row["xyz".index(body)] += sign
                continue
            try:
                shift += sign * Fraction(body)
            except (ValueError, ZeroDivisionError):
                raise CifParseError(f"malformed symmetry operator '{text}' (term '{term}')") from None
        rotation.append(tuple(row))
        translation.append(shift)
    return SymmetryOp(tuple(rotation), tuple(translation), text.strip())


def wrap_fractional(frac) -> tuple:
    wrapped = []
    for value in frac:
        w = float(value) - math.floor(float(value))
        if w >= 1.0:
            w = 0.0
        wrapped.append(w + 0.0)
    return tuple(wrapped)


@dataclass(frozen=True)
class AtomSite:
    element: str
    frac: tuple
    label: str


@dataclass(frozen=True)
class CrystalStructure:
    lattice: Lattice
    sites: tuple
    symmetry_ops: tuple = (IDENTITY_OP,)

    def expanded_sites(self) -> tuple:
        """Apply every stored operator, wrap into [0,1) and drop duplicates."""
        matrix = self.lattice.matrix
        accepted: list[AtomSite] = []
        for site in self.sites:
            for index, op in enumerate(self.symmetry_ops):
                frac = wrap_fractional(op.apply(site.frac))
                if _has_duplicate(accepted, site.element, frac, matrix):
                    continue
                label = site.label if op.is_identity else f"{site.label}_{index}"
                accepted.append(AtomSite(site.element, frac, label))
        return tuple(accepted)


def _has_duplicate(accepted, element, frac, matrix) -> bool:
    for other in accepted:
        if other.element != element:
            continue
        delta = np.array(frac) - np.array(other.frac)
        delta -= np.round(delta)
        if np.linalg.norm(delta @ matrix) < DUPLICATE_SITE_TOLERANCE:
            return True
    return False


def expand_symmetry(structure: CrystalStructure) -> CrystalStructure:
    """Return the P1 equivalent of ``structure``."""
    return CrystalStructure(structure.lattice, structure.expanded_sites(), (IDENTITY_OP,))


class OriginTag(NamedTuple):
    label: str
    image: tuple

    def __str__(self):
        return f"{self.label}@{self.image[0]},{self.image[1]},{self.image[2]}"

    @classmethod
    def from_string(cls, text: str) -> "OriginTag":
        label, sep, image = text.strip().rpartition("@")
        if not sep:
            raise StructureParseError(f"origin tag '{text}' lacks an '@i,j,k' image suffix")
        try:
            indices = tuple(int(v) for v in image.split(","))
        except ValueError:
            raise StructureParseError(f"origin tag '{text}' has a malformed image index") from None
        if len(indices) != 3:
            raise StructureParseError(f"origin tag '{text}' needs three image indices")
        return cls(label, indices)


class Atom(NamedTuple):
    element: str
    position: tuple
    origin: OriginTag


@dataclass(frozen=True)
class AtomCollection:
    atoms: tuple
    cell: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        seen = set()
        for atom in self.atoms:
            if not all(math.isfinite(v) for v in atom.position):
                raise StructureParseError(f"non-finite position for atom {atom.origin}")
            if atom.origin in seen:
                raise StructureParseError(f"duplicate origin tag {atom.origin}")
            seen.add(atom.origin)

    def __len__(self):
        return len(self.atoms)

    def __iter__(self):
        return iter(self.atoms)

    @property
    def elements(self) -> list[str]:
        return [a.element for a in self.atoms]

    @property
    def positions(self) -> np.ndarray:
        if not self.atoms:
            return np.zeros((0, 3))
        return np.array([a.position for a in self.atoms], dtype=float)

    def index_of(self, origin: OriginTag) -> int:
        for i, atom in enumerate(self.atoms):
            if atom.origin == origin:
                return i
        raise KeyError(origin)


def frac_to_cart(lattice: Lattice, frac) -> np.ndarray:
    return np.asarray(frac, dtype=float) @ lattice.matrix


def suggest_reps(lattice: Lattice, radius: float) -> tuple:
    """Smallest odd repetitions keeping a sphere around the central image inside the supercell."""
    matrix = lattice.matrix
    volume = abs(np.linalg.det(matrix))
    reps = []
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        spacing = volume / np.linalg.norm(np.cross(matrix[j], matrix[k]))
        reps.append(2 * math.ceil(radius / spacing) + 1)
    return tuple(reps)


def build_supercell(structure: CrystalStructure, reps) -> AtomCollection:
    reps = tuple(int(r) for r in reps)
    if len(reps) != 3 or any(r < 1 for r in reps):
        raise ValueError(f"supercell repetitions must be three integers >= 1, got {reps}")
    matrix = structure.lattice.matrix
    sites = structure.expanded_sites()
    atoms = []
    for image in itertools.product(range(reps[0]), range(reps[1]), range(reps[2])):
        for site in sites:
            position = (np.array(site.frac) + np.array(image)) @ matrix
            atoms.append(Atom(site.element, tuple(float(v) for v in position), OriginTag(site.label, image)))
    cell = np.diag(reps).astype(float) @ matrix
    logging.info("build_supercell: %d sites x %s -> %d atoms", len(sites), reps, len(atoms))
    return AtomCollection(tuple(atoms), cell)


# ---------------------------------------------------------------- CIF


_CIF_TOKEN_RE = re.compile(r"""(?P<comment>#.*)|(?P<bare>[^'"\s#]\S*)|'(?P<single>.*?)'(?!\S)|"(?P<double>.*?)"(?!\S)""")


def _tokenize_cif(text: str) -> list[str]:
    tokens = []
    multiline = False
    block: list[str] = []
    for line in text.splitlines():
        if multiline:
            if line.startswith(";"):
                multiline = False
                tokens.append(" ".join(block))
                block = []
                line = line[1:]
            else:
                block.append(line.strip())
                continue
        if line.startswith(";"):
            multiline = True
            block.append(line[1:].strip())
            continue
        # a comment only starts where a token could
        for match in _CIF_TOKEN_RE.finditer(line):
            if match.group("comment") is not None:
                break
            tokens.append(next(v for v in match.group("bare", "single", "double") if v is not None))
    return tokens


def _read_cif_items(text: str) -> tuple[dict, list]:
    tokens = _tokenize_cif(text)
    data: dict[str, str] = {}
    loops: list[dict[str, list[str]]] = []
    pos = 0
    while pos < len(tokens):
        token = tokens[pos]
        lowered = token.lower()
        if lowered.startswith("data_"):
            pos += 1
        elif lowered == "loop_":
            pos += 1
            columns = []
            while pos < len(tokens) and tokens[pos].startswith("_"):
                columns.append(tokens[pos].lower())
                pos += 1
            values = []
            while pos < len(tokens) and not tokens[pos].startswith("_") and tokens[pos].lower() != "loop_" \
                    and not tokens[pos].lower().startswith("data_"):
                values.append(tokens[pos])
                pos += 1
            if columns and len(values) % len(columns):
                raise CifParseError(f"loop with columns {columns} has {len(values)} values, not a multiple")
            table = {c: values[i::len(columns)] for i, c in enumerate(columns)} if columns else {}
            loops.append(table)
        elif token.startswith("_"):
            value = tokens[pos + 1] if pos + 1 < len(tokens) else ""
            data[lowered] = value
            pos += 2
        else:
            pos += 1
    return data, loops


def _cif_float(value: str, tag: str) -> float:
    cleaned = re.sub(r"\(\d+\)$", "", value.strip())
    try:
        return float(cleaned)
    except ValueError:
        raise CifParseError(f"tag {tag} has non-numeric value '{value}'") from None


def _element_from(symbol: str, label: str) -> str:
    source = symbol if symbol not in ("", "?", ".") else label
    match = re.match(r"[A-Za-z]{1,2}", source)
    if not match:
        raise StructureParseError(f"unknown element symbol '{source}'")
    letters = match.group(0)
    candidate = letters[:1].upper() + letters[1:].lower()
    if candidate in atomic_numbers and len(letters) == 2:
        return validate_element(candidate)
    # labels like "Co1" or "OH" fall back to the one-letter symbol when the pair is not an element
    if candidate not in atomic_numbers and len(letters) == 2:
        return validate_element(letters[0])
    return validate_element(candidate)


def parse_cif(text: str) -> CrystalStructure:
    """Parse the cell, atom-site loop and optional symmetry loop of a CIF block."""
    data, loops = _read_cif_items(text)
    for tag in CELL_TAGS:
        if tag not in data:
            raise CifParseError(f"missing required tag {tag}")
    lattice = Lattice(*(_cif_float(data[tag], tag) for tag in CELL_TAGS))

    site_loop = next((loop for loop in loops if "_atom_site_fract_x" in loop), None)
    if site_loop is None:
        raise CifParseError("missing required tag _atom_site_fract_x")
    for tag in FRACT_TAGS:
        if tag not in site_loop:
            raise CifParseError(f"missing required tag {tag}")
    if "_atom_site_type_symbol" not in site_loop and "_atom_site_label" not in site_loop:
        raise CifParseError("missing required tag _atom_site_type_symbol")

    n_sites = len(site_loop["_atom_site_fract_x"])
    labels = site_loop.get("_atom_site_label", [""] * n_sites)
    symbols = site_loop.get("_atom_site_type_symbol", [""] * n_sites)
    sites = []
    for i in range(n_sites):
        element = _element_from(symbols[i], labels[i])
        frac = tuple(_cif_float(site_loop[tag][i], tag) for tag in FRACT_TAGS)
        label = labels[i] or f"{element}{i + 1}"
        sites.append(AtomSite(element, wrap_fractional(frac), label))

    ops = []
    for loop in loops:
        for tag in SYMOP_TAGS:
            if tag in loop:
                ops = [parse_symmetry_op(v) for v in loop[tag]]
                break
        if ops:
            break
    if not ops:
        for tag in SYMOP_TAGS:
            if tag in data:
                ops = [parse_symmetry_op(data[tag])]
    if not any(op.is_identity for op in ops):
        ops.insert(0, IDENTITY_OP)

    logging.info("parse_cif: %d sites, %d symmetry operators", len(sites), len(ops))
    return CrystalStructure(lattice, tuple(sites), tuple(ops))


# ---------------------------------------------------------------- XYZ


def write_xyz(atoms: AtomCollection, comment: str = "") -> str:
    if len(atoms) == 0:
        raise StructureParseError("empty structure")
    lines = [str(len(atoms)), comment.replace("\n", " ")]
    for atom in atoms:
        x, y, z = atom.position
        lines.append(f"{atom.element:<2s} {x:20.12f} {y:20.12f} {z:20.12f}")
    return "\n".join(lines) + "\n"


def parse_xyz(text: str) -> AtomCollection:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise XyzParseError("missing atom-count header")
    try:
        count = int(lines[0].split()[0])
    except ValueError:
        raise XyzParseError(f"atom-count header '{lines[0].strip()}' is not an integer") from None
    body = [line for line in lines[2:] if line.strip()]
    if len(body) != count:
        raise XyzParseError(f"atom-count header says {count} atoms but {len(body)} coordinate lines follow")
    atoms = []
    for i, line in enumerate(body):
        fields = line.split()
        if len(fields) < 4:
            raise XyzParseError(f"line {i + 3}: expected 'El x y z', got '{line.strip()}'")
        element = validate_element(fields[0])
        try:
            position = tuple(float(v) for v in fields[1:4])
        except ValueError:
            raise XyzParseError(f"line {i + 3}: unparseable coordinate in '{line.strip()}'") from None
        atoms.append(Atom(element, position, OriginTag(f"{element}{i + 1}", (0, 0, 0))))
    return AtomCollection(tuple(atoms))


def xyz_roundtrip(atoms: AtomCollection) -> AtomCollection:
    return parse_xyz(write_xyz(atoms))


class StructureProcessor:
    """Reads a structure file and prepares the periodic supercell for carving."""

    def __init__(self, radius: float = 12.5):
        self.radius = radius

    def process(self, file_path, reps=None):
        path = Path(file_path)
        logging.info("StructureProcessor: reading %s", path)
        print(f"Reading structure {path.name}...", file=sys.stderr)
        structure = parse_cif(path.read_text(encoding="utf-8"))
        if reps is None:
            reps = suggest_reps(structure.lattice, self.radius)
            logging.info("StructureProcessor: chose reps %s for radius %.2f", reps, self.radius)
        supercell = build_supercell(structure, reps)
        print(f"Built supercell {reps} with {len(supercell)} atoms", file=sys.stderr)
        return structure, supercell, tuple(reps)
