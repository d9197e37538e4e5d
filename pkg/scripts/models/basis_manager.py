import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import factorial2

from errors import BasisError

DATA_DIR = Path(os.getenv("MOFBIND_DATA_DIR", Path(__file__).resolve().parents[1] / "data"))

ANGULAR_MOMENTUM = {"S": 0, "P": 1, "D": 2}
SHELL_LETTERS = "SPD"

# Recognized by name; only the sets present in DATA_DIR are shipped
BASIS_ALIASES = {
    "sto3g": "sto-3g",
    "sto-3g": "sto-3g",
    "6-31g": "6-31g",
    "631g": "6-31g",
    "def2-svp": "def2-svp",
    "def2-sv_p": "def2-svp",
    "def2-sv(p)": "def2-svp",
    "def2-tzvp": "def2-tzvp",
}


def cartesian_components(l: int) -> list[tuple]:
    """Cartesian exponent triples of a shell, in xx, xy, xz, yy, yz, zz order."""
    return [(i, j, l - i - j) for i in range(l, -1, -1) for j in range(l - i, -1, -1)]


def component_factor(component) -> float:
    # per-component part of the primitive norm: 1/sqrt((2i-1)!!(2j-1)!!(2k-1)!!)
    return float(1.0 / np.sqrt(np.prod([factorial2(2 * n - 1) if n > 0 else 1.0 for n in component])))


@dataclass(frozen=True)
class ShellTemplate:
    l: int
    exponents: tuple
    coefficients: tuple

    def __post_init__(self):
        if self.l not in (0, 1, 2):
            raise BasisError(f"angular momentum {self.l} is not supported (s, p, d only)")
        if len(self.exponents) != len(self.coefficients) or not self.exponents:
            raise BasisError("shell needs equally many exponents and coefficients")
        if any(not e > 0 for e in self.exponents):
            raise BasisError(f"non-positive exponent in shell {self.exponents}")
        if any(a <= b for a, b in zip(self.exponents, self.exponents[1:])):
            raise BasisError(f"exponents must be strictly decreasing, got {self.exponents}")

    @property
    def n_functions(self) -> int:
        return (self.l + 1) * (self.l + 2) // 2

    def normalized_coefficients(self) -> np.ndarray:
        """Contraction coefficients times the component-independent primitive norm.

        The contraction is renormalized so every Cartesian component has unit norm
        once its component factor is applied.
        """
        alpha = np.array(self.exponents)
        coef = np.array(self.coefficients)
        prim = (2.0 * alpha / np.pi) ** 0.75 * (4.0 * alpha) ** (self.l / 2.0)
        overlap = (2.0 * np.sqrt(np.outer(alpha, alpha)) / np.add.outer(alpha, alpha)) ** (self.l + 1.5)
        norm = coef @ overlap @ coef
        return coef * prim / np.sqrt(norm)


@dataclass(frozen=True)
class BasisSet:
    name: str
    templates: dict

    def shells(self, element: str) -> tuple:
        try:
            return self.templates[element]
        except KeyError:
            raise BasisError(f"element {element} not found in basis {self.name}") from None

    def n_functions(self, element: str) -> int:
        return sum(s.n_functions for s in self.shells(element))

    def dimension(self, elements) -> int:
        n = sum(self.n_functions(el) for el in elements)
        if n <= 0:
            raise BasisError(f"basis {self.name} gives no functions for {sorted(set(elements))}")
        return n


def _number(text: str) -> float:
    return float(text.replace("D", "E").replace("d", "e"))


def parse_gbs(text: str) -> dict:
    """Parse every element block of a Gaussian94-style basis file."""
    blocks: dict[str, list[ShellTemplate]] = {}
    lines = [ln.split("!")[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    pos = 0
    element = None
    while pos < len(lines):
        line = lines[pos]
        pos += 1
        if line.startswith("****"):
            element = None
            continue
        fields = line.split()
        if element is None:
            element = fields[0].capitalize()
            blocks.setdefault(element, [])
            continue
        letters = fields[0].upper()
        if not all(ch in SHELL_LETTERS for ch in letters) or len(fields) < 2:
            raise BasisError(f"malformed shell header '{line}' for element {element}")
        n_prim = int(fields[1])
        rows = [lines[pos + k].split() for k in range(n_prim)]
        pos += n_prim
        exponents = tuple(_number(r[0]) for r in rows)
        for column, letter in enumerate(letters, start=1):
            try:
                coefs = tuple(_number(r[column]) for r in rows)
            except IndexError:
                raise BasisError(f"shell '{line}' of {element} lacks coefficient column {column}") from None
            blocks[element].append(ShellTemplate(ANGULAR_MOMENTUM[letter], exponents, coefs))
    return {el: tuple(shells) for el, shells in blocks.items()}


def load_basis(text: str, elements, name: str = "custom") -> BasisSet:
    templates = parse_gbs(text)
    chosen = {}
    for element in sorted(set(elements)):
        if element not in templates:
            raise BasisError(f"element {element} not found in basis {name}")
        chosen[element] = templates[element]
    logging.info("load_basis: %s for %s", name, ",".join(sorted(chosen)))
    return BasisSet(name, chosen)


def canonical_basis_name(name: str) -> str:
    key = name.strip().lower().replace(" ", "")
    return BASIS_ALIASES.get(key, key)


class BasisManager:
    """Registry of named basis sets, read from the shipped data directory or a file path."""

    def __init__(self, data_dir: Path | None = None):
        self.data_dir = Path(data_dir) if data_dir else DATA_DIR
        self._texts: dict[str, str] = {}

    def _text(self, name: str) -> tuple[str, str]:
        path = Path(name)
        if path.suffix == ".gbs" and path.exists():
            key = str(path)
        else:
            key = canonical_basis_name(name)
            path = self.data_dir / f"{key}.gbs"
            if not path.exists():
                if key in BASIS_ALIASES.values():
                    raise BasisError(f"basis {key} is recognized but not shipped; pass a .gbs file path instead")
                raise BasisError(f"unknown basis set '{name}'")
        if key not in self._texts:
            logging.info("BasisManager: reading %s", path)
            self._texts[key] = path.read_text(encoding="utf-8")
        return key, self._texts[key]

    def load(self, name: str, elements) -> BasisSet:
        key, text = self._text(name)
        return load_basis(text, elements, key)
