"""Gaussian integrals by McMurchie-Davidson Hermite expansion.

All arrays are vectorized over primitive pairs; a shell quartet is one einsum.
Positions enter in Å and are converted to bohr here; every result is in atomic units.
"""

import itertools
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from ase.data import atomic_numbers
from scipy.special import gamma, gammainc

from errors import IntegralError
from models.basis_manager import BasisSet, cartesian_components, component_factor

BOHR_PER_ANGSTROM = 1.8897259886
LINEAR_DEPENDENCE_THRESHOLD = 1e-10
DEFAULT_ERI_CAP = int(os.getenv("MOFBIND_ERI_CAP", "400"))


def boys(nmax: int, t) -> np.ndarray:
    """F_n(t) for n = 0..nmax; leading axis is n."""
    t = np.asarray(t, dtype=float)
    n = np.arange(nmax + 1, dtype=float).reshape((-1,) + (1,) * t.ndim)
    small = t < 1e-10
    safe = np.where(small, 1.0, t)
    exact = gammainc(n + 0.5, safe) * gamma(n + 0.5) / (2.0 * safe ** (n + 0.5))
    series = 1.0 / (2.0 * n + 1.0) - t / (2.0 * n + 3.0)
    return np.where(small, series, exact)


@dataclass
class Shell:
    center: int
    origin: np.ndarray  # bohr
    l: int
    exponents: np.ndarray
    coefficients: np.ndarray  # include the component-independent primitive norm
    components: np.ndarray = field(init=False)
    factors: np.ndarray = field(init=False)

    def __post_init__(self):
        comps = cartesian_components(self.l)
        self.components = np.array(comps, dtype=int)
        self.factors = np.array([component_factor(c) for c in comps])

    @property
    def size(self) -> int:
        return len(self.components)


def build_shells(elements, positions_bohr, basis: BasisSet) -> tuple[list[Shell], list[tuple]]:
    shells, labels = [], []
    for atom, (element, position) in enumerate(zip(elements, positions_bohr)):
        for template in basis.shells(element):
            shell = Shell(atom, np.asarray(position, dtype=float), template.l,
                          np.array(template.exponents), template.normalized_coefficients())
            shells.append(shell)
            for comp in shell.components:
                suffix = "".join("xyz"[axis] * int(power) for axis, power in enumerate(comp))
                labels.append((atom, element, "spd"[template.l] + suffix))
    return shells, labels


def _hermite_e(la: int, lb: int, a, b, qx) -> np.ndarray:
    """Hermite expansion coefficients E[i, j, t, prim] along one axis, qx = A - B."""
    p = a + b
    mu = a * b / p
    table = np.zeros((la + 1, lb + 1, la + lb + 2, a.size))
    table[0, 0, 0] = np.exp(-mu * qx * qx)
    pa = -mu * qx / a
    pb = mu * qx / b
    for i in range(la + 1):
        for j in range(lb + 1):
            if i == 0 and j == 0:
                continue
            prev, shift = (table[i - 1, j], pa) if i > 0 else (table[i, j - 1], pb)
            for t in range(i + j + 1):
                value = shift * prev[t] + (t + 1) * prev[t + 1]
                if t > 0:
                    value = value + prev[t - 1] / (2.0 * p)
                table[i, j, t] = value
    return table[:, :, : la + lb + 1]


def _hermite_coulomb(lmax: int, alpha, pq) -> np.ndarray:
    """Hermite Coulomb integrals R[t, u, v, ...] of order n = 0."""
    x, y, z = pq[..., 0], pq[..., 1], pq[..., 2]
    f = boys(lmax, alpha * (x * x + y * y + z * z))
    r = np.zeros((lmax + 1,) * 4 + alpha.shape)
    for n in range(lmax + 1):
        r[n, 0, 0, 0] = (-2.0 * alpha) ** n * f[n]
    for order in range(1, lmax + 1):
        for n in range(lmax - order + 1):
            for t in range(order + 1):
                for u in range(order + 1 - t):
                    v = order - t - u
                    up = r[n + 1]
                    if t > 0:
                        value = x * up[t - 1, u, v]
                        if t > 1:
                            value = value + (t - 1) * up[t - 2, u, v]
                    elif u > 0:
                        value = y * up[t, u - 1, v]
                        if u > 1:
                            value = value + (u - 1) * up[t, u - 2, v]
                    else:
                        value = z * up[t, u, v - 1]
                        if v > 1:
                            value = value + (v - 1) * up[t, u, v - 2]
                    r[n, t, u, v] = value
    return r[0]


def _hermite_indices(l: int) -> np.ndarray:
    return np.array([(t, u, v) for t in range(l + 1) for u in range(l + 1 - t) for v in range(l + 1 - t - u)],
                    dtype=int)


class _ShellPair:
    """Primitive-pair data for a bra (or ket) shell pair."""

    def __init__(self, sa: Shell, sb: Shell, extra: int = 0):
        self.sa, self.sb = sa, sb
        a = np.repeat(sa.exponents, sb.exponents.size)
        b = np.tile(sb.exponents, sa.exponents.size)
        self.a, self.b = a, b
        self.p = a + b
        self.coef = np.repeat(sa.coefficients, sb.exponents.size) * np.tile(sb.coefficients, sa.exponents.size)
        self.P = (a[:, None] * sa.origin + b[:, None] * sb.origin) / self.p[:, None]
        q = sa.origin - sb.origin
        self.E = [_hermite_e(sa.l, sb.l + extra, a, b, q[axis]) for axis in range(3)]
        self.norms = np.outer(sa.factors, sb.factors)

    def overlap_1d(self, axis: int) -> np.ndarray:
        return self.E[axis][:, :, 0, :] * np.sqrt(np.pi / self.p)

    def expansion(self, sign: bool = False) -> np.ndarray:
        """(nA*nB, nHermite, nprim) products E^x_t E^y_u E^z_v with coefficients folded in."""
        l = self.sa.l + self.sb.l
        herm = _hermite_indices(l)
        ca = self.sa.components[:, None, None, :]
        cb = self.sb.components[None, :, None, :]
        h = herm[None, None, :, :]
        block = np.ones((self.sa.size, self.sb.size, len(herm), self.p.size))
        for axis in range(3):
            block = block * self.E[axis][ca[..., axis], cb[..., axis], h[..., axis]]
        block = block * (self.norms[:, :, None, None] * self.coef)
        if sign:
            block = block * ((-1.0) ** herm.sum(axis=1))[None, None, :, None]
        return block.reshape(self.sa.size * self.sb.size, len(herm), self.p.size), herm


def _overlap_block(pair: _ShellPair) -> np.ndarray:
    s = [pair.overlap_1d(axis) for axis in range(3)]
    ca, cb = pair.sa.components, pair.sb.components
    prod = np.ones((pair.sa.size, pair.sb.size, pair.p.size))
    for axis in range(3):
        prod = prod * s[axis][ca[:, None, axis], cb[None, :, axis]]
    return np.einsum("abi,i->ab", prod, pair.coef) * pair.norms


def _kinetic_block(pair: _ShellPair) -> np.ndarray:
    lb = pair.sb.l
    b = pair.b
    s = [pair.overlap_1d(axis) for axis in range(3)]
    k = []
    for axis in range(3):
        kin = np.zeros((pair.sa.l + 1, lb + 1, pair.p.size))
        for j in range(lb + 1):
            value = -2.0 * b * (2 * j + 1) * s[axis][:, j] + 4.0 * b * b * s[axis][:, j + 2]
            if j >= 2:
                value = value + j * (j - 1) * s[axis][:, j - 2]
            kin[:, j] = -0.5 * value
        k.append(kin)
    ca, cb = pair.sa.components, pair.sb.components
    total = np.zeros((pair.sa.size, pair.sb.size, pair.p.size))
    for axis in range(3):
        term = np.ones_like(total)
        for other in range(3):
            table = k[other] if other == axis else s[other]
            term = term * table[ca[:, None, other], cb[None, :, other]]
        total += term
    return np.einsum("abi,i->ab", total, pair.coef) * pair.norms


def _nuclear_block(pair: _ShellPair, charges, centres) -> np.ndarray:
    expansion, herm = pair.expansion()
    l = pair.sa.l + pair.sb.l
    out = np.zeros(expansion.shape[0])
    for z, c in zip(charges, centres):
        r = _hermite_coulomb(l, pair.p, pair.P - c)
        rh = r[herm[:, 0], herm[:, 1], herm[:, 2]]
        out -= z * np.einsum("ahi,hi->a", expansion, rh * (2.0 * np.pi / pair.p))
    return out.reshape(pair.sa.size, pair.sb.size)


def _eri_block(bra: _ShellPair, ket: _ShellPair) -> np.ndarray:
    e_ab, h_ab = bra.expansion()
    e_cd, h_cd = ket.expansion(sign=True)
    p, q = bra.p[:, None], ket.p[None, :]
    alpha = p * q / (p + q)
    pq = bra.P[:, None, :] - ket.P[None, :, :]
    l = bra.sa.l + bra.sb.l + ket.sa.l + ket.sb.l
    r = _hermite_coulomb(l, alpha, pq) * (2.0 * np.pi**2.5 / (p * q * np.sqrt(p + q)))
    rmat = r[h_ab[:, None, 0] + h_cd[None, :, 0], h_ab[:, None, 1] + h_cd[None, :, 1], h_ab[:, None, 2] + h_cd[None, :, 2]]
    block = np.einsum("ahi,hkij,bkj->ab", e_ab, rmat, e_cd, optimize=True)
    return block.reshape(bra.sa.size, bra.sb.size, ket.sa.size, ket.sb.size)


def _geometry(cluster):
    elements = list(cluster.elements)
    positions = np.asarray(cluster.positions, dtype=float).reshape(-1, 3) * BOHR_PER_ANGSTROM
    return elements, positions


def _offsets(shells) -> list[int]:
    return list(np.cumsum([0] + [s.size for s in shells]))


def nuclear_repulsion(cluster) -> float:
    elements, positions = _geometry(cluster)
    charges = np.array([atomic_numbers[el] for el in elements], dtype=float)
    energy = 0.0
    for i, j in itertools.combinations(range(len(elements)), 2):
        energy += charges[i] * charges[j] / np.linalg.norm(positions[i] - positions[j])
    return float(energy)


def one_electron_integrals(cluster, basis: BasisSet):
    """Overlap, kinetic and nuclear-attraction matrices (S, T, V)."""
    elements, positions = _geometry(cluster)
    shells, _ = build_shells(elements, positions, basis)
    charges = [float(atomic_numbers[el]) for el in elements]
    off = _offsets(shells)
    n = off[-1]
    s_mat, t_mat, v_mat = (np.zeros((n, n)) for _ in range(3))
    for i, j in itertools.combinations_with_replacement(range(len(shells)), 2):
        pair = _ShellPair(shells[i], shells[j], extra=2)
        sl_i, sl_j = slice(off[i], off[i + 1]), slice(off[j], off[j + 1])
        for matrix, block in ((s_mat, _overlap_block(pair)), (t_mat, _kinetic_block(pair)),
                              (v_mat, _nuclear_block(pair, charges, positions))):
            matrix[sl_i, sl_j] = block
            matrix[sl_j, sl_i] = block.T
    return s_mat, t_mat, v_mat


def cross_overlap(cluster, basis_a: BasisSet, basis_b: BasisSet) -> np.ndarray:
    """Rectangular overlap <a|b> between two basis sets on the same atoms."""
    elements, positions = _geometry(cluster)
    shells_a, _ = build_shells(elements, positions, basis_a)
    shells_b, _ = build_shells(elements, positions, basis_b)
    off_a, off_b = _offsets(shells_a), _offsets(shells_b)
    out = np.zeros((off_a[-1], off_b[-1]))
    for i, sa in enumerate(shells_a):
        for j, sb in enumerate(shells_b):
            out[off_a[i]:off_a[i + 1], off_b[j]:off_b[j + 1]] = _overlap_block(_ShellPair(sa, sb))
    return out


def basis_function_atoms(cluster, basis: BasisSet) -> np.ndarray:
    elements, positions = _geometry(cluster)
    _, labels = build_shells(elements, positions, basis)
    return np.array([label[0] for label in labels], dtype=int)


def _over_cap(n: int, cap: int) -> IntegralError:
    return IntegralError(
        f"basis dimension {n} exceeds the in-memory ERI cap of {cap}; "
        "set MOFBIND_ERI_SCRATCH to use the disk-backed path, or carve a smaller cluster"
    )


def two_electron_integrals(cluster, basis: BasisSet, cap: int | None = None, scratch=None) -> np.ndarray:
    """Full (ij|kl) tensor in chemists' notation.

    Above ``cap`` basis functions the tensor is a memory-mapped .npy file under ``scratch``.
    """
    elements, positions = _geometry(cluster)
    shells, _ = build_shells(elements, positions, basis)
    off = _offsets(shells)
    n = off[-1]
    cap = DEFAULT_ERI_CAP if cap is None else cap
    if n > cap and scratch is None:
        raise _over_cap(n, cap)
    pairs = {(i, j): _ShellPair(shells[i], shells[j])
             for i, j in itertools.combinations_with_replacement(range(len(shells)), 2)}
    keys = sorted(pairs)
    if n > cap:
        scratch = Path(scratch)
        scratch.mkdir(parents=True, exist_ok=True)
        handle, name = tempfile.mkstemp(suffix=".npy", prefix="eri-", dir=scratch)
        os.close(handle)
        logging.info("two_electron_integrals: %d functions over cap %d, mapping %s", n, cap, name)
        eri = np.lib.format.open_memmap(name, mode="w+", dtype=np.float64, shape=(n, n, n, n))
        eri[...] = 0.0
    else:
        eri = np.zeros((n, n, n, n))
    for x, (i, j) in enumerate(keys):
        for k, l in keys[: x + 1]:
            block = _eri_block(pairs[(i, j)], pairs[(k, l)])
            si, sj = slice(off[i], off[i + 1]), slice(off[j], off[j + 1])
            sk, sl = slice(off[k], off[k + 1]), slice(off[l], off[l + 1])
            eri[si, sj, sk, sl] = block
            eri[sj, si, sk, sl] = block.transpose(1, 0, 2, 3)
            eri[si, sj, sl, sk] = block.transpose(0, 1, 3, 2)
            eri[sj, si, sl, sk] = block.transpose(1, 0, 3, 2)
            eri[sk, sl, si, sj] = block.transpose(2, 3, 0, 1)
            eri[sl, sk, si, sj] = block.transpose(3, 2, 0, 1)
            eri[sk, sl, sj, si] = block.transpose(2, 3, 1, 0)
            eri[sl, sk, sj, si] = block.transpose(3, 2, 1, 0)
    logging.debug("two_electron_integrals: %d shells, %d unique shell quartets", len(shells), len(keys) * (len(keys) + 1) // 2)
    return eri


@dataclass(frozen=True)
class IntegralSet:
    S: np.ndarray
    T: np.ndarray
    V: np.ndarray
    eri: np.ndarray
    e_nuc: float
    ao_labels: tuple
    basis_name: str
    warnings: tuple = ()

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def hcore(self) -> np.ndarray:
        return self.T + self.V

    @property
    def ao_atoms(self) -> np.ndarray:
        return np.array([label[0] for label in self.ao_labels], dtype=int)


class IntegralManager:
    """Computes and caches the integral set of one geometry in one basis."""

    def __init__(self, cap: int | None = None, scratch=None):
        self.cap = DEFAULT_ERI_CAP if cap is None else cap
        self.scratch = scratch if scratch is not None else os.getenv("MOFBIND_ERI_SCRATCH") or None

    def compute(self, cluster, basis: BasisSet, eri_file=None) -> IntegralSet:
        """Integrals of ``cluster``; ``eri_file`` supplies precomputed two-electron integrals."""
        elements, positions = _geometry(cluster)
        _, labels = build_shells(elements, positions, basis)
        n = len(labels)
        logging.info("IntegralManager: %d atoms, %d basis functions (%s)", len(elements), n, basis.name)
        if eri_file is None and n > self.cap and self.scratch is None:
            raise _over_cap(n, self.cap)
        s_mat, t_mat, v_mat = one_electron_integrals(cluster, basis)
        warnings = []
        smallest = float(np.linalg.eigvalsh(s_mat).min())
        if smallest < LINEAR_DEPENDENCE_THRESHOLD:
            message = f"near linear dependence: smallest overlap eigenvalue {smallest:.3e}"
            logging.warning(message)
            warnings.append(message)
        if eri_file is not None:
            eri = read_eri_file(eri_file)
            if eri.shape[0] != n:
                raise IntegralError(f"{eri_file}: holds {eri.shape[0]} basis functions, {basis.name} gives {n}")
            logging.info("IntegralManager: two-electron integrals read from %s", eri_file)
        else:
            eri = two_electron_integrals(cluster, basis, self.cap, self.scratch)
        return IntegralSet(s_mat, t_mat, v_mat, eri, nuclear_repulsion(cluster), tuple(labels), basis.name,
                           tuple(warnings))


def write_eri_file(path, eri: np.ndarray) -> None:
    """Flat little-endian layout: int64 n, then n**4 float64 in row-major order."""
    n = eri.shape[0]
    with open(path, "wb") as handle:
        handle.write(np.array([n], dtype="<i8").tobytes())
        handle.write(np.ascontiguousarray(eri, dtype="<f8").tobytes())


def read_eri_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IntegralError(f"{path}: truncated ERI file")
    n = int(np.frombuffer(raw[:8], dtype="<i8")[0])
    expected = 8 + 8 * n**4
    if len(raw) != expected:
        raise IntegralError(f"{path}: expected {expected} bytes for n={n}, found {len(raw)}")
    return np.frombuffer(raw[8:], dtype="<f8").reshape(n, n, n, n).copy()
