import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from ase.data import atomic_numbers
from scipy import linalg

from errors import ConvergenceError, ScfError, SystemSpecError
from models.integral_manager import LINEAR_DEPENDENCE_THRESHOLD, IntegralSet

RESTRICTED = "restricted"
UNRESTRICTED = "unrestricted"


@dataclass(frozen=True)
class SystemSpec:
    cluster: object
    basis_name: str
    net_charge: int = 0
    n_unpaired: int = 0

    def __post_init__(self):
        if self.n_unpaired < 0:
            raise SystemSpecError(f"n_unpaired must be >= 0, got {self.n_unpaired}")
        if self.n_electrons < 1:
            raise SystemSpecError(f"system has {self.n_electrons} electrons; need at least one")
        if (self.n_electrons - self.n_unpaired) % 2 or self.n_unpaired > self.n_electrons:
            raise SystemSpecError(
                f"{self.n_electrons} electrons cannot carry {self.n_unpaired} unpaired electrons"
            )

    @classmethod
    def from_cluster(cls, cluster, basis_name: str, net_charge=None, n_unpaired=None) -> "SystemSpec":
        charge = getattr(cluster, "net_charge", 0) if net_charge is None else net_charge
        unpaired = getattr(cluster, "n_unpaired", 0) if n_unpaired is None else n_unpaired
        return cls(cluster, basis_name, int(charge), int(unpaired))

    @property
    def n_electrons(self) -> int:
        return sum(atomic_numbers[el] for el in self.cluster.elements) - self.net_charge

    @property
    def n_alpha(self) -> int:
        return (self.n_electrons + self.n_unpaired) // 2

    @property
    def n_beta(self) -> int:
        return (self.n_electrons - self.n_unpaired) // 2


@dataclass(frozen=True)
class ScfOptions:
    max_iter: int = 200
    e_tol: float = 1e-9
    grad_tol: float = 1e-7
    diis_space: int = 8
    diis_start: int = 2
    level_shift: float = 0.0
    mode: str | None = None


@dataclass(frozen=True)
class MeanFieldResult:
    """Converged (or flagged) Hartree-Fock determinant; arrays carry a leading spin-channel axis."""

    mode: str
    mo_coeff: np.ndarray
    mo_energy: np.ndarray
    mo_occ: np.ndarray
    e_tot: float
    e_nuc: float
    converged: bool
    gradient_norm: float
    n_iter: int
    fock: np.ndarray
    energy_history: tuple = field(default=(), compare=False)
    gradient_history: tuple = field(default=(), compare=False)

    @property
    def nchan(self) -> int:
        return self.mo_coeff.shape[0]

    @property
    def density(self) -> np.ndarray:
        """Per-spin AO density matrices, shape (nchan, n, n)."""
        return np.einsum("spi,si,sqi->spq", self.mo_coeff, self.mo_occ, self.mo_coeff)

    @property
    def n_alpha(self) -> int:
        return int(round(self.mo_occ[0].sum()))

    @property
    def n_beta(self) -> int:
        return int(round(self.mo_occ[-1].sum()))


def _orthogonalizer(s: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(s)
    if values.min() < LINEAR_DEPENDENCE_THRESHOLD:
        raise ScfError(f"overlap matrix is singular (smallest eigenvalue {values.min():.3e})")
    return vectors / np.sqrt(values)


def _fock(ints: IntegralSet, dens: np.ndarray) -> np.ndarray:
    total = dens.sum(axis=0) if len(dens) == 2 else 2.0 * dens[0]
    coulomb = np.einsum("pqrs,rs->pq", ints.eri, total, optimize=True)
    exchange = np.einsum("prqt,xrt->xpq", ints.eri, dens, optimize=True)
    return ints.hcore[None] + coulomb[None] - exchange


def _energy(ints: IntegralSet, dens: np.ndarray, fock: np.ndarray) -> float:
    elec = np.einsum("spq,spq->", dens, ints.hcore[None] + fock) / len(dens)
    return float(elec + ints.e_nuc)


def _diagonalize(fock: np.ndarray, x: np.ndarray):
    energies, coeffs = [], []
    for f in fock:
        e, c = linalg.eigh(x.T @ f @ x)
        energies.append(e)
        coeffs.append(x @ c)
    return np.array(energies), np.array(coeffs)


def _occupations(nchan: int, nmo: int, n_alpha: int, n_beta: int) -> np.ndarray:
    occ = np.zeros((nchan, nmo))
    occ[0, :n_alpha] = 1.0
    if nchan == 2:
        occ[1, :n_beta] = 1.0
    return occ


def _densities(coeffs: np.ndarray, occ: np.ndarray) -> np.ndarray:
    return np.einsum("spi,si,sqi->spq", coeffs, occ, coeffs)


def _commutators(ints: IntegralSet, fock: np.ndarray, dens: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.array([x.T @ (f @ d @ ints.S - ints.S @ d @ f) @ x for f, d in zip(fock, dens)])


def orbital_gradient(ints: IntegralSet, mf: MeanFieldResult) -> float:
    """Largest element of [F, D] in the orthonormal basis for the stored orbitals."""
    dens = _densities(mf.mo_coeff, mf.mo_occ)
    return float(np.abs(_commutators(ints, mf.fock, dens, _orthogonalizer(ints.S))).max())


class Diis:
    """Pulay extrapolation over a bounded history of (vector, error) pairs."""

    def __init__(self, space: int):
        self.space = space
        self.vectors: list[np.ndarray] = []
        self.errors: list[np.ndarray] = []

    def extrapolate(self, vector: np.ndarray, error: np.ndarray) -> np.ndarray:
        if self.space < 2:
            return vector
        self.vectors.append(vector)
        self.errors.append(error.ravel())
        if len(self.vectors) > self.space:
            self.vectors.pop(0)
            self.errors.pop(0)
        n = len(self.vectors)
        if n < 2:
            return vector
        b = -np.ones((n + 1, n + 1))
        b[n, n] = 0.0
        errs = np.array(self.errors)
        b[:n, :n] = errs @ errs.T
        rhs = np.zeros(n + 1)
        rhs[n] = -1.0
        try:
            weights = linalg.solve(b, rhs)[:n]
        except linalg.LinAlgError:
            logging.debug("DIIS: singular subspace matrix, restarting")
            self.vectors, self.errors = [vector], [error.ravel()]
            return vector
        return np.einsum("i,i...->...", weights, np.array(self.vectors))


def run_scf(spec: SystemSpec, ints: IntegralSet, opts: ScfOptions | None = None) -> MeanFieldResult:
    """Roothaan (restricted) or Pople-Nesbet (unrestricted) SCF from the core-Hamiltonian guess."""
    opts = opts or ScfOptions()
    mode = opts.mode or (RESTRICTED if spec.n_unpaired == 0 else UNRESTRICTED)
    if mode == RESTRICTED and spec.n_unpaired:
        raise SystemSpecError("restricted SCF needs a closed-shell system (n_unpaired = 0)")
    nchan = 1 if mode == RESTRICTED else 2
    n = ints.n
    if max(spec.n_alpha, spec.n_beta) > n:
        raise SystemSpecError(f"{spec.n_alpha} alpha electrons do not fit into {n} basis functions")

    x = _orthogonalizer(ints.S)
    nmo = x.shape[1]
    occ = _occupations(nchan, nmo, spec.n_alpha, spec.n_beta)
    energies, coeffs = _diagonalize(np.repeat(ints.hcore[None], nchan, axis=0), x)
    dens = _densities(coeffs, occ)

    diis = Diis(opts.diis_space)
    e_prev = None
    e_hist, g_hist = [], []
    converged = False
    iteration = 0
    grad = np.inf
    for iteration in range(1, opts.max_iter + 1):
        fock = _fock(ints, dens)
        energy = _energy(ints, dens, fock)
        comm = _commutators(ints, fock, dens, x)
        grad = float(np.abs(comm).max())
        e_hist.append(energy)
        g_hist.append(grad)
        logging.debug("SCF iter %3d  E = %.12f  dE = %.3e  |[F,D]| = %.3e", iteration, energy,
                      0.0 if e_prev is None else energy - e_prev, grad)
        if e_prev is not None and abs(energy - e_prev) < opts.e_tol and grad < opts.grad_tol:
            converged = True
            break
        e_prev = energy
        if iteration >= opts.diis_start:
            fock = diis.extrapolate(fock, comm)
        if opts.level_shift:
            fock = fock + opts.level_shift * np.array([ints.S - ints.S @ d @ ints.S for d in dens])
        energies, coeffs = _diagonalize(fock, x)
        dens = _densities(coeffs, occ)

    fock = _fock(ints, dens)
    energies, coeffs = _diagonalize(fock, x)
    dens = _densities(coeffs, occ)
    fock = _fock(ints, dens)
    energy = _energy(ints, dens, fock)
    grad = float(np.abs(_commutators(ints, fock, dens, x)).max())
    if not converged:
        logging.warning("SCF not converged after %d iterations (|[F,D]| = %.3e)", iteration, grad)
    logging.info("run_scf: %s, %d basis functions, E = %.10f, converged=%s in %d iterations",
                 mode, n, energy, converged, iteration)
    return MeanFieldResult(mode, coeffs, energies, occ, energy, ints.e_nuc, converged, grad, iteration, fock,
                           tuple(e_hist), tuple(g_hist))


@dataclass(frozen=True)
class MOIntegrals:
    """Integrals in an orthonormal orbital basis, one block per spin case.

    ``eri_aa``, ``eri_ab``, ``eri_bb`` are chemists' (pq|rs) with the first pair
    in the first named channel. Restricted sets share one array for all three.
    ``h1``, ``fock`` and ``mo_occ`` are indexed by channel first; fragment
    clusters hold tuples since their spin channels may differ in size.
    """

    mode: str
    h1: np.ndarray
    fock: np.ndarray
    eri_aa: np.ndarray
    eri_ab: np.ndarray
    eri_bb: np.ndarray
    mo_occ: np.ndarray
    e_ref: float
    e_nuc: float = 0.0

    @property
    def nchan(self) -> int:
        return len(self.fock)

    @property
    def nmo(self) -> int:
        return self.fock[0].shape[-1]

    def n_orbitals(self, channel: int) -> int:
        return self.fock[channel].shape[-1]

    @property
    def mo_energy(self) -> np.ndarray:
        return np.array([np.diag(f) for f in self.fock])


def transform_one_body(matrix: np.ndarray, c1: np.ndarray, c2: np.ndarray | None = None) -> np.ndarray:
    c2 = c1 if c2 is None else c2
    return c1.T @ matrix @ c2


def transform_eri(eri: np.ndarray, c1, c2=None, c3=None, c4=None) -> np.ndarray:
    """Four quarter transformations (pq|rs) -> (ij|kl)."""
    c2 = c1 if c2 is None else c2
    c3 = c1 if c3 is None else c3
    c4 = c3 if c4 is None else c4
    out = np.tensordot(eri, c4, axes=([3], [0]))
    out = np.tensordot(out, c3, axes=([2], [0])).transpose(0, 1, 3, 2)
    out = np.tensordot(out, c2, axes=([1], [0])).transpose(0, 3, 1, 2)
    out = np.tensordot(c1, out, axes=([0], [0]))
    return out


def mo_transform(ints: IntegralSet, mf: MeanFieldResult) -> MOIntegrals:
    if not mf.converged:
        raise ConvergenceError("mean-field result is not converged; refusing to build MO integrals")
    c = mf.mo_coeff
    h1 = np.array([transform_one_body(ints.hcore, ci) for ci in c])
    fock = np.array([transform_one_body(f, ci) for f, ci in zip(mf.fock, c)])
    eri_aa = transform_eri(ints.eri, c[0])
    if mf.nchan == 1:
        eri_ab = eri_bb = eri_aa
    else:
        eri_ab = transform_eri(ints.eri, c[0], c[0], c[1], c[1])
        eri_bb = transform_eri(ints.eri, c[1])
    return MOIntegrals(mf.mode, h1, fock, eri_aa, eri_ab, eri_bb, mf.mo_occ.copy(), mf.e_tot, mf.e_nuc)


# ---------------------------------------------------------------- persistence

_BODY_FIELDS = ("mo_coeff", "mo_energy", "mo_occ", "fock")


def dump_result(mf: MeanFieldResult, path) -> None:
    """One JSON header line, then the arrays as flat little-endian float64 in header order."""
    header = {
        "mode": mf.mode,
        "e_tot": mf.e_tot,
        "e_nuc": mf.e_nuc,
        "converged": mf.converged,
        "gradient_norm": mf.gradient_norm,
        "n_iter": mf.n_iter,
        "arrays": [[name, list(getattr(mf, name).shape)] for name in _BODY_FIELDS],
    }
    with open(path, "wb") as handle:
        handle.write((json.dumps(header) + "\n").encode("utf-8"))
        for name in _BODY_FIELDS:
            handle.write(np.ascontiguousarray(getattr(mf, name), dtype="<f8").tobytes())


def load_result(path) -> MeanFieldResult:
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode("utf-8"))
    offset = newline + 1
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(raw):
        raise ScfError(f"{path}: {len(raw) - offset} trailing bytes after the declared arrays")
    return MeanFieldResult(header["mode"], arrays["mo_coeff"], arrays["mo_energy"], arrays["mo_occ"],
                           header["e_tot"], header["e_nuc"], header["converged"], header["gradient_norm"],
                           header["n_iter"], arrays["fock"])


class ScfManager:
    def __init__(self, opts: ScfOptions | None = None):
        self.opts = opts or ScfOptions()

    def run(self, spec: SystemSpec, ints: IntegralSet, tag: str = "") -> MeanFieldResult:
        print(f"⚛️  SCF {tag} ({spec.n_electrons} electrons, {ints.n} functions)...", file=sys.stderr)
        result = run_scf(spec, ints, self.opts)
        if not result.converged:
            raise ConvergenceError(
                f"SCF for {tag or 'system'} did not converge in {result.n_iter} iterations "
                f"(last |[F,D]| = {result.gradient_norm:.3e}, last energies "
                f"{', '.join(f'{e:.8f}' for e in result.energy_history[-3:])})"
            )
        print(f"SCF {tag}: E = {result.e_tot:.10f} Eh", file=sys.stderr)
        return result
