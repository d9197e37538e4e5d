import logging
import math
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import linalg

from errors import EmbeddingError, SolverError
from models.basis_manager import BasisSet
from models.correlation_manager import (
    CCSD,
    MP2,
    CorrelatedSolution,
    CorrelationManager,
    correlation_energy,
    full_window,
    mp2_density,
)
from models.integral_manager import IntegralSet, basis_function_atoms, cross_overlap
from models.scf_manager import RESTRICTED, MeanFieldResult, MOIntegrals, mo_transform, transform_eri

DMET_ONLY = math.inf
DMET_SVD_CUTOFF = 1e-6
IAO_RANK_TOLERANCE = 1e-10
DEFAULT_ETA_HL = 1e-5
DEFAULT_ETA_LL = 1e-7


# ------------------------------------------------------------------------ IAOs

@dataclass(frozen=True)
class IaoSet:
    """Orthonormal intrinsic atomic orbitals per spin channel, one per minimal-basis function."""

    coeff: tuple
    atoms: np.ndarray

    @property
    def count(self) -> int:
        return len(self.atoms)


def _symmetric_orthonormalize(x: np.ndarray, s: np.ndarray, what: str) -> np.ndarray:
    metric = x.T @ s @ x
    values, vectors = linalg.eigh(metric)
    if values.min() < IAO_RANK_TOLERANCE:
        raise EmbeddingError(f"rank deficiency while orthonormalizing {what} (eigenvalue {values.min():.3e})")
    return x @ (vectors / np.sqrt(values)) @ vectors.T


def build_iaos(mf: MeanFieldResult, ints: IntegralSet, cluster, basis: BasisSet, minimal: BasisSet) -> IaoSet:
    """Intrinsic atomic orbitals of the occupied space against a minimal reference basis."""
    s1 = ints.S
    s12 = cross_overlap(cluster, basis, minimal)
    projected = _symmetric_orthonormalize(linalg.solve(s1, s12), s1, "the projected minimal basis")
    identity = np.eye(s1.shape[0])
    coeff = []
    for ch in range(mf.nchan):
        c_occ = mf.mo_coeff[ch][:, mf.mo_occ[ch] > 0.5]
        q, _ = linalg.qr(projected.T @ s1 @ c_occ, mode="economic")
        c_proj = projected @ q
        occ_proj = c_occ @ c_occ.T @ s1
        tilde_proj = c_proj @ c_proj.T @ s1
        raw = occ_proj @ tilde_proj @ projected + (identity - occ_proj) @ (identity - tilde_proj) @ projected
        coeff.append(_symmetric_orthonormalize(raw, s1, "the IAOs"))
    atoms = basis_function_atoms(cluster, minimal)
    logging.info("build_iaos: %d IAOs from %d basis functions (%s/%s)", len(atoms), s1.shape[0],
                 basis.name, minimal.name)
    return IaoSet(tuple(coeff), atoms)


# ------------------------------------------------------------------- fragments

@dataclass(frozen=True)
class FragmentSpace:
    atom: int
    label: str
    coeff: tuple

    @property
    def size(self) -> int:
        return self.coeff[0].shape[1]

    def projector(self, overlap: np.ndarray, channel: int = 0) -> np.ndarray:
        c = self.coeff[channel]
        return c @ c.T @ overlap


def make_fragments(iaos: IaoSet, atom_assignment=None, elements=None) -> list[FragmentSpace]:
    """One fragment per atom from the IAO columns assigned to it."""
    assignment = iaos.atoms if atom_assignment is None else np.asarray(atom_assignment)
    if len(assignment) != iaos.count:
        raise EmbeddingError(f"atom assignment covers {len(assignment)} of {iaos.count} IAOs")
    unassigned = [k for k, atom in enumerate(assignment) if atom is None or atom < 0]
    if unassigned:
        raise EmbeddingError(f"IAOs {unassigned} are not assigned to any atom")
    fragments = []
    for atom in sorted({int(a) for a in assignment}):
        cols = np.flatnonzero(assignment == atom)
        label = f"{elements[atom]}{atom}" if elements is not None else f"atom{atom}"
        fragments.append(FragmentSpace(atom, label, tuple(c[:, cols] for c in iaos.coeff)))
    return fragments


# ------------------------------------------------------------------------ bath

@dataclass(frozen=True)
class FragmentCluster:
    """Fragment plus bath in the global MO basis, with its own integral set.

    ``orbitals[ch]`` holds the cluster's occupied columns first, then virtual ones.
    ``projector[ch]`` is the fragment projector expressed in the cluster basis.
    """

    fragment: FragmentSpace
    eta: float
    orbitals: tuple
    mo: MOIntegrals
    projector: tuple
    n_dmet: tuple
    n_bno_occ: tuple
    n_bno_vir: tuple

    @property
    def n_bath(self) -> int:
        return sum(self.n_dmet) + sum(self.n_bno_occ) + sum(self.n_bno_vir)

    @property
    def n_orbitals(self) -> tuple:
        return tuple(o.shape[1] for o in self.orbitals)

    def occupied_projectors(self) -> list[np.ndarray]:
        out = []
        for ch, p in enumerate(self.projector):
            nocc = int(np.sum(np.asarray(self.mo.mo_occ[ch]) > 0.5))
            out.append(p[:nocc, :nocc])
        return out


def subspace_integrals(mo: MOIntegrals, occupied: list, virtual: list) -> MOIntegrals:
    """Integrals over orthonormal orbital sets given as columns in the MO basis of ``mo``."""
    rot = [np.hstack([o, v]) for o, v in zip(occupied, virtual)]
    h1 = tuple(r.T @ h @ r for r, h in zip(rot, mo.h1))
    fock = tuple(r.T @ f @ r for r, f in zip(rot, mo.fock))
    occ = tuple(np.concatenate([np.ones(o.shape[1]), np.zeros(v.shape[1])]) for o, v in zip(occupied, virtual))
    eri_aa = transform_eri(mo.eri_aa, rot[0])
    if mo.nchan == 1:
        eri_ab = eri_bb = eri_aa
    else:
        eri_ab = transform_eri(mo.eri_ab, rot[0], rot[0], rot[1], rot[1])
        eri_bb = transform_eri(mo.eri_bb, rot[1])
    return MOIntegrals(mo.mode, h1, fock, eri_aa, eri_ab, eri_bb, occ, mo.e_ref, mo.e_nuc)


def _complement(space: np.ndarray, within: np.ndarray) -> np.ndarray:
    """Orthonormal part of ``within`` orthogonal to ``space`` (both column-orthonormal)."""
    rest = within - space @ (space.T @ within)
    if rest.shape[1] == 0:
        return rest
    u, s, _ = linalg.svd(rest, full_matrices=False)
    return u[:, s > 0.5]


def _natural_orbitals(block: np.ndarray, env: np.ndarray, eta: float, sign: float) -> np.ndarray:
    if env.shape[1] == 0:
        return env
    weights, vectors = linalg.eigh(sign * block)
    order = np.argsort(-weights)
    keep = order[weights[order] >= eta]
    return env @ vectors[:, keep]


def build_bath(fragment: FragmentSpace, mf: MeanFieldResult, mo: MOIntegrals, eta: float,
               overlap: np.ndarray) -> FragmentCluster:
    """DMET bath from the mean-field density plus MP2 bath natural orbitals above ``eta``.

    ``eta = DMET_ONLY`` skips the natural-orbital step. Restricted natural
    occupations are spin-summed, unrestricted ones per spin.
    """
    if not eta > 0:
        raise EmbeddingError(f"bath threshold must be > 0 (use DMET_ONLY for the DMET limit), got {eta}")
    frag_mo, cl_occ, cl_vir, env_occ, env_vir, n_dmet = [], [], [], [], [], []
    for ch in range(mf.nchan):
        f = mf.mo_coeff[ch].T @ overlap @ fragment.coeff[ch]
        occ = np.asarray(mf.mo_occ[ch]) > 0.5
        dens = np.diag(occ.astype(float))
        coupling = dens @ f - f @ (f.T @ dens @ f)
        u, s, _ = linalg.svd(coupling, full_matrices=False)
        bath = u[:, s > DMET_SVD_CUTOFF]
        space = np.hstack([f, bath])
        weights, vectors = linalg.eigh(space.T @ dens @ space)
        deviation = np.abs(weights - np.round(weights)).max(initial=0.0)
        if deviation > 1e-6:
            logging.warning("build_bath: %s channel %d cluster occupations deviate from 0/1 by %.2e",
                            fragment.label, ch, deviation)
        c_occ, c_vir = space @ vectors[:, weights > 0.5], space @ vectors[:, weights <= 0.5]
        eye = np.eye(len(occ))
        frag_mo.append(f)
        cl_occ.append(c_occ)
        cl_vir.append(c_vir)
        env_occ.append(_complement(c_occ, eye[:, occ]))
        env_vir.append(_complement(c_vir, eye[:, ~occ]))
        n_dmet.append(bath.shape[1])

    bno_occ = [e[:, :0] for e in env_occ]
    bno_vir = [e[:, :0] for e in env_vir]
    if math.isfinite(eta):
        vir_mo = subspace_integrals(mo, cl_occ, [np.hstack([v, e]) for v, e in zip(cl_vir, env_vir)])
        blocks = mp2_density(vir_mo, full_window(vir_mo))
        bno_vir = [_natural_orbitals(b[1][v.shape[1]:, v.shape[1]:], e, eta, 1.0)
                   for b, v, e in zip(blocks, cl_vir, env_vir)]
        occ_mo = subspace_integrals(mo, [np.hstack([o, e]) for o, e in zip(cl_occ, env_occ)], cl_vir)
        blocks = mp2_density(occ_mo, full_window(occ_mo))
        bno_occ = [_natural_orbitals(b[0][o.shape[1]:, o.shape[1]:], e, eta, -1.0)
                   for b, o, e in zip(blocks, cl_occ, env_occ)]

    occupied = [np.hstack([o, b]) for o, b in zip(cl_occ, bno_occ)]
    virtual = [np.hstack([v, b]) for v, b in zip(cl_vir, bno_vir)]
    orbitals = tuple(np.hstack([o, v]) for o, v in zip(occupied, virtual))
    cluster_mo = subspace_integrals(mo, occupied, virtual)
    projector = tuple(r.T @ f @ f.T @ r for r, f in zip(orbitals, frag_mo))
    logging.debug("build_bath: %s eta=%g dmet=%s bno_occ=%s bno_vir=%s", fragment.label, eta, n_dmet,
                  [b.shape[1] for b in bno_occ], [b.shape[1] for b in bno_vir])
    return FragmentCluster(fragment, eta, orbitals, cluster_mo, projector, tuple(n_dmet),
                           tuple(b.shape[1] for b in bno_occ), tuple(b.shape[1] for b in bno_vir))


def fragment_mean_field_energy(cluster: FragmentCluster) -> float:
    """Fragment-projected mean-field electronic energy; summing all fragments plus e_nuc gives E_HF."""
    weight = 2.0 if cluster.mo.mode == RESTRICTED else 1.0
    energy = 0.0
    for ch, p in enumerate(cluster.projector):
        dens = np.diag(np.asarray(cluster.mo.mo_occ[ch], dtype=float))
        energy += 0.5 * weight * np.trace(p @ dens @ (cluster.mo.h1[ch] + cluster.mo.fock[ch]))
    return float(energy)


# ------------------------------------------------------------------- solutions

@dataclass(frozen=True)
class FragmentSolution:
    cluster: FragmentCluster
    solver: str
    contribution: float
    solution: CorrelatedSolution = field(compare=False)

    @property
    def atom(self) -> int:
        return self.cluster.fragment.atom


def solve_fragment(cluster: FragmentCluster, solver: str, correlation: CorrelationManager | None = None) -> FragmentSolution:
    correlation = correlation or CorrelationManager()
    window = full_window(cluster.mo)
    try:
        solution = correlation.solve(solver, cluster.mo, window)
    except SolverError as exc:
        raise EmbeddingError(f"fragment {cluster.fragment.label}: {exc}") from exc
    contribution = correlation_energy(cluster.mo, window, solution, cluster.occupied_projectors())
    if not math.isfinite(contribution):
        raise EmbeddingError(f"fragment {cluster.fragment.label}: non-finite energy contribution")
    return FragmentSolution(cluster, solver, contribution, solution)


def assemble_global_energy(solutions, mf: MeanFieldResult, expected_atoms=None) -> float:
    """E_HF plus the fragment-projected correlation contributions, reduced in atom order."""
    seen = {}
    for sol in solutions:
        if sol.atom in seen:
            raise EmbeddingError(f"fragment {sol.cluster.fragment.label} appears more than once")
        if sol.cluster.mo.e_ref != mf.e_tot:
            raise EmbeddingError(f"fragment {sol.cluster.fragment.label} was built on a different mean field")
        seen[sol.atom] = sol
    if expected_atoms is not None:
        missing = sorted(set(expected_atoms) - set(seen))
        if missing:
            raise EmbeddingError(f"missing fragment solutions for atoms {missing}")
    total = mf.e_tot
    for atom in sorted(seen):
        total += seen[atom].contribution
    return float(total)


# ------------------------------------------------------------------ multilevel

@dataclass(frozen=True)
class MultiLevelSpec:
    eta_hl: float = DEFAULT_ETA_HL
    eta_ll: float = DEFAULT_ETA_LL
    hl_solver: str = CCSD
    ll_solver: str = MP2
    close_atoms: frozenset = frozenset()
    restrict_to_close: bool = True

    def __post_init__(self):
        if not self.eta_hl >= self.eta_ll > 0:
            raise EmbeddingError(f"need eta_hl >= eta_ll > 0, got {self.eta_hl} and {self.eta_ll}")
        if self.restrict_to_close and not self.close_atoms:
            raise EmbeddingError("close-atom set is empty while the high-level restriction is active")


@dataclass(frozen=True)
class MultiLevelResult:
    e_total: float
    e_hf: float
    e_hl: float
    e_ll_full: float
    e_ll_close: float
    spec: MultiLevelSpec
    rows: tuple = ()


class DiagnosticsRow(NamedTuple):
    atom: int
    label: str
    eta: float
    dmet_bath: int
    bno_bath: int
    solver: str
    contribution: float


DIAGNOSTICS_HEADER = ("atom", "label", "eta", "dmet_bath", "bno_bath", "solver", "contribution_hartree")


def diagnostics_row(solution: FragmentSolution) -> DiagnosticsRow:
    c = solution.cluster
    return DiagnosticsRow(solution.atom, c.fragment.label, c.eta, sum(c.n_dmet),
                          sum(c.n_bno_occ) + sum(c.n_bno_vir), solution.solver, solution.contribution)


def write_diagnostics(rows, path) -> None:
    lines = ["\t".join(DIAGNOSTICS_HEADER)]
    for row in sorted(rows, key=lambda r: (r.solver, -r.eta, r.atom)):
        lines.append("\t".join((str(row.atom), row.label, repr(row.eta), str(row.dmet_bath), str(row.bno_bath),
                                row.solver, repr(row.contribution))))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class EmbeddingManager:
    """Fragment clusters and solutions of one mean field, cached per (atom, eta, solver)."""

    def __init__(self, cluster, ints: IntegralSet, mf: MeanFieldResult, basis: BasisSet, minimal: BasisSet,
                 jobs: int = 1, correlation: CorrelationManager | None = None, atom_assignment=None):
        self.geometry = cluster
        self.ints = ints
        self.mf = mf
        self.mo = mo_transform(ints, mf)
        self.jobs = max(1, int(jobs))
        self.correlation = correlation or CorrelationManager()
        self.iaos = build_iaos(mf, ints, cluster, basis, minimal)
        self.fragments = {f.atom: f for f in make_fragments(self.iaos, atom_assignment, list(cluster.elements))}
        self._clusters: dict = {}
        self._solutions: dict = {}
        self._lock = threading.Lock()

    @property
    def atoms(self) -> list[int]:
        return sorted(self.fragments)

    def cluster(self, atom: int, eta: float) -> FragmentCluster:
        key = (atom, eta)
        with self._lock:
            if key in self._clusters:
                return self._clusters[key]
        built = build_bath(self.fragments[atom], self.mf, self.mo, eta, self.ints.S)
        with self._lock:
            return self._clusters.setdefault(key, built)

    def solve(self, atom: int, eta: float, solver: str) -> FragmentSolution:
        key = (atom, eta, solver)
        with self._lock:
            if key in self._solutions:
                return self._solutions[key]
        solution = solve_fragment(self.cluster(atom, eta), solver, self.correlation)
        with self._lock:
            return self._solutions.setdefault(key, solution)

    def _resolve(self, atoms) -> list[int]:
        atoms = self.atoms if atoms is None else sorted(set(atoms))
        unknown = [a for a in atoms if a not in self.fragments]
        if unknown:
            raise EmbeddingError(f"atoms {unknown} do not resolve to fragments (have {self.atoms})")
        return atoms

    def solutions(self, eta: float, solver: str, atoms=None) -> list[FragmentSolution]:
        atoms = self._resolve(atoms)
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            results = list(pool.map(lambda a: self.solve(a, eta, solver), atoms))
        return sorted(results, key=lambda s: s.atom)

    def correlation_sum(self, eta: float, solver: str, atoms=None) -> float:
        return assemble_global_energy(self.solutions(eta, solver, atoms), self.mf) - self.mf.e_tot

    def total_energy(self, eta: float, solver: str, atoms=None) -> float:
        return assemble_global_energy(self.solutions(eta, solver, atoms), self.mf, self._resolve(atoms))

    def multilevel_energy(self, spec: MultiLevelSpec) -> MultiLevelResult:
        for solver in (spec.hl_solver, spec.ll_solver):
            if solver not in self.correlation.available():
                raise EmbeddingError(f"solver {solver} is unavailable; rerun in LL-only mode "
                                     f"(hl_solver = ll_solver = {MP2})")
        close = sorted(spec.close_atoms) if spec.restrict_to_close else None
        print(f"🧩 EWF: {len(self.atoms)} fragments, HL={spec.hl_solver}@{spec.eta_hl:g}, "
              f"LL={spec.ll_solver}@{spec.eta_ll:g}", file=sys.stderr)
        hl = self.solutions(spec.eta_hl, spec.hl_solver, close)
        ll_full = self.solutions(spec.eta_ll, spec.ll_solver)
        ll_close = self.solutions(spec.eta_hl, spec.ll_solver, close)
        e_hl, e_ll_full, e_ll_close = (assemble_global_energy(s, self.mf) - self.mf.e_tot
                                       for s in (hl, ll_full, ll_close))
        total = self.mf.e_tot + e_hl + (e_ll_full - e_ll_close)
        logging.info("multilevel_energy: E_HF=%.10f HL=%.10f LL(full)=%.10f LL(close)=%.10f E=%.10f",
                     self.mf.e_tot, e_hl, e_ll_full, e_ll_close, total)
        used = {(s.atom, s.cluster.eta, s.solver): s for s in (*hl, *ll_full, *ll_close)}
        rows = tuple(diagnostics_row(used[key]) for key in sorted(used))
        return MultiLevelResult(total, self.mf.e_tot, e_hl, e_ll_full, e_ll_close, spec, rows)


def multilevel_energy(system: EmbeddingManager, spec: MultiLevelSpec) -> MultiLevelResult:
    return system.multilevel_energy(spec)
