import itertools
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from errors import SolverError
from models.scf_manager import Diis, MOIntegrals, transform_eri

MP2 = "mp2"
CCSD = "ccsd"
FCI = "fci"
SOLVERS = (MP2, CCSD, FCI)

GAP_TOLERANCE = 1e-10
FCI_MAX_SPIN_ORBITALS = 12


def ccsd_enabled() -> bool:
    return os.getenv("MOFBIND_ENABLE_CCSD", "1").strip().lower() not in ("0", "false", "no", "off")


@dataclass(frozen=True)
class OrbitalWindow:
    """Active occupied and virtual orbital indices, one tuple per spin channel."""

    occ: tuple
    vir: tuple

    def __post_init__(self):
        if len(self.occ) != len(self.vir) or len(self.occ) not in (1, 2):
            raise SolverError("orbital window needs one (restricted) or two (unrestricted) channels")
        for ch, (occ, vir) in enumerate(zip(self.occ, self.vir)):
            overlap = set(occ) & set(vir)
            if overlap:
                raise SolverError(f"orbitals {sorted(overlap)} are both occupied and virtual in channel {ch}")

    @property
    def nchan(self) -> int:
        return len(self.occ)

    def validate(self, mo: MOIntegrals) -> None:
        if self.nchan != mo.nchan:
            raise SolverError(f"window has {self.nchan} channels but the integrals have {mo.nchan}")
        for ch in range(self.nchan):
            n = mo.n_orbitals(ch)
            for idx in (*self.occ[ch], *self.vir[ch]):
                if not 0 <= idx < n:
                    raise SolverError(f"orbital {idx} outside 0..{n - 1} in channel {ch}")
            if any(mo.mo_occ[ch][i] < 0.5 for i in self.occ[ch]):
                raise SolverError(f"window lists an unoccupied orbital as occupied in channel {ch}")
            if any(mo.mo_occ[ch][a] > 0.5 for a in self.vir[ch]):
                raise SolverError(f"window lists an occupied orbital as virtual in channel {ch}")


def full_window(mo: MOIntegrals, frozen_core: int = 0) -> OrbitalWindow:
    occ, vir = [], []
    for ch in range(mo.nchan):
        n = mo.n_orbitals(ch)
        occupied = [i for i in range(n) if mo.mo_occ[ch][i] > 0.5]
        if frozen_core > len(occupied):
            raise SolverError(f"cannot freeze {frozen_core} orbitals with {len(occupied)} occupied")
        occ.append(tuple(occupied[frozen_core:]))
        vir.append(tuple(i for i in range(n) if mo.mo_occ[ch][i] <= 0.5))
    return OrbitalWindow(tuple(occ), tuple(vir))


@dataclass(frozen=True)
class CorrelatedSolution:
    """Correlation energy plus amplitudes in the window's own orbital basis.

    ``t2`` maps spin cases to arrays indexed (occ, occ, vir, vir): restricted
    solutions carry only ``"ab"`` (the closed-shell spatial amplitudes),
    unrestricted ones ``"aa"``, ``"ab"`` and ``"bb"``. ``t1`` maps ``"a"``/``"b"``
    to (occ, vir) arrays or is None for MP2.
    """

    solver: str
    mode: str
    e_corr: float
    t2: dict
    t1: dict | None
    window: OrbitalWindow
    converged: bool = True
    n_iter: int = 0
    residual_history: tuple = field(default=(), compare=False)


# ----------------------------------------------------------- window integrals

@dataclass(frozen=True)
class _Semicanonical:
    mode: str
    nocc: tuple
    nvir: tuple
    eo: tuple
    ev: tuple
    fock: tuple
    u_occ: tuple
    u_vir: tuple
    eri: dict

    @property
    def nchan(self) -> int:
        return len(self.nocc)

    def pair(self, s1: int, s2: int) -> np.ndarray:
        if self.nchan == 1:
            return self.eri[(0, 0)]
        if (s1, s2) == (1, 0):
            return self.eri[(0, 1)].transpose(2, 3, 0, 1)
        return self.eri[(s1, s2)]

    def ovov(self, s1: int, s2: int) -> np.ndarray:
        """(ia|jb) as an (i, j, a, b) array."""
        o1, o2 = self.nocc[s1], self.nocc[s2]
        return self.pair(s1, s2)[:o1, o1:, :o2, o2:].transpose(0, 2, 1, 3)

    def denominators(self, s1: int, s2: int) -> np.ndarray:
        return (self.eo[s1][:, None, None, None] + self.eo[s2][None, :, None, None]
                - self.ev[s1][None, None, :, None] - self.ev[s2][None, None, None, :])


def _eigh_block(block: np.ndarray):
    if block.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))
    return linalg.eigh(block)


def _eri_block(mo: MOIntegrals, s1: int, s2: int) -> np.ndarray:
    if mo.nchan == 1 or (s1, s2) == (0, 0):
        return mo.eri_aa
    if (s1, s2) == (1, 1):
        return mo.eri_bb
    return mo.eri_ab


def _semicanonicalize(mo: MOIntegrals, window: OrbitalWindow) -> _Semicanonical:
    window.validate(mo)
    nocc, nvir, eo, ev, fock, u_occ, u_vir, rot = [], [], [], [], [], [], [], []
    for ch in range(mo.nchan):
        occ, vir = list(window.occ[ch]), list(window.vir[ch])
        idx = occ + vir
        f = mo.fock[ch][np.ix_(idx, idx)]
        no = len(occ)
        e_o, c_o = _eigh_block(f[:no, :no])
        e_v, c_v = _eigh_block(f[no:, no:])
        u = np.zeros((len(idx), len(idx)))
        u[:no, :no] = c_o
        u[no:, no:] = c_v
        nocc.append(no)
        nvir.append(len(vir))
        eo.append(e_o)
        ev.append(e_v)
        fock.append(u.T @ f @ u)
        u_occ.append(c_o)
        u_vir.append(c_v)
        rot.append((idx, u))
    pairs = [(0, 0)] if mo.nchan == 1 else [(0, 0), (0, 1), (1, 1)]
    eri = {}
    for s1, s2 in pairs:
        (i1, u1), (i2, u2) = rot[s1], rot[s2]
        block = _eri_block(mo, s1, s2)[np.ix_(i1, i1, i2, i2)]
        eri[(s1, s2)] = transform_eri(block, u1, u1, u2, u2)
    return _Semicanonical(mo.mode, tuple(nocc), tuple(nvir), tuple(eo), tuple(ev), tuple(fock),
                          tuple(u_occ), tuple(u_vir), eri)


def _check_gap(sc: _Semicanonical) -> None:
    for ch in range(sc.nchan):
        if sc.nocc[ch] and sc.nvir[ch]:
            homo, lumo = sc.eo[ch].max(), sc.ev[ch].min()
            if lumo - homo <= GAP_TOLERANCE:
                raise SolverError(
                    f"non-positive occupied-virtual gap in channel {ch}: occupied level "
                    f"{int(sc.eo[ch].argmax())} (e={homo:.8f}) vs virtual level {int(sc.ev[ch].argmin())} "
                    f"(e={lumo:.8f})"
                )


def _rotate_t2(t2: np.ndarray, uo1, uo2, uv1, uv2) -> np.ndarray:
    return np.einsum("ik,jl,ac,bd,klcd->ijab", uo1, uo2, uv1, uv2, t2, optimize=True)


def _back_rotate(sc: _Semicanonical, t2: dict, t1: dict | None):
    spin = {"a": 0, "b": 1}
    out2 = {}
    for case, amp in t2.items():
        s1, s2 = (0, 0) if sc.nchan == 1 else (spin[case[0]], spin[case[1]])
        out2[case] = _rotate_t2(amp, sc.u_occ[s1], sc.u_occ[s2], sc.u_vir[s1], sc.u_vir[s2])
    if t1 is None:
        return out2, None
    out1 = {}
    for case, amp in t1.items():
        s = 0 if sc.nchan == 1 else spin[case]
        out1[case] = sc.u_occ[s] @ amp @ sc.u_vir[s].T
    return out2, out1


# ------------------------------------------------------------------------ MP2

def _mp2_amplitudes(sc: _Semicanonical) -> tuple[dict, float]:
    if sc.nchan == 1:
        g = sc.ovov(0, 0)
        t = g / sc.denominators(0, 0)
        energy = np.einsum("ijab,ijab->", t, 2.0 * g - g.swapaxes(2, 3))
        return {"ab": t}, float(energy)
    amplitudes, energy = {}, 0.0
    for case, (s1, s2) in (("aa", (0, 0)), ("ab", (0, 1)), ("bb", (1, 1))):
        g = sc.ovov(s1, s2)
        if s1 == s2:
            g = g - g.swapaxes(2, 3)
            t = g / sc.denominators(s1, s2)
            energy += 0.25 * np.einsum("ijab,ijab->", t, g)
        else:
            t = g / sc.denominators(s1, s2)
            energy += np.einsum("ijab,ijab->", t, g)
        amplitudes[case] = t
    return amplitudes, float(energy)


def mp2(mo: MOIntegrals, window: OrbitalWindow | None = None) -> CorrelatedSolution:
    """Second-order Moller-Plesset energy and first-order doubles over the window."""
    window = window or full_window(mo)
    sc = _semicanonicalize(mo, window)
    _check_gap(sc)
    t2, energy = _mp2_amplitudes(sc)
    t2, _ = _back_rotate(sc, t2, None)
    logging.info("mp2: %s window occ=%s vir=%s, E_corr = %.12f", mo.mode, sc.nocc, sc.nvir, energy)
    return CorrelatedSolution(MP2, mo.mode, energy, t2, None, window)


def mp2_density(mo: MOIntegrals, window: OrbitalWindow, solution: CorrelatedSolution | None = None):
    """Unrelaxed MP2 one-body density corrections per channel as (occupied block, virtual block).

    Restricted blocks are spin-summed; unrestricted blocks are per spin. The
    occupied block is the (negative) change of the reference occupations.
    """
    solution = solution or mp2(mo, window)
    t2 = solution.t2
    if mo.nchan == 1:
        t = t2["ab"]
        x = 2.0 * t - t.swapaxes(2, 3)
        dvv = np.einsum("ijca,ijcb->ab", t, x, optimize=True)
        doo = np.einsum("ikab,jkab->ij", t, x, optimize=True)
        return [(-(doo + doo.T), dvv + dvv.T)]
    taa, tab, tbb = t2["aa"], t2["ab"], t2["bb"]
    dvv_a = 0.5 * np.einsum("ijac,ijbc->ab", taa, taa) + np.einsum("iJaC,iJbC->ab", tab, tab)
    dvv_b = 0.5 * np.einsum("ijac,ijbc->ab", tbb, tbb) + np.einsum("iJcA,iJcB->AB", tab, tab)
    doo_a = -0.5 * np.einsum("ikab,jkab->ij", taa, taa) - np.einsum("iKaB,jKaB->ij", tab, tab)
    doo_b = -0.5 * np.einsum("ikab,jkab->ij", tbb, tbb) - np.einsum("kIaB,kJaB->IJ", tab, tab)
    return [(doo_a, dvv_a), (doo_b, dvv_b)]


# ------------------------------------------------------------- spin orbitals

@dataclass(frozen=True)
class _SpinOrbitals:
    fock: np.ndarray
    g: np.ndarray
    nocc: int
    spin: np.ndarray
    noa: int
    nva: int


def _spin_orbitals(sc: _Semicanonical) -> _SpinOrbitals:
    """Antisymmetrized integrals over [occ alpha, occ beta, vir alpha, vir beta]."""
    chan = (0, 0) if sc.nchan == 1 else (0, 1)
    noa, nob = sc.nocc[chan[0]], sc.nocc[chan[1]]
    nva, nvb = sc.nvir[chan[0]], sc.nvir[chan[1]]
    spin = np.array([0] * noa + [1] * nob + [0] * nva + [1] * nvb)
    local = np.array(list(range(noa)) + list(range(nob))
                     + [noa + a for a in range(nva)] + [nob + a for a in range(nvb)])
    nso = len(spin)
    fock = np.zeros((nso, nso))
    chem = np.zeros((nso, nso, nso, nso))
    masks = [np.flatnonzero(spin == s) for s in (0, 1)]
    for s in (0, 1):
        m = masks[s]
        fock[np.ix_(m, m)] = sc.fock[chan[s]][np.ix_(local[m], local[m])]
    for s1, s2 in itertools.product((0, 1), repeat=2):
        m1, m2 = masks[s1], masks[s2]
        if len(m1) == 0 or len(m2) == 0:
            continue
        block = sc.pair(chan[s1], chan[s2])
        chem[np.ix_(m1, m1, m2, m2)] = block[np.ix_(local[m1], local[m1], local[m2], local[m2])]
    phys = chem.transpose(0, 2, 1, 3)
    return _SpinOrbitals(fock, phys - phys.transpose(0, 1, 3, 2), noa + nob, spin, noa, nva)


def _to_spatial(so: _SpinOrbitals, mode_nchan: int, t1: np.ndarray, t2: np.ndarray):
    noa, nva = so.noa, so.nva
    oa, ob = slice(0, noa), slice(noa, so.nocc)
    va, vb = slice(0, nva), slice(nva, t1.shape[1])
    if mode_nchan == 1:
        return {"ab": t2[oa, ob, va, vb].copy()}, {"a": t1[oa, va].copy()}
    return (
        {"aa": t2[oa, oa, va, va].copy(), "ab": t2[oa, ob, va, vb].copy(), "bb": t2[ob, ob, vb, vb].copy()},
        {"a": t1[oa, va].copy(), "b": t1[ob, vb].copy()},
    )


def _zero_solution(solver: str, mo: MOIntegrals, window: OrbitalWindow) -> CorrelatedSolution:
    nocc = [len(o) for o in window.occ]
    nvir = [len(v) for v in window.vir]
    if mo.nchan == 1:
        t2 = {"ab": np.zeros((nocc[0], nocc[0], nvir[0], nvir[0]))}
        t1 = {"a": np.zeros((nocc[0], nvir[0]))}
    else:
        t2 = {case: np.zeros((nocc[s1], nocc[s2], nvir[s1], nvir[s2]))
              for case, (s1, s2) in (("aa", (0, 0)), ("ab", (0, 1)), ("bb", (1, 1)))}
        t1 = {"a": np.zeros((nocc[0], nvir[0])), "b": np.zeros((nocc[1], nvir[1]))}
    return CorrelatedSolution(solver, mo.mode, 0.0, t2, t1, window)


# ----------------------------------------------------------------------- CCSD

@dataclass(frozen=True)
class CcsdOptions:
    max_iter: int = 100
    tol: float = 1e-8
    diis_space: int = 8


def _ccsd_update(f, g, t1, t2, nocc):
    o, v = slice(0, nocc), slice(nocc, f.shape[0])
    foo, fvv, fov = f[o, o], f[v, v], f[o, v]
    oovv, ooov, oovo = g[o, o, v, v], g[o, o, o, v], g[o, o, v, o]
    ovvv, ovov, ovvo, vovv = g[o, v, v, v], g[o, v, o, v], g[o, v, v, o], g[v, o, v, v]

    tau = t2 + np.einsum("ia,jb->ijab", t1, t1) - np.einsum("ib,ja->ijab", t1, t1)
    taut = t2 + 0.5 * (np.einsum("ia,jb->ijab", t1, t1) - np.einsum("ib,ja->ijab", t1, t1))

    fae = fvv - np.diag(np.diag(fvv)) - 0.5 * np.einsum("me,ma->ae", fov, t1)
    fae += np.einsum("mf,mafe->ae", t1, ovvv) - 0.5 * np.einsum("mnaf,mnef->ae", taut, oovv)
    fmi = foo - np.diag(np.diag(foo)) + 0.5 * np.einsum("ie,me->mi", t1, fov)
    fmi += np.einsum("ne,mnie->mi", t1, ooov) + 0.5 * np.einsum("inef,mnef->mi", taut, oovv)
    fme = fov + np.einsum("nf,mnef->me", t1, oovv)

    tmp = np.einsum("je,mnie->mnij", t1, ooov)
    wmnij = g[o, o, o, o] + tmp - tmp.transpose(0, 1, 3, 2)
    wmnij += 0.25 * np.einsum("ijef,mnef->mnij", tau, oovv, optimize=True)
    tmp = np.einsum("mb,amef->abef", t1, vovv)
    wabef = g[v, v, v, v] - tmp + tmp.transpose(1, 0, 2, 3)
    wabef += 0.25 * np.einsum("mnab,mnef->abef", tau, oovv, optimize=True)
    wmbej = ovvo + np.einsum("jf,mbef->mbej", t1, ovvv) - np.einsum("nb,mnej->mbej", t1, oovo)
    wmbej -= np.einsum("jnfb,mnef->mbej", 0.5 * t2 + np.einsum("jf,nb->jnfb", t1, t1), oovv, optimize=True)

    r1 = fov.copy()
    r1 += np.einsum("ie,ae->ia", t1, fae) - np.einsum("ma,mi->ia", t1, fmi)
    r1 += np.einsum("imae,me->ia", t2, fme) - np.einsum("nf,naif->ia", t1, ovov)
    r1 -= 0.5 * np.einsum("imef,maef->ia", t2, ovvv, optimize=True)
    r1 -= 0.5 * np.einsum("mnae,nmei->ia", t2, oovo, optimize=True)

    r2 = oovv.copy()
    tmp = np.einsum("ijae,be->ijab", t2, fae - 0.5 * np.einsum("mb,me->be", t1, fme))
    r2 += tmp - tmp.transpose(0, 1, 3, 2)
    tmp = np.einsum("imab,mj->ijab", t2, fmi + 0.5 * np.einsum("je,me->mj", t1, fme))
    r2 -= tmp - tmp.transpose(1, 0, 2, 3)
    r2 += 0.5 * np.einsum("mnab,mnij->ijab", tau, wmnij, optimize=True)
    r2 += 0.5 * np.einsum("ijef,abef->ijab", tau, wabef, optimize=True)
    tmp = np.einsum("imae,mbej->ijab", t2, wmbej, optimize=True)
    tmp -= np.einsum("ie,ma,mbej->ijab", t1, t1, ovvo, optimize=True)
    r2 += tmp - tmp.transpose(1, 0, 2, 3) - tmp.transpose(0, 1, 3, 2) + tmp.transpose(1, 0, 3, 2)
    tmp = np.einsum("ie,abej->ijab", t1, g[v, v, v, o])
    r2 += tmp - tmp.transpose(1, 0, 2, 3)
    tmp = np.einsum("ma,mbij->ijab", t1, g[o, v, o, o])
    r2 -= tmp - tmp.transpose(0, 1, 3, 2)

    eo, ev = np.diag(foo), np.diag(fvv)
    d1 = eo[:, None] - ev[None, :]
    d2 = eo[:, None, None, None] + eo[None, :, None, None] - ev[None, None, :, None] - ev[None, None, None, :]
    return r1 / d1, r2 / d2


def _cc_energy(f, g, t1, t2, nocc) -> float:
    o, v = slice(0, nocc), slice(nocc, f.shape[0])
    energy = np.einsum("ia,ia->", f[o, v], t1)
    energy += 0.25 * np.einsum("ijab,ijab->", g[o, o, v, v], t2)
    energy += 0.5 * np.einsum("ijab,ia,jb->", g[o, o, v, v], t1, t1)
    return float(energy)


def ccsd(mo: MOIntegrals, window: OrbitalWindow | None = None, opts: CcsdOptions | None = None) -> CorrelatedSolution:
    """Spin-orbital CCSD (Stanton-Gauss intermediates) with DIIS, started from MP2 amplitudes."""
    opts = opts or CcsdOptions()
    window = window or full_window(mo)
    sc = _semicanonicalize(mo, window)
    _check_gap(sc)
    so = _spin_orbitals(sc)
    nocc, nvir = so.nocc, so.fock.shape[0] - so.nocc
    if nocc == 0 or nvir == 0:
        return _zero_solution(CCSD, mo, window)

    f, g = so.fock, so.g
    o, v = slice(0, nocc), slice(nocc, None)
    eo, ev = np.diag(f)[o], np.diag(f)[v]
    t1 = f[o, v] / (eo[:, None] - ev[None, :])
    t2 = g[o, o, v, v] / (eo[:, None, None, None] + eo[None, :, None, None]
                          - ev[None, None, :, None] - ev[None, None, None, :])
    energy = _cc_energy(f, g, t1, t2, nocc)
    logging.debug("CCSD iter   0  E_corr = %.12f (MP2 start)", energy)
    diis = Diis(opts.diis_space)
    history = []
    converged = False
    iteration = 0
    for iteration in range(1, opts.max_iter + 1):
        new1, new2 = _ccsd_update(f, g, t1, t2, nocc)
        residual = float(np.sqrt(np.sum((new1 - t1) ** 2) + np.sum((new2 - t2) ** 2)))
        history.append(residual)
        vec = diis.extrapolate(np.concatenate([new1.ravel(), new2.ravel()]),
                               np.concatenate([(new1 - t1).ravel(), (new2 - t2).ravel()]))
        t1 = vec[:t1.size].reshape(t1.shape)
        t2 = vec[t1.size:].reshape(t2.shape)
        e_new = _cc_energy(f, g, t1, t2, nocc)
        logging.debug("CCSD iter %3d  E_corr = %.12f  |r| = %.3e", iteration, e_new, residual)
        if residual < opts.tol and abs(e_new - energy) < opts.tol:
            energy = e_new
            converged = True
            break
        energy = e_new
    if not converged:
        raise SolverError(
            f"CCSD did not converge in {opts.max_iter} iterations; residual history "
            f"{', '.join(f'{r:.2e}' for r in history[-5:])}"
        )
    t2s, t1s = _to_spatial(so, sc.nchan, t1, t2)
    t2s, t1s = _back_rotate(sc, t2s, t1s)
    logging.info("ccsd: %s, %d spin orbitals, E_corr = %.12f after %d iterations",
                 mo.mode, f.shape[0], energy, iteration)
    return CorrelatedSolution(CCSD, mo.mode, energy, t2s, t1s, window, True, iteration, tuple(history))


# ------------------------------------------------------------------ FCI oracle

def _annihilate_create(det: int, i: int, a: int):
    """Apply a+_a a_i to a bitstring determinant; returns (sign, new det) or None."""
    if not det >> i & 1:
        return None
    sign = -1 if bin(det & ((1 << i) - 1)).count("1") % 2 else 1
    det ^= 1 << i
    if det >> a & 1:
        return None
    if bin(det & ((1 << a) - 1)).count("1") % 2:
        sign = -sign
    return sign, det | (1 << a)


def _bits(det: int, nso: int) -> list[int]:
    return [p for p in range(nso) if det >> p & 1]


def fci_oracle(mo: MOIntegrals, window: OrbitalWindow | None = None) -> CorrelatedSolution:
    """Exact diagonalization in the determinant space of the window at fixed alpha/beta counts.

    Orbitals outside the window enter through the Fock operator; the returned
    T1/T2 are intermediate-normalized cluster amplitudes of the ground state.
    """
    window = window or full_window(mo)
    sc = _semicanonicalize(mo, window)
    so = _spin_orbitals(sc)
    nso = so.fock.shape[0]
    if nso > FCI_MAX_SPIN_ORBITALS:
        raise SolverError(f"FCI oracle limited to {FCI_MAX_SPIN_ORBITALS} spin orbitals, window has {nso}")
    nocc = so.nocc
    if nocc == 0 or nocc == nso:
        return _zero_solution(FCI, mo, window)

    o = slice(0, nocc)
    h = so.fock - np.einsum("pjqj->pq", so.g[:, o, :, o])
    alpha = np.flatnonzero(so.spin == 0)
    beta = np.flatnonzero(so.spin == 1)
    n_alpha = int(np.sum(so.spin[:nocc] == 0))
    dets = []
    for occ_a in itertools.combinations(alpha, n_alpha):
        for occ_b in itertools.combinations(beta, nocc - n_alpha):
            dets.append(sum(1 << int(p) for p in (*occ_a, *occ_b)))
    dets.sort()
    index = {d: k for k, d in enumerate(dets)}
    ham = np.zeros((len(dets), len(dets)))
    for k, det in enumerate(dets):
        occ = _bits(det, nso)
        vir = [p for p in range(nso) if p not in occ]
        ham[k, k] = sum(h[i, i] for i in occ) + 0.5 * sum(so.g[i, j, i, j] for i in occ for j in occ)
        for i in occ:
            for a in vir:
                sign, target = _annihilate_create(det, i, a)
                if target in index:
                    ham[index[target], k] += sign * (h[a, i] + sum(so.g[a, j, i, j] for j in occ))
        for i, j in itertools.combinations(occ, 2):
            for a, b in itertools.combinations(vir, 2):
                first = _annihilate_create(det, i, a)
                second = _annihilate_create(first[1], j, b)
                target = second[1]
                if target in index:
                    ham[index[target], k] += first[0] * second[0] * so.g[a, b, i, j]

    values, vectors = linalg.eigh(ham)
    ground = vectors[:, 0]
    ref = index[(1 << nocc) - 1]
    c0 = ground[ref]
    if abs(c0) < 1e-8:
        raise SolverError("FCI ground state has no weight on the reference determinant")
    energy = float(values[0] - ham[ref, ref])

    reference = (1 << nocc) - 1
    nvir = nso - nocc
    t1 = np.zeros((nocc, nvir))
    c2 = np.zeros((nocc, nocc, nvir, nvir))
    for i in range(nocc):
        for a in range(nvir):
            sign, target = _annihilate_create(reference, i, nocc + a)
            if target in index:
                t1[i, a] = sign * ground[index[target]] / c0
    for i, j in itertools.combinations(range(nocc), 2):
        for a, b in itertools.combinations(range(nvir), 2):
            first = _annihilate_create(reference, i, nocc + a)
            second = _annihilate_create(first[1], j, nocc + b)
            if second[1] in index:
                c = first[0] * second[0] * ground[index[second[1]]] / c0
                c2[i, j, a, b], c2[j, i, a, b], c2[i, j, b, a], c2[j, i, b, a] = c, -c, -c, c
    t2 = c2 - np.einsum("ia,jb->ijab", t1, t1) + np.einsum("ib,ja->ijab", t1, t1)
    t2s, t1s = _to_spatial(so, sc.nchan, t1, t2)
    t2s, t1s = _back_rotate(sc, t2s, t1s)
    logging.info("fci_oracle: %d determinants over %d spin orbitals, E_corr = %.12f", len(dets), nso, energy)
    return CorrelatedSolution(FCI, mo.mode, energy, t2s, t1s, window)


# -------------------------------------------------------- projected energies

def _sym_project(tau: np.ndarray, p1: np.ndarray | None, p2: np.ndarray | None) -> np.ndarray:
    if p1 is None:
        return tau
    return 0.5 * (np.einsum("ik,kjab->ijab", p1, tau) + np.einsum("jk,ikab->ijab", p2, tau))


def correlation_energy(mo: MOIntegrals, window: OrbitalWindow, solution: CorrelatedSolution,
                       occ_projectors=None) -> float:
    """Correlation energy from amplitudes, optionally projected on the first occupied index.

    ``occ_projectors`` holds one matrix per channel acting on the window's
    occupied orbitals; the projection is symmetrized over both occupied indices.
    Without projectors this reproduces the solver's own energy.
    """
    t1 = solution.t1
    if mo.nchan == 1:
        occ, vir = list(window.occ[0]), list(window.vir[0])
        g = mo.eri_aa[np.ix_(occ, vir, occ, vir)].transpose(0, 2, 1, 3)
        tau = solution.t2["ab"]
        if t1 is not None:
            tau = tau + np.einsum("ia,jb->ijab", t1["a"], t1["a"])
        p = None if occ_projectors is None else occ_projectors[0]
        return float(np.einsum("ijab,ijab->", _sym_project(tau, p, p), 2.0 * g - g.swapaxes(2, 3)))

    energy = 0.0
    spin = {"a": 0, "b": 1}
    for case in ("aa", "ab", "bb"):
        s1, s2 = spin[case[0]], spin[case[1]]
        o1, v1 = list(window.occ[s1]), list(window.vir[s1])
        o2, v2 = list(window.occ[s2]), list(window.vir[s2])
        g = _eri_block(mo, s1, s2)[np.ix_(o1, v1, o2, v2)].transpose(0, 2, 1, 3)
        tau = solution.t2[case]
        if t1 is not None:
            tau = tau + np.einsum("ia,jb->ijab", t1[case[0]], t1[case[1]])
            if s1 == s2:
                tau = tau - np.einsum("ib,ja->ijab", t1[case[0]], t1[case[1]])
        p1 = p2 = None
        if occ_projectors is not None:
            p1, p2 = occ_projectors[s1], occ_projectors[s2]
        tau = _sym_project(tau, p1, p2)
        if s1 == s2:
            energy += 0.25 * np.einsum("ijab,ijab->", tau, g - g.swapaxes(2, 3))
        else:
            energy += np.einsum("ijab,ijab->", tau, g)
    return float(energy)


class CorrelationManager:
    """Dispatches a named solver; CCSD is gated by MOFBIND_ENABLE_CCSD."""

    def __init__(self, ccsd_options: CcsdOptions | None = None):
        self.ccsd_options = ccsd_options or CcsdOptions()

    def available(self) -> tuple:
        return tuple(s for s in SOLVERS if s != CCSD or ccsd_enabled())

    def solve(self, solver: str, mo: MOIntegrals, window: OrbitalWindow | None = None,
              tag: str = "") -> CorrelatedSolution:
        solver = solver.lower()
        if solver not in SOLVERS:
            raise SolverError(f"unknown solver {solver!r}; expected one of {', '.join(SOLVERS)}")
        if solver not in self.available():
            raise SolverError(f"solver {solver} is disabled (MOFBIND_ENABLE_CCSD); run with the MP2 low level only")
        if tag:
            print(f"🧮 {solver.upper()} {tag}...", file=sys.stderr)
        if solver == MP2:
            return mp2(mo, window)
        if solver == CCSD:
            return ccsd(mo, window, self.ccsd_options)
        return fci_oracle(mo, window)
