import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))

from errors import BasisError, IntegralError  # noqa: E402
from models.basis_manager import BasisManager, load_basis  # noqa: E402
from models.integral_manager import (  # noqa: E402
    IntegralManager,
    boys,
    cross_overlap,
    nuclear_repulsion,
    one_electron_integrals,
    read_eri_file,
    two_electron_integrals,
    write_eri_file,
)
from tests.molecules import h2, molecule, oracle, water  # noqa: E402

ALPHA = 0.8
SINGLE_S = f"""****
H 0
S 1 1.00
  {ALPHA} 1.0
****
"""

SSP = """****
C 0
S 2 1.00
  5.0 0.5
  1.0 0.5
S 1 1.00
  0.3 1.0
P 2 1.00
  2.0 0.6
  0.4 0.5
****
"""


class BasisTests(unittest.TestCase):
    def test_single_s_shell(self):
        basis = load_basis(SINGLE_S.replace(f"S 1 1.00\n  {ALPHA} 1.0", "S 3 1.00\n  3.0 0.2\n  1.0 0.5\n  0.2 0.4"),
                           {"H"})
        self.assertEqual(len(basis.shells("H")), 1)
        self.assertEqual(basis.n_functions("H"), 1)

    def test_shell_counting(self):
        self.assertEqual(load_basis(SSP, {"C"}).n_functions("C"), 5)

    def test_missing_element(self):
        with self.assertRaises(BasisError) as ctx:
            BasisManager().load("sto-3g", {"H", "Fe"})
        self.assertIn("element Fe not found", str(ctx.exception))

    def test_nonpositive_exponent(self):
        with self.assertRaises(BasisError):
            load_basis(SINGLE_S.replace(str(ALPHA), "-0.5"), {"H"})

    def test_sp_shells_split(self):
        basis = BasisManager().load("6-31g", {"O"})
        self.assertEqual([s.l for s in basis.shells("O")], [0, 0, 1, 0, 1])
        self.assertEqual(basis.n_functions("O"), 9)

    def test_aliases(self):
        manager = BasisManager()
        self.assertEqual(manager.load("STO3G", {"H"}).name, "sto-3g")
        with self.assertRaises(BasisError) as ctx:
            manager.load("def2-SV_P", {"H"})
        self.assertIn("def2-svp", str(ctx.exception))


class BoysTests(unittest.TestCase):
    def test_limits(self):
        np.testing.assert_allclose(boys(3, 0.0), [1.0, 1 / 3, 1 / 5, 1 / 7])
        np.testing.assert_allclose(boys(0, 30.0), [0.5 * np.sqrt(np.pi / 30.0)], rtol=1e-12)


class OneElectronTests(unittest.TestCase):
    def test_single_primitive(self):
        basis = load_basis(SINGLE_S, {"H"})
        s, t, _ = one_electron_integrals(molecule(["H"], [(0, 0, 0)]), basis)
        self.assertAlmostEqual(s[0, 0], 1.0, places=12)
        self.assertAlmostEqual(t[0, 0], 1.5 * ALPHA, places=12)

    def test_two_centre_overlap(self):
        basis = load_basis(SINGLE_S, {"H"})
        r = 1.3
        s, _, _ = one_electron_integrals(h2(r, bohr=True), basis)
        self.assertAlmostEqual(s[0, 1], np.exp(-ALPHA * r * r / 2.0), places=12)

    def test_h2_minimal_basis_matrices(self):
        basis = BasisManager().load("sto-3g", {"H"})
        s, t, v = one_electron_integrals(h2(1.4, bohr=True), basis)
        self.assertAlmostEqual(s[0, 1], oracle("h2_r1.4_s12"), delta=1e-4)
        self.assertAlmostEqual(t[0, 0], oracle("h2_r1.4_t11"), delta=1e-4)
        self.assertAlmostEqual(t[0, 1], oracle("h2_r1.4_t12"), delta=1e-4)
        self.assertAlmostEqual(v[0, 0], oracle("h2_r1.4_v11"), delta=1e-4)
        self.assertAlmostEqual(v[0, 1], oracle("h2_r1.4_v12"), delta=1e-4)
        h = t + v
        self.assertAlmostEqual(h[0, 0], oracle("h2_r1.4_h11"), delta=1e-4)
        self.assertAlmostEqual(h[0, 1], oracle("h2_r1.4_h12"), delta=1e-4)

    def test_p_functions_normalized(self):
        basis = BasisManager().load("6-31g", {"O", "H"})
        s, t, v = one_electron_integrals(water(), basis)
        np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-6)
        np.testing.assert_allclose(s, s.T, atol=1e-14)
        np.testing.assert_allclose(t, t.T, atol=1e-14)
        self.assertGreater(np.linalg.eigvalsh(s).min(), 0.0)

    def test_translation_and_rotation(self):
        basis = BasisManager().load("sto-3g", {"O", "H"})
        base = water()
        shifted = molecule(base.elements, base.positions + np.array([1.7, -2.2, 0.4]))
        rotated = molecule(base.elements, Rotation.from_euler("xyz", [0.3, 1.1, -0.7]).apply(base.positions))
        s0, t0, v0 = one_electron_integrals(base, basis)
        s1, t1, v1 = one_electron_integrals(shifted, basis)
        for a, b in ((s0, s1), (t0, t1), (v0, v1)):
            np.testing.assert_allclose(a, b, atol=1e-10)
        s2, t2, _ = one_electron_integrals(rotated, basis)
        np.testing.assert_allclose(np.linalg.eigvalsh(s0), np.linalg.eigvalsh(s2), atol=1e-10)
        np.testing.assert_allclose(np.linalg.eigvalsh(t0), np.linalg.eigvalsh(t2), atol=1e-10)

    def test_nuclear_repulsion(self):
        self.assertAlmostEqual(nuclear_repulsion(water()), oracle("h2o_sto3g_e_nuc"), places=9)

    def test_cross_overlap_with_itself(self):
        basis = BasisManager().load("sto-3g", {"O", "H"})
        s, _, _ = one_electron_integrals(water(), basis)
        np.testing.assert_allclose(cross_overlap(water(), basis, basis), s, atol=1e-12)


class TwoElectronTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.h2_eri = two_electron_integrals(h2(1.4, bohr=True), BasisManager().load("sto-3g", {"H"}))
        cls.water_eri = two_electron_integrals(water(), BasisManager().load("sto-3g", {"O", "H"}))

    def test_h2_values(self):
        eri = self.h2_eri
        self.assertAlmostEqual(eri[0, 0, 0, 0], oracle("h2_r1.4_eri_1111"), delta=1e-4)
        self.assertAlmostEqual(eri[0, 0, 1, 1], oracle("h2_r1.4_eri_1122"), delta=1e-4)
        self.assertAlmostEqual(eri[1, 0, 0, 0], oracle("h2_r1.4_eri_2111"), delta=1e-4)
        self.assertAlmostEqual(eri[1, 0, 1, 0], oracle("h2_r1.4_eri_2121"), delta=1e-4)

    def test_eightfold_symmetry(self):
        eri = self.water_eri
        for perm in ((1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1), (3, 2, 1, 0)):
            self.assertLess(np.abs(eri - eri.transpose(perm)).max(), 1e-12)

    def test_self_repulsion_positive(self):
        eri = self.water_eri
        n = eri.shape[0]
        self.assertTrue(all(eri[i, i, i, i] > 0 for i in range(n)))

    def test_positive_semidefinite(self):
        n = self.water_eri.shape[0]
        self.assertGreater(np.linalg.eigvalsh(self.water_eri.reshape(n * n, n * n)).min(), -1e-10)

    def test_translation_invariance(self):
        shifted = molecule(water().elements, water().positions + 3.0)
        eri = two_electron_integrals(shifted, BasisManager().load("sto-3g", {"O", "H"}))
        self.assertLess(np.abs(eri - self.water_eri).max(), 1e-10)

    def test_cap(self):
        with self.assertRaises(IntegralError) as ctx:
            two_electron_integrals(water(), BasisManager().load("sto-3g", {"O", "H"}), cap=5)
        self.assertIn("MOFBIND_ERI_SCRATCH", str(ctx.exception))

    def test_disk_backed_above_cap(self):
        with tempfile.TemporaryDirectory() as tmp:
            eri = two_electron_integrals(water(), BasisManager().load("sto-3g", {"O", "H"}), cap=5, scratch=tmp)
            self.assertEqual(len(list(Path(tmp).glob("eri-*.npy"))), 1)
            self.assertLess(np.abs(np.asarray(eri) - self.water_eri).max(), 1e-14)
            del eri

    def test_eri_file_roundtrip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "h2.eri"
            write_eri_file(path, self.h2_eri)
            raw = path.read_bytes()
            self.assertEqual(len(raw), 8 + 8 * 16)
            self.assertEqual(int.from_bytes(raw[:8], "little"), 2)
            np.testing.assert_array_equal(read_eri_file(path), self.h2_eri)

    def test_compute_from_eri_file(self):
        basis = BasisManager().load("sto-3g", {"O", "H"})
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "water.eri"
            write_eri_file(path, self.water_eri)
            ints = IntegralManager(cap=5).compute(water(), basis, path)
            np.testing.assert_array_equal(ints.eri, self.water_eri)
            write_eri_file(path, self.h2_eri)
            with self.assertRaises(IntegralError) as ctx:
                IntegralManager().compute(water(), basis, path)
        self.assertIn("holds 2 basis functions", str(ctx.exception))

    def test_integral_set(self):
        ints = IntegralManager().compute(h2(), BasisManager().load("sto-3g", {"H"}))
        self.assertEqual(ints.n, 2)
        self.assertEqual(list(ints.ao_atoms), [0, 1])
        self.assertEqual(ints.warnings, ())


if __name__ == "__main__":
    unittest.main()
