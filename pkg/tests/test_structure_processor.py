import sys
import unittest
from pathlib import Path

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))

from errors import CifParseError, StructureParseError, XyzParseError  # noqa: E402
from processors.structure_processor import (  # noqa: E402
    Atom,
    AtomCollection,
    AtomSite,
    CrystalStructure,
    Lattice,
    OriginTag,
    build_supercell,
    expand_symmetry,
    frac_to_cart,
    parse_cif,
    parse_symmetry_op,
    parse_xyz,
    suggest_reps,
    write_xyz,
    xyz_roundtrip,
)

CUBIC_C = """data_cubic
_cell_length_a 10.0
_cell_length_b 10.0
_cell_length_c 10.0
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
C1 C 0.0 0.0 0.0
"""

INVERSION_O = """data_inv
_cell_length_a 10.0(2)
_cell_length_b 10.0
_cell_length_c 10.0
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
loop_
_symmetry_equiv_pos_as_xyz
'x, y, z'
'-x,-y,-z'
loop_
_atom_site_label
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
O1 0.25 0.0 0.0
"""


def water() -> AtomCollection:
    coords = [("O", (0.0, -0.0757, 0.0)), ("H", (0.7572, 0.5865, 0.0)), ("H", (-0.7572, 0.5865, 0.0))]
    return AtomCollection(
        tuple(Atom(el, pos, OriginTag(f"{el}{i}", (0, 0, 0))) for i, (el, pos) in enumerate(coords))
    )


class ParseCifTests(unittest.TestCase):
    def test_minimal_p1_file(self):
        structure = parse_cif(CUBIC_C)
        self.assertEqual(len(structure.sites), 1)
        self.assertEqual(len(structure.symmetry_ops), 1)
        self.assertTrue(structure.symmetry_ops[0].is_identity)
        self.assertEqual(structure.sites[0].element, "C")

    def test_inversion_expands_to_two_sites(self):
        structure = parse_cif(INVERSION_O)
        self.assertAlmostEqual(structure.lattice.a, 10.0)
        fracs = sorted(site.frac for site in structure.expanded_sites())
        self.assertEqual(len(fracs), 2)
        np.testing.assert_allclose(fracs[0], (0.25, 0.0, 0.0), atol=1e-12)
        np.testing.assert_allclose(fracs[1], (0.75, 0.0, 0.0), atol=1e-12)

    def test_missing_cell_tag_is_named(self):
        text = CUBIC_C.replace("_cell_length_a 10.0\n", "")
        with self.assertRaises(CifParseError) as ctx:
            parse_cif(text)
        self.assertIn("_cell_length_a", str(ctx.exception))

    def test_malformed_operator_is_reported(self):
        text = INVERSION_O.replace("'-x,-y,-z'", "'-x,-q,-z'")
        with self.assertRaises(CifParseError) as ctx:
            parse_cif(text)
        self.assertIn("-x,-q,-z", str(ctx.exception))

    def test_unknown_element(self):
        text = CUBIC_C.replace("C1 C 0.0", "Qq1 Qq 0.0")
        with self.assertRaises(StructureParseError):
            parse_cif(text)

    def test_element_from_label_and_charge_suffix(self):
        text = CUBIC_C.replace("C1 C 0.0", "Fe1 Fe2+ 0.0")
        self.assertEqual(parse_cif(text).sites[0].element, "Fe")
        no_symbol = CUBIC_C.replace("_atom_site_type_symbol\n", "").replace("C1 C 0.0", "Co1 0.0")
        self.assertEqual(parse_cif(no_symbol).sites[0].element, "Co")

    def test_hash_inside_quotes_is_not_a_comment(self):
        text = CUBIC_C.replace("C1 C 0.0 0.0 0.0\n", "'C #1' C 0.0 0.0 0.0 # origin\n")
        text = text.replace("_cell_length_c 10.0\n", "# cell\n_cell_length_c 10.0 # angstrom\n")
        structure = parse_cif(text)
        self.assertEqual(len(structure.sites), 1)
        self.assertEqual(structure.sites[0].label, "C #1")
        self.assertAlmostEqual(structure.lattice.c, 10.0)

    def test_parse_is_deterministic(self):
        self.assertEqual(parse_cif(INVERSION_O), parse_cif(INVERSION_O))

    def test_expansion_is_idempotent(self):
        once = expand_symmetry(parse_cif(INVERSION_O))
        twice = expand_symmetry(once)
        self.assertEqual(once, twice)

    def test_fractional_operator_constants(self):
        op = parse_symmetry_op("-x, y+1/2, 0.25-z")
        np.testing.assert_allclose(op.apply((0.1, 0.2, 0.3)), (-0.1, 0.7, -0.05))


class LatticeTests(unittest.TestCase):
    def test_orthorhombic_scaling(self):
        lattice = Lattice(2.0, 3.0, 4.0, 90, 90, 90)
        np.testing.assert_allclose(frac_to_cart(lattice, (0.5, 0.5, 0.5)), (1.0, 1.5, 2.0), atol=1e-12)
        np.testing.assert_allclose(frac_to_cart(lattice, (0, 0, 0)), (0, 0, 0))

    def test_monoclinic_c_vector(self):
        lattice = Lattice(1.0, 1.0, 1.0, 90, 120, 90)
        # c = (cos 120°, 0, sin 120°)
        np.testing.assert_allclose(frac_to_cart(lattice, (0, 0, 1)), (-0.5, 0.0, np.sqrt(3) / 2), atol=1e-12)

    def test_invalid_cells(self):
        with self.assertRaises(StructureParseError):
            Lattice(0.0, 1.0, 1.0, 90, 90, 90)
        with self.assertRaises(StructureParseError):
            Lattice(1.0, 1.0, 1.0, 180, 90, 90)
        with self.assertRaises(StructureParseError):
            Lattice(1.0, 1.0, 1.0, 10, 10, 100)

    @settings(max_examples=50, deadline=None)
    @given(
        st.floats(0.5, 30), st.floats(0.5, 30), st.floats(0.5, 30),
        st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    )
    def test_right_angles_reduce_to_scaling(self, a, b, c, frac):
        lattice = Lattice(a, b, c, 90, 90, 90)
        np.testing.assert_allclose(frac_to_cart(lattice, frac), np.array(frac) * (a, b, c), atol=1e-12)


class SupercellTests(unittest.TestCase):
    def setUp(self):
        self.lattice = Lattice(10.0, 10.0, 10.0, 90, 90, 90)

    def test_counts(self):
        one = CrystalStructure(self.lattice, (AtomSite("C", (0.0, 0.0, 0.0), "C1"),))
        self.assertEqual(len(build_supercell(one, (1, 1, 1))), 1)
        three = CrystalStructure(
            self.lattice,
            tuple(AtomSite("O", (0.1 * i, 0.2, 0.3), f"O{i}") for i in range(3)),
        )
        cell = build_supercell(three, (2, 2, 2))
        self.assertEqual(len(cell), 24)
        self.assertEqual(len({atom.origin for atom in cell}), 24)

    def test_cross_image_neighbour(self):
        structure = CrystalStructure(
            self.lattice,
            (AtomSite("C", (0.0, 0.0, 0.0), "A"), AtomSite("C", (0.9, 0.0, 0.0), "B")),
        )
        cell = build_supercell(structure, (2, 1, 1))
        b0 = np.array(cell.atoms[cell.index_of(OriginTag("B", (0, 0, 0)))].position)
        a1 = np.array(cell.atoms[cell.index_of(OriginTag("A", (1, 0, 0)))].position)
        self.assertAlmostEqual(np.linalg.norm(a1 - b0), 1.0, places=10)

    def test_rejects_nonpositive_reps(self):
        structure = CrystalStructure(self.lattice, (AtomSite("C", (0.0, 0.0, 0.0), "C1"),))
        with self.assertRaises(ValueError):
            build_supercell(structure, (1, 0, 1))

    def test_suggest_reps_covers_radius(self):
        self.assertEqual(suggest_reps(self.lattice, 12.5), (5, 5, 5))
        self.assertEqual(suggest_reps(self.lattice, 4.0), (3, 3, 3))


class XyzTests(unittest.TestCase):
    def test_water_roundtrip(self):
        original = water()
        again = xyz_roundtrip(original)
        self.assertEqual(again.elements, original.elements)
        np.testing.assert_allclose(again.positions, original.positions, atol=1e-12)

    def test_empty_structure(self):
        with self.assertRaises(StructureParseError) as ctx:
            write_xyz(AtomCollection(()))
        self.assertIn("empty structure", str(ctx.exception))

    def test_count_mismatch(self):
        with self.assertRaises(XyzParseError):
            parse_xyz("3\ncomment\nH 0 0 0\nH 0 0 0.74\n")

    def test_bad_coordinate(self):
        with self.assertRaises(XyzParseError):
            parse_xyz("1\n\nH 0 zero 0\n")

    def test_large_random_roundtrip(self):
        rng = np.random.default_rng(7)
        positions = rng.uniform(-50.0, 50.0, size=(10_000, 3))
        atoms = AtomCollection(
            tuple(Atom("C", tuple(p), OriginTag(f"C{i}", (0, 0, 0))) for i, p in enumerate(positions))
        )
        again = xyz_roundtrip(atoms)
        self.assertLess(np.max(np.abs(again.positions - positions)), 1e-9)


if __name__ == "__main__":
    unittest.main()
