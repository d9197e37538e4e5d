import os
import sys
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))
os.environ.setdefault("MOFBIND_LOG", os.path.join(tempfile.gettempdir(), "mofbind_test.log"))

import main  # noqa: E402
from errors import CacheMismatchError, ConfigError, LedgerError, MissingEnergyError, PipelineError  # noqa: E402
from models.ledger_manager import EnergyLedger  # noqa: E402
from processors.report_processor import KCAL_PER_HARTREE, external_row  # noqa: E402
from tests.carving_fixtures import medium_fixture  # noqa: E402

WATER = [("O", 0.0, 0.0, 0.0), ("H", 0.7572, 0.5865, 0.0), ("H", -0.7572, 0.5865, 0.0)]
SPECTATOR = [("H", 0.0, -4.0, 0.0), ("H", 0.0, -4.7414, 0.0)]
CO2 = [("C", 0.0, 3.5, 0.0), ("O", 0.0, 3.5, 1.16), ("O", 0.0, 3.5, -1.16)]

GEOMETRIES = {
    "mof_small": WATER,
    "mof_large": WATER + SPECTATOR,
    "complex_small": WATER + CO2,
    "complex_large": WATER + SPECTATOR + CO2,
    "co2": CO2,
}


def xyz(atoms) -> str:
    lines = [str(len(atoms)), "test geometry"]
    lines += [f"{el} {x:.10f} {y:.10f} {z:.10f}" for el, x, y, z in atoms]
    return "\n".join(lines) + "\n"


class PipelineCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        for name, atoms in GEOMETRIES.items():
            (self.root / f"{name}.xyz").write_text(xyz(atoms), encoding="utf-8")

    def tearDown(self):
        self._tmp.cleanup()

    def write_config(self, solvers="hl_method = mp2\nll_method = hf\n", extra="", structure=True):
        text = ""
        if structure:
            text += "[structure]\nmof = water model\n"
            text += "".join(f"{name} = {name}.xyz\n" for name in GEOMETRIES)
        text += f"[solvers]\n{solvers}\n"
        text += "[ledger]\npath = out/ledger.tsv\nreport = out/report.txt\ncache_dir = cache\n"
        text += extra
        path = self.root / "mofbind.ini"
        path.write_text(text, encoding="utf-8")
        return path

    def config(self, **kwargs):
        return main.load_config(self.write_config(**kwargs))


class PipelineTests(PipelineCase):
    def test_dry_run_lists_every_term(self):
        plan = main.plan_pipeline(self.config())
        self.assertEqual(len(plan), 7)
        self.assertEqual({c.status for c in plan}, {"compute"})
        self.assertEqual([c.calc_id for c in plan if c.system == "CO2"], ["CO2-small-HL"])
        self.assertFalse((self.root / "out" / "ledger.tsv").exists())

    def test_second_run_is_all_cache_hits(self):
        cfg = self.config()
        first = main.run_pipeline(cfg)
        self.assertEqual((first["computed"], first["cache_hits"]), (7, 0))
        ledger_bytes = cfg.ledger.path.read_bytes()
        report_bytes = cfg.ledger.report.read_bytes()

        second = main.run_pipeline(cfg)
        self.assertEqual((second["computed"], second["cache_hits"]), (0, 7))
        self.assertEqual(second["report_text"], first["report_text"])
        self.assertEqual(cfg.ledger.path.read_bytes(), ledger_bytes)
        self.assertEqual(cfg.ledger.report.read_bytes(), report_bytes)

        cfg.ledger.path.unlink()
        plan = main.plan_pipeline(cfg)
        self.assertEqual({c.status for c in plan}, {"cached"})
        third = main.run_pipeline(cfg)
        self.assertEqual(third["computed"], 0)
        self.assertEqual(third["binding_energy_kcal_mol"], first["binding_energy_kcal_mol"])

    def test_binding_energy_is_the_ledger_composition(self):
        cfg = self.config()
        result = main.run_pipeline(cfg)
        ledger = EnergyLedger.read(cfg.ledger.path)
        self.assertEqual(len(ledger), 7)

        def energy(system, tier, level):
            return ledger.lookup(system, tier, level).energy

        complex_ = energy("MOF+CO2", "small", "HL") + (energy("MOF+CO2", "large", "LL")
                                                       - energy("MOF+CO2", "small", "LL"))
        mof = energy("MOF", "small", "HL") + (energy("MOF", "large", "LL") - energy("MOF", "small", "LL"))
        expected = (complex_ - mof - energy("CO2", "small", "HL")) * KCAL_PER_HARTREE
        self.assertAlmostEqual(result["binding_energy_kcal_mol"], expected, delta=1e-9)
        self.assertEqual(result["method"], "mp2:hf")
        self.assertLess(abs(expected), 20.0)
        self.assertTrue(all(r.source == "internal" and len(r.input_hash) == 64 for r in ledger.rows))

    def test_changed_geometry(self):
        cfg = self.config()
        main.run_pipeline(cfg)
        moved = [(el, x, y + 0.2, z) if el == "C" else (el, x, y, z) for el, x, y, z in WATER + CO2]
        (self.root / "complex_small.xyz").write_text(xyz(moved), encoding="utf-8")
        with self.assertRaises(CacheMismatchError):
            main.plan_pipeline(replace(cfg, strict=True))
        plan = {c.calc_id: c.status for c in main.plan_pipeline(cfg)}
        self.assertEqual(plan["MOF+CO2-small-HL"], "compute")
        self.assertEqual(plan["MOF+CO2-small-LL"], "compute")
        self.assertEqual(plan["MOF-large-LL"], "ledger")

    def test_unconverged_scf_names_the_system(self):
        cfg = self.config(solvers="hl_method = mp2\nll_method = hf\nscf_max_iter = 1\n")
        with self.assertRaises(PipelineError) as ctx:
            main.run_pipeline(cfg)
        self.assertIn("cluster", str(ctx.exception))

    def test_embedded_high_level(self):
        cfg = self.config(solvers="hl_method = ewf\nll_method = hf\nhl_solver = mp2\nll_solver = mp2\n"
                                  "eta_hl = 1e-5\neta_ll = 1e-7\n")
        result = main.run_pipeline(cfg)
        ledger = EnergyLedger.read(cfg.ledger.path)
        hl = [r for r in ledger.rows if r.level == "HL"]
        self.assertEqual({(r.method, r.eta) for r in hl}, {("ewf-mp2/mp2", 1e-5)})
        self.assertEqual(result["method"], "ewf-mp2/mp2:hf")
        self.assertTrue(any((cfg.cache_dir / "fragments").glob("*.tsv")))


EXTERNAL_ENERGIES = {
    ("MOF+CO2", "small", "HL"): -1201.0,
    ("MOF+CO2", "small", "LL"): -1200.5,
    ("MOF+CO2", "large", "LL"): -4800.25,
    ("MOF", "small", "HL"): -1012.75,
    ("MOF", "small", "LL"): -1012.3,
    ("MOF", "large", "LL"): -4612.0,
    ("CO2", "small", "HL"): -188.2,
}


def write_external(path, skip=()):
    rows = [external_row(system, tier, level, "EWF-CCSD" if level == "HL" else "M06L", energy, "def2-tzvp")
            for (system, tier, level), energy in EXTERNAL_ENERGIES.items() if (system, tier, level) not in skip]
    EnergyLedger(rows).write(path)


class ExternalLedgerTests(PipelineCase):
    def write_external(self, skip=()):
        write_external(self.root / "dft.tsv", skip)

    def external_config(self):
        return self.config(solvers="hl_method = EWF-CCSD\nll_method = M06L\ninternal = no\n",
                           extra="external = dft.tsv\n", structure=False)

    def test_report_from_composition_alone(self):
        self.write_external()
        result = main.run_pipeline(self.external_config())
        self.assertEqual((result["computed"], result["external"]), (0, 7))
        e = EXTERNAL_ENERGIES
        complex_ = e[("MOF+CO2", "small", "HL")] + (e[("MOF+CO2", "large", "LL")] - e[("MOF+CO2", "small", "LL")])
        mof = e[("MOF", "small", "HL")] + (e[("MOF", "large", "LL")] - e[("MOF", "small", "LL")])
        expected = (complex_ - mof - e[("CO2", "small", "HL")]) * KCAL_PER_HARTREE
        self.assertEqual(result["binding_energy_kcal_mol"], expected)

    def test_missing_external_term(self):
        self.write_external(skip={("MOF", "small", "LL")})
        cfg = self.config(solvers="hl_method = EWF-CCSD\nll_method = M06L\ninternal = no\n",
                          extra="external = dft.tsv\n")
        with self.assertRaises(MissingEnergyError) as ctx:
            main.run_pipeline(cfg)
        self.assertIn("missing small-cluster low-level energy", str(ctx.exception))


class ConfigTests(PipelineCase):
    def test_defaults_and_overrides(self):
        path = self.write_config()
        cfg = main.load_config(path, cache_dir=self.root / "elsewhere", jobs=3, strict=True)
        self.assertEqual((cfg.jobs, cfg.strict), (3, True))
        self.assertEqual(cfg.cache_dir, (self.root / "elsewhere").resolve())
        self.assertEqual(cfg.basis.minimal, "sto-3g")
        self.assertEqual(cfg.solvers.eta_hl, 1e-5)
        self.assertEqual(cfg.ledger.path, (self.root / "out" / "ledger.tsv").resolve())

    def test_unknown_key_is_logged(self):
        path = self.write_config(solvers="hl_method = mp2\ncolour = blue\n")
        with self.assertLogs(level="WARNING") as logs:
            main.load_config(path)
        self.assertTrue(any("[solvers] colour" in line for line in logs.output))

    def test_bad_value_names_section_and_key(self):
        with self.assertRaises(ConfigError) as ctx:
            self.config(solvers="eta_hl = tiny\n")
        self.assertIn("[solvers] eta_hl", str(ctx.exception))
        with self.assertRaises(ConfigError):
            self.config(solvers="eta_hl = 1e-8\neta_ll = 1e-7\n")
        with self.assertRaises(ConfigError):
            self.config(solvers="hl_solver = cisd\n")

    def test_spins_section(self):
        cfg = self.config(extra="[spins]\nTi = 1\n")
        self.assertEqual((cfg.carve.spins["Ti"], cfg.carve.spins["Fe"]), (1, 4))
        with self.assertRaises(ConfigError):
            self.config(extra="[spins]\nXx = 1\n")

    def test_chloride_sites_are_whitespace_separated(self):
        cfg = self.config(extra="[carve]\nchloride_completion = M3@0,0,0 M4@0,0,1\n")
        self.assertEqual([(t.label, t.image) for t in cfg.carve.chloride_completion],
                         [("M3", (0, 0, 0)), ("M4", (0, 0, 1))])
        with self.assertRaises(ConfigError):
            self.config(extra="[carve]\nchloride_completion = M3\n")

    def test_structure_required(self):
        cfg = self.config(structure=False)
        with self.assertRaises(ConfigError):
            main.plan_pipeline(cfg)


class CliTests(PipelineCase):
    def test_report_command(self):
        result = main.main(["report"])
        self.assertEqual(len(result["published"]), 6)
        flagged = sorted(c["column"] for c in result["published"] if c["flagged"])
        self.assertEqual(flagged, ["blyp", "uhf"])

    def test_compose_command(self):
        write_external(self.root / "dft.tsv")
        result = main.main(["compose", "--ledger", str(self.root / "dft.tsv"), "--hl-method", "EWF-CCSD",
                            "--ll-method", "M06L"])
        self.assertEqual(result["method"], "EWF-CCSD:M06L")
        self.assertEqual(result["energies_hartree"]["CO2"], -188.2)

    def test_pipeline_dry_run_command(self):
        path = self.write_config()
        result = main.main(["--config", str(path), "--dry-run", "pipeline"])
        self.assertEqual(result["status"], "planned")
        self.assertEqual(len(result["plan"]), 7)

    def cli(self, *argv):
        return main.main(["--cache-dir", str(self.root / "cache"), *argv])

    def test_scf_and_mp2_commands(self):
        water = str(self.root / "mof_small.xyz")
        scf = self.cli("scf", water)
        self.assertTrue(scf["converged"])
        self.assertEqual(Path(scf["mean_field"]), self.root / "cache" / "meanfield" / "mof_small.mf")
        corr = self.cli("mp2", water)
        self.assertAlmostEqual(corr["e_hf"], scf["e_tot"], delta=1e-8)
        self.assertLess(corr["e_corr"], 0.0)
        reused = self.cli("mp2", water, "--mean-field", scf["mean_field"])
        self.assertEqual(reused["e_hf"], scf["e_tot"])
        self.assertAlmostEqual(reused["e_corr"], corr["e_corr"], delta=1e-8)

    def test_mean_field_from_another_basis(self):
        water = str(self.root / "mof_small.xyz")
        scf = self.cli("scf", water)
        with self.assertRaises(ConfigError):
            self.cli("mp2", water, "--basis", "6-31g", "--mean-field", scf["mean_field"])

    def test_eri_file_reuse(self):
        water = str(self.root / "mof_small.xyz")
        eri = str(self.root / "water.eri")
        first = self.cli("scf", water, "--write-eri", eri)
        self.assertTrue(Path(eri).exists())
        second = self.cli("scf", water, "--eri", eri, "--dump", str(self.root / "again.mf"))
        self.assertAlmostEqual(second["e_tot"], first["e_tot"], delta=1e-10)
        self.assertTrue((self.root / "again.mf").exists())

    def test_embed_always_writes_diagnostics(self):
        water = str(self.root / "mof_small.xyz")
        scf = self.cli("scf", water)
        result = self.cli("embed", water, "--hl-solver", "mp2", "--close", "0", "--mean-field", scf["mean_field"])
        path = Path(result["diagnostics"])
        self.assertEqual(path, self.root / "cache" / "fragments" / "mof_small.tsv")
        lines = path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0].split("\t")[0], "atom")
        # three LL fragments plus the close oxygen at the tight threshold
        self.assertEqual(len(lines), 1 + 4)
        self.assertEqual(result["e_hf"], scf["e_tot"])
        custom = self.root / "diag" / "water.tsv"
        self.cli("embed", water, "--hl-solver", "mp2", "--diagnostics", str(custom))
        self.assertTrue(custom.exists())

    def test_record_command(self):
        ledger = str(self.root / "dft.tsv")
        for (system, tier, level), energy in EXTERNAL_ENERGIES.items():
            method = "EWF-CCSD" if level == "HL" else "M06L"
            result = self.cli("record", "--ledger", ledger, "--system", system, "--tier", tier, "--level", level,
                              "--method", method, "--energy", repr(energy), "--basis", "def2-tzvp")
        self.assertEqual(result["rows"], 7)
        rows = EnergyLedger.read(ledger).rows
        self.assertTrue(all(r.source == "external" for r in rows))
        write_external(self.root / "expected.tsv")
        self.assertEqual(Path(ledger).read_bytes(), (self.root / "expected.tsv").read_bytes())

        again = ["record", "--ledger", ledger, "--system", "CO2", "--tier", "small", "--level", "HL",
                 "--method", "EWF-CCSD", "--energy", "-188.3", "--basis", "def2-tzvp"]
        with self.assertRaises(LedgerError):
            self.cli(*again)
        self.cli(*again, "--replace")
        (co2,) = EnergyLedger.read(ledger).find("CO2", "small", "HL")
        self.assertEqual(co2.energy, -188.3)

    def write_crystal(self, structure=""):
        cell = 40.0
        lines = ["data_fixture", *(f"_cell_length_{x} {cell}" for x in "abc"),
                 *(f"_cell_angle_{x} 90" for x in ("alpha", "beta", "gamma")),
                 "loop_", "_atom_site_label", "_atom_site_type_symbol",
                 "_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z"]
        for atom in medium_fixture():
            frac = " ".join(f"{(v + 20.0) / cell:.10f}" for v in atom.position)
            lines.append(f"{atom.origin.label} {atom.element} {frac}")
        (self.root / "fixture.cif").write_text("\n".join(lines) + "\n", encoding="utf-8")
        pose = [("C", 20.0, 18.0, 20.0), ("O", 20.0, 18.0, 21.16), ("O", 20.0, 18.0, 18.84)]
        (self.root / "pose.xyz").write_text(xyz(pose), encoding="utf-8")
        path = self.root / "carve.ini"
        path.write_text("[structure]\ncif = fixture.cif\nco2_pose = pose.xyz\nreps = 1,1,1\n" + structure +
                        "[carve]\nradius = 8.0\n", encoding="utf-8")
        return path

    def test_carve_command(self):
        path = self.write_crystal()
        out = self.root / "clusters"
        result = main.main(["--config", str(path), "carve", "--out", str(out)])
        clusters = result["clusters"]
        self.assertEqual(set(clusters), {"mof_small", "mof_medium", "mof_large", "mof_co2_small",
                                         "mof_co2_large", "co2_small"})
        medium = (out / "mof_medium.xyz").read_text(encoding="utf-8").splitlines()[2:]
        self.assertEqual(sum(1 for line in medium if line.split()[0] == "Zn"), 5)
        self.assertEqual(clusters["mof_co2_small"]["atoms"], clusters["mof_small"]["atoms"] + 3)
        self.assertTrue((out / "mof_small.tsv").exists())
        complex_small = main.read_cluster((out / "mof_co2_small.xyz").read_text(encoding="utf-8"),
                                          (out / "mof_co2_small.tsv").read_text(encoding="utf-8"))
        marked = complex_small.indices_with(main.ROLE_CLOSE)
        self.assertTrue(marked)
        metals = complex_small.indices_with(main.ROLE_METAL)
        self.assertTrue(set(marked) & set(metals))
        sets = main.close_atom_sets({("MOF+CO2", "small"): complex_small}, main.SolverSettings())
        self.assertEqual(sets[("MOF+CO2", "small")],
                         frozenset(marked) | frozenset(complex_small.indices_with(main.ROLE_CO2)))

    def test_relaxed_medium_needs_its_sidecar(self):
        out = self.root / "clusters"
        main.main(["--config", str(self.write_crystal()), "carve", "--out", str(out)])
        (self.root / "relaxed.xyz").write_text((out / "mof_medium.xyz").read_text(encoding="utf-8"),
                                               encoding="utf-8")
        path = self.write_crystal("relaxed_medium = relaxed.xyz\n")
        with self.assertRaises(ConfigError) as ctx:
            main.main(["--config", str(path), "carve", "--out", str(out)])
        self.assertIn("relaxed_medium", str(ctx.exception))

    def test_carve_needs_a_crystal(self):
        with self.assertRaises(ConfigError):
            main.main(["--config", str(self.write_config()), "carve"])


if __name__ == "__main__":
    unittest.main()
