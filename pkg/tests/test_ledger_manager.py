import sys
import tempfile
import threading
import unittest
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))

from errors import CacheMismatchError, LedgerError, MissingEnergyError  # noqa: E402
from models.ledger_manager import EnergyLedger, LedgerRow, ResultCache, input_hash  # noqa: E402


def row(system="MOF", tier="small", level="LL", method="hf", energy=-1.5, eta=None, basis="sto-3g",
        source="internal", digest=""):
    return LedgerRow(f"{system}-{tier}-{level}-{method}", system, tier, level, method, eta, basis, energy, source,
                     digest)


class LedgerRowTests(unittest.TestCase):
    def test_rejects_unknown_tags_and_non_finite_energies(self):
        for bad in (row(system="MOF2"), row(tier="huge"), row(level="XL"), row(source="guess"),
                    row(energy=float("nan")), row(energy=float("inf")), row(eta=0.0), row(method="a\tb")):
            with self.assertRaises(LedgerError):
                EnergyLedger([bad])


class EnergyLedgerTests(unittest.TestCase):
    def test_duplicate_key_rejected(self):
        ledger = EnergyLedger([row(energy=-1.0)])
        ledger.add(row(energy=-1.0))
        self.assertEqual(len(ledger), 1)
        with self.assertRaises(LedgerError):
            ledger.add(row(energy=-2.0))
        ledger.add(row(energy=-2.0), replace=True)
        self.assertEqual(ledger.lookup("MOF", "small", "LL").energy, -2.0)

    def test_eta_and_basis_are_part_of_the_key(self):
        ledger = EnergyLedger([row(level="HL", method="ewf", eta=1e-5), row(level="HL", method="ewf", eta=1e-7),
                               row(basis="6-31g")])
        self.assertEqual(len(ledger), 3)
        self.assertEqual(ledger.lookup("MOF", "small", "HL", "ewf", eta=1e-7).eta, 1e-7)
        with self.assertRaises(LedgerError):
            ledger.lookup("MOF", "small", "HL", "ewf")

    def test_missing_row_names_the_triple(self):
        ledger = EnergyLedger([row(tier="large")])
        with self.assertRaises(MissingEnergyError) as ctx:
            ledger.lookup("MOF", "small", "LL", "hf")
        message = str(ctx.exception)
        self.assertIn("missing small-cluster low-level energy", message)
        self.assertIn("(MOF, small, LL)", message)

    def test_round_trip_is_byte_identical(self):
        ledger = EnergyLedger([
            row("MOF+CO2", "large", "LL", "M06L", -2345.123456789012, source="external", basis="def2-tzvp"),
            row("CO2", "small", "HL", "ewf-ccsd/mp2", -188.1, eta=1e-5, digest="ab" * 32),
            row("MOF", "small", "LL", "M06L", 0.1 + 0.2, source="external"),
        ])
        text = ledger.dumps()
        self.assertEqual(EnergyLedger.loads(text).dumps(), text)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "sub" / "ledger.tsv"
            ledger.write(path)
            first = path.read_bytes()
            EnergyLedger.read(path).write(path)
            self.assertEqual(path.read_bytes(), first)
        self.assertIn("\t\t", text.splitlines()[1])

    def test_sorted_by_system_then_tier(self):
        ledger = EnergyLedger([row("CO2", "small", "HL"), row("MOF", "large", "LL"), row("MOF", "small", "HL")])
        order = [(r.system, r.tier, r.level) for r in ledger.rows]
        self.assertEqual(order, [("MOF", "large", "LL"), ("MOF", "small", "HL"), ("CO2", "small", "HL")])

    def test_bad_file(self):
        with self.assertRaises(LedgerError):
            EnergyLedger.loads("calc_id\tenergy\n")
        header = EnergyLedger().dumps()
        with self.assertRaises(LedgerError):
            EnergyLedger.loads(header + "x\tMOF\tsmall\tLL\thf\t\tsto-3g\tnot-a-number\tinternal\t\n")

    def test_missing_file_reads_empty(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(len(EnergyLedger.read(Path(tmp) / "none.tsv")), 0)

    def test_concurrent_appends(self):
        ledger = EnergyLedger()
        methods = [f"m{i}" for i in range(64)]
        threads = [threading.Thread(target=ledger.add, args=(row(method=m, energy=-float(i)),))
                   for i, m in enumerate(methods)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self.assertEqual(len(ledger), 64)

    def test_check_hash(self):
        stored = row(digest="1" * 64)
        ledger = EnergyLedger([stored, row(tier="large", source="external")])
        self.assertEqual(ledger.check_hash(stored.key, "1" * 64, strict=True), stored)
        self.assertIsNone(ledger.check_hash(stored.key, "2" * 64, strict=False))
        with self.assertRaises(CacheMismatchError):
            ledger.check_hash(stored.key, "2" * 64, strict=True)
        external = row(tier="large", source="external")
        self.assertEqual(ledger.check_hash(external.key, "anything", strict=True), external)


class InputHashTests(unittest.TestCase):
    def test_every_input_changes_the_hash(self):
        base = ("3\n\nO 0 0 0\n", "sto-3g", "hf", None, 0, 0)
        digest = input_hash(*base)
        self.assertEqual(digest, input_hash(*base))
        self.assertEqual(len(digest), 64)
        for i, other in enumerate(("3\n\nO 0 0 1\n", "6-31g", "mp2", 1e-5, -1, 2)):
            changed = list(base)
            changed[i] = other
            self.assertNotEqual(input_hash(*changed), digest)


class ResultCacheTests(unittest.TestCase):
    def test_put_get(self):
        with tempfile.TemporaryDirectory() as tmp:
            cache = ResultCache(tmp)
            digest = "ab" + "0" * 62
            self.assertIsNone(cache.get(digest))
            cache.put(digest, {"energy": -1.25})
            self.assertTrue(cache.has(digest))
            self.assertEqual(cache.get(digest)["energy"], -1.25)

    def test_tampered_record(self):
        with tempfile.TemporaryDirectory() as tmp:
            cache = ResultCache(tmp)
            digest = "cd" + "0" * 62
            path = cache.put(digest, {"energy": -1.0})
            path.write_text('{"energy": -1.0, "input_hash": "other"}', encoding="utf-8")
            with self.assertRaises(CacheMismatchError):
                cache.get(digest)


if __name__ == "__main__":
    unittest.main()
