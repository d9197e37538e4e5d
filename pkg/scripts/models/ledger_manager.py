import hashlib
import json
import logging
import math
import threading
from pathlib import Path
from typing import NamedTuple

from errors import CacheMismatchError, LedgerError, MissingEnergyError

SYSTEMS = ("MOF", "CO2", "MOF+CO2")
TIERS = ("large", "medium", "small")
LEVELS = ("LL", "HL")
SOURCES = ("internal", "external")
LEDGER_COLUMNS = ("calc_id", "system", "tier", "level", "method", "eta", "basis", "energy_hartree", "source",
                  "input_hash")

LEVEL_WORDS = {"LL": "low-level", "HL": "high-level"}


class LedgerRow(NamedTuple):
    calc_id: str
    system: str
    tier: str
    level: str
    method: str
    eta: float | None
    basis: str
    energy: float
    source: str = "internal"
    input_hash: str = ""

    @property
    def key(self) -> tuple:
        return (self.system, self.tier, self.level, self.method, self.eta, self.basis)

    def validate(self) -> None:
        for name, value, allowed in (("system", self.system, SYSTEMS), ("tier", self.tier, TIERS),
                                     ("level", self.level, LEVELS), ("source", self.source, SOURCES)):
            if value not in allowed:
                raise LedgerError(f"{self.calc_id}: {name} {value!r} not in {allowed}")
        if not math.isfinite(self.energy):
            raise LedgerError(f"{self.calc_id}: energy {self.energy!r} is not finite")
        if self.eta is not None and not self.eta > 0:
            raise LedgerError(f"{self.calc_id}: eta must be positive, got {self.eta!r}")
        for name in ("calc_id", "method", "basis"):
            text = getattr(self, name)
            if not text or "\t" in text or "\n" in text:
                raise LedgerError(f"ledger field {name} must be non-empty without tabs or newlines: {text!r}")


def _sort_key(row: LedgerRow) -> tuple:
    return (SYSTEMS.index(row.system), TIERS.index(row.tier), LEVELS.index(row.level), row.method,
            -1.0 if row.eta is None else row.eta, row.basis)


def input_hash(geometry: str, basis: str, method: str, eta: float | None, charge: int, spin: int) -> str:
    """sha256 over the inputs that determine an energy."""
    payload = json.dumps([geometry, basis, method, None if eta is None else repr(float(eta)), int(charge), int(spin)])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class EnergyLedger:
    """Every named energy entering the binding-energy composition, one row per term.

    Appends go through a lock; ``rows`` returns a sorted snapshot.
    """

    def __init__(self, rows=()):
        self._rows: dict[tuple, LedgerRow] = {}
        self._lock = threading.Lock()
        for row in rows:
            self.add(row)

    def __len__(self):
        return len(self._rows)

    @property
    def rows(self) -> list[LedgerRow]:
        with self._lock:
            return sorted(self._rows.values(), key=_sort_key)

    def add(self, row: LedgerRow, replace: bool = False) -> LedgerRow:
        row.validate()
        with self._lock:
            existing = self._rows.get(row.key)
            if existing is not None and not replace and existing != row:
                raise LedgerError(f"duplicate ledger entry {row.key} ({existing.calc_id} vs {row.calc_id})")
            self._rows[row.key] = row
        logging.debug("ledger: %s %s/%s/%s %s = %r", row.calc_id, row.system, row.tier, row.level, row.method,
                      row.energy)
        return row

    def find(self, system: str, tier: str, level: str, method: str | None = None, basis: str | None = None,
             eta=...) -> list[LedgerRow]:
        out = []
        for row in self.rows:
            if (row.system, row.tier, row.level) != (system, tier, level):
                continue
            if method is not None and row.method != method:
                continue
            if basis is not None and row.basis != basis:
                continue
            if eta is not ... and row.eta != eta:
                continue
            out.append(row)
        return out

    def lookup(self, system: str, tier: str, level: str, method: str | None = None, basis: str | None = None,
               eta=...) -> LedgerRow:
        rows = self.find(system, tier, level, method, basis, eta)
        if not rows:
            wanted = f" with method {method}" if method else ""
            raise MissingEnergyError(
                f"missing {tier}-cluster {LEVEL_WORDS[level]} energy for ({system}, {tier}, {level}){wanted}"
            )
        if len(rows) > 1:
            raise LedgerError(f"ambiguous ledger lookup ({system}, {tier}, {level}): "
                              f"{', '.join(r.calc_id for r in rows)}; name the method")
        return rows[0]

    def check_hash(self, row_key: tuple, digest: str, strict: bool) -> LedgerRow | None:
        """Return the cached row when its input hash matches; stale rows raise under ``strict``."""
        with self._lock:
            existing = self._rows.get(row_key)
        if existing is None or existing.source == "external":
            return existing
        if existing.input_hash == digest:
            return existing
        if strict:
            raise CacheMismatchError(
                f"ledger row {existing.calc_id} was computed from different inputs "
                f"({existing.input_hash[:12]} != {digest[:12]})"
            )
        logging.warning("ledger: stale row %s, recomputing", existing.calc_id)
        return None

    def dumps(self) -> str:
        lines = ["\t".join(LEDGER_COLUMNS)]
        for row in self.rows:
            lines.append("\t".join((row.calc_id, row.system, row.tier, row.level, row.method,
                                    "" if row.eta is None else repr(row.eta), row.basis, repr(row.energy),
                                    row.source, row.input_hash)))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text = self.dumps()
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def loads(cls, text: str, origin: str = "<ledger>") -> "EnergyLedger":
        lines = text.splitlines()
        if not lines or tuple(lines[0].split("\t")) != LEDGER_COLUMNS:
            raise LedgerError(f"{origin}: header must be {' '.join(LEDGER_COLUMNS)}")
        ledger = cls()
        for number, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != len(LEDGER_COLUMNS):
                raise LedgerError(f"{origin}:{number}: expected {len(LEDGER_COLUMNS)} fields, got {len(fields)}")
            try:
                eta = float(fields[5]) if fields[5] else None
                energy = float(fields[7])
            except ValueError as exc:
                raise LedgerError(f"{origin}:{number}: {exc}") from exc
            ledger.add(LedgerRow(fields[0], fields[1], fields[2], fields[3], fields[4], eta, fields[6], energy,
                                 fields[8], fields[9]))
        return ledger

    @classmethod
    def read(cls, path) -> "EnergyLedger":
        path = Path(path)
        if not path.exists():
            return cls()
        return cls.loads(path.read_text(encoding="utf-8"), str(path))


class ResultCache:
    """Content-addressed JSON records of internal calculations."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, digest: str) -> Path:
        return self.root / digest[:2] / f"{digest}.json"

    def has(self, digest: str) -> bool:
        return self.path(digest).exists()

    def get(self, digest: str) -> dict | None:
        path = self.path(digest)
        if not path.exists():
            return None
        record = json.loads(path.read_text(encoding="utf-8"))
        if record.get("input_hash") != digest:
            raise CacheMismatchError(f"cache record {path} does not carry hash {digest[:12]}")
        return record

    def put(self, digest: str, record: dict) -> Path:
        path = self.path(digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({**record, "input_hash": digest}, sort_keys=True, indent=2), encoding="utf-8")
        tmp.replace(path)
        return path
