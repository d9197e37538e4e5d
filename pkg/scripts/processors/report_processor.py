import csv
import io
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

from errors import LedgerError, ReportError
from models.basis_manager import DATA_DIR
from models.ledger_manager import EnergyLedger, LedgerRow
from processors.cluster_processor import spin_assignment  # noqa: F401

KCAL_PER_HARTREE = 627.5095
DISCREPANCY_THRESHOLD = 0.05

REFERENCE_FILE = "reference_mofs.tsv"
PUBLISHED_FILE = "published_binding_energies.tsv"


# ---------------------------------------------------------------- composition


@dataclass(frozen=True)
class ComposedEnergy:
    value: float
    method: str
    terms: tuple = ()


def oniom_compose(e_hl_small: float, e_ll_large: float, e_ll_small: float) -> float:
    """Subtractive estimate of the high-level energy of the large cluster."""
    return e_hl_small + (e_ll_large - e_ll_small)


def method_label(hl_method: str, ll_method: str) -> str:
    return hl_method if hl_method == ll_method else f"{hl_method}:{ll_method}"


def compose_system(ledger: EnergyLedger, system: str, hl_method: str, ll_method: str,
                   hl_basis: str | None = None, ll_basis: str | None = None, hl_eta=...) -> ComposedEnergy:
    """Compose one system from its ledger rows.

    The isolated CO2 molecule has no environment, so only its small/HL row is used.
    """
    label = method_label(hl_method, ll_method)
    hl = ledger.lookup(system, "small", "HL", hl_method, hl_basis, hl_eta)
    if system == "CO2":
        return ComposedEnergy(hl.energy, label, (hl,))
    ll_large = ledger.lookup(system, "large", "LL", ll_method, ll_basis)
    ll_small = ledger.lookup(system, "small", "LL", ll_method, ll_basis)
    value = oniom_compose(hl.energy, ll_large.energy, ll_small.energy)
    logging.info("compose_system: %s %s = %.10f + (%.10f - %.10f) = %.10f", system, label, hl.energy,
                 ll_large.energy, ll_small.energy, value)
    return ComposedEnergy(value, label, (hl, ll_large, ll_small))


def binding_energy(e_complex: ComposedEnergy, e_mof: ComposedEnergy, e_co2: ComposedEnergy) -> float:
    """Binding energy in kcal/mol; negative means bound."""
    methods = {e_complex.method, e_mof.method, e_co2.method}
    if len(methods) != 1:
        raise ReportError(
            f"binding energy terms use different methods: complex {e_complex.method!r}, "
            f"MOF {e_mof.method!r}, CO2 {e_co2.method!r}"
        )
    return (e_complex.value - e_mof.value - e_co2.value) * KCAL_PER_HARTREE


def deviation(delta_e: float, qst: float) -> float:
    """Distance between the binding-energy magnitude and the heat of adsorption."""
    return abs(abs(delta_e) - qst)


def error_metrics(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ReportError("error metrics need at least one (binding energy, heat of adsorption) pair")
    return sum(deviation(delta_e, qst) for delta_e, qst in pairs) / len(pairs)


# ---------------------------------------------------------------- reference data


@dataclass(frozen=True)
class ReferenceRecord:
    mof: str
    core_id: str
    metal: str
    uptake: float
    qst: float
    unpaired_per_metal: int

    def __post_init__(self):
        if not self.qst > 0:
            raise ReportError(f"{self.mof}: heat of adsorption must be positive, got {self.qst}")
        if self.uptake < 0:
            raise ReportError(f"{self.mof}: uptake must be >= 0, got {self.uptake}")


class PublishedColumn(NamedTuple):
    name: str
    group: str
    method: str
    values: dict
    printed_mean: float


class TableCheck(NamedTuple):
    column: str
    group: str
    method: str
    printed: float
    recomputed: float
    flagged: bool


def _data_rows(path: Path) -> list[dict]:
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line and not line.startswith("#")]
    return list(csv.DictReader(lines, delimiter="\t"))


def load_reference_dataset(path=None) -> tuple:
    path = Path(path) if path else DATA_DIR / REFERENCE_FILE
    records = []
    for number, row in enumerate(_data_rows(path), start=1):
        try:
            records.append(ReferenceRecord(row["mof"], row["core_id"], row["metal"], float(row["uptake_mmol_g"]),
                                           float(row["qst_kcal_mol"]), int(row["unpaired_per_metal"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ReportError(f"{path}: bad reference row {number}: {exc}") from exc
    return tuple(records)


def load_published_columns(path=None, metals=("Co", "Fe", "Ni", "Cu", "Zn")) -> tuple:
    path = Path(path) if path else DATA_DIR / PUBLISHED_FILE
    columns = []
    for row in _data_rows(path):
        try:
            values = {metal: float(row[metal]) for metal in metals}
            columns.append(PublishedColumn(row["column"], row["group"], row["method"], values,
                                           float(row["printed_mean"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ReportError(f"{path}: bad column {row.get('column')!r}: {exc}") from exc
    return tuple(columns)


def reproduce_published_tables(reference=None, columns=None,
                               threshold: float = DISCREPANCY_THRESHOLD) -> list[TableCheck]:
    """Recompute every published mean deviation and flag rows that disagree with the printed value."""
    reference = reference if reference is not None else load_reference_dataset()
    columns = columns if columns is not None else load_published_columns()
    qst = {record.metal: record.qst for record in reference}
    checks = []
    for column in columns:
        missing = sorted(set(column.values) - set(qst))
        if missing:
            raise ReportError(f"column {column.name}: no heat of adsorption for {', '.join(missing)}")
        recomputed = error_metrics((column.values[m], qst[m]) for m in sorted(column.values))
        flagged = abs(recomputed - column.printed_mean) > threshold
        if flagged:
            logging.warning("published column %s: printed mean %.4f, recomputed %.4f", column.name,
                            column.printed_mean, recomputed)
        checks.append(TableCheck(column.name, column.group, column.method, column.printed_mean, recomputed, flagged))
    return checks


# ---------------------------------------------------------------- report


class BindingRow(NamedTuple):
    mof: str
    method: str
    delta_e: float
    qst: float | None
    deviation: float | None


@dataclass(frozen=True)
class BindingReport:
    rows: tuple
    mean_abs_deviation: float | None

    @classmethod
    def from_rows(cls, rows) -> "BindingReport":
        rows = tuple(rows)
        scored = [(r.delta_e, r.qst) for r in rows if r.qst is not None]
        return cls(rows, error_metrics(scored) if scored else None)

    def as_dict(self) -> dict:
        return {
            "rows": [r._asdict() for r in self.rows],
            "mean_abs_deviation": self.mean_abs_deviation,
        }


def _fmt(value, digits: int = 3) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def render_report_text(report: BindingReport) -> str:
    header = ("MOF", "method", "dE (kcal/mol)", "Qst (kcal/mol)", "||dE|-Qst|")
    body = [(r.mof, r.method, _fmt(r.delta_e), _fmt(r.qst, 1), _fmt(r.deviation)) for r in report.rows]
    widths = [max(len(str(line[i])) for line in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) if i < 2 else cell.rjust(w) for i, (cell, w) in enumerate(zip(line, widths)))
             for line in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.append(f"mean ||dE|-Qst|: {_fmt(report.mean_abs_deviation)}")
    return "\n".join(line.rstrip() for line in lines) + "\n"


def render_report_tsv(report: BindingReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, delimiter="\t", lineterminator="\n")
    writer.writerow(("mof", "method", "delta_e_kcal_mol", "qst_kcal_mol", "deviation_kcal_mol"))
    for r in report.rows:
        writer.writerow((r.mof, r.method, repr(r.delta_e), "" if r.qst is None else repr(r.qst),
                         "" if r.deviation is None else repr(r.deviation)))
    return buffer.getvalue()


def render_table_checks(checks) -> str:
    lines = [f"{'column':<14s} {'group':<13s} {'printed':>8s} {'recomputed':>10s}  status"]
    for check in checks:
        status = "DISCREPANCY" if check.flagged else "ok"
        lines.append(f"{check.column:<14s} {check.group:<13s} {check.printed:8.4f} {check.recomputed:10.4f}  {status}")
    return "\n".join(lines) + "\n"


class ReportProcessor:
    """Turns a populated ledger into binding energies scored against the reference heats."""

    def __init__(self, reference=None):
        self.reference = tuple(reference) if reference is not None else load_reference_dataset()

    def reference_for(self, key: str | None) -> ReferenceRecord | None:
        if not key:
            return None
        for record in self.reference:
            if key in (record.mof, record.core_id, record.metal):
                return record
        logging.warning("ReportProcessor: no reference record for %s", key)
        return None

    def binding_row(self, ledger: EnergyLedger, mof: str, hl_method: str, ll_method: str,
                    hl_basis: str | None = None, ll_basis: str | None = None, hl_eta=...) -> BindingRow:
        terms = [compose_system(ledger, system, hl_method, ll_method, hl_basis, ll_basis, hl_eta)
                 for system in ("MOF+CO2", "MOF", "CO2")]
        delta_e = binding_energy(*terms)
        record = self.reference_for(mof)
        qst = record.qst if record else None
        dev = deviation(delta_e, qst) if qst is not None else None
        print(f"📊 {mof}: dE = {delta_e:.3f} kcal/mol ({terms[0].method})", file=sys.stderr)
        return BindingRow(record.mof if record else mof, terms[0].method, delta_e, qst, dev)

    def process(self, entries) -> BindingReport:
        """``entries`` is an iterable of (ledger, mof, hl_method, ll_method) tuples."""
        rows = []
        for ledger, mof, hl_method, ll_method in entries:
            try:
                rows.append(self.binding_row(ledger, mof, hl_method, ll_method))
            except LedgerError as exc:
                raise ReportError(f"{mof}: {exc}") from exc
        return BindingReport.from_rows(rows)


def external_row(system: str, tier: str, level: str, method: str, energy: float, basis: str = "external",
                 eta: float | None = None) -> LedgerRow:
    return LedgerRow(f"{system}-{tier}-{level}-{method}", system, tier, level, method, eta, basis, energy, "external")
