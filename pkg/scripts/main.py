import argparse
import configparser
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

# Ensure local modules are importable when loaded as a library
SCRIPT_DIR = Path(__file__).resolve().parent
if str(SCRIPT_DIR) not in sys.path:
    sys.path.insert(0, str(SCRIPT_DIR))

# Load environment variables from an optional .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    pass

import numpy as np  # noqa: E402
from ase.data import atomic_numbers  # noqa: E402

from errors import CarveError, ConfigError, MissingEnergyError, PipelineError, ScfError  # noqa: E402
from models.basis_manager import BasisManager  # noqa: E402
from models.correlation_manager import SOLVERS, CcsdOptions, CorrelationManager, full_window  # noqa: E402
from models.embedding_manager import (  # noqa: E402
    DEFAULT_ETA_HL,
    DEFAULT_ETA_LL,
    EmbeddingManager,
    MultiLevelSpec,
    write_diagnostics,
)
from models.integral_manager import IntegralManager, write_eri_file  # noqa: E402
from models.ledger_manager import LEVELS, SYSTEMS, TIERS, EnergyLedger, LedgerRow, ResultCache, input_hash  # noqa: E402
from models.scf_manager import ScfManager, ScfOptions, SystemSpec, dump_result, load_result, mo_transform  # noqa: E402
from processors.cluster_processor import (  # noqa: E402
    DEFAULT_UNPAIRED_PER_METAL,
    ROLE_CLOSE,
    ROLE_CO2,
    ROLE_METAL,
    CarveConfig,
    Cluster,
    ClusterAtom,
    ClusterProcessor,
    attach_co2,
    mark_close,
    propagate_coordinates,
    read_cluster,
    select_close_atoms,
    write_cluster,
)
from processors.report_processor import (  # noqa: E402
    BindingReport,
    ReportProcessor,
    compose_system,
    binding_energy,
    external_row,
    render_report_text,
    render_report_tsv,
    render_table_checks,
    reproduce_published_tables,
)
from processors.structure_processor import OriginTag, StructureProcessor, parse_xyz  # noqa: E402

# Debug logging
_log_path = os.getenv("MOFBIND_LOG", "mofbind_debug.log")
logging.basicConfig(filename=_log_path, level=logging.DEBUG,
                    format="%(asctime)s %(levelname)s %(message)s")
logging.info("Logging initialized at %s", _log_path)

DEFAULT_CACHE_DIR = os.getenv("MOFBIND_CACHE_DIR", ".mofbind_cache")

INTERNAL_METHODS = ("hf",) + SOLVERS + ("ewf",)

# Every energy entering the binding energy: the complex and the bare MOF need the
# subtractive correction, the isolated CO2 molecule only its small-cluster high level.
REQUIRED_TERMS = (
    ("MOF+CO2", "small", "HL"),
    ("MOF+CO2", "large", "LL"),
    ("MOF+CO2", "small", "LL"),
    ("MOF", "small", "HL"),
    ("MOF", "large", "LL"),
    ("MOF", "small", "LL"),
    ("CO2", "small", "HL"),
)

GEOMETRY_KEYS = {
    ("MOF", "small"): "mof_small",
    ("MOF", "large"): "mof_large",
    ("MOF+CO2", "small"): "complex_small",
    ("MOF+CO2", "large"): "complex_large",
    ("CO2", "small"): "co2",
}


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class StructureSettings:
    mof: str = "MOF"
    cif: Path | None = None
    co2_pose: Path | None = None
    reps: tuple | None = None
    center_metal: str | None = None
    relaxed_medium: Path | None = None
    geometries: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BasisSettings:
    hl: str = "sto-3g"
    ll: str = "sto-3g"
    minimal: str = "sto-3g"


@dataclass(frozen=True)
class SolverSettings:
    hl_method: str = "ewf"
    ll_method: str = "hf"
    hl_solver: str = "ccsd"
    ll_solver: str = "mp2"
    eta_hl: float = DEFAULT_ETA_HL
    eta_ll: float = DEFAULT_ETA_LL
    restrict_to_close: bool = True
    close_atoms: tuple | None = None
    binding_metal: int | None = None
    frozen_core: int = 0
    scf_max_iter: int = 200
    ccsd_max_iter: int = 100
    internal: bool = True

    def ledger_method(self, level: str) -> str:
        method = self.hl_method if level == "HL" else self.ll_method
        return f"ewf-{self.hl_solver}/{self.ll_solver}" if method == "ewf" else method

    def ledger_eta(self, level: str) -> float | None:
        method = self.hl_method if level == "HL" else self.ll_method
        return self.eta_hl if method == "ewf" else None

    def descriptor(self, level: str) -> str:
        """Everything beyond (method, eta) that changes an internal energy."""
        method = self.hl_method if level == "HL" else self.ll_method
        if method == "ewf":
            return (f"ewf-{self.hl_solver}/{self.ll_solver}|eta_ll={self.eta_ll!r}|"
                    f"restrict={self.restrict_to_close}|frozen={self.frozen_core}")
        return f"{method}|frozen={self.frozen_core}"


@dataclass(frozen=True)
class LedgerSettings:
    path: Path = Path("ledger.tsv")
    external: tuple = ()
    report: Path | None = None


@dataclass(frozen=True)
class PipelineConfig:
    structure: StructureSettings = field(default_factory=StructureSettings)
    carve: CarveConfig = field(default_factory=CarveConfig)
    basis: BasisSettings = field(default_factory=BasisSettings)
    solvers: SolverSettings = field(default_factory=SolverSettings)
    ledger: LedgerSettings = field(default_factory=LedgerSettings)
    cache_dir: Path = Path(DEFAULT_CACHE_DIR)
    jobs: int = 1
    strict: bool = False


KNOWN_KEYS = {
    "structure": {"mof", "cif", "co2_pose", "reps", "center_metal", "relaxed_medium", *GEOMETRY_KEYS.values()},
    "carve": {"radius", "n_small_metals", "n_medium_metals", "bond_scale", "chloride_completion",
              "chloride_distance", "linker_heavy_atom_rule", "charge_override"},
    "basis": {"hl", "ll", "minimal"},
    "solvers": {"hl_method", "ll_method", "hl_solver", "ll_solver", "eta_hl", "eta_ll", "restrict_to_close",
                "close_atoms", "binding_metal", "frozen_core", "scf_max_iter", "ccsd_max_iter", "internal"},
    "ledger": {"path", "external", "report", "cache_dir", "jobs", "strict"},
}


class _Section:
    """Typed reads from one config section; bad values raise ConfigError naming section and key."""

    def __init__(self, parser: configparser.ConfigParser, name: str, base: Path):
        self.name = name
        self.base = base
        self.values = dict(parser[name]) if parser.has_section(name) else {}
        known = KNOWN_KEYS.get(name)
        if known is not None:
            for key in sorted(set(self.values) - known):
                logging.warning("config: ignoring unknown key [%s] %s", name, key)

    def _convert(self, key, default, convert):
        raw = self.values.get(key)
        if raw is None or not raw.strip():
            return default
        try:
            return convert(raw.strip())
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{self.name}] {key}: cannot read {raw!r} ({exc})") from None

    def text(self, key, default=None):
        return self._convert(key, default, str)

    def number(self, key, default):
        return self._convert(key, default, float)

    def integer(self, key, default):
        return self._convert(key, default, int)

    def flag(self, key, default):
        def convert(raw):
            lowered = raw.lower()
            if lowered in ("1", "yes", "true", "on"):
                return True
            if lowered in ("0", "no", "false", "off"):
                return False
            raise ValueError("expected yes/no")
        return self._convert(key, default, convert)

    def path(self, key, default=None):
        return self._convert(key, default, lambda raw: (self.base / raw).resolve())

    def listing(self, key, convert=str, sep=","):
        return self._convert(key, (), lambda raw: tuple(convert(v.strip()) for v in raw.split(sep) if v.strip()))


def load_config(path, cache_dir=None, jobs=None, strict=None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = path.resolve().parent
    for name in parser.sections():
        if name not in KNOWN_KEYS and name != "spins":
            logging.warning("config: ignoring unknown section [%s]", name)

    s = _Section(parser, "structure", base)
    reps = s.listing("reps", int) or None
    if reps is not None and len(reps) != 3:
        raise ConfigError(f"[structure] reps: need three integers, got {reps}")
    structure = StructureSettings(
        mof=s.text("mof", "MOF"),
        cif=s.path("cif"),
        co2_pose=s.path("co2_pose"),
        reps=reps,
        center_metal=s.text("center_metal"),
        relaxed_medium=s.path("relaxed_medium"),
        geometries={key: s.path(name) for key, name in GEOMETRY_KEYS.items() if s.path(name) is not None},
    )

    spins = dict(DEFAULT_UNPAIRED_PER_METAL)
    sp = _Section(parser, "spins", base)
    for element in sp.values:
        if element not in atomic_numbers:
            raise ConfigError(f"[spins] {element}: not a chemical element")
        spins[element] = sp.integer(element, 0)
        if spins[element] < 0:
            raise ConfigError(f"[spins] {element}: unpaired electrons must be >= 0")

    c = _Section(parser, "carve", base)
    defaults = CarveConfig()
    try:
        carve = CarveConfig(
            radius=c.number("radius", defaults.radius),
            n_small_metals=c.integer("n_small_metals", defaults.n_small_metals),
            n_medium_metals=c.integer("n_medium_metals", defaults.n_medium_metals),
            bond_scale=c.number("bond_scale", defaults.bond_scale),
            chloride_completion=c.listing("chloride_completion", OriginTag.from_string, sep=None),
            chloride_distance=c.number("chloride_distance", defaults.chloride_distance),
            linker_heavy_atom_rule=c.flag("linker_heavy_atom_rule", defaults.linker_heavy_atom_rule),
            spins=spins,
            charge_override=c.integer("charge_override", None),
        )
    except CarveError as exc:
        raise ConfigError(f"[carve] {exc}") from None

    b = _Section(parser, "basis", base)
    basis = BasisSettings(b.text("hl", "sto-3g"), b.text("ll", "sto-3g"), b.text("minimal", "sto-3g"))

    v = _Section(parser, "solvers", base)
    solvers = SolverSettings(
        hl_method=v.text("hl_method", "ewf"),
        ll_method=v.text("ll_method", "hf"),
        hl_solver=v.text("hl_solver", "ccsd").lower(),
        ll_solver=v.text("ll_solver", "mp2").lower(),
        eta_hl=v.number("eta_hl", DEFAULT_ETA_HL),
        eta_ll=v.number("eta_ll", DEFAULT_ETA_LL),
        restrict_to_close=v.flag("restrict_to_close", True),
        close_atoms=v.listing("close_atoms", int) or None,
        binding_metal=v.integer("binding_metal", None),
        frozen_core=v.integer("frozen_core", 0),
        scf_max_iter=v.integer("scf_max_iter", 200),
        ccsd_max_iter=v.integer("ccsd_max_iter", 100),
        internal=v.flag("internal", True),
    )
    for key in ("hl_solver", "ll_solver"):
        if getattr(solvers, key) not in SOLVERS:
            raise ConfigError(f"[solvers] {key}: expected one of {', '.join(SOLVERS)}")
    if not solvers.eta_hl >= solvers.eta_ll > 0:
        raise ConfigError("[solvers] eta_hl/eta_ll: need eta_hl >= eta_ll > 0")
    if solvers.frozen_core < 0:
        raise ConfigError("[solvers] frozen_core: must be >= 0")

    g = _Section(parser, "ledger", base)
    ledger = LedgerSettings(
        path=g.path("path", (base / "ledger.tsv").resolve()),
        external=g.listing("external", lambda raw: (base / raw).resolve()),
        report=g.path("report"),
    )
    cfg = PipelineConfig(
        structure=structure,
        carve=carve,
        basis=basis,
        solvers=solvers,
        ledger=ledger,
        cache_dir=g.path("cache_dir", Path(DEFAULT_CACHE_DIR).resolve()),
        jobs=g.integer("jobs", 1),
        strict=g.flag("strict", False),
    )
    overrides = {}
    if cache_dir is not None:
        overrides["cache_dir"] = Path(cache_dir).resolve()
    if jobs is not None:
        overrides["jobs"] = int(jobs)
    if strict:
        overrides["strict"] = True
    cfg = replace(cfg, **overrides)
    if cfg.jobs < 1:
        raise ConfigError(f"[ledger] jobs: must be >= 1, got {cfg.jobs}")
    logging.info("config: loaded %s (hl=%s ll=%s jobs=%d strict=%s)", path, solvers.hl_method, solvers.ll_method,
                 cfg.jobs, cfg.strict)
    return cfg


# ---------------------------------------------------------------- geometries


def plain_cluster(collection, net_charge: int = 0, n_unpaired: int | None = None) -> Cluster:
    """Wrap bare XYZ atoms as a cluster; the lowest spin compatible with the electron count is assumed."""
    atoms = tuple(ClusterAtom(a.element, tuple(a.position), frozenset(), a.origin) for a in collection)
    electrons = sum(atomic_numbers[a.element] for a in atoms) - net_charge
    unpaired = electrons % 2 if n_unpaired is None else n_unpaired
    return Cluster(atoms, net_charge, unpaired)


def load_cluster_file(xyz_path, sidecar_path=None) -> Cluster:
    xyz_path = Path(xyz_path)
    sidecar = Path(sidecar_path) if sidecar_path else xyz_path.with_suffix(".tsv")
    text = xyz_path.read_text(encoding="utf-8")
    if sidecar.exists():
        return read_cluster(text, sidecar.read_text(encoding="utf-8"))
    return plain_cluster(parse_xyz(text))


def build_geometries(cfg: PipelineConfig, include_medium: bool = False) -> dict:
    """Cluster per (system, tier), carved from the crystal or read from XYZ files.

    The medium tier is only returned on request; it feeds the external relaxation, not the ledger.
    """
    st = cfg.structure
    if st.cif is not None:
        if st.co2_pose is None:
            raise ConfigError("[structure] co2_pose: required together with cif")
        pose = parse_xyz(st.co2_pose.read_text(encoding="utf-8"))
        _, supercell, _ = StructureProcessor(cfg.carve.radius).process(st.cif, st.reps)
        center = OriginTag.from_string(st.center_metal) if st.center_metal else None
        tiers = ClusterProcessor(cfg.carve).process(supercell, pose.positions.mean(axis=0), center)
        if st.relaxed_medium is not None:
            sidecar = st.relaxed_medium.with_suffix(".tsv")
            if not sidecar.exists():
                raise ConfigError(f"[structure] relaxed_medium: {st.relaxed_medium} has no provenance sidecar "
                                  f"{sidecar.name}; write the medium cluster with carve first")
            relaxed = load_cluster_file(st.relaxed_medium, sidecar)
            tiers["large"] = propagate_coordinates(relaxed, tiers["large"], strict=True)
            tiers["small"] = propagate_coordinates(relaxed, tiers["small"], strict=False)
        co2 = attach_co2(Cluster((), 0, 0), pose)
        geometries = {
            ("MOF", "small"): tiers["small"],
            ("MOF", "large"): tiers["large"],
            ("MOF+CO2", "small"): attach_co2(tiers["small"], pose),
            ("MOF+CO2", "large"): attach_co2(tiers["large"], pose),
            ("CO2", "small"): co2,
        }
        if include_medium:
            geometries[("MOF", "medium")] = tiers["medium"]
        return geometries
    missing = [name for key, name in GEOMETRY_KEYS.items() if key not in st.geometries]
    if missing:
        raise ConfigError(f"[structure] give either cif + co2_pose or all of: {', '.join(missing)}")
    return {key: load_cluster_file(path) for key, path in sorted(st.geometries.items())}


def binding_metal_index(complex_: Cluster, solvers: SolverSettings) -> int | None:
    """Configured binding metal, else the metal nearest the CO2 centroid."""
    if solvers.binding_metal is not None:
        return solvers.binding_metal
    metals = complex_.indices_with(ROLE_METAL)
    if not metals:
        return None
    guests = complex_.indices_with(ROLE_CO2)
    site = complex_.positions[guests].mean(axis=0) if guests else complex_.positions.mean(axis=0)
    distances = np.linalg.norm(complex_.positions[metals] - site, axis=1)
    return metals[int(np.argmin(distances))]


def close_atom_sets(geometries: dict, solvers: SolverSettings) -> dict:
    """Close-atom set of each small cluster; the bare MOF reuses the complex's indices."""
    complex_ = geometries[("MOF+CO2", "small")]
    guests = frozenset(complex_.indices_with(ROLE_CO2))
    metal = binding_metal_index(complex_, solvers)
    if solvers.close_atoms:
        close = frozenset(solvers.close_atoms) | guests
    elif complex_.indices_with(ROLE_CLOSE) and solvers.binding_metal is None:
        close = frozenset(complex_.indices_with(ROLE_CLOSE)) | guests
    elif metal is not None:
        close = select_close_atoms(complex_, metal)
    else:
        close = frozenset(range(len(complex_)))
    sets = {}
    for (system, tier), cluster in geometries.items():
        if tier != "small":
            continue
        if system == "CO2":
            sets[(system, tier)] = frozenset(range(len(cluster)))
        else:
            sets[(system, tier)] = frozenset(i for i in close if i < len(cluster))
    return sets


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class PlannedCalculation:
    calc_id: str
    system: str
    tier: str
    level: str
    method: str
    eta: float | None
    basis: str
    digest: str
    status: str
    cluster: Cluster = field(compare=False, repr=False)
    close_atoms: frozenset = frozenset()

    @property
    def key(self) -> tuple:
        return (self.system, self.tier, self.level, self.method, self.eta, self.basis)

    def as_dict(self) -> dict:
        return {"calc_id": self.calc_id, "system": self.system, "tier": self.tier, "level": self.level,
                "method": self.method, "eta": self.eta, "basis": self.basis, "status": self.status,
                "input_hash": self.digest}


def load_ledger(cfg: PipelineConfig) -> EnergyLedger:
    ledger = EnergyLedger.read(cfg.ledger.path)
    for path in cfg.ledger.external:
        if not Path(path).exists():
            raise ConfigError(f"[ledger] external: {path} not found")
        for row in EnergyLedger.read(path).rows:
            ledger.add(row._replace(source="external"))
    return ledger


def plan_pipeline(cfg: PipelineConfig, ledger: EnergyLedger | None = None, geometries: dict | None = None,
                  cache: ResultCache | None = None) -> list[PlannedCalculation]:
    """Every ledger term the binding energy needs, with its status: external, ledger, cached, compute or missing."""
    ledger = ledger if ledger is not None else load_ledger(cfg)
    cache = cache or ResultCache(cfg.cache_dir)
    sv = cfg.solvers
    geometries = geometries if geometries is not None else _geometries_if_needed(cfg, ledger)
    close = close_atom_sets(geometries, sv) if geometries else {}
    plan = []
    for system, tier, level in REQUIRED_TERMS:
        method = sv.ledger_method(level)
        eta = sv.ledger_eta(level)
        basis = cfg.basis.hl if level == "HL" else cfg.basis.ll
        calc_id = f"{system}-{tier}-{level}"
        external = [r for r in ledger.find(system, tier, level, method) if r.source == "external"]
        if external:
            plan.append(PlannedCalculation(calc_id, system, tier, level, method, external[0].eta, external[0].basis,
                                           external[0].input_hash, "external", None))
            continue
        cluster = geometries.get((system, tier)) if geometries else None
        if cluster is None:
            plan.append(PlannedCalculation(calc_id, system, tier, level, method, eta, basis, "", "missing", None))
            continue
        xyz, _ = write_cluster(cluster)
        digest = input_hash(xyz, basis, sv.descriptor(level), eta, cluster.net_charge, cluster.n_unpaired)
        key = (system, tier, level, method, eta, basis)
        if ledger.check_hash(key, digest, cfg.strict) is not None:
            status = "ledger"
        elif cache.has(digest):
            status = "cached"
        elif sv.internal and (sv.hl_method if level == "HL" else sv.ll_method) in INTERNAL_METHODS:
            status = "compute"
        else:
            status = "missing"
        plan.append(PlannedCalculation(calc_id, system, tier, level, method, eta, basis, digest, status, cluster,
                                       close.get((system, tier), frozenset())))
    return plan


def _geometries_if_needed(cfg: PipelineConfig, ledger: EnergyLedger) -> dict:
    sv = cfg.solvers
    for system, tier, level in REQUIRED_TERMS:
        method = sv.ledger_method(level)
        if not any(r.source == "external" for r in ledger.find(system, tier, level, method)):
            return build_geometries(cfg)
    logging.info("plan_pipeline: every term is external, skipping geometry construction")
    return {}


def compute_energy(calc: PlannedCalculation, cfg: PipelineConfig) -> dict:
    """Run one internal calculation and return its cache record."""
    sv = cfg.solvers
    method = sv.hl_method if calc.level == "HL" else sv.ll_method
    cluster = calc.cluster
    manager = BasisManager()
    elements = set(cluster.elements)
    basis = manager.load(calc.basis, elements)
    ints = IntegralManager().compute(cluster, basis)
    spec = SystemSpec.from_cluster(cluster, calc.basis)
    try:
        mf = ScfManager(ScfOptions(max_iter=sv.scf_max_iter)).run(spec, ints, calc.calc_id)
    except ScfError as exc:
        raise PipelineError(f"{calc.system} ({calc.tier} cluster): {exc}") from exc
    correlation = CorrelationManager(CcsdOptions(max_iter=sv.ccsd_max_iter))
    record = {"calc_id": calc.calc_id, "method": calc.method, "mode": mf.mode, "e_hf": mf.e_tot,
              "scf_iterations": mf.n_iter, "n_basis": ints.n, "n_atoms": len(cluster)}
    if method == "hf":
        energy = mf.e_tot
    elif method in SOLVERS:
        mo = mo_transform(ints, mf)
        solution = correlation.solve(method, mo, full_window(mo, sv.frozen_core), calc.calc_id)
        energy = mf.e_tot + solution.e_corr
        record["e_corr"] = solution.e_corr
    else:
        minimal = manager.load(cfg.basis.minimal, elements)
        embedding = EmbeddingManager(cluster, ints, mf, basis, minimal, correlation=correlation)
        spec_ml = MultiLevelSpec(sv.eta_hl, sv.eta_ll, sv.hl_solver, sv.ll_solver,
                                 calc.close_atoms or frozenset(range(len(cluster))), sv.restrict_to_close)
        result = embedding.multilevel_energy(spec_ml)
        energy = result.e_total
        record.update(e_hl=result.e_hl, e_ll_full=result.e_ll_full, e_ll_close=result.e_ll_close,
                      close_atoms=sorted(spec_ml.close_atoms))
        write_diagnostics(result.rows, cfg.cache_dir / "fragments" / f"{calc.digest}.tsv")
    record["energy"] = energy
    logging.info("compute_energy: %s %s = %.10f", calc.calc_id, calc.method, energy)
    return record


def run_pipeline(cfg: PipelineConfig) -> dict:
    print(f"🚀 PIPELINE: {cfg.structure.mof}", file=sys.stderr)
    ledger = load_ledger(cfg)
    cache = ResultCache(cfg.cache_dir)
    plan = plan_pipeline(cfg, ledger, cache=cache)

    def execute(calc: PlannedCalculation) -> LedgerRow | None:
        if calc.status in ("external", "ledger", "missing"):
            return None
        if calc.status == "cached":
            record = cache.get(calc.digest)
        else:
            record = compute_energy(calc, cfg)
            cache.put(calc.digest, record)
        row = LedgerRow(calc.calc_id, calc.system, calc.tier, calc.level, calc.method, calc.eta, calc.basis,
                        float(record["energy"]), "internal", calc.digest)
        return ledger.add(row, replace=True)

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        list(pool.map(execute, plan))
    ledger.write(cfg.ledger.path)

    missing = [c for c in plan if c.status == "missing"]
    if missing:
        first = missing[0]
        raise MissingEnergyError(
            f"missing {first.tier}-cluster {'high' if first.level == 'HL' else 'low'}-level energy for "
            f"({first.system}, {first.tier}, {first.level}) with method {first.method}; "
            "add it to an external ledger or enable the internal solvers"
        )

    report = compose_report(cfg, ledger, plan)
    text, tsv = render_report_text(report), render_report_tsv(report)
    if cfg.ledger.report is not None:
        cfg.ledger.report.parent.mkdir(parents=True, exist_ok=True)
        cfg.ledger.report.write_text(text, encoding="utf-8")
        cfg.ledger.report.with_suffix(".tsv").write_text(tsv, encoding="utf-8")
    counts = {status: sum(1 for c in plan if c.status == status)
              for status in ("external", "ledger", "cached", "compute")}
    print(f"🎉 PIPELINE COMPLETE: {counts['compute']} computed, "
          f"{counts['ledger'] + counts['cached']} reused, {counts['external']} external", file=sys.stderr)
    return {
        "status": "complete",
        "mof": cfg.structure.mof,
        "binding_energy_kcal_mol": report.rows[0].delta_e,
        "method": report.rows[0].method,
        "computed": counts["compute"],
        "cache_hits": counts["ledger"] + counts["cached"],
        "external": counts["external"],
        "ledger": str(cfg.ledger.path),
        "report": report.as_dict(),
        "report_text": text,
        "plan": [c.as_dict() for c in plan],
    }


def compose_report(cfg: PipelineConfig, ledger: EnergyLedger, plan) -> BindingReport:
    sv = cfg.solvers
    by_level = {"HL": [c for c in plan if c.level == "HL"], "LL": [c for c in plan if c.level == "LL"]}
    # external rows carry their own basis and threshold; internal rows are pinned to the configured ones
    hl_external = any(c.status == "external" for c in by_level["HL"])
    hl_basis = None if hl_external else cfg.basis.hl
    ll_basis = None if any(c.status == "external" for c in by_level["LL"]) else cfg.basis.ll
    hl_eta = ... if hl_external else sv.ledger_eta("HL")
    row = ReportProcessor().binding_row(ledger, cfg.structure.mof, sv.ledger_method("HL"), sv.ledger_method("LL"),
                                        hl_basis, ll_basis, hl_eta)
    return BindingReport.from_rows([row])


# ---------------------------------------------------------------- subcommands


def _cluster_from_args(args) -> Cluster:
    cluster = load_cluster_file(args.xyz, args.sidecar)
    charge = cluster.net_charge if args.charge is None else args.charge
    if args.charge is not None or args.unpaired is not None:
        electrons = sum(atomic_numbers[el] for el in cluster.elements) - charge
        unpaired = electrons % 2 if args.unpaired is None else args.unpaired
        cluster = Cluster(cluster.atoms, charge, unpaired, cluster.groups, cluster.warnings)
    return cluster


def _mean_field(args, cluster: Cluster):
    basis = BasisManager().load(args.basis, set(cluster.elements))
    ints = IntegralManager().compute(cluster, basis, args.eri)
    dump = getattr(args, "mean_field", None)
    if dump:
        mf = load_result(dump)
        if mf.mo_coeff.shape[1] != ints.n:
            raise ConfigError(f"--mean-field: {dump} holds {mf.mo_coeff.shape[1]} basis functions, "
                              f"{args.basis} gives {ints.n}")
        print(f"📂 Mean field read from {dump}", file=sys.stderr)
        return basis, ints, mf
    mf = ScfManager(ScfOptions(mode=args.mode)).run(SystemSpec.from_cluster(cluster, args.basis), ints,
                                                    Path(args.xyz).stem)
    return basis, ints, mf


def command_carve(args, cfg: PipelineConfig) -> dict:
    if cfg.structure.cif is None:
        raise ConfigError("carve needs [structure] cif and co2_pose")
    geometries = build_geometries(cfg, include_medium=True)
    metal = binding_metal_index(geometries[("MOF+CO2", "small")], cfg.solvers)
    if metal is not None:
        for key in (("MOF+CO2", "small"), ("MOF", "small")):
            geometries[key] = mark_close(geometries[key], metal)
    out = Path(args.out) if args.out else cfg.cache_dir / "clusters"
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for (system, tier), cluster in sorted(geometries.items()):
        stem = f"{system.lower().replace('+', '_')}_{tier}"
        xyz, sidecar = write_cluster(cluster, f"{cfg.structure.mof} {system} {tier}")
        (out / f"{stem}.xyz").write_text(xyz, encoding="utf-8")
        (out / f"{stem}.tsv").write_text(sidecar, encoding="utf-8")
        files[stem] = {"xyz": str(out / f"{stem}.xyz"), "atoms": len(cluster), "net_charge": cluster.net_charge,
                       "n_unpaired": cluster.n_unpaired, "warnings": list(cluster.warnings)}
    return {"status": "complete", "clusters": files}


def command_scf(args, cfg: PipelineConfig) -> dict:
    cluster = _cluster_from_args(args)
    _, ints, mf = _mean_field(args, cluster)
    dump = Path(args.dump) if args.dump else cfg.cache_dir / "meanfield" / f"{Path(args.xyz).stem}.mf"
    dump.parent.mkdir(parents=True, exist_ok=True)
    dump_result(mf, dump)
    result = {"status": "complete", "mode": mf.mode, "e_tot": mf.e_tot, "e_nuc": mf.e_nuc,
              "converged": mf.converged, "iterations": mf.n_iter, "n_basis": ints.n,
              "warnings": list(ints.warnings), "mean_field": str(dump)}
    if args.write_eri:
        write_eri_file(args.write_eri, ints.eri)
        result["eri"] = args.write_eri
    return result


def command_mp2(args, cfg: PipelineConfig) -> dict:
    cluster = _cluster_from_args(args)
    _, ints, mf = _mean_field(args, cluster)
    mo = mo_transform(ints, mf)
    solution = CorrelationManager().solve(args.solver, mo, full_window(mo, args.frozen_core), Path(args.xyz).stem)
    return {"status": "complete", "solver": args.solver, "mode": solution.mode, "e_hf": mf.e_tot,
            "e_corr": solution.e_corr, "e_tot": mf.e_tot + solution.e_corr,
            "converged": solution.converged}


def command_embed(args, cfg: PipelineConfig) -> dict:
    cluster = _cluster_from_args(args)
    basis, ints, mf = _mean_field(args, cluster)
    minimal = BasisManager().load(args.minimal, set(cluster.elements))
    embedding = EmbeddingManager(cluster, ints, mf, basis, minimal, jobs=cfg.jobs)
    if args.close:
        close = frozenset(int(v) for v in args.close.split(","))
    else:
        close = frozenset(embedding.atoms)
    spec = MultiLevelSpec(args.eta_hl, args.eta_ll, args.hl_solver, args.ll_solver, close)
    result = embedding.multilevel_energy(spec)
    diagnostics = Path(args.diagnostics) if args.diagnostics else (
        cfg.cache_dir / "fragments" / f"{Path(args.xyz).stem}.tsv")
    write_diagnostics(result.rows, diagnostics)
    return {"status": "complete", "e_hf": result.e_hf, "e_hl": result.e_hl, "e_ll_full": result.e_ll_full,
            "e_ll_close": result.e_ll_close, "e_tot": result.e_total, "fragments": len(embedding.atoms),
            "diagnostics": str(diagnostics)}


def _ledger_from_args(args) -> EnergyLedger:
    ledger = EnergyLedger()
    for path in args.ledger:
        for row in EnergyLedger.read(path).rows:
            ledger.add(row)
    return ledger


def command_compose(args, cfg: PipelineConfig) -> dict:
    ledger = _ledger_from_args(args)
    terms = {system: compose_system(ledger, system, args.hl_method, args.ll_method)
             for system in ("MOF+CO2", "MOF", "CO2")}
    delta = binding_energy(terms["MOF+CO2"], terms["MOF"], terms["CO2"])
    return {"status": "complete", "method": terms["MOF"].method, "binding_energy_kcal_mol": delta,
            "energies_hartree": {system: term.value for system, term in terms.items()}}


def command_record(args, cfg: PipelineConfig) -> dict:
    """Add one externally computed energy to a ledger file."""
    ledger = EnergyLedger.read(args.ledger)
    row = external_row(args.system, args.tier, args.level, args.method, args.energy, args.basis, args.eta)
    ledger.add(row, replace=args.replace)
    ledger.write(args.ledger)
    print(f"📝 {row.calc_id}: {row.energy!r} Eh -> {args.ledger}", file=sys.stderr)
    return {"status": "complete", "ledger": args.ledger, "calc_id": row.calc_id, "rows": len(ledger.rows)}


def command_report(args, cfg: PipelineConfig) -> dict:
    checks = reproduce_published_tables()
    result = {"status": "complete", "published": [c._asdict() for c in checks],
              "published_text": render_table_checks(checks)}
    if args.ledger:
        report = ReportProcessor().process([(_ledger_from_args(args), args.mof, args.hl_method, args.ll_method)])
        result["report"] = report.as_dict()
        result["report_text"] = render_report_text(report)
    print(result.get("report_text", result["published_text"]), file=sys.stderr)
    return result


def command_pipeline(args, cfg: PipelineConfig) -> dict:
    if args.dry_run:
        plan = plan_pipeline(cfg)
        return {"status": "planned", "plan": [c.as_dict() for c in plan]}
    return run_pipeline(cfg)


COMMANDS = {
    "carve": command_carve,
    "scf": command_scf,
    "mp2": command_mp2,
    "embed": command_embed,
    "compose": command_compose,
    "record": command_record,
    "report": command_report,
    "pipeline": command_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mofbind", description="CO2 binding energies of MOF clusters")
    parser.add_argument("--config", help="pipeline config file")
    parser.add_argument("--cache-dir", help=f"result cache (default {DEFAULT_CACHE_DIR})")
    parser.add_argument("--strict", action="store_true", help="fail on stale ledger rows instead of recomputing")
    parser.add_argument("--dry-run", action="store_true", help="list the calculations without running them")
    parser.add_argument("--jobs", type=int, help="parallel calculations")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("carve", help="carve the cluster tiers").add_argument("--out", help="output directory")

    def molecule_args(p):
        p.add_argument("xyz")
        p.add_argument("--sidecar")
        p.add_argument("--basis", default="sto-3g")
        p.add_argument("--charge", type=int)
        p.add_argument("--unpaired", type=int)
        p.add_argument("--mode", choices=("restricted", "unrestricted"))
        p.add_argument("--eri", help="read two-electron integrals from this binary file")
        return p

    scf = molecule_args(sub.add_parser("scf", help="mean-field energy of one geometry"))
    scf.add_argument("--dump", help="mean-field dump path (default: <cache>/meanfield/<stem>.mf)")
    scf.add_argument("--write-eri", help="also write the two-electron integrals to this binary file")
    mp2_parser = molecule_args(sub.add_parser("mp2", help="canonical correlated energy of one geometry"))
    mp2_parser.add_argument("--solver", choices=SOLVERS, default="mp2")
    mp2_parser.add_argument("--frozen-core", type=int, default=0)
    mp2_parser.add_argument("--mean-field", help="reuse a mean-field dump written by scf")
    embed = molecule_args(sub.add_parser("embed", help="multilevel embedded energy of one geometry"))
    embed.add_argument("--minimal", default="sto-3g")
    embed.add_argument("--eta-hl", type=float, default=DEFAULT_ETA_HL)
    embed.add_argument("--eta-ll", type=float, default=DEFAULT_ETA_LL)
    embed.add_argument("--hl-solver", choices=SOLVERS, default="ccsd")
    embed.add_argument("--ll-solver", choices=SOLVERS, default="mp2")
    embed.add_argument("--close", help="comma-separated close atom indices (default: all)")
    embed.add_argument("--mean-field", help="reuse a mean-field dump written by scf")
    embed.add_argument("--diagnostics", help="per-fragment TSV output (default: <cache>/fragments/<stem>.tsv)")

    for name, help_text, need in (("compose", "binding energy from ledger files", True),
                                  ("report", "published-table checks and optional ledger report", False)):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--ledger", action="append", default=[], required=need)
        p.add_argument("--hl-method", default="ewf-ccsd/mp2")
        p.add_argument("--ll-method", default="M06L")
        p.add_argument("--mof", default="MOF")

    record = sub.add_parser("record", help="add an externally computed energy to a ledger file")
    record.add_argument("--ledger", required=True)
    record.add_argument("--system", choices=SYSTEMS, required=True)
    record.add_argument("--tier", choices=TIERS, required=True)
    record.add_argument("--level", choices=LEVELS, required=True)
    record.add_argument("--method", required=True)
    record.add_argument("--energy", type=float, required=True, help="energy in hartree")
    record.add_argument("--basis", default="external")
    record.add_argument("--eta", type=float)
    record.add_argument("--replace", action="store_true", help="overwrite an existing row with the same key")

    sub.add_parser("pipeline", help="carve, compute, compose and report")
    return parser


def main(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.info("script start: %s", argv if argv is not None else sys.argv)
    if args.config:
        cfg = load_config(args.config, args.cache_dir, args.jobs, args.strict)
    else:
        if args.command in ("carve", "pipeline"):
            raise ConfigError(f"{args.command} needs --config")
        cfg = PipelineConfig(cache_dir=Path(args.cache_dir or DEFAULT_CACHE_DIR), jobs=args.jobs or 1,
                             strict=args.strict)
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    try:
        result = main()
        print(json.dumps(result))
        sys.exit(0)
    except Exception as e:
        import traceback
        error_message = f"{type(e).__name__}: {e}"
        logging.error("script error: %s", error_message)
        logging.error("traceback: %s", traceback.format_exc())
        print(json.dumps({"status": "failed", "error": error_message}), file=sys.stderr)
        sys.exit(1)
