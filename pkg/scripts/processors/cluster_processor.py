import csv
import io
import logging
import sys
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
from ase.data import atomic_numbers, covalent_radii
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial import cKDTree

from errors import CarveError, ConfigError, StructureParseError
from processors.structure_processor import (
    Atom,
    AtomCollection,
    OriginTag,
    parse_xyz,
    validate_element,
    write_xyz,
)

ROLE_METAL = "metal"
ROLE_CAP = "cap"
ROLE_MOBILE = "mobile"
ROLE_CLOSE = "close"
ROLE_CO2 = "co2"
ROLES = (ROLE_METAL, ROLE_CAP, ROLE_MOBILE, ROLE_CLOSE, ROLE_CO2)

CH_CAP_DISTANCE = 1.09
OH_CAP_DISTANCE = 0.96

# Unpaired electrons per divalent metal, coupled ferromagnetically
DEFAULT_UNPAIRED_PER_METAL = {"Co": 3, "Fe": 4, "Ni": 2, "Cu": 1, "Zn": 0, "Mg": 0}

NONMETALS = frozenset(
    "H He B C N O F Ne Si P S Cl Ar Ge As Se Br Kr Sb Te I Xe At Rn".split()
)

GROUP_CHARGES = {
    "metal": 2,
    "formate": -1,
    "hydroxylate": -1,
    "chloride": -1,
}


def is_metal(element: str) -> bool:
    return element not in NONMETALS


def spin_assignment(element: str, n_metals: int, overrides: Mapping[str, int] | None = None) -> int:
    """Total unpaired electrons for ``n_metals`` ferromagnetically coupled metal centres."""
    table = {**DEFAULT_UNPAIRED_PER_METAL, **(overrides or {})}
    if element not in table:
        raise ConfigError(f"no spin entry for {element}")
    if n_metals < 0:
        raise ConfigError(f"metal count must be >= 0, got {n_metals}")
    return int(table[element]) * n_metals


@dataclass(frozen=True)
class CarveConfig:
    radius: float = 12.5
    n_small_metals: int = 3
    n_medium_metals: int = 5
    bond_scale: float = 1.2
    chloride_completion: tuple = ()
    chloride_distance: float = 2.25
    linker_heavy_atom_rule: bool = True
    spins: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_UNPAIRED_PER_METAL))
    charge_override: int | None = None

    def __post_init__(self):
        if not self.radius > 0:
            raise CarveError(f"carve radius must be positive, got {self.radius}")
        if self.n_small_metals < 1 or self.n_small_metals > self.n_medium_metals:
            raise CarveError(
                f"need 1 <= n_small_metals <= n_medium_metals, got {self.n_small_metals} and {self.n_medium_metals}"
            )
        if not self.bond_scale > 0:
            raise CarveError(f"bond_scale must be positive, got {self.bond_scale}")


class BondGraph(NamedTuple):
    n_atoms: int
    edges: tuple  # (i, j, length) with i < j, sorted

    def adjacency(self):
        if not self.edges:
            return coo_matrix((self.n_atoms, self.n_atoms)).tocsr()
        rows = [e[0] for e in self.edges] + [e[1] for e in self.edges]
        cols = [e[1] for e in self.edges] + [e[0] for e in self.edges]
        return coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n_atoms, self.n_atoms)).tocsr()

    def neighbours(self) -> list[list[int]]:
        table = [[] for _ in range(self.n_atoms)]
        for i, j, _ in self.edges:
            table[i].append(j)
            table[j].append(i)
        return table


def _radius(element: str) -> float:
    try:
        symbol = validate_element(element)
    except StructureParseError as exc:
        raise CarveError(f"no tabulated covalent radius for element '{element}'") from exc
    return float(covalent_radii[atomic_numbers[symbol]])


def detect_bonds(elements, positions, scale: float = 1.2) -> BondGraph:
    """Distance-criterion bond graph: i-j bonded when d <= scale * (r_i + r_j)."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    radii = np.array([_radius(el) for el in elements])
    if len(radii) < 2:
        return BondGraph(len(radii), ())
    tree = cKDTree(positions)
    pairs = sorted(tree.query_pairs(scale * 2.0 * radii.max()))
    edges = []
    for i, j in pairs:
        length = float(np.linalg.norm(positions[i] - positions[j]))
        if length <= scale * (radii[i] + radii[j]):
            edges.append((i, j, length))
    return BondGraph(len(radii), tuple(edges))


class ClusterAtom(NamedTuple):
    element: str
    position: tuple
    roles: frozenset
    origin: OriginTag
    group: int = -1


class ChargeGroup(NamedTuple):
    kind: str
    charge: int


@dataclass(frozen=True)
class Cluster:
    atoms: tuple
    net_charge: int
    n_unpaired: int
    groups: tuple = ()
    warnings: tuple = field(default=(), compare=False)

    def __len__(self):
        return len(self.atoms)

    @property
    def elements(self) -> list[str]:
        return [a.element for a in self.atoms]

    @property
    def positions(self) -> np.ndarray:
        if not self.atoms:
            return np.zeros((0, 3))
        return np.array([a.position for a in self.atoms], dtype=float)

    @property
    def provenance(self) -> dict:
        return {i: a.origin for i, a in enumerate(self.atoms)}

    @property
    def n_electrons(self) -> int:
        return sum(atomic_numbers[el] for el in self.elements) - self.net_charge

    def indices_with(self, role: str) -> list[int]:
        return [i for i, a in enumerate(self.atoms) if role in a.roles]

    def as_collection(self) -> AtomCollection:
        return AtomCollection(tuple(Atom(a.element, a.position, a.origin) for a in self.atoms))


def formal_charge(cluster: Cluster) -> int:
    """Sum of group formal charges: metals +2, formate/hydroxylate/chloride -1, kept linkers -(groups)."""
    return sum(group.charge for group in cluster.groups)


class _FunctionalGroup(NamedTuple):
    kind: str            # "carboxylate" or "alkoxide"
    members: tuple
    attach: int          # carboxylate C or alkoxide O
    anchor: int          # framework atom on the other side of the severed bond
    metals: frozenset
    linker: int


class _Framework:
    """Bond graph, linker components and coordinating groups of a supercell."""

    def __init__(self, atoms: AtomCollection, scale: float):
        self.atoms = atoms
        self.elements = atoms.elements
        self.positions = atoms.positions
        self.graph = detect_bonds(self.elements, self.positions, scale)
        self.metal_mask = np.array([is_metal(el) for el in self.elements], dtype=bool)
        self.neighbours = self.graph.neighbours()

        organic = np.flatnonzero(~self.metal_mask)
        self.linker_of = np.full(len(atoms), -1, dtype=int)
        if len(organic):
            sub = self.graph.adjacency()[organic][:, organic]
            _, labels = connected_components(sub, directed=False)
            self.linker_of[organic] = labels
        n_linkers = int(self.linker_of.max()) + 1 if len(organic) else 0
        self.linkers = [[] for _ in range(n_linkers)]
        for index in organic:
            self.linkers[self.linker_of[index]].append(int(index))

        self.groups = self._find_groups()
        self.groups_of_linker = [[] for _ in range(n_linkers)]
        for group in self.groups:
            self.groups_of_linker[group.linker].append(group)
        logging.info(
            "framework analysis: %d atoms, %d bonds, %d linkers, %d coordinating groups",
            len(atoms), len(self.graph.edges), n_linkers, len(self.groups),
        )

    def organic_neighbours(self, i: int) -> list[int]:
        return [j for j in self.neighbours[i] if not self.metal_mask[j]]

    def coordinated_metals(self, members) -> frozenset:
        return frozenset(j for i in members for j in self.neighbours[i] if self.metal_mask[j])

    def _find_groups(self) -> list[_FunctionalGroup]:
        groups = []
        in_carboxylate = set()
        for c in range(len(self.elements)):
            if self.elements[c] != "C":
                continue
            nbrs = self.organic_neighbours(c)
            oxygens = [o for o in nbrs if self.elements[o] == "O" and len(self.organic_neighbours(o)) == 1]
            others = [n for n in nbrs if n not in oxygens]
            if len(oxygens) == 2 and len(others) == 1:
                members = (c, oxygens[0], oxygens[1])
                in_carboxylate.update(members)
                groups.append(_FunctionalGroup(
                    "carboxylate", members, c, others[0], self.coordinated_metals(oxygens), int(self.linker_of[c])
                ))
        for o in range(len(self.elements)):
            if self.elements[o] != "O" or o in in_carboxylate:
                continue
            nbrs = self.organic_neighbours(o)
            if len(nbrs) == 1 and self.elements[nbrs[0]] == "C":
                groups.append(_FunctionalGroup(
                    "alkoxide", (o,), o, nbrs[0], self.coordinated_metals((o,)), int(self.linker_of[o])
                ))
        return groups

    def metal_index(self, origin: OriginTag) -> int:
        try:
            index = self.atoms.index_of(origin)
        except KeyError:
            raise CarveError(f"center metal {origin} not found in supercell") from None
        if not self.metal_mask[index]:
            raise CarveError(f"center atom {origin} is {self.elements[index]}, not a metal")
        return index

    def nearest_metals(self, site, count: int) -> list[int]:
        metals = np.flatnonzero(self.metal_mask)
        if len(metals) < count:
            raise CarveError(f"requested {count} metals but the supercell holds only {len(metals)}")
        dist = np.linalg.norm(self.positions[metals] - np.asarray(site, dtype=float), axis=1)
        order = sorted(range(len(metals)), key=lambda k: (round(float(dist[k]), 9), self.atoms.atoms[metals[k]].origin))
        return [int(metals[k]) for k in order[:count]]


class _ClusterBuilder:
    def __init__(self, framework: _Framework, cfg: CarveConfig):
        self.framework = framework
        self.cfg = cfg
        self.entries: list[tuple] = []  # (element, position, roles, origin, group key)
        self.groups: dict = {}
        self.taken: set[int] = set()

    def _group(self, key, kind: str, charge: int):
        if key not in self.groups:
            self.groups[key] = ChargeGroup(kind, charge)
        return key

    def add_atom(self, index: int, key, roles=()):
        if index in self.taken:
            return
        self.taken.add(index)
        atom = self.framework.atoms.atoms[index]
        roles = set(roles)
        if self.framework.metal_mask[index]:
            roles.add(ROLE_METAL)
        self.entries.append((atom.element, tuple(atom.position), frozenset(roles), atom.origin, key))

    def add_cap(self, element: str, position, origin: OriginTag, key):
        self.entries.append((element, tuple(float(v) for v in position), frozenset({ROLE_CAP}), origin, key))

    def add_metal(self, index: int, roles=()):
        key = self._group(("metal", index), "metal", GROUP_CHARGES["metal"])
        self.add_atom(index, key, roles)

    def add_reduced_group(self, group: _FunctionalGroup):
        if group.attach in self.taken:
            return
        fw = self.framework
        kind = "formate" if group.kind == "carboxylate" else "hydroxylate"
        distance = CH_CAP_DISTANCE if kind == "formate" else OH_CAP_DISTANCE
        key = self._group((kind, group.attach), kind, GROUP_CHARGES[kind])
        for member in group.members:
            self.add_atom(member, key)
        self.add_cap("H", _cap_position(fw.positions[group.attach], fw.positions[group.anchor], distance),
                     fw.atoms.atoms[group.anchor].origin, key)

    def add_linker(self, linker: int, groups) -> object:
        charge = -len(groups)
        key = self._group(("linker", linker), "linker", charge)
        return key

    def add_chloride(self, metal: int, distance: float):
        fw = self.framework
        centre = fw.positions[metal]
        directions = []
        for element, position, roles, _, _ in self.entries:
            if ROLE_METAL in roles:
                continue
            delta = np.array(position) - centre
            length = np.linalg.norm(delta)
            if 0 < length <= self.cfg.bond_scale * (_radius(element) + _radius(fw.elements[metal])):
                directions.append(delta / length)
        if directions:
            away = -np.mean(directions, axis=0)
        else:
            others = [np.array(p) for el, p, r, _, _ in self.entries if ROLE_METAL in r]
            away = centre - np.mean(others, axis=0) if others else np.zeros(3)
        if np.linalg.norm(away) < 1e-8:
            away = np.array([0.0, 0.0, 1.0])
        away = away / np.linalg.norm(away)
        origin = fw.atoms.atoms[metal].origin
        key = self._group(("chloride", metal), "chloride", GROUP_CHARGES["chloride"])
        self.add_cap("Cl", centre + distance * away, OriginTag(f"{origin.label}:Cl", origin.image), key)

    def build(self, name: str) -> Cluster:
        order = sorted(range(len(self.entries)), key=lambda k: (ROLE_CAP in self.entries[k][2], self.entries[k][3]))
        group_ids: dict = {}
        atoms = []
        for k in order:
            element, position, roles, origin, key = self.entries[k]
            if key is not None and key not in group_ids:
                group_ids[key] = len(group_ids)
            atoms.append(ClusterAtom(element, position, roles, origin, group_ids.get(key, -1)))
        groups = tuple(self.groups[key] for key in sorted(group_ids, key=group_ids.get))

        warnings = []
        net_charge = sum(g.charge for g in groups)
        if self.cfg.charge_override is not None:
            net_charge = int(self.cfg.charge_override)
        metal_counts: dict[str, int] = {}
        for atom in atoms:
            if ROLE_METAL in atom.roles:
                metal_counts[atom.element] = metal_counts.get(atom.element, 0) + 1
        try:
            n_unpaired = sum(spin_assignment(element, count, self.cfg.spins)
                             for element, count in sorted(metal_counts.items()))
        except ConfigError as exc:
            raise CarveError(str(exc)) from exc
        cluster = Cluster(tuple(atoms), net_charge, n_unpaired, groups)
        if (cluster.n_electrons - n_unpaired) % 2:
            message = (
                f"{name} cluster: {cluster.n_electrons} electrons with {n_unpaired} unpaired "
                "have inconsistent parity; set a charge override"
            )
            logging.warning(message)
            warnings.append(message)
        logging.info("%s cluster: %d atoms, charge %d, %d unpaired", name, len(atoms), net_charge, n_unpaired)
        return Cluster(cluster.atoms, net_charge, n_unpaired, groups, tuple(warnings))


def _cap_position(kept, replaced, distance: float) -> np.ndarray:
    bond = np.asarray(replaced, dtype=float) - np.asarray(kept, dtype=float)
    return np.asarray(kept, dtype=float) + distance * bond / np.linalg.norm(bond)


def _check_sphere_inside(atoms: AtomCollection, centre, radius: float):
    if atoms.cell is None:
        logging.warning("supercell matrix unknown; skipping carve-sphere boundary check")
        return
    cell = np.asarray(atoms.cell, dtype=float)
    frac = np.asarray(centre) @ np.linalg.inv(cell)
    volume = abs(np.linalg.det(cell))
    for i in range(3):
        spacing = volume / np.linalg.norm(np.cross(cell[(i + 1) % 3], cell[(i + 2) % 3]))
        margin = min(frac[i], 1.0 - frac[i]) * spacing
        if margin < radius:
            raise CarveError(
                f"carve sphere of radius {radius} Å crosses the supercell boundary along axis {i} "
                f"(margin {margin:.2f} Å); build the supercell with larger reps"
            )


def carve_large(supercell: AtomCollection, center_metal: OriginTag, cfg: CarveConfig,
                framework: _Framework | None = None) -> Cluster:
    fw = framework or _Framework(supercell, cfg.bond_scale)
    centre_index = fw.metal_index(center_metal)
    centre = fw.positions[centre_index]
    _check_sphere_inside(supercell, centre, cfg.radius)

    inside = np.linalg.norm(fw.positions - centre, axis=1) <= cfg.radius
    metals_in = {int(i) for i in np.flatnonzero(fw.metal_mask & inside)}
    builder = _ClusterBuilder(fw, cfg)
    for metal in sorted(metals_in):
        builder.add_metal(metal)

    whole, reduced = 0, 0
    for linker, members in enumerate(fw.linkers):
        judged = members
        if cfg.linker_heavy_atom_rule:
            judged = [i for i in members if fw.elements[i] != "H"] or members
        if all(inside[i] for i in judged):
            key = builder.add_linker(linker, fw.groups_of_linker[linker])
            for index in members:
                builder.add_atom(index, key)
            whole += 1
            continue
        for group in fw.groups_of_linker[linker]:
            if group.metals & metals_in:
                builder.add_reduced_group(group)
                reduced += 1
    logging.info("carve_large: %d metals, %d whole linkers, %d reduced groups", len(metals_in), whole, reduced)
    return builder.build("large")


def carve_small(supercell: AtomCollection, co2_site, cfg: CarveConfig,
                framework: _Framework | None = None) -> Cluster:
    fw = framework or _Framework(supercell, cfg.bond_scale)
    metals = fw.nearest_metals(co2_site, cfg.n_small_metals)
    builder = _ClusterBuilder(fw, cfg)
    for metal in metals:
        builder.add_metal(metal)
    for group in fw.groups:
        if group.metals & set(metals):
            builder.add_reduced_group(group)
    return builder.build("small")


def carve_medium(supercell: AtomCollection, co2_site, cfg: CarveConfig,
                 framework: _Framework | None = None) -> Cluster:
    fw = framework or _Framework(supercell, cfg.bond_scale)
    metals = fw.nearest_metals(co2_site, cfg.n_medium_metals)
    central = set(metals[: cfg.n_small_metals])
    included = set(metals)

    builder = _ClusterBuilder(fw, cfg)
    for metal in metals:
        builder.add_metal(metal, (ROLE_MOBILE,) if metal in central else ())

    for linker, members in enumerate(fw.linkers):
        groups = fw.groups_of_linker[linker]
        touching = [g for g in groups if g.metals & included]
        if not touching:
            continue
        if not any(g.metals & central for g in groups):
            for group in touching:
                builder.add_reduced_group(group)
            continue
        # ring kept: drop groups without an included metal and cap the ring atom
        dropped = [g for g in groups if not g.metals & included]
        key = builder.add_linker(linker, touching)
        skip = {m for g in dropped for m in g.members}
        for index in members:
            if index not in skip:
                builder.add_atom(index, key)
        for group in dropped:
            ring = group.anchor
            builder.add_cap("H", _cap_position(fw.positions[ring], fw.positions[group.attach], CH_CAP_DISTANCE),
                            fw.atoms.atoms[group.attach].origin, key)

    seen = set()
    for origin in cfg.chloride_completion:
        tag = origin if isinstance(origin, OriginTag) else OriginTag.from_string(str(origin))
        try:
            index = fw.atoms.index_of(tag)
        except KeyError:
            index = -1
        if index not in included:
            raise CarveError(f"chloride completion names metal {tag}, which is not in the medium cluster")
        if index in seen:
            raise CarveError(f"chloride completion lists metal {tag} twice")
        seen.add(index)
        builder.add_chloride(index, cfg.chloride_distance)

    cluster = builder.build("medium")
    atoms = tuple(
        a._replace(roles=a.roles | {ROLE_MOBILE})
        if a.element == "H" and ROLE_CAP not in a.roles else a
        for a in cluster.atoms
    )
    return Cluster(atoms, cluster.net_charge, cluster.n_unpaired, cluster.groups, cluster.warnings)


def select_close_atoms(cluster: Cluster, binding_metal: int, bond_scale: float = 1.2) -> frozenset:
    """Atoms within two bonds of the binding metal, plus every atom tagged co2."""
    if not 0 <= binding_metal < len(cluster):
        raise CarveError(f"binding metal index {binding_metal} out of range for {len(cluster)} atoms")
    graph = detect_bonds(cluster.elements, cluster.positions, bond_scale)
    hops = shortest_path(graph.adjacency(), unweighted=True, directed=False, indices=binding_metal)
    close = {int(i) for i in np.flatnonzero(hops <= 2)}
    close.update(cluster.indices_with(ROLE_CO2))
    return frozenset(close)


def mark_close(cluster: Cluster, binding_metal: int) -> Cluster:
    atoms = list(cluster.atoms)
    for i in select_close_atoms(cluster, binding_metal):
        atoms[i] = atoms[i]._replace(roles=atoms[i].roles | {ROLE_CLOSE})
    return Cluster(tuple(atoms), cluster.net_charge, cluster.n_unpaired, cluster.groups, cluster.warnings)


def propagate_coordinates(relaxed_medium: Cluster, target: Cluster, strict: bool = True) -> Cluster:
    """Copy relaxed positions of mobile, non-cap atoms onto the matching target atoms."""
    lookup = {a.origin: i for i, a in enumerate(target.atoms) if ROLE_CAP not in a.roles}
    atoms = list(target.atoms)
    missing = []
    moved = 0
    if not any(ROLE_MOBILE in a.roles and ROLE_CAP not in a.roles for a in relaxed_medium.atoms):
        raise CarveError("relaxed cluster has no mobile atoms; read it together with its provenance sidecar")
    for atom in relaxed_medium.atoms:
        if ROLE_MOBILE not in atom.roles or ROLE_CAP in atom.roles:
            continue
        index = lookup.get(atom.origin)
        if index is None:
            missing.append(str(atom.origin))
            continue
        atoms[index] = atoms[index]._replace(position=tuple(atom.position))
        moved += 1
    warnings = list(target.warnings)
    if missing:
        message = f"mobile atoms without a match in target: {', '.join(missing)}"
        if strict:
            raise CarveError(message)
        logging.warning(message)
        warnings.append(message)
    logging.info("propagate_coordinates: moved %d atoms, %d unmatched", moved, len(missing))
    return Cluster(tuple(atoms), target.net_charge, target.n_unpaired, target.groups, tuple(warnings))


def attach_co2(cluster: Cluster, pose: AtomCollection) -> Cluster:
    """Add guest atoms tagged co2; charge and spin are unchanged."""
    guests = tuple(
        ClusterAtom(a.element, tuple(a.position), frozenset({ROLE_CO2}), OriginTag(f"co2:{a.origin.label}", a.origin.image))
        for a in pose
    )
    return Cluster(cluster.atoms + guests, cluster.net_charge, cluster.n_unpaired, cluster.groups, cluster.warnings)


# ---------------------------------------------------------------- serialization

SIDECAR_COLUMNS = ("index", "label", "image", "roles", "group", "kind", "charge")


def write_cluster(cluster: Cluster, comment: str = "") -> tuple[str, str]:
    """Return (xyz text, sidecar TSV text)."""
    xyz = write_xyz(cluster.as_collection(), comment)
    buffer = io.StringIO()
    buffer.write(f"# net_charge={cluster.net_charge} n_unpaired={cluster.n_unpaired}\n")
    writer = csv.writer(buffer, delimiter="\t", lineterminator="\n")
    writer.writerow(SIDECAR_COLUMNS)
    for i, atom in enumerate(cluster.atoms):
        group = cluster.groups[atom.group] if atom.group >= 0 else ChargeGroup("", 0)
        writer.writerow((
            i,
            atom.origin.label,
            ",".join(str(v) for v in atom.origin.image),
            ",".join(role for role in ROLES if role in atom.roles),
            atom.group,
            group.kind,
            group.charge,
        ))
    return xyz, buffer.getvalue()


def read_cluster(xyz_text: str, sidecar_text: str) -> Cluster:
    collection = parse_xyz(xyz_text)
    lines = sidecar_text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise CarveError("cluster sidecar lacks the '# net_charge=... n_unpaired=...' header")
    header = dict(part.split("=", 1) for part in lines[0][1:].split())
    rows = list(csv.DictReader(lines[1:], delimiter="\t"))
    if len(rows) != len(collection):
        raise CarveError(f"sidecar has {len(rows)} rows for {len(collection)} atoms")
    groups: dict[int, ChargeGroup] = {}
    atoms = []
    for atom, row in zip(collection, rows):
        image = tuple(int(v) for v in row["image"].split(","))
        roles = frozenset(r for r in row["roles"].split(",") if r)
        group = int(row["group"])
        if group >= 0:
            groups[group] = ChargeGroup(row["kind"], int(row["charge"]))
        atoms.append(ClusterAtom(atom.element, atom.position, roles, OriginTag(row["label"], image), group))
    ordered = tuple(groups[k] for k in sorted(groups))
    return Cluster(tuple(atoms), int(header["net_charge"]), int(header["n_unpaired"]), ordered)


class ClusterProcessor:
    """Carves the three cluster tiers around one open metal site."""

    def __init__(self, cfg: CarveConfig):
        self.cfg = cfg
        self._framework = None

    def framework(self, supercell: AtomCollection) -> _Framework:
        if self._framework is None or self._framework.atoms is not supercell:
            print("🔗 Detecting bonds and linkers...", file=sys.stderr)
            self._framework = _Framework(supercell, self.cfg.bond_scale)
        return self._framework

    def process(self, supercell: AtomCollection, co2_site, center_metal: OriginTag | None = None):
        fw = self.framework(supercell)
        if center_metal is None:
            center_metal = supercell.atoms[fw.nearest_metals(co2_site, 1)[0]].origin
        print(f"Carving clusters around {center_metal}...", file=sys.stderr)
        small = carve_small(supercell, co2_site, self.cfg, fw)
        medium = carve_medium(supercell, co2_site, self.cfg, fw)
        large = carve_large(supercell, center_metal, self.cfg, fw)
        print(f"Clusters: small {len(small)}, medium {len(medium)}, large {len(large)} atoms", file=sys.stderr)
        return {"small": small, "medium": medium, "large": large}
