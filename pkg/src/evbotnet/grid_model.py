"""Static network model: MATPOWER-style case parsing and admittance assembly.

Canonical bus ids are dense and 0-based in file order; the id written in the
case file is kept as ``external_id`` so reports can print both.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

__all__ = [
    "BusKind",
    "BranchStatus",
    "Bus",
    "Branch",
    "Generator",
    "Network",
    "CaseSyntaxError",
    "CaseSemanticError",
    "parse_case",
    "serialize_case",
    "load_case",
    "bundled_case_path",
    "build_admittance",
    "branch_admittances",
    "scale_loads",
    "load_buses",
]


class BusKind(enum.IntEnum):
    # values follow the MATPOWER bus-type column
    PQ = 1
    PV = 2
    Slack = 3


class BranchStatus(enum.IntEnum):
    Deactivated = 0
    InService = 1


class CaseSyntaxError(ValueError):
    """Malformed case text. Carries 1-based ``line`` and ``column``."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class CaseSemanticError(ValueError):
    """Well-formed text describing an invalid network."""


@dataclass(frozen=True)
class Bus:
    id: int
    external_id: int
    kind: BusKind
    p_load: float = 0.0  # MW
    q_load: float = 0.0  # MVAr
    g_shunt: float = 0.0  # MW at 1 pu
    b_shunt: float = 0.0  # MVAr at 1 pu
    base_kv: float = 1.0
    v_setpoint: float = 1.0
    v_min: float = 0.9
    v_max: float = 1.1
    v_angle: float = 0.0  # degrees, only used for warm starts / round trips

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise CaseSemanticError(f"bus {self.external_id}: v_min must be < v_max")
        if self.base_kv <= 0:
            raise CaseSemanticError(f"bus {self.external_id}: base_kv must be > 0")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    rate_mva: float = 0.0  # 0 means unlimited
    tap: float = 1.0
    shift: float = 0.0  # degrees
    status: BranchStatus = BranchStatus.InService

    def __post_init__(self):
        if self.r == 0 and self.x == 0:
            raise CaseSemanticError(
                f"branch {self.from_bus}-{self.to_bus} has zero impedance"
            )
        if self.rate_mva < 0:
            raise CaseSemanticError(f"branch {self.from_bus}-{self.to_bus}: rate_mva < 0")
        if self.tap <= 0:
            raise CaseSemanticError(f"branch {self.from_bus}-{self.to_bus}: tap <= 0")

    @property
    def in_service(self) -> bool:
        return self.status == BranchStatus.InService


@dataclass(frozen=True)
class Generator:
    bus: int
    p_out: float = 0.0  # MW
    q_out: float = 0.0  # MVAr
    q_max: float = 9999.0
    q_min: float = -9999.0
    v_setpoint: float = 1.0
    p_max: float = 9999.0
    p_min: float = 0.0
    in_service: bool = True

    def __post_init__(self):
        if self.p_min > self.p_max:
            raise CaseSemanticError(f"generator at bus {self.bus}: p_min > p_max")
        if self.q_min > self.q_max:
            raise CaseSemanticError(f"generator at bus {self.bus}: q_min > q_max")


@dataclass(frozen=True)
class Network:
    """Immutable grid model.

    ``buses[i].id == i`` always holds. Use :func:`dataclasses.replace` or the
    ``with_*`` helpers to derive modified copies.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...] = ()
    name: str = field(default="", compare=False)
    _ext_index: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        n = len(self.buses)
        for i, bus in enumerate(self.buses):
            if bus.id != i:
                raise CaseSemanticError(f"bus at position {i} has canonical id {bus.id}")
        ext = {}
        for bus in self.buses:
            if bus.external_id in ext:
                raise CaseSemanticError(f"duplicate bus id {bus.external_id}")
            ext[bus.external_id] = bus.id
        object.__setattr__(self, "_ext_index", ext)
        for k, br in enumerate(self.branches):
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise CaseSemanticError(
                    f"branch {k + 1} references a bus that does not exist"
                )
        for k, g in enumerate(self.generators):
            if not 0 <= g.bus < n:
                raise CaseSemanticError(f"generator {k + 1} references a bus that does not exist")
        if self.base_mva <= 0:
            raise CaseSemanticError("baseMVA must be positive")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    def canonical(self, external_id: int) -> int:
        try:
            return self._ext_index[external_id]
        except KeyError:
            raise KeyError(f"unknown bus id {external_id}") from None

    def external(self, canonical_id: int) -> int:
        return self.buses[canonical_id].external_id

    @property
    def p_load(self) -> np.ndarray:
        return np.array([b.p_load for b in self.buses])

    @property
    def q_load(self) -> np.ndarray:
        return np.array([b.q_load for b in self.buses])

    def total_load(self) -> float:
        return float(sum(b.p_load for b in self.buses))

    def slack_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.kind == BusKind.Slack]

    def with_branch_status(self, indices: Iterable[int], status: BranchStatus) -> "Network":
        indices = set(indices)
        branches = tuple(
            replace(br, status=status) if k in indices else br
            for k, br in enumerate(self.branches)
        )
        return replace(self, branches=branches)

    def without_branches(self, indices: Iterable[int]) -> "Network":
        indices = set(indices)
        return replace(
            self, branches=tuple(br for k, br in enumerate(self.branches) if k not in indices)
        )

    def with_loads(self, p_mw: Sequence[float], q_mvar: Sequence[float]) -> "Network":
        if len(p_mw) != self.n_bus or len(q_mvar) != self.n_bus:
            raise ValueError("load vectors must have one entry per bus")
        buses = tuple(
            replace(b, p_load=float(p), q_load=float(q))
            for b, p, q in zip(self.buses, p_mw, q_mvar)
        )
        return replace(self, buses=buses)

    def describe_branch(self, k: int) -> str:
        br = self.branches[k]
        return (
            f"branch {k} ({br.from_bus}-{br.to_bus}; file row {k + 1}, "
            f"buses {self.external(br.from_bus)}-{self.external(br.to_bus)})"
        )


# --------------------------------------------------------------------------
# parsing

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_BUS_COLS, _BRANCH_COLS, _GEN_MIN_COLS = 13, 13, 10


def _strip_comment(line: str) -> str:
    # '%' inside a quoted string does not occur in the supported subset
    i = line.find("%")
    return line if i < 0 else line[:i]


def _parse_row(text: str, lineno: int, col0: int) -> list[float]:
    values = []
    for m in re.finditer(r"\S+", text):
        tok = m.group(0).rstrip(",")
        if not tok:
            continue
        try:
            values.append(float(tok))
        except ValueError:
            raise CaseSyntaxError(f"expected a number, got {tok!r}", lineno, col0 + m.start() + 1)
    return values


def _read_matrix(lines: list[str], start: int, first: str, col0: int):
    """Read a ``[ ... ];`` block beginning on ``lines[start]``.

    ``first`` is the text after ``=`` on the opening line. Returns the rows and
    the index of the line holding the closing bracket.
    """
    lineno = start + 1
    body = first.lstrip()
    if not body.startswith("["):
        raise CaseSyntaxError("expected '['", lineno, col0 + 1)
    col = col0 + (len(first) - len(body)) + 1
    body = body[1:]
    rows: list[list[float]] = []
    current: list[float] = []
    i = start
    while True:
        text = _strip_comment(body)
        close = text.find("]")
        segment = text if close < 0 else text[:close]
        pieces = segment.split(";")
        offset = col
        for j, piece in enumerate(pieces):
            current.extend(_parse_row(piece, i + 1, offset))
            offset += len(piece) + 1
            if j < len(pieces) - 1 and current:
                rows.append(current)
                current = []
        if close >= 0:
            if current:
                rows.append(current)
            return rows, i
        if current:
            # newline also terminates a row
            rows.append(current)
            current = []
        i += 1
        if i >= len(lines):
            raise CaseSyntaxError("unterminated matrix, missing ']'", start + 1, col0 + 1)
        body, col = lines[i], 0


def _check_width(rows, name, minimum, exact=None):
    for r, row in enumerate(rows):
        if len(row) < minimum or (exact is not None and len(row) != exact):
            want = exact if exact is not None else f">= {minimum}"
            raise CaseSemanticError(
                f"mpc.{name} row {r + 1} has {len(row)} columns, expected {want}"
            )


def parse_case(text: str, name: str = "") -> Network:
    """Parse MATPOWER case text into a validated :class:`Network`.

    Only ``mpc.baseMVA``, ``mpc.bus``, ``mpc.gen`` and ``mpc.branch`` are
    read; other assignments are skipped with a warning. A ``ratio`` of 0 in
    the branch table means "no transformer" and is stored as ``tap = 1``.

    Raises
    ------
    CaseSyntaxError
        Unparseable number, missing bracket or ``=``.
    CaseSemanticError
        Missing tables, dangling references, duplicate ids, no slack bus.
    """
    lines = text.splitlines()
    base_mva = None
    tables: dict[str, list[list[float]]] = {}
    i = 0
    while i < len(lines):
        raw = lines[i]
        code = _strip_comment(raw).strip()
        if not code or code.startswith("function"):
            i += 1
            continue
        m = _ASSIGN.match(_strip_comment(raw))
        if not m:
            raise CaseSyntaxError(f"unrecognised statement {code!r}", i + 1, raw.find(code) + 1)
        key, rhs = m.group(1), m.group(2)
        if key == "baseMVA":
            value = rhs.strip().rstrip(";").strip()
            try:
                base_mva = float(value)
            except ValueError:
                raise CaseSyntaxError(
                    f"baseMVA must be numeric, got {value!r}", i + 1, m.start(2) + 1
                )
            i += 1
        elif key in ("bus", "gen", "branch"):
            rows, end = _read_matrix(lines, i, rhs, m.start(2))
            tables[key] = rows
            i = end + 1
        else:
            if rhs.lstrip().startswith("["):
                _, end = _skip_matrix(lines, i)
                i = end + 1
            else:
                i += 1
            if key != "version":
                logger.warning("skipping unsupported field mpc.%s", key)

    if base_mva is None:
        raise CaseSemanticError("missing mpc.baseMVA")
    for key in ("bus", "branch"):
        if key not in tables:
            raise CaseSemanticError(f"missing mpc.{key}")
    bus_rows = tables["bus"]
    gen_rows = tables.get("gen", [])
    br_rows = tables["branch"]
    _check_width(bus_rows, "bus", _BUS_COLS, exact=_BUS_COLS)
    _check_width(gen_rows, "gen", _GEN_MIN_COLS)
    _check_width(br_rows, "branch", _BRANCH_COLS)

    index: dict[int, int] = {}
    for r, row in enumerate(bus_rows):
        ext = int(row[0])
        if ext in index:
            raise CaseSemanticError(f"mpc.bus row {r + 1}: duplicate bus id {ext}")
        index[ext] = r

    def lookup(ext, what):
        try:
            return index[int(ext)]
        except KeyError:
            raise CaseSemanticError(f"{what} references unknown bus {int(ext)}") from None

    buses = []
    for r, row in enumerate(bus_rows):
        kind = int(row[1])
        if kind == 4:
            raise CaseSemanticError(f"mpc.bus row {r + 1}: isolated bus type 4 unsupported")
        try:
            kind = BusKind(kind)
        except ValueError:
            raise CaseSemanticError(f"mpc.bus row {r + 1}: bad bus type {kind}") from None
        buses.append(
            Bus(
                id=r,
                external_id=int(row[0]),
                kind=kind,
                p_load=row[2],
                q_load=row[3],
                g_shunt=row[4],
                b_shunt=row[5],
                v_setpoint=row[7],
                v_angle=row[8],
                base_kv=row[9],
                v_max=row[11],
                v_min=row[12],
            )
        )
    if not any(b.kind == BusKind.Slack for b in buses):
        raise CaseSemanticError("no slack bus (type 3) in mpc.bus")

    gens = []
    for r, row in enumerate(gen_rows):
        gens.append(
            Generator(
                bus=lookup(row[0], f"mpc.gen row {r + 1}"),
                p_out=row[1],
                q_out=row[2],
                q_max=row[3],
                q_min=row[4],
                v_setpoint=row[5],
                in_service=row[7] > 0,
                p_max=row[8],
                p_min=row[9],
            )
        )

    branches = []
    for r, row in enumerate(br_rows):
        branches.append(
            Branch(
                from_bus=lookup(row[0], f"mpc.branch row {r + 1}"),
                to_bus=lookup(row[1], f"mpc.branch row {r + 1}"),
                r=row[2],
                x=row[3],
                b_charging=row[4],
                rate_mva=row[5],
                tap=row[8] if row[8] != 0 else 1.0,
                shift=row[9],
                status=BranchStatus.InService if row[10] > 0 else BranchStatus.Deactivated,
            )
        )
    return Network(base_mva=base_mva, buses=buses, branches=branches, generators=gens, name=name)


def _skip_matrix(lines, start):
    depth = 0
    for i in range(start, len(lines)):
        text = _strip_comment(lines[i])
        depth += text.count("[") - text.count("]")
        if depth <= 0 and "]" in text:
            return None, i
    raise CaseSyntaxError("unterminated matrix, missing ']'", start + 1, 1)


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_case(net: Network) -> str:
    """Write ``net`` back out in the supported case grammar.

    Floats are written with ``repr`` so that parsing the output reproduces the
    same Network exactly.
    """
    out = [f"function mpc = {net.name or 'case'}", "mpc.version = '2';",
           f"mpc.baseMVA = {_fmt(net.base_mva)};", "",
           "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
           "mpc.bus = ["]
    for b in net.buses:
        vals = [b.external_id, int(b.kind), _fmt(b.p_load), _fmt(b.q_load), _fmt(b.g_shunt),
                _fmt(b.b_shunt), 1, _fmt(b.v_setpoint), _fmt(b.v_angle), _fmt(b.base_kv), 1,
                _fmt(b.v_max), _fmt(b.v_min)]
        out.append("\t" + "\t".join(map(str, vals)) + ";")
    out += ["];", "", "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin", "mpc.gen = ["]
    for g in net.generators:
        vals = [net.external(g.bus), _fmt(g.p_out), _fmt(g.q_out), _fmt(g.q_max), _fmt(g.q_min),
                _fmt(g.v_setpoint), _fmt(net.base_mva), int(g.in_service), _fmt(g.p_max),
                _fmt(g.p_min)]
        out.append("\t" + "\t".join(map(str, vals)) + ";")
    out += ["];", "",
            "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax",
            "mpc.branch = ["]
    for br in net.branches:
        vals = [net.external(br.from_bus), net.external(br.to_bus), _fmt(br.r), _fmt(br.x),
                _fmt(br.b_charging), _fmt(br.rate_mva), _fmt(br.rate_mva), _fmt(br.rate_mva),
                _fmt(br.tap), _fmt(br.shift), int(br.status), -360, 360]
        out.append("\t" + "\t".join(map(str, vals)) + ";")
    out += ["];", ""]
    return "\n".join(out)


def bundled_case_path(name: str):
    """Path-like handle to a fixture shipped in ``evbotnet/data``."""
    if not name.endswith(".m"):
        name += ".m"
    return resources.files("evbotnet") / "data" / name


def load_case(name_or_path) -> Network:
    """Load ``"case33bw"``/``"case39"`` from the bundled data, or a file path."""
    s = str(name_or_path)
    if s in ("case33bw", "case39", "case33bw.m", "case39.m"):
        ref = bundled_case_path(s)
        stem = s.removesuffix(".m")
    else:
        ref = s
        stem = s.rsplit("/", 1)[-1].removesuffix(".m")
    with open(ref, encoding="utf-8") if isinstance(ref, str) else ref.open(encoding="utf-8") as fh:
        return parse_case(fh.read(), name=stem)


# --------------------------------------------------------------------------
# admittance


def branch_admittances(net: Network):
    """Per-branch pi-model terms ``(Yff, Yft, Ytf, Ytt)`` in pu.

    Deactivated branches get all-zero terms.
    """
    nl = net.n_branch
    on = np.array([br.in_service for br in net.branches], dtype=float)
    r = np.array([br.r for br in net.branches])
    x = np.array([br.x for br in net.branches])
    b = np.array([br.b_charging for br in net.branches])
    tap = np.array([br.tap for br in net.branches])
    shift = np.deg2rad([br.shift for br in net.branches]) if nl else np.zeros(0)
    ys = on / (r + 1j * x) if nl else np.zeros(0, complex)
    bc = on * b
    t = tap * np.exp(1j * shift)
    ytt = ys + 1j * bc / 2
    yff = ytt / (t * np.conj(t))
    yft = -ys / np.conj(t)
    ytf = -ys / t
    return yff, yft, ytf, ytt


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Sparse nodal admittance with its branch-side companions.

    ``yf @ V`` and ``yt @ V`` give the from/to end currents per branch.
    """

    n: int
    entries: sp.csr_matrix
    yf: sp.csr_matrix
    yt: sp.csr_matrix

    def toarray(self) -> np.ndarray:
        return self.entries.toarray()


def build_admittance(net: Network) -> AdmittanceMatrix:
    """Assemble Ybus from pi-model branches plus bus shunts."""
    n, nl = net.n_bus, net.n_branch
    yff, yft, ytf, ytt = branch_admittances(net)
    f = np.array([br.from_bus for br in net.branches], dtype=int)
    t = np.array([br.to_bus for br in net.branches], dtype=int)
    ysh = np.array([b.g_shunt + 1j * b.b_shunt for b in net.buses]) / net.base_mva

    rows = np.arange(nl)
    yf = sp.csr_matrix(
        (np.r_[yff, yft], (np.r_[rows, rows], np.r_[f, t])), shape=(nl, n)
    )
    yt = sp.csr_matrix(
        (np.r_[ytf, ytt], (np.r_[rows, rows], np.r_[f, t])), shape=(nl, n)
    )
    cf = sp.csr_matrix((np.ones(nl), (rows, f)), shape=(nl, n))
    ct = sp.csr_matrix((np.ones(nl), (rows, t)), shape=(nl, n))
    ybus = (cf.T @ yf + ct.T @ yt + sp.diags(ysh, 0, shape=(n, n))).tocsr()
    ybus.sum_duplicates()
    return AdmittanceMatrix(n=n, entries=ybus, yf=yf, yt=yt)


# --------------------------------------------------------------------------
# load edits


def load_buses(net: Network) -> list[int]:
    """PQ buses carrying nonzero active load (the 39-bus case has 19)."""
    return [b.id for b in net.buses if b.kind == BusKind.PQ and b.p_load != 0]


def scale_loads(
    net: Network,
    factor: float,
    targets: Iterable[int] | None = None,
    *,
    scale_q: bool = True,
) -> Network:
    """Return a copy of ``net`` with load on ``targets`` multiplied by ``factor``.

    ``targets`` are canonical bus ids; ``None`` means every bus. Reactive load
    follows active load (constant power factor) unless ``scale_q=False``.
    """
    if factor < 0:
        raise ValueError("factor must be non-negative")
    target_set = set(range(net.n_bus)) if targets is None else set(targets)
    unknown = [t for t in target_set if not (isinstance(t, (int, np.integer)) and 0 <= t < net.n_bus)]
    if unknown:
        raise KeyError(f"unknown target bus id(s): {sorted(unknown, key=str)}")
    buses = tuple(
        replace(b, p_load=b.p_load * factor, q_load=b.q_load * factor if scale_q else b.q_load)
        if b.id in target_set
        else b
        for b in net.buses
    )
    return replace(net, buses=buses)


def external_map(net: Network) -> Mapping[int, int]:
    return {b.id: b.external_id for b in net.buses}
