"""Meta-model for crowd-augmented stream topologies.

Defines the data items that flow through a run, the port/role taxonomy of
processing elements (automatic APEs and crowd-backed CSPEs), the topology
graph with its data and control flows, and the single-step execution
contract (`step_pe`) that both the virtual-time and wall-clock engines use.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import yaml

from .errors import BehaviorFailure, MalformedPorts, TopologyInvalid

log = logging.getLogger("cspflow.core")

CONFIG_VERSION = 1

# Lineage sets are bounded so latency accounting cannot grow without bound;
# past the cap the set collapses to a sentinel and the item can no longer be
# attributed to individual inputs.
LINEAGE_CAP = 64
LINEAGE_OVERFLOW = "__many__"


def merge_lineage(*parents: frozenset[str]) -> frozenset[str]:
    merged: frozenset[str] = frozenset().union(*parents)
    if len(merged) > LINEAGE_CAP:
        return frozenset({LINEAGE_OVERFLOW})
    return merged


@dataclass
class DataItem:
    """One stream element. `lineage` is the set of source item ids this item
    derives from; a source-emitted item carries its own id."""

    item_id: str
    payload: Any
    ingest_ts: float
    lineage: frozenset[str]
    attributes: dict[str, Any] = field(default_factory=dict)

    def derive(self, item_id: str, payload: Any = None,
               attributes: Optional[dict[str, Any]] = None) -> "DataItem":
        return DataItem(
            item_id=item_id,
            payload=self.payload if payload is None else payload,
            ingest_ts=self.ingest_ts,
            lineage=self.lineage,
            attributes=dict(self.attributes) if attributes is None else attributes,
        )


class SignalKind(str, Enum):
    PARAMETER_UPDATE = "parameter-update"
    MODEL_UPDATE = "model-update"
    TASK_DIRECTIVE = "task-directive"


@dataclass
class ControlSignal:
    signal_id: str
    target_pe: str
    kind: SignalKind
    body: Any


class PortDirection(str, Enum):
    INPUT = "input"
    CONFIGURATION = "configuration"
    OUTPUT = "output"


class PEKind(str, Enum):
    APE = "ape"
    CSPE = "cspe"


class Role(str, Enum):
    SOURCE = "source"
    PROCESSOR = "processor"
    CONSUMER = "consumer"


@dataclass
class PortSpec:
    port_id: str
    direction: PortDirection
    value_kind: str = "any"


@dataclass
class ProcessingElementSpec:
    pe_id: str
    kind: PEKind
    ports: list[PortSpec] = field(default_factory=list)
    behavior: str = "identity"
    params: dict[str, Any] = field(default_factory=dict)
    declared_role: Optional[Role] = None

    @property
    def input_ports(self) -> list[PortSpec]:
        return [p for p in self.ports if p.direction is PortDirection.INPUT]

    @property
    def configuration_ports(self) -> list[PortSpec]:
        return [p for p in self.ports if p.direction is PortDirection.CONFIGURATION]

    @property
    def output_port(self) -> Optional[PortSpec]:
        outs = [p for p in self.ports if p.direction is PortDirection.OUTPUT]
        if len(outs) > 1:
            raise MalformedPorts(f"{self.pe_id}: a PE has at most one output port")
        return outs[0] if outs else None


def classify_pe(pe: ProcessingElementSpec) -> Role:
    """Derive a PE's role from its ports: no inputs = source, no output =
    consumer, both = processor."""
    out = pe.output_port  # raises MalformedPorts on duplicates
    has_in = bool(pe.input_ports)
    if not has_in and out is not None:
        return Role.SOURCE
    if has_in and out is None:
        return Role.CONSUMER
    if has_in and out is not None:
        return Role.PROCESSOR
    raise MalformedPorts(f"{pe.pe_id}: PE has neither input nor output ports")


@dataclass
class DataFlow:
    source_pe: str
    target_pe: str
    channel_id: str
    source_port: str = "out"
    target_port: str = ""

    def __post_init__(self):
        if not self.target_port:
            self.target_port = f"in:{self.channel_id}"


@dataclass
class ControlFlow:
    source_pe: str
    target_pe: str
    channel_id: str
    target_port: str = ""

    def __post_init__(self):
        if not self.target_port:
            self.target_port = f"cfg:{self.channel_id}"


@dataclass
class Violation:
    code: str
    message: str
    subject: str = ""


@dataclass
class ValidationReport:
    errors: list[Violation] = field(default_factory=list)
    warnings: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


@dataclass
class Topology:
    """Directed graph of PEs joined by data and control flows.

    `fragment=True` marks pattern-built partial graphs that are exempt from
    the source/consumer requirement until grafted into a host topology;
    `entry_pes`/`exit_pes` name where a fragment expects upstream data and
    where its output continues downstream.
    """

    name: str
    pes: dict[str, ProcessingElementSpec]
    channels: dict[str, Any]  # channel_id -> channels.ChannelSpec
    data_flows: list[DataFlow] = field(default_factory=list)
    control_flows: list[ControlFlow] = field(default_factory=list)
    fragment: bool = False
    entry_pes: list[str] = field(default_factory=list)
    exit_pes: list[str] = field(default_factory=list)

    def data_edges(self) -> list[tuple[str, str]]:
        return [(f.source_pe, f.target_pe) for f in self.data_flows]

    def subscribers_of(self, channel_id: str) -> list[str]:
        subs: list[str] = []
        for f in self.data_flows:
            if f.channel_id == channel_id and f.target_pe not in subs:
                subs.append(f.target_pe)
        for f in self.control_flows:
            if f.channel_id == channel_id and f.target_pe not in subs:
                subs.append(f.target_pe)
        return subs

    def channel_source(self, channel_id: str) -> Optional[str]:
        for f in self.data_flows:
            if f.channel_id == channel_id:
                return f.source_pe
        for f in self.control_flows:
            if f.channel_id == channel_id:
                return f.source_pe
        return None

    def roles(self) -> dict[str, Role]:
        return {pe_id: classify_pe(pe) for pe_id, pe in self.pes.items()}

    def sources(self) -> list[str]:
        return [p for p, r in self.roles().items() if r is Role.SOURCE]

    def consumers(self) -> list[str]:
        return [p for p, r in self.roles().items() if r is Role.CONSUMER]

    def cspe_ids(self) -> set[str]:
        return {p for p, pe in self.pes.items() if pe.kind is PEKind.CSPE}


def validate_topology(topology: Topology) -> ValidationReport:
    """Check every structural invariant; returns errors plus warnings (the
    only warning today is a data-flow cycle, which is legal but unusual)."""
    report = ValidationReport()
    err = report.errors.append

    for flow in list(topology.data_flows) + list(topology.control_flows):
        for pe_id in (flow.source_pe, flow.target_pe):
            if pe_id not in topology.pes:
                err(Violation("unresolved_reference",
                              f"flow references unknown PE {pe_id!r}", pe_id))
        if flow.channel_id not in topology.channels:
            err(Violation("unresolved_reference",
                          f"flow references unknown channel {flow.channel_id!r}",
                          flow.channel_id))
    if report.errors:
        return report

    roles: dict[str, Role] = {}
    for pe_id, pe in topology.pes.items():
        if topology.fragment and not pe.ports:
            continue  # unwired placeholder; ports appear when grafted
        try:
            roles[pe_id] = classify_pe(pe)
        except MalformedPorts as exc:
            err(Violation("malformed_ports", str(exc), pe_id))
            continue
        if pe.declared_role is not None and pe.declared_role is not roles[pe_id]:
            err(Violation(
                "role_port_mismatch",
                f"{pe_id}: declared role {pe.declared_role.value} but ports imply "
                f"{roles[pe_id].value}", pe_id))

    # flows must land on ports that exist and point the right way
    for flow in topology.data_flows:
        src = topology.pes[flow.source_pe]
        dst = topology.pes[flow.target_pe]
        if not any(p.port_id == flow.source_port and p.direction is PortDirection.OUTPUT
                   for p in src.ports):
            err(Violation("unresolved_reference",
                          f"{flow.source_pe} has no output port {flow.source_port!r}",
                          flow.source_pe))
        if not any(p.port_id == flow.target_port and p.direction is PortDirection.INPUT
                   for p in dst.ports):
            err(Violation("unresolved_reference",
                          f"{flow.target_pe} has no input port {flow.target_port!r}",
                          flow.target_pe))
    for flow in topology.control_flows:
        dst = topology.pes[flow.target_pe]
        if not any(p.port_id == flow.target_port and
                   p.direction is PortDirection.CONFIGURATION for p in dst.ports):
            err(Violation("unresolved_reference",
                          f"{flow.target_pe} has no configuration port "
                          f"{flow.target_port!r}", flow.target_pe))

    if not topology.fragment and not report.errors:
        if not any(r is Role.SOURCE for r in roles.values()) or \
           not any(r is Role.CONSUMER for r in roles.values()):
            err(Violation("no_source_or_consumer",
                          f"{topology.name}: needs at least one source and one "
                          f"consumer", topology.name))

    # weak connectivity over data + control edges
    if len(topology.pes) > 1:
        neighbours: dict[str, set[str]] = {p: set() for p in topology.pes}
        for a, b in topology.data_edges() + [
                (f.source_pe, f.target_pe) for f in topology.control_flows]:
            neighbours[a].add(b)
            neighbours[b].add(a)
        start = next(iter(topology.pes))
        seen = {start}
        frontier = deque([start])
        while frontier:
            for nxt in neighbours[frontier.popleft()]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        if seen != set(topology.pes):
            missing = sorted(set(topology.pes) - seen)
            err(Violation("disconnected_graph",
                          f"PEs unreachable from {start!r}: {missing}",
                          ",".join(missing)))

    # channel discipline
    for ch_id, ch in topology.channels.items():
        subs = topology.subscribers_of(ch_id)
        if not subs:
            # an unreferenced channel is tolerated; a referenced one with no
            # subscriber was already caught as unresolved
            continue
        modality = getattr(ch, "modality", None)
        flow_class = getattr(ch, "flow_class", None)
        is_control = any(f.channel_id == ch_id for f in topology.control_flows)
        is_data = any(f.channel_id == ch_id for f in topology.data_flows)
        if is_control and is_data:
            err(Violation("wrong_flow_class",
                          f"channel {ch_id!r} carries both data and control flows",
                          ch_id))
        if is_control:
            if getattr(flow_class, "value", flow_class) != "control":
                err(Violation("wrong_flow_class",
                              f"control flow uses data channel {ch_id!r}", ch_id))
            if getattr(modality, "value", modality) != "point_to_point":
                err(Violation("control_flow_not_point_to_point",
                              f"control channel {ch_id!r} must be point_to_point",
                              ch_id))
            if getattr(ch, "capacity", 0) > 1:
                err(Violation("control_flow_not_point_to_point",
                              f"control channel {ch_id!r} must have capacity <= 1",
                              ch_id))
        if is_data:
            if getattr(flow_class, "value", flow_class) != "data":
                err(Violation("wrong_flow_class",
                              f"data flow uses control channel {ch_id!r}", ch_id))
            if getattr(modality, "value", modality) == "point_to_point" and len(subs) > 1:
                err(Violation("malformed_channel",
                              f"point_to_point channel {ch_id!r} has {len(subs)} "
                              f"subscribers", ch_id))
        # one declared publisher per channel
        srcs = {f.source_pe for f in topology.data_flows if f.channel_id == ch_id}
        srcs |= {f.source_pe for f in topology.control_flows if f.channel_id == ch_id}
        if len(srcs) > 1:
            err(Violation("malformed_channel",
                          f"channel {ch_id!r} has multiple publishers {sorted(srcs)}",
                          ch_id))

    # data-flow cycles are permitted but surprising
    if _has_cycle(topology):
        report.warnings.append(Violation(
            "data_flow_cycle",
            f"{topology.name}: data flows form a cycle; latency attribution "
            f"still uses the first consumer output", topology.name))
    return report


def _has_cycle(topology: Topology) -> bool:
    adj: dict[str, list[str]] = {p: [] for p in topology.pes}
    for a, b in topology.data_edges():
        adj[a].append(b)
    state: dict[str, int] = {}

    def visit(node: str) -> bool:
        state[node] = 1
        for nxt in adj[node]:
            mark = state.get(nxt, 0)
            if mark == 1:
                return True
            if mark == 0 and visit(nxt):
                return True
        state[node] = 2
        return False

    return any(state.get(p, 0) == 0 and visit(p) for p in topology.pes)


def build_topology(spec: Mapping[str, Any] | Topology) -> Topology:
    """Build and validate a topology from a declarative description (or check
    an already constructed one). Raises TopologyInvalid listing every
    violation; cycle warnings are logged, not fatal."""
    topology = spec if isinstance(spec, Topology) else topology_from_config(spec)
    report = validate_topology(topology)
    for warning in report.warnings:
        log.warning("%s: %s", warning.code, warning.message)
    if not report.ok:
        raise TopologyInvalid(report.errors)
    return topology


def topology_from_config(cfg: Mapping[str, Any]) -> Topology:
    """Construct a Topology from the versioned config mapping.

    Ports are derived from the flows: one `out` port per publishing PE, one
    input port per incoming data channel, one configuration port per incoming
    control channel.
    """
    from .channels import ChannelSpec  # local import to avoid a module cycle

    version = cfg.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise TopologyInvalid([Violation(
            "unsupported_version", f"topology config version {version} "
            f"(supported: {CONFIG_VERSION})")])

    pes: dict[str, ProcessingElementSpec] = {}
    for entry in cfg.get("pes", []):
        pe = ProcessingElementSpec(
            pe_id=entry["id"],
            kind=PEKind(entry.get("kind", "ape")),
            behavior=entry.get("behavior", "identity"),
            params=dict(entry.get("params", {})),
            declared_role=Role(entry["role"]) if "role" in entry else None,
        )
        pes[pe.pe_id] = pe

    channels: dict[str, Any] = {}
    for entry in cfg.get("channels", []):
        spec = ChannelSpec(
            channel_id=entry["id"],
            modality=entry.get("modality", "point_to_point"),
            capacity=int(entry.get("capacity", 1024)),
            shed_policy=entry.get("shed_policy", "drop_newest"),
            flow_class=entry.get("flow_class", "data"),
        )
        channels[spec.channel_id] = spec

    data_flows = [DataFlow(source_pe=e["from"], target_pe=e["to"],
                           channel_id=e["channel"])
                  for e in cfg.get("data_flows", [])]
    control_flows = [ControlFlow(source_pe=e["from"], target_pe=e["to"],
                                 channel_id=e["channel"])
                     for e in cfg.get("control_flows", [])]

    for flow in data_flows:
        if flow.source_pe in pes:
            _ensure_port(pes[flow.source_pe], flow.source_port, PortDirection.OUTPUT)
        if flow.target_pe in pes:
            _ensure_port(pes[flow.target_pe], flow.target_port, PortDirection.INPUT)
    for flow in control_flows:
        if flow.source_pe in pes:
            # control may originate from consumers; no output port implied
            pass
        if flow.target_pe in pes:
            _ensure_port(pes[flow.target_pe], flow.target_port,
                         PortDirection.CONFIGURATION)

    return Topology(
        name=cfg.get("name", "topology"),
        pes=pes,
        channels=channels,
        data_flows=data_flows,
        control_flows=control_flows,
    )


def _ensure_port(pe: ProcessingElementSpec, port_id: str,
                 direction: PortDirection) -> None:
    if not any(p.port_id == port_id and p.direction is direction for p in pe.ports):
        pe.ports.append(PortSpec(port_id=port_id, direction=direction))


def load_topology(path: str) -> Topology:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh)
    return build_topology(cfg)


# --------------------------------------------------------------------------
# per-step execution contract
# --------------------------------------------------------------------------


class Behavior:
    """Per-item processing logic bound to one PE.

    Subclasses override the hooks they need. `service_time_ms` is the
    simulated cost of one step; the engine keeps the PE busy for that long.
    State must stay bounded: `state_size` reports the current retained item
    count so the harness can assert the bound.
    """

    service_time_ms: float = 0.0

    def __init__(self, params: Optional[dict[str, Any]] = None):
        self.params = dict(params or {})
        self.service_time_ms = float(self.params.get("service_time_ms",
                                                     self.service_time_ms))

    def setup(self, ctx: "StepContext") -> None:
        pass

    def on_item(self, ctx: "StepContext", item: DataItem, port: str) -> None:
        pass

    def on_signal(self, ctx: "StepContext", signal: ControlSignal) -> None:
        pass

    def on_timer(self, ctx: "StepContext", payload: Any) -> None:
        pass

    def finish(self, ctx: "StepContext") -> None:
        pass

    def state_size(self) -> int:
        return 0

    def residual_lineage(self) -> list[frozenset[str]]:
        """Lineage of work still held inside the behavior at shutdown."""
        return []


@dataclass
class TimerRequest:
    delay_ms: float
    payload: Any


@dataclass
class StepResult:
    items: list[DataItem] = field(default_factory=list)
    signals: list[ControlSignal] = field(default_factory=list)
    timers: list[TimerRequest] = field(default_factory=list)
    filtered: list[DataItem] = field(default_factory=list)
    error: Optional[BaseException] = None


class StepContext:
    """Facilities a behavior may use during one invocation."""

    def __init__(self, pe: ProcessingElementSpec, clock: float,
                 rng, id_alloc: Callable[[], str],
                 recorder=None, current: Optional[DataItem] = None,
                 role: Optional[Role] = None):
        self.pe = pe
        self.pe_id = pe.pe_id
        self.clock = clock
        self.rng = rng
        self.recorder = recorder
        self.result = StepResult()
        self._id_alloc = id_alloc
        self._current = current
        self._role = role if role is not None else classify_pe(pe)

    def emit(self, payload: Any = None, *,
             attributes: Optional[dict[str, Any]] = None,
             lineage: Optional[frozenset[str]] = None) -> DataItem:
        if self._role is Role.CONSUMER:
            raise BehaviorFailure(f"{self.pe_id}: consumer PEs never emit")
        item_id = self._id_alloc()
        if lineage is None:
            if self._current is not None:
                lineage = self._current.lineage
            else:
                lineage = frozenset({item_id})
        base_attrs: dict[str, Any] = {}
        ingest_ts = self.clock
        if self._current is not None:
            base_attrs = dict(self._current.attributes)
            ingest_ts = self._current.ingest_ts
            if payload is None:
                payload = self._current.payload
        if attributes:
            base_attrs.update(attributes)
        item = DataItem(item_id=item_id, payload=payload, ingest_ts=ingest_ts,
                        lineage=frozenset(lineage), attributes=base_attrs)
        self.result.items.append(item)
        return item

    def emit_signal(self, kind: SignalKind | str, body: Any,
                    target_pe: str = "") -> ControlSignal:
        signal = ControlSignal(
            signal_id=self._id_alloc(),
            target_pe=target_pe,
            kind=SignalKind(kind),
            body=body,
        )
        self.result.signals.append(signal)
        return signal

    def schedule(self, delay_ms: float, payload: Any) -> None:
        self.result.timers.append(TimerRequest(float(delay_ms), payload))

    def filtered(self, item: DataItem, reason: str = "") -> None:
        self.result.filtered.append(item)


def step_pe(pe: ProcessingElementSpec, behavior: Behavior,
            inputs: Sequence[Any], clock: float, *,
            rng=None, id_alloc: Optional[Callable[[], str]] = None,
            recorder=None) -> StepResult:
    """Feed one batch of data items and control signals to a PE.

    Signals are applied before items. Emitted items default to the lineage of
    the item being processed; behaviors doing joins pass lineage explicitly.
    A behavior exception is captured on the result (the engine records the
    item as errored rather than dropping it silently).
    """
    if rng is None:
        import random
        rng = random.Random(0)
    counter = [0]

    def default_alloc() -> str:
        counter[0] += 1
        return f"{pe.pe_id}#{counter[0]}"

    alloc = id_alloc or default_alloc
    role = classify_pe(pe)
    merged = StepResult()
    for entry in inputs:
        if isinstance(entry, ControlSignal):
            ctx = StepContext(pe, clock, rng, alloc, recorder, None, role)
            try:
                behavior.on_signal(ctx, entry)
            except Exception as exc:  # noqa: BLE001 - surfaced on the result
                merged.error = BehaviorFailure(f"{pe.pe_id}: {exc}")
            _merge(merged, ctx.result)
    for entry in inputs:
        if isinstance(entry, ControlSignal):
            continue
        item, port = entry if isinstance(entry, tuple) else (entry, "in")
        if role is Role.SOURCE:
            raise BehaviorFailure(f"{pe.pe_id}: sources take no data inputs")
        ctx = StepContext(pe, clock, rng, alloc, recorder, item, role)
        try:
            behavior.on_item(ctx, item, port)
        except Exception as exc:  # noqa: BLE001
            merged.error = BehaviorFailure(f"{pe.pe_id}: {exc}")
            merged.filtered.extend(ctx.result.filtered)
            continue
        _merge(merged, ctx.result)
    return merged


def _merge(into: StepResult, part: StepResult) -> None:
    into.items.extend(part.items)
    into.signals.extend(part.signals)
    into.timers.extend(part.timers)
    into.filtered.extend(part.filtered)
