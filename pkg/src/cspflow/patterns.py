"""Topology builders for common automatic/crowd wiring shapes, plus the
structural checks that tell whether items ever can, or always must, pass
through human hands on their way from sources to consumers.

Builders return fragments meant to be grafted into larger topologies; a
fragment can be capped with stub source/consumer PEs to run the full
validator over it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .channels import ChannelSpec, FlowClass, Modality
from .core import (
    ControlFlow,
    DataFlow,
    PEKind,
    ProcessingElementSpec,
    Role,
    Topology,
    build_topology,
    classify_pe,
)
from .errors import InvalidChainLength, MissingBinding


class Pattern(str, Enum):
    QA_LOOP = "qa_loop"
    SKILL_ASSIGNMENT = "skill_assignment"
    DETECT_VERIFY = "detect_verify"
    SUPERVISED_LEARNING = "supervised_learning"
    SUBTASK_CHAIN = "subtask_chain"
    HUMAN_OPTIONAL = "human_optional"
    HUMAN_MANDATORY = "human_mandatory"


@dataclass
class PatternSpec:
    pattern: Pattern
    parameters: dict[str, Any] = field(default_factory=dict)


def _pe(pe_id: str, kind: PEKind, behavior: str,
        params: Optional[dict] = None) -> ProcessingElementSpec:
    return ProcessingElementSpec(pe_id=pe_id, kind=kind, behavior=behavior,
                                 params=dict(params or {}))


def _data_channel(cid: str, modality: Modality = Modality.POINT_TO_POINT,
                  capacity: int = 1024) -> ChannelSpec:
    return ChannelSpec(channel_id=cid, modality=modality, capacity=capacity)


def _control_channel(cid: str) -> ChannelSpec:
    return ChannelSpec(channel_id=cid, modality=Modality.POINT_TO_POINT,
                       capacity=1, flow_class=FlowClass.CONTROL)


def build_pattern(spec: PatternSpec,
                  bindings: Optional[dict[str, Any]] = None) -> Topology:
    """Produce the canonical fragment for one pattern.

    Bindings supply behavior names (and params) for the user-defined PEs;
    patterns with sensible defaults only require what they cannot guess
    (detect_verify needs its detector predicate).
    """
    bindings = dict(bindings or {})
    pattern = Pattern(spec.pattern)
    p = spec.parameters
    prefix = p.get("prefix", pattern.value)

    def name(suffix: str) -> str:
        return f"{prefix}.{suffix}"

    pes: dict[str, ProcessingElementSpec] = {}
    channels: dict[str, ChannelSpec] = {}
    data_flows: list[DataFlow] = []
    control_flows: list[ControlFlow] = []
    entries: list[str] = []
    exits: list[str] = []

    def add_pe(pe: ProcessingElementSpec) -> ProcessingElementSpec:
        pes[pe.pe_id] = pe
        return pe

    def join(src: str, dst: str, cid: str,
             modality: Modality = Modality.POINT_TO_POINT) -> None:
        channels[cid] = _data_channel(cid, modality)
        data_flows.append(DataFlow(source_pe=src, target_pe=dst, channel_id=cid))

    def control(src: str, dst: str, cid: str) -> None:
        channels[cid] = _control_channel(cid)
        control_flows.append(ControlFlow(source_pe=src, target_pe=dst,
                                         channel_id=cid))

    if pattern is Pattern.QA_LOOP:
        worker = add_pe(_pe(name("crowd"), PEKind.CSPE,
                            bindings.get("crowd", "crowd_annotate")))
        judge = add_pe(_pe(name("aggregator"), PEKind.APE,
                           bindings.get("aggregator", "identity")))
        join(worker.pe_id, judge.pe_id, name("labels"))
        control(judge.pe_id, worker.pe_id, name("more_labels"))
        entries, exits = [worker.pe_id], [judge.pe_id]
    elif pattern is Pattern.SKILL_ASSIGNMENT:
        assigner = add_pe(_pe(name("assigner"), PEKind.APE,
                              bindings.get("assigner", "identity")))
        worker = add_pe(_pe(name("crowd"), PEKind.CSPE,
                            bindings.get("crowd", "crowd_annotate")))
        join(assigner.pe_id, worker.pe_id, name("tasks"))
        control(assigner.pe_id, worker.pe_id, name("worker_directive"))
        entries, exits = [assigner.pe_id], [worker.pe_id]
    elif pattern is Pattern.DETECT_VERIFY:
        if "detector" not in bindings:
            raise MissingBinding("detect_verify requires a 'detector' binding")
        detector = bindings["detector"]
        det_params = bindings.get("detector_params", {})
        det = add_pe(_pe(name("detector"), PEKind.APE, detector, det_params))
        verify = add_pe(_pe(name("verifier"), PEKind.CSPE,
                            bindings.get("verifier", "crowd_annotate")))
        join(det.pe_id, verify.pe_id, name("suspects"))
        entries, exits = [det.pe_id], [verify.pe_id]
    elif pattern is Pattern.SUPERVISED_LEARNING:
        clf = add_pe(_pe(name("classifier"), PEKind.APE,
                         bindings.get("classifier", "classify")))
        sampler = add_pe(_pe(name("sampler"), PEKind.APE,
                             bindings.get("sampler", "select_tasks")))
        crowd_pe = add_pe(_pe(name("crowd"), PEKind.CSPE,
                              bindings.get("crowd", "crowd_annotate")))
        learner = add_pe(_pe(name("learner"), PEKind.APE,
                             bindings.get("learner", "learn")))
        join(clf.pe_id, sampler.pe_id, name("candidates"))
        join(sampler.pe_id, crowd_pe.pe_id, name("to_label"))
        join(crowd_pe.pe_id, learner.pe_id, name("labeled"))
        control(learner.pe_id, clf.pe_id, name("model_update"))
        # the classifier both feeds the sampler tap and continues downstream
        entries, exits = [clf.pe_id], [clf.pe_id]
    elif pattern is Pattern.SUBTASK_CHAIN:
        k = int(p.get("k", 0))
        if k < 2:
            raise InvalidChainLength(f"subtask_chain needs k >= 2, got {k}")
        stages = bindings.get("stages") or ["crowd_annotate"] * k
        if len(stages) != k:
            raise MissingBinding(f"expected {k} stage bindings, got {len(stages)}")
        interpose = bindings.get("interpose", "identity")
        layout = p.get("layout", "serial")
        crowd_pes = [add_pe(_pe(name(f"crowd{i + 1}"), PEKind.CSPE, stages[i]))
                     for i in range(k)]
        if layout == "parallel":
            fan_in = add_pe(_pe(name("merge"), PEKind.APE, interpose))
            for i, cpe in enumerate(crowd_pes):
                join(cpe.pe_id, fan_in.pe_id, name(f"stage{i + 1}"))
            entries = [c.pe_id for c in crowd_pes]
            exits = [fan_in.pe_id]
        else:
            for i in range(k - 1):
                glue = add_pe(_pe(name(f"post{i + 1}"), PEKind.APE, interpose))
                join(crowd_pes[i].pe_id, glue.pe_id, name(f"stage{i + 1}a"))
                join(glue.pe_id, crowd_pes[i + 1].pe_id, name(f"stage{i + 1}b"))
            entries = [crowd_pes[0].pe_id]
            exits = [crowd_pes[-1].pe_id]
    elif pattern is Pattern.HUMAN_OPTIONAL:
        auto = add_pe(_pe(name("auto"), PEKind.APE,
                          bindings.get("auto", "identity")))
        crowd_pe = add_pe(_pe(name("crowd"), PEKind.CSPE,
                              bindings.get("crowd", "crowd_annotate")))
        merge = add_pe(_pe(name("merge"), PEKind.APE,
                           bindings.get("merge", "identity")))
        join(auto.pe_id, merge.pe_id, name("fast_path"))
        join(crowd_pe.pe_id, merge.pe_id, name("human_path"))
        entries = [auto.pe_id, crowd_pe.pe_id]
        exits = [merge.pe_id]
    elif pattern is Pattern.HUMAN_MANDATORY:
        gate = add_pe(_pe(name("crowd"), PEKind.CSPE,
                          bindings.get("crowd", "crowd_annotate")))
        entries, exits = [gate.pe_id], [gate.pe_id]
    else:  # pragma: no cover - Pattern() above rejects unknown values
        raise MissingBinding(str(pattern))

    from .core import PortDirection, _ensure_port
    for flow in data_flows:
        _ensure_port(pes[flow.source_pe], flow.source_port, PortDirection.OUTPUT)
        _ensure_port(pes[flow.target_pe], flow.target_port, PortDirection.INPUT)
    for flow in control_flows:
        _ensure_port(pes[flow.target_pe], flow.target_port,
                     PortDirection.CONFIGURATION)

    return Topology(name=f"fragment:{pattern.value}", pes=pes,
                    channels=channels, data_flows=data_flows,
                    control_flows=control_flows, fragment=True,
                    entry_pes=entries, exit_pes=exits)


def fragment_entries(fragment: Topology) -> list[str]:
    """PEs expecting upstream data when the fragment is grafted."""
    if fragment.entry_pes:
        return list(fragment.entry_pes)
    has_in_edge = {f.target_pe for f in fragment.data_flows}
    return [pe_id for pe_id in fragment.pes if pe_id not in has_in_edge]


def fragment_exits(fragment: Topology) -> list[str]:
    """PEs whose output continues downstream of the fragment."""
    if fragment.exit_pes:
        return list(fragment.exit_pes)
    has_out_edge = {f.source_pe for f in fragment.data_flows}
    return [pe_id for pe_id in fragment.pes if pe_id not in has_out_edge]


def complete_fragment(fragment: Topology,
                      validate: bool = True) -> Topology:
    """Cap a fragment with a stub source and consumer so the full validator
    and path checks can run over it."""
    pes = {k: v for k, v in fragment.pes.items()}
    channels = dict(fragment.channels)
    data_flows = list(fragment.data_flows)
    control_flows = list(fragment.control_flows)

    src = ProcessingElementSpec(pe_id="stub.source", kind=PEKind.APE,
                                behavior="replay")
    sink = ProcessingElementSpec(pe_id="stub.consumer", kind=PEKind.APE,
                                 behavior="collect")
    pes[src.pe_id] = src
    pes[sink.pe_id] = sink

    entries = fragment_entries(fragment)
    exits = fragment_exits(fragment)
    cid = "stub.in"
    channels[cid] = _data_channel(
        cid, Modality.BROADCAST if len(entries) > 1 else Modality.POINT_TO_POINT)
    for pe_id in entries:
        data_flows.append(DataFlow(source_pe=src.pe_id, target_pe=pe_id,
                                   channel_id=cid))
    for i, pe_id in enumerate(exits):
        ch = f"stub.out{i}"
        channels[ch] = _data_channel(ch)
        data_flows.append(DataFlow(source_pe=pe_id, target_pe=sink.pe_id,
                                   channel_id=ch))

    from .core import _ensure_port, PortDirection
    for flow in data_flows:
        _ensure_port(pes[flow.source_pe], flow.source_port, PortDirection.OUTPUT)
        _ensure_port(pes[flow.target_pe], flow.target_port, PortDirection.INPUT)
    for flow in control_flows:
        _ensure_port(pes[flow.target_pe], flow.target_port,
                     PortDirection.CONFIGURATION)

    full = Topology(name=fragment.name.replace("fragment:", "") + ".capped",
                    pes=pes, channels=channels, data_flows=data_flows,
                    control_flows=control_flows, fragment=False)
    return build_topology(full) if validate else full


# --------------------------------------------------------------------------
# structural checks
# --------------------------------------------------------------------------


def _data_adjacency(topology: Topology) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {p: [] for p in topology.pes}
    for a, b in topology.data_edges():
        if b not in adj[a]:
            adj[a].append(b)
    return adj


def check_human_optional(topology: Topology
                         ) -> tuple[bool, Optional[list[str]]]:
    """Is there a data path from some source to some consumer that avoids
    every crowd PE? Returns the witness path when one exists."""
    cspes = topology.cspe_ids()
    roles = topology.roles()
    sources = [p for p, r in roles.items() if r is Role.SOURCE and p not in cspes]
    consumers = {p for p, r in roles.items() if r is Role.CONSUMER and p not in cspes}
    adj = _data_adjacency(topology)
    parent: dict[str, Optional[str]] = {s: None for s in sources}
    frontier = deque(sources)
    while frontier:
        node = frontier.popleft()
        if node in consumers:
            path = [node]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])  # type: ignore[arg-type]
            return True, list(reversed(path))
        for nxt in adj[node]:
            if nxt in cspes or nxt in parent:
                continue
            parent[nxt] = node
            frontier.append(nxt)
    return False, None


def check_human_mandatory(topology: Topology
                          ) -> tuple[bool, Optional[list[str]]]:
    """Must every source-to-consumer data path pass through a crowd PE?

    Checked as: deleting all crowd PEs leaves every consumer unreachable from
    every source (reverse reachability from the consumers). When the check
    fails, the crowd-free counterexample path is returned.
    """
    cspes = topology.cspe_ids()
    roles = topology.roles()
    sources = {p for p, r in roles.items() if r is Role.SOURCE and p not in cspes}
    consumers = [p for p, r in roles.items() if r is Role.CONSUMER and p not in cspes]
    radj: dict[str, list[str]] = {p: [] for p in topology.pes}
    for a, b in topology.data_edges():
        if a not in cspes and b not in cspes and a not in radj[b]:
            radj[b].append(a)
    seen: set[str] = set()
    frontier = deque(consumers)
    seen.update(consumers)
    while frontier:
        node = frontier.popleft()
        for prev in radj[node]:
            if prev not in seen:
                seen.add(prev)
                frontier.append(prev)
    if seen & sources:
        _, witness = check_human_optional(topology)
        return False, witness
    return True, None


class Composition(str, Enum):
    SERIAL = "serial"
    PARALLEL = "parallel"
    HYBRID = "hybrid"


def classify_composition(topology: Topology) -> Composition:
    """serial: the data flows form one path covering every PE. parallel: they
    decompose into >= 2 vertex-disjoint chains with no cross edges. Anything
    else is hybrid."""
    edges = topology.data_edges()
    outdeg: dict[str, int] = {p: 0 for p in topology.pes}
    indeg: dict[str, int] = {p: 0 for p in topology.pes}
    seen_edges = set()
    for a, b in edges:
        if (a, b) in seen_edges:
            continue
        seen_edges.add((a, b))
        outdeg[a] += 1
        indeg[b] += 1
    if any(d > 1 for d in outdeg.values()) or any(d > 1 for d in indeg.values()):
        return Composition.HYBRID
    starts = [p for p in topology.pes if indeg[p] == 0]
    adj = _data_adjacency(topology)
    chains = 0
    covered: set[str] = set()
    for start in starts:
        chains += 1
        node: Optional[str] = start
        while node is not None and node not in covered:
            covered.add(node)
            node = adj[node][0] if adj[node] else None
    if covered != set(topology.pes):
        return Composition.HYBRID  # leftover nodes sit on cycles
    if chains == 1:
        return Composition.SERIAL
    return Composition.PARALLEL
