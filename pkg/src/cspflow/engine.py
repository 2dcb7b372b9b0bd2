"""Topology execution.

Virtual-time mode is a single-threaded discrete-event loop: every source
emission, service completion, and behavior timer is an event on one heap, so
two runs with the same topology, feed, and seed replay identically. The
wall-clock variant drives the same loop off the real clock and additionally
drains externally submitted crowd labels between events.

Service model: a PE serves one item at a time for `service_time_ms`; arrivals
to an idle PE are handed over directly, otherwise they wait in the channel's
bounded queue (or are shed by its policy). Completions at a timestamp run
before arrivals at the same timestamp, which keeps a stage fed at exactly its
service rate queue-free.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
import threading
import time as _time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from .channels import Channel, FlowClass, PublishStatus, ShedRecord
from .core import (
    Behavior,
    ControlSignal,
    DataItem,
    ProcessingElementSpec,
    Role,
    StepContext,
    StepResult,
    Topology,
    classify_pe,
)
from .errors import BehaviorFailure, CspflowError
from .metrics import EventLog

log = logging.getLogger("cspflow.engine")

# event kind priorities: completions first, then timers, then source arrivals
_COMPLETE, _TIMER, _EMIT = 0, 1, 2


@dataclass
class SourceFeed:
    """Records a source PE replays plus its pacing plan: (rate items/s,
    item count) segments covering the record list in order."""

    records: list[tuple[str, Any, dict]]
    plan: list[tuple[float, int]]

    @classmethod
    def constant(cls, records: list[tuple[str, Any, dict]],
                 rate: float) -> "SourceFeed":
        return cls(records=records, plan=[(rate, len(records))])

    def gap_after(self, index: int) -> float:
        """ms between emission `index` and `index + 1`."""
        seen = 0
        for rate, count in self.plan:
            seen += count
            if index < seen:
                return 1000.0 / rate
        return 1000.0 / self.plan[-1][0] if self.plan else 0.0


class _PERuntime:
    __slots__ = ("spec", "behavior", "role", "busy", "blocked_on", "rng",
                 "in_channels", "out_channels", "ctrl_in", "ctrl_out",
                 "id_counter")

    def __init__(self, spec: ProcessingElementSpec, behavior: Behavior,
                 role: Role, rng: random.Random):
        self.spec = spec
        self.behavior = behavior
        self.role = role
        self.busy = False
        self.blocked_on: Optional[Channel] = None
        self.rng = rng
        self.in_channels: list[tuple[Channel, str]] = []  # (channel, port)
        self.out_channels: list[Channel] = []
        self.ctrl_in: list[Channel] = []
        self.ctrl_out: list[Channel] = []
        self.id_counter = 0

    def next_id(self) -> str:
        self.id_counter += 1
        return f"{self.spec.pe_id}#{self.id_counter}"


@dataclass
class RunResult:
    log: EventLog
    seed: int
    clock_end: float
    channels: dict[str, Channel]
    behaviors: dict[str, Behavior]
    residual_lineages: list[frozenset[str]]
    consumer_outputs: dict[str, list] = field(default_factory=dict)
    metrics: Any = None
    conservation: Any = None


class Engine:
    """Runs one topology against its source feeds."""

    def __init__(self, topology: Topology, *, seed: int = 0,
                 mode: str = "virtual",
                 behavior_factory: Optional[Callable[[ProcessingElementSpec],
                                                     Behavior]] = None,
                 recorder: Optional[EventLog] = None):
        from .behaviors import make_behavior  # default registry

        self.topology = topology
        self.seed = seed
        self.mode = mode
        self.clock = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._enqueue_seq = itertools.count(1)
        self._stopped = False
        self._inbox: "list[tuple[str, Any]]" = []
        self._inbox_lock = threading.Lock()

        factory = behavior_factory or make_behavior
        roles = topology.roles()
        self.recorder = recorder or EventLog(
            pe for pe, role in roles.items() if role is Role.CONSUMER)
        self.recorder.consumer_pes.update(
            pe for pe, role in roles.items() if role is Role.CONSUMER)

        self.pes: dict[str, _PERuntime] = {}
        for pe_id, spec in topology.pes.items():
            rng = random.Random(f"{seed}:{pe_id}")
            self.pes[pe_id] = _PERuntime(spec, factory(spec), roles[pe_id], rng)

        self.channels: dict[str, Channel] = {}
        for ch_id, spec in topology.channels.items():
            source = topology.channel_source(ch_id)
            subs = topology.subscribers_of(ch_id)
            if source is None or not subs:
                continue
            channel = Channel(spec, source, subs,
                              next_seq=lambda: next(self._enqueue_seq))
            self.channels[ch_id] = channel
            for flow in topology.data_flows:
                if flow.channel_id != ch_id:
                    continue
                runtime = self.pes[flow.target_pe]
                pair = (channel, flow.target_port)
                if pair not in runtime.in_channels:
                    runtime.in_channels.append(pair)
            if channel.spec.flow_class is FlowClass.CONTROL:
                self.pes[source].ctrl_out.append(channel)
                for sub in subs:
                    self.pes[sub].ctrl_in.append(channel)
            elif source:
                if channel not in self.pes[source].out_channels:
                    self.pes[source].out_channels.append(channel)

        self.sources: dict[str, SourceFeed] = {}

    # -- wiring ----------------------------------------------------------------

    def add_source(self, pe_id: str, feed: SourceFeed) -> None:
        if self.pes[pe_id].role is not Role.SOURCE:
            raise CspflowError(f"{pe_id} is not a source PE")
        self.sources[pe_id] = feed

    def inject_external(self, pe_id: str, payload: Any) -> None:
        """Thread-safe: queue a payload for a behavior's on_timer (used by the
        annotator service to hand submitted labels to the scheduler)."""
        with self._inbox_lock:
            self._inbox.append((pe_id, payload))

    # -- event plumbing ---------------------------------------------------------

    def _push(self, when: float, kind: int, data: tuple) -> None:
        heapq.heappush(self._heap, (when, kind, next(self._seq), data))

    def schedule_timer(self, pe_id: str, delay_ms: float, payload: Any) -> None:
        self._push(self.clock + delay_ms, _TIMER, (pe_id, payload))

    # -- run loop ---------------------------------------------------------------

    def run(self, until_ms: Optional[float] = None,
            stop_event: Optional[threading.Event] = None) -> RunResult:
        for pe_id, feed in self.sources.items():
            if feed.records:
                self._push(0.0, _EMIT, (pe_id, 0))
        for pe_id, runtime in self.pes.items():
            ctx = self._ctx(runtime)
            runtime.behavior.setup(ctx)
            self._absorb(runtime, ctx.result, self.clock)

        wall_origin = _time.monotonic() * 1000.0 if self.mode == "wall" else 0.0
        while not self._stopped:
            if self.mode == "wall":
                self._drain_inbox()
                if stop_event is not None and stop_event.is_set():
                    break
                if not self._heap:
                    if stop_event is None:
                        break
                    _time.sleep(0.01)
                    continue
                due = self._heap[0][0]
                now_wall = _time.monotonic() * 1000.0 - wall_origin
                if due > now_wall:
                    _time.sleep(min((due - now_wall) / 1000.0, 0.02))
                    continue
            if not self._heap:
                break
            when, kind, _, data = self._heap[0]
            if until_ms is not None and when > until_ms:
                break
            heapq.heappop(self._heap)
            self.clock = when
            if kind == _COMPLETE:
                self._on_complete(*data)
            elif kind == _TIMER:
                self._on_timer(*data)
            else:
                self._on_source_emit(*data)

        for runtime in self.pes.values():
            ctx = self._ctx(runtime)
            runtime.behavior.finish(ctx)
            self._absorb(runtime, ctx.result, self.clock)

        return RunResult(
            log=self.recorder,
            seed=self.seed,
            clock_end=self.clock,
            channels=self.channels,
            behaviors={p: r.behavior for p, r in self.pes.items()},
            residual_lineages=self._residuals(),
            consumer_outputs={
                p: r.behavior.collected()  # type: ignore[attr-defined]
                for p, r in self.pes.items()
                if hasattr(r.behavior, "collected")},
        )

    def _residuals(self) -> list[frozenset[str]]:
        out: list[frozenset[str]] = []
        for channel in self.channels.values():
            out.extend(channel.residual_lineages())
        for runtime in self.pes.values():
            out.extend(runtime.behavior.residual_lineage())
        # items inside service windows or unprocessed at cutoff
        for when, kind, _, data in self._heap:
            if kind == _COMPLETE:
                _, item, _, _ = data
                if item is not None:
                    out.append(item.lineage)
        return out

    # -- handlers ---------------------------------------------------------------

    def _on_source_emit(self, pe_id: str, index: int) -> None:
        feed = self.sources[pe_id]
        record_id, payload, attrs = feed.records[index]
        item = DataItem(item_id=record_id, payload=payload,
                        ingest_ts=self.clock,
                        lineage=frozenset({record_id}),
                        attributes=dict(attrs))
        self.recorder.ingested(record_id, self.clock)
        runtime = self.pes[pe_id]
        self.recorder.emitted(item.item_id, pe_id, self.clock, item.lineage)
        self._publish_item(runtime, item)
        if index + 1 < len(feed.records):
            self._push(self.clock + feed.gap_after(index), _EMIT,
                       (pe_id, index + 1))

    def _on_timer(self, pe_id: str, payload: Any) -> None:
        runtime = self.pes[pe_id]
        ctx = self._ctx(runtime)
        try:
            runtime.behavior.on_timer(ctx, payload)
        except Exception as exc:  # noqa: BLE001
            log.error("%s timer failed: %s", pe_id, exc)
            raise
        self._absorb(runtime, ctx.result, self.clock)

    def _on_complete(self, pe_id: str, item: Optional[DataItem], port: str,
                     result: StepResult) -> None:
        runtime = self.pes[pe_id]
        runtime.busy = False
        self._absorb(runtime, result, self.clock, consumed=item)
        self._pull(runtime)

    # -- core mechanics -----------------------------------------------------------

    def _ctx(self, runtime: _PERuntime,
             current: Optional[DataItem] = None) -> StepContext:
        return StepContext(runtime.spec, self.clock, runtime.rng,
                           runtime.next_id, self.recorder, current,
                           runtime.role)

    def _absorb(self, runtime: _PERuntime, result: StepResult, now: float,
                consumed: Optional[DataItem] = None) -> None:
        """Apply one StepResult: publish emissions, stage signals, log
        filtered/errored, schedule timers."""
        pe_id = runtime.spec.pe_id
        if runtime.role is Role.CONSUMER and consumed is not None and \
                result.error is None:
            self.recorder.emitted(consumed.item_id, pe_id, now, consumed.lineage)
        if result.error is not None and consumed is not None:
            self.recorder.errored(consumed.item_id, pe_id, now, consumed.lineage)
        for entry in result.filtered:
            self.recorder.filtered(entry.item_id, pe_id, now, entry.lineage)
        for item in result.items:
            self.recorder.emitted(item.item_id, pe_id, now, item.lineage)
            self._publish_item(runtime, item)
        for signal in result.signals:
            self._send_control(runtime, signal)
        for timer in result.timers:
            self._push(now + timer.delay_ms, _TIMER, (pe_id, timer.payload))

    def _publish_item(self, runtime: _PERuntime, item: DataItem) -> None:
        for channel in runtime.out_channels:
            deliver = (lambda sub, itm, ch=channel:
                       self._deliver_direct(ch, sub, itm))
            already_shed = len(channel.shed_records)
            statuses = channel.publish(item, self.clock, deliver)
            for _, status, _ in statuses:
                if status is PublishStatus.BLOCKED:
                    if runtime.role is Role.SOURCE:
                        # an external stimulus cannot be stalled: the parked
                        # slot soaks up one item, anything further is shed
                        if len(channel.blocked) > 1:
                            sub, victim = channel.blocked.pop()
                            channel._shed(sub, victim, self.clock)
                    else:
                        runtime.blocked_on = channel
            for record in channel.shed_records[already_shed:]:
                self.recorder.shed(record)

    def _deliver_direct(self, channel: Channel, subscriber: str,
                        item: DataItem) -> bool:
        runtime = self.pes[subscriber]
        if runtime.busy or runtime.blocked_on is not None:
            return False
        port = next((p for ch, p in runtime.in_channels if ch is channel), "in")
        self._begin(runtime, item, port)
        return True

    def _begin(self, runtime: _PERuntime, item: DataItem, port: str) -> None:
        for channel in runtime.ctrl_in:
            for signal in channel.take_signals(runtime.spec.pe_id):
                ctx = self._ctx(runtime)
                try:
                    runtime.behavior.on_signal(ctx, signal)
                except Exception as exc:  # noqa: BLE001
                    ctx.result.error = BehaviorFailure(
                        f"{runtime.spec.pe_id}: {exc}")
                self._absorb(runtime, ctx.result, self.clock)
        ctx = self._ctx(runtime, item)
        try:
            runtime.behavior.on_item(ctx, item, port)
            result = ctx.result
        except Exception as exc:  # noqa: BLE001
            result = ctx.result
            result.items = []
            result.signals = []
            result.error = BehaviorFailure(f"{runtime.spec.pe_id}: {exc}")
        runtime.busy = True
        self._push(self.clock + runtime.behavior.service_time_ms, _COMPLETE,
                   (runtime.spec.pe_id, item, port, result))

    def _pull(self, runtime: _PERuntime) -> None:
        """When free, take the oldest queued input across this PE's channels."""
        if runtime.busy or runtime.blocked_on is not None:
            return
        best: Optional[tuple[int, Channel, str]] = None
        pe_id = runtime.spec.pe_id
        for channel, port in runtime.in_channels:
            seq = channel.peek_seq(pe_id)
            if seq is not None and (best is None or seq < best[0]):
                best = (seq, channel, port)
        if best is None:
            return
        _, channel, port = best
        pulled = channel.pull(pe_id)
        if pulled is None:
            return
        _, item = pulled
        self._unblock_publishers(channel)
        self._begin(runtime, item, port)

    def _unblock_publishers(self, channel: Channel) -> None:
        if channel.blocked:
            return
        publisher = self.pes.get(channel.source_pe)
        if publisher is not None and publisher.blocked_on is channel:
            publisher.blocked_on = None
            self._pull(publisher)

    def _send_control(self, runtime: _PERuntime, signal: ControlSignal) -> None:
        targets = runtime.ctrl_out
        if signal.target_pe:
            targets = [ch for ch in targets if signal.target_pe in ch.subscribers]
        for channel in targets:
            if not signal.target_pe:
                signal.target_pe = channel.subscribers[0]
            channel.put_signal(signal)
            # an idle target applies staged signals at its next step; nothing
            # to do here in virtual time

    def _drain_inbox(self) -> None:
        with self._inbox_lock:
            pending, self._inbox = self._inbox, []
        for pe_id, payload in pending:
            self._push(self.clock, _TIMER, (pe_id, payload))

    def shutdown(self) -> None:
        self._stopped = True
        for channel in self.channels.values():
            channel.shutdown = True
