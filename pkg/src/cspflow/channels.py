"""Communication channels: modalities, bounded buffering, and load shedding.

A channel joins one publisher to its subscribers. Point-to-point delivers to
the single subscriber, distributed partitions items by routing key (stable
64-bit hash), broadcast duplicates to everyone. Each subscriber has its own
bounded queue; overflow is resolved by the shed policy and every shed is a
first-class record so the load-adaptability metrics can consume it.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .core import ControlSignal, DataItem
from .errors import (
    NoSubscribers,
    PublishAfterShutdown,
    UnknownTarget,
    WrongFlowClass,
)

ROUTE_SALT = b"cspflow-route-v1"


def stable_hash64(key: str) -> int:
    """Deterministic 64-bit hash, fixed per release (process-independent)."""
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8,
                             person=ROUTE_SALT).digest()
    return int.from_bytes(digest, "big")


class Modality(str, Enum):
    POINT_TO_POINT = "point_to_point"
    DISTRIBUTED = "distributed"
    BROADCAST = "broadcast"


class ShedPolicy(str, Enum):
    DROP_NEWEST = "drop_newest"
    DROP_OLDEST = "drop_oldest"
    BLOCK = "block"


class FlowClass(str, Enum):
    DATA = "data"
    CONTROL = "control"


class PublishStatus(str, Enum):
    DELIVERED = "delivered"
    QUEUED = "queued"
    SHED = "shed"
    BLOCKED = "blocked"


@dataclass
class ChannelSpec:
    channel_id: str
    modality: Modality = Modality.POINT_TO_POINT
    capacity: int = 1024
    shed_policy: ShedPolicy = ShedPolicy.DROP_NEWEST
    flow_class: FlowClass = FlowClass.DATA
    routing_attribute: str = "routing_key"

    def __post_init__(self):
        self.modality = Modality(self.modality)
        self.shed_policy = ShedPolicy(self.shed_policy)
        self.flow_class = FlowClass(self.flow_class)


@dataclass
class ShedRecord:
    channel_id: str
    item_id: str
    shed_ts: float
    reason: str  # "capacity" or "prioritization"
    lineage: frozenset[str] = frozenset()

    CSV_HEADER = "channel_id,item_id,shed_ts,reason"

    def csv_row(self) -> str:
        return f"{self.channel_id},{self.item_id},{self.shed_ts:g},{self.reason}"


@dataclass
class SubscriberStats:
    delivered: int = 0
    shed: int = 0

    def snapshot(self, queued: int) -> dict[str, int]:
        return {"delivered": self.delivered, "shed": self.shed, "queued": queued}


class Channel:
    """Runtime state of one channel: routing plus per-subscriber queues.

    Conservation holds in copy units: every routed copy is eventually counted
    as delivered, shed, or still queued. Broadcast creates one copy per
    subscriber; the other modalities route each publish to exactly one.
    """

    def __init__(self, spec: ChannelSpec, source_pe: str, subscribers: list[str],
                 next_seq=None):
        self.spec = spec
        self.source_pe = source_pe
        self.subscribers = list(subscribers)
        self.queues: dict[str, deque] = {s: deque() for s in self.subscribers}
        self.stats: dict[str, SubscriberStats] = {s: SubscriberStats()
                                                  for s in self.subscribers}
        self.published = 0
        self.routed_copies = 0
        self.shed_records: list[ShedRecord] = []
        self.pending_signals: dict[tuple[str, str], ControlSignal] = {}
        self.blocked: deque = deque()  # parked (subscriber, item) under BLOCK
        self._rr_next = 0
        self._own_seq = 0
        # engines share one counter across channels so a PE's inbox merges
        # its input channels in true arrival order
        self.next_seq = next_seq or self._bump
        self.shutdown = False

    def _bump(self) -> int:
        self._own_seq += 1
        return self._own_seq

    # -- routing ------------------------------------------------------------

    def route(self, item: DataItem) -> list[str]:
        """Pick target subscribers for one item (does not move the item)."""
        if not self.subscribers:
            raise NoSubscribers(self.spec.channel_id)
        if self.spec.modality is Modality.BROADCAST:
            return list(self.subscribers)
        if self.spec.modality is Modality.POINT_TO_POINT:
            return [self.subscribers[0]]
        key = item.attributes.get(self.spec.routing_attribute)
        if key is None:
            chosen = self.subscribers[self._rr_next % len(self.subscribers)]
            self._rr_next += 1
            return [chosen]
        return [self.subscribers[stable_hash64(str(key)) % len(self.subscribers)]]

    # -- data path ----------------------------------------------------------

    def publish(self, item: DataItem, clock: float,
                deliver_now) -> list[tuple[str, PublishStatus, DataItem]]:
        """Route one publish to its subscribers and move every copy.

        Broadcast subscribers past the first receive an independent copy
        (same item_id, own attribute map). Returns one (subscriber, status,
        copy) triple per routed copy.
        """
        if self.shutdown:
            raise PublishAfterShutdown(self.spec.channel_id)
        self.published += 1
        targets = self.route(item)
        out = []
        for i, subscriber in enumerate(targets):
            copy = item if i == 0 else DataItem(
                item_id=item.item_id, payload=item.payload,
                ingest_ts=item.ingest_ts, lineage=item.lineage,
                attributes=dict(item.attributes))
            out.append((subscriber, self.offer(subscriber, copy, clock,
                                               deliver_now), copy))
        return out

    def offer(self, subscriber: str, item: DataItem, clock: float,
              deliver_now) -> PublishStatus:
        """Move one routed copy toward `subscriber`.

        `deliver_now(subscriber, item)` must hand the item straight to an idle
        consumer and return True, or return False so the copy is buffered.
        """
        if self.shutdown:
            raise PublishAfterShutdown(self.spec.channel_id)
        queue = self.queues[subscriber]
        self.routed_copies += 1
        if not queue and deliver_now(subscriber, item):
            self.stats[subscriber].delivered += 1
            return PublishStatus.DELIVERED
        if len(queue) < self.spec.capacity:
            queue.append((self.next_seq(), item))
            return PublishStatus.QUEUED
        if self.spec.shed_policy is ShedPolicy.DROP_NEWEST or \
                (self.spec.shed_policy is ShedPolicy.DROP_OLDEST and not queue):
            self._shed(subscriber, item, clock)
            return PublishStatus.SHED
        if self.spec.shed_policy is ShedPolicy.DROP_OLDEST:
            _, victim = queue.popleft()
            self._shed(subscriber, victim, clock)
            queue.append((self.next_seq(), item))
            return PublishStatus.QUEUED
        # BLOCK: park the copy; the engine stalls the publisher until a pull
        # frees space. External sources cannot be stalled, so the engine sheds
        # on their behalf when the parking slot is already taken.
        self.blocked.append((subscriber, item))
        return PublishStatus.BLOCKED

    def pull(self, subscriber: str) -> Optional[tuple[int, DataItem]]:
        queue = self.queues[subscriber]
        if not queue:
            return None
        seq, item = queue.popleft()
        self.stats[subscriber].delivered += 1
        self._replenish(subscriber)
        return seq, item

    def peek_seq(self, subscriber: str) -> Optional[int]:
        queue = self.queues[subscriber]
        return queue[0][0] if queue else None

    def _replenish(self, subscriber: str) -> bool:
        """Move a parked (blocked) copy into freed buffer space."""
        moved = False
        while self.blocked and self.blocked[0][0] == subscriber and \
                len(self.queues[subscriber]) < self.spec.capacity:
            _, item = self.blocked.popleft()
            self.queues[subscriber].append((self.next_seq(), item))
            moved = True
        return moved

    def _shed(self, subscriber: str, item: DataItem, clock: float,
              reason: str = "capacity") -> ShedRecord:
        record = ShedRecord(self.spec.channel_id, item.item_id, clock, reason,
                            item.lineage)
        self.shed_records.append(record)
        self.stats[subscriber].shed += 1
        return record

    # -- control path --------------------------------------------------------

    def put_signal(self, signal: ControlSignal) -> str:
        """Stage a control signal; a newer one of the same kind replaces an
        undelivered older one."""
        if self.spec.flow_class is not FlowClass.CONTROL:
            raise WrongFlowClass(
                f"{self.spec.channel_id}: data channel used for control")
        target = signal.target_pe or (self.subscribers[0] if self.subscribers else "")
        if target not in self.subscribers:
            raise UnknownTarget(f"{self.spec.channel_id}: no subscriber {target!r}")
        self.pending_signals[(target, signal.kind.value)] = signal
        return "staged"

    def take_signals(self, subscriber: str) -> list[ControlSignal]:
        keys = [k for k in self.pending_signals if k[0] == subscriber]
        out = [self.pending_signals.pop(k) for k in keys]
        return out

    # -- accounting ----------------------------------------------------------

    def queued_count(self) -> int:
        return sum(len(q) for q in self.queues.values()) + len(self.blocked)

    def conservation(self) -> dict[str, int]:
        delivered = sum(s.delivered for s in self.stats.values())
        shed = sum(s.shed for s in self.stats.values())
        return {
            "published": self.published,
            "routed_copies": self.routed_copies,
            "delivered": delivered,
            "shed": shed,
            "queued": self.queued_count(),
        }

    def conservation_ok(self) -> bool:
        c = self.conservation()
        return c["routed_copies"] == c["delivered"] + c["shed"] + c["queued"]

    def residual_lineages(self) -> list[frozenset[str]]:
        out = [item.lineage for q in self.queues.values() for _, item in q]
        out.extend(item.lineage for _, item in self.blocked)
        return out


def export_shed_csv(records: list[ShedRecord]) -> str:
    lines = [ShedRecord.CSV_HEADER]
    lines.extend(r.csv_row() for r in records)
    return "\n".join(lines) + "\n"
