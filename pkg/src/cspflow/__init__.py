"""cspflow: crowd-augmented stream processing at desk scale.

Build topologies of automatic and crowd-backed processing elements joined by
bounded channels, run them deterministically in virtual time (or live against
human annotators over HTTP), and measure latency, throughput, load
adaptability, cost, and classification quality.
"""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    Behavior,
    ControlSignal,
    DataItem,
    PEKind,
    PortDirection,
    PortSpec,
    ProcessingElementSpec,
    Role,
    SignalKind,
    Topology,
    build_topology,
    classify_pe,
    load_topology,
    step_pe,
    validate_topology,
)
from .channels import (  # noqa: F401
    Channel,
    ChannelSpec,
    FlowClass,
    Modality,
    ShedPolicy,
    ShedRecord,
)
from .engine import Engine, RunResult, SourceFeed  # noqa: F401
from .metrics import EventLog, MetricsRecord, flow_conservation  # noqa: F401
