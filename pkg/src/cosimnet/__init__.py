"""cosimnet: network-impairment co-simulation for distributed controllers.

A virtual switch with per-link delay, jitter, loss and bandwidth effects,
usable on a deterministic virtual clock or as a real-time UDP proxy; an
echo round-trip benchmark; a fleet of consensus-coordinated energy-storage
charging controllers simulated over the impaired network; and MAPE /
percentage-difference metrics to quantify how network conditions degrade
control performance.
"""

from .echo import (
    AllLost,
    BindFailure,
    EchoConfig,
    EchoServer,
    LatencyStats,
    ResponseTimeSample,
    run_echo_server,
    run_event_echo,
    run_sender,
    summarize,
)
from .esm import (
    ConfigError,
    ControlMessage,
    EsmParams,
    EsmState,
    NOT_SETTLED,
    OverlayTopology,
    PulseEvent,
    ScenarioRun,
    SimSetup,
    compute_charge_setpoint,
    consensus_update,
    oscillation_count,
    run_scenario,
    settling_time,
    step_soc,
)
from .links import (
    DelayQueue,
    InFlightPacket,
    Link,
    LinkSpec,
    compute_serialization_delay,
)
from .metrics import (
    ComparisonReport,
    LabelMismatch,
    NoOverlap,
    TimeSeries,
    TraceBundle,
    ZeroMidpointSample,
    ZeroReferenceSample,
    align,
    avg_abs_pd,
    avg_pd,
    compare_runs,
    mape,
)
from .realtime import PortBinding, RealtimeProxy, run_realtime_proxy
from .scenario import (
    ParseError,
    Scenario,
    ValidationError,
    parse_scenario,
    read_soc_csv,
    run_replicates,
    write_soc_csv,
)
from .switch import (
    BROADCAST,
    DeliveryRecord,
    Frame,
    NodeAddress,
    PortSpec,
    SwitchConfig,
    UnknownDestination,
    VirtualSwitch,
    run_event_mode,
)

__version__ = "0.1.0"
