"""Netlist parsing and the nodal circuit solver."""
from .netlist import (
    GROUND,
    Capacitor,
    CurrentSource,
    Mosfet,
    Netlist,
    NetlistError,
    Resistor,
    Stimulus,
    VoltageSource,
    dexp_peak,
    eval_stimulus,
    netlist_to_text,
    parse_netlist,
)
from .mna import (
    Circuit,
    ConvergenceError,
    ModelLibrary,
    OperatingPoint,
    SimOptions,
    SimulationError,
    SingularCircuitError,
    TransientResult,
    solve_dc,
    solve_transient,
)
