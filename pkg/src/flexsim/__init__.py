"""Hybrid switched-circuit simulation with a variable-order Taylor integrator."""

from .circuit import Element, Netlist, TopologyCache, compile_topology
from .hybrid import HybridSystem, NonlinearBlock, TopologyMatrices
from .integrator import RunStats, SimulationRun, integrate
from .sources import EventSchedule, SourceSet, SourceWaveform, pwm_schedule
from .taylor import StepController
from .waveform import Waveform

__all__ = [
    "Element", "EventSchedule", "HybridSystem", "Netlist", "NonlinearBlock",
    "RunStats", "SimulationRun", "SourceSet", "SourceWaveform", "StepController",
    "TopologyCache", "TopologyMatrices", "Waveform", "compile_topology", "integrate",
    "pwm_schedule",
]
__version__ = "0.1.0"
