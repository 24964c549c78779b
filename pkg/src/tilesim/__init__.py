"""Discrete-event performance simulator for DL training and inference on tiled accelerators."""

from .architecture import HardwareConfig, NodeId, Topology, load_hardware
from .engine import DeadlockError, Simulator
from .errors import CapacityError, ConfigError
from .network import Network, NetworkMode
from .parallelism import ParallelismPlan, Schedule, load_plan, parse_plan
from .report import SimReport, build_report
from .scheduler import SimOptions, run_inference, run_training, simulate
from .workload import ComputationGraph, Mode, OperatorSpec, OpKind, SplitDegrees, load_workload, parse_workload

__all__ = [
    "CapacityError", "ComputationGraph", "ConfigError", "DeadlockError", "HardwareConfig", "Mode", "Network",
    "NetworkMode", "NodeId", "OpKind", "OperatorSpec", "ParallelismPlan", "Schedule", "SimOptions", "SimReport",
    "Simulator", "SplitDegrees", "Topology", "build_report", "load_hardware", "load_plan", "load_workload",
    "parse_plan", "parse_workload", "run_inference", "run_training", "simulate",
]
__version__ = "0.1.0"
