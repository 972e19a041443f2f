"""Simulator for randomized continuous tracking of count, frequency and rank
over k distributed streams, with exact communication accounting."""
from .baselines import DetCount, PrioritySample
from .count import CountTracking, FixedPCount, median_boost
from .freq import FreqTracking
from .rank import RankTracking
from .sim import CommStats, Message, ProtocolError, recount, run_simulation
from .workloads import Workload, make_workload

__all__ = [
    "CommStats", "CountTracking", "DetCount", "FixedPCount", "FreqTracking", "Message",
    "PrioritySample", "ProtocolError", "RankTracking", "Workload", "make_workload",
    "median_boost", "recount", "run_simulation",
]
__version__ = "0.1.0"
