"""Hierarchical energy management for an EV fast-charging station with
PV and battery storage: day-ahead LP, intraday QP refinement and a
real-time Stackelberg-game ADMM between the station and the EVs."""

from .config import StationConfig, load_config
from .scenario import Scenario, load_scenario

__all__ = ["StationConfig", "Scenario", "load_config", "load_scenario"]
__version__ = "0.1.0"
