"""NLOS radar imaging through passive modular reflectors."""

from ._nlosimg import (
    Image,
    RunReport,
    Scenario,
    bundled_scenarios,
    nf_resolution,
    run_oracle,
    run_sweep,
)

__all__ = [
    "Image",
    "RunReport",
    "Scenario",
    "bundled_scenarios",
    "nf_resolution",
    "run_oracle",
    "run_sweep",
]
