"""Figure rendering for the scheduling simulator's CSV artifacts.

Pure post-processing: consumes ``summary.csv`` and ``trace_*.csv`` files as
published by the simulator's command line and renders the five standard
figures.  Nothing here imports simulator internals.
"""

from .io import ContractError, read_summary, read_trace, sample_dir
from .figures import FIGURES, render

__all__ = [
    "ContractError",
    "FIGURES",
    "read_summary",
    "read_trace",
    "render",
    "sample_dir",
]
