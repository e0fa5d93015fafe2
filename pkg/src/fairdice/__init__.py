"""FairDICE: offline multi-objective RL with learned fairness weights."""

__version__ = "0.1.0"
