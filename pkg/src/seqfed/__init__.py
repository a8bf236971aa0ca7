"""Federated split learning on sequentially partitioned data.

Sequences whose consecutive time-step segments live on different clients are
trained by chaining per-segment recurrent sub-networks: only hidden-state
activations flow forward across client boundaries and only state gradients
flow back, while a server aggregates the per-position sub-networks each round.
"""

from .cells import CellKind, RecurrentState, SubNetworkParams
from .fed import IdBank, RoundConfig
from .harness import RunSpec, run

__all__ = ["CellKind", "RecurrentState", "SubNetworkParams", "IdBank",
           "RoundConfig", "RunSpec", "run"]
