"""trav-nav-sim: traction estimation, self-supervised BEV traversability maps and sampling MPC in a synthetic world."""

__version__ = "1.0.0"
