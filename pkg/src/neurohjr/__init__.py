"""Neural approximation of Hamilton-Jacobi reachability for 2D obstacle avoidance.

Modules: :mod:`core` (geometry and environments), :mod:`gridhjr` (grid level-set
solver and baseline controller), :mod:`neuralnet` (two-headed MLP with
hand-written double backprop), :mod:`trainer`, :mod:`simulator`, :mod:`config`
and :mod:`cli`.
"""

__version__ = "0.1.0"
