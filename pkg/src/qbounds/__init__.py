"""Double-sided bounds on optimal Q-functions of composed and transformed tasks.

Modules: ``mdp`` (tabular MDPs and solvers), ``transfer`` (transfer
functions), ``conditions`` (numerical classification), ``bounds`` (bounds and
regret certificates), ``envs`` (gridworlds), ``learn`` (clipped Q-learning)
and ``harness`` (configs, sweeps, CLI).
"""

__version__ = "0.1.0"
