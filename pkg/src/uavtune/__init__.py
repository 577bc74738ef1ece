"""Multi-task Bayesian optimization for tuning decentralized multi-UAV trajectory generation.

The package couples three layers:

* Gaussian-process machinery (:mod:`uavtune.gp`, :mod:`uavtune.mtgp`,
  :mod:`uavtune.acquisition`) driving the tuning loops in
  :mod:`uavtune.engine`.
* The tunable system itself: piecewise Bezier trajectories
  (:mod:`uavtune.trajectory`), an anytime sequential-convexification
  planner (:mod:`uavtune.planner`) and a multi-UAV mission simulator
  (:mod:`uavtune.sim`) that acts as the black-box objective.
* A FastAPI service (:mod:`uavtune.service`) wrapping campaigns and
  evaluation sweeps as jobs, with :mod:`uavtune.cli` as a thin client.
"""

__version__ = "0.1.0"
