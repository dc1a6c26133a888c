"""Planar legged-manipulator workbench.

A desk-scale stack for learning explicit end-effector force control on a
legged robot with an arm: planar rigid-body simulation, a virtual
spring-damper force-field training task, PPO with a concurrent privileged
state estimator, impedance/compliance layers on top of the trained policy,
scripted evaluation suites, and a real-time teleoperation service.
"""

__version__ = "0.1.0"
