"""Downwash-aware formation-change trajectory planning for quadrotor teams.

Pipeline: a discrete stage finds a makespan-minimal collision-free plan on a
grid via a time-expanded flow graph and an ILP, and a continuous stage turns
that plan into smooth piecewise Bezier trajectories confined to per-robot
safe corridors, refined iteratively.
"""

__version__ = "0.1.0"
