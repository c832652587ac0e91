"""Learning MPC safety constraints from directional corrections.

The toolkit couples a log-barrier MPC planner with a cutting-plane update
of a constraint-parameter hypothesis space: every directional correction
removes a half-space pair, and the next parameter is the center of the
maximum-volume ellipsoid inscribed in what remains.
"""

__version__ = "0.1.0"
