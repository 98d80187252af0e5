"""DTM-constrained camera pose and ego-motion estimation fused with an INS.

Modules
-------
dtm          bilinear terrain grid, ray casting, ASCII grid I/O
camera_geom  pinhole geometry, projection operators, tangent-plane depth
pose_solver  12-parameter residual system and GN / LM solver
ins          Euler / DCM kinematics and strapdown propagation
ekf          15-state error-state Kalman filter
sim          synthetic scenarios, closed loop, Monte Carlo, CSV output
config       scenario configuration files
cli          command-line entry point
"""

__version__ = "0.1.0"
