"""keylift: diffusion-based lifting of 2D robot keypoints to 3D.

Pipeline: synthetic 2D detections -> normalized camera coordinates ->
conditional 3D keypoint generation (VP-SDE diffusion) -> joint-angle
regression -> forward kinematics -> robust rigid pose fitting.
"""

__version__ = "0.1.0"
