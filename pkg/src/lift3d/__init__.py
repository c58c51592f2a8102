"""Self-supervised temporal lifting of 2D keypoints to 3D poses from a calibrated multi-camera rig."""

from .errors import Lift3DError
from .skeleton import JointSet, Pose2D, Pose3D, Sequence2D, Sequence3D, default_joint_set

__version__ = "0.1.0"

__all__ = ["Lift3DError", "JointSet", "Pose2D", "Pose3D", "Sequence2D", "Sequence3D",
           "default_joint_set", "__version__"]
