"""Dense multi-view pointmap SLAM at desk scale.

Frontend: covisibility-driven candidate retrieval, information-gain
re-ranking, chi-square-gated adaptive window sizing, and joint Sim(3)
window optimization over hybrid ray/projection residuals. Backend:
descriptor-based loop retrieval and global Sim(3) pose-graph optimization.
Pointmap inputs come from pluggable providers (synthetic oracle or depth
replay) instead of a neural network.
"""

from .geometry import Sim3, PinholeIntrinsics, sim3_exp, sim3_log

__all__ = ["Sim3", "PinholeIntrinsics", "sim3_exp", "sim3_log"]

__version__ = "0.1.0"
