"""Topology-aware non-rigid registration of oriented point clouds."""

from .geometry import Keypoints, OrientedPointCloud, RigidTransform, SpatialIndex
from .warp import DeformationGraph, DenseWarp, build_graph, invert_rebase
from .icp import IcpConfig, RegistrationError, register, register_bidirectional
from .topology import TopologyConfig, TopologyEvent, topology_aware_register

__version__ = "0.1.0"
