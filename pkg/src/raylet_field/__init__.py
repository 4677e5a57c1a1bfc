"""Raylet distance fields: ray-distance prediction from point clouds and 3D Gaussians."""

from .errors import *  # noqa: F401,F403
from .fusion import TriangleMesh, TsdfVolume, extract_mesh, integrate
from .metrics import MeshMetrics, RayMetrics, mesh_metrics, ray_metrics, scale_align
from .render import DepthMap, NormalMap, render_distance, render_normals
from .sampling import SceneModel, TileIndex, build_tile_index
from .scene import Camera, Gaussian, GaussianSet, PointCloud, Ray, Raylet, generate_ray

__version__ = "0.1.0"
