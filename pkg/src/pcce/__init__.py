"""pcce: point cloud color enhancement via 2D attribute-map restoration.

Pipeline: project a voxelized cloud to occupancy/geometry/attribute maps,
pad the background, simulate attribute compression at a chosen QP, enhance
the degraded map with a lightweight U-Net, back-project the result onto the
original geometry, and score with 2D/3D Y-PSNR.
"""

__version__ = "0.1.0"

ATLAS_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1
