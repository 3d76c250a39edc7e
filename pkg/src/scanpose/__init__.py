"""Multi-view 3D pose estimation on synthetic camera rigs.

Joint-token hypotheses are refined layer by layer: project current 3D
keypoints into every view, aggregate deformable bilinear samples around the
anchors, run bidirectional selective state-space scans over the sampled
token sequence, and re-triangulate from offset-corrected 2D positions with
predicted confidences. Training, metrics, and a synthetic multi-camera scene
generator are included; see the cli module for the batch front-end.
"""

__version__ = "0.1.0"
