"""Joint self-supervised 2D/3D feature learning from meshes.

Meshes are turned into shaded multi-view renders and farthest-point-sampled
point clouds; an image CNN, a point-cloud graph network and a small fusion
classifier are trained together with a triplet loss over views and a
same-object classification loss across modalities.
"""

__version__ = "0.1.0"
