"""texwarp: texture/deformation disentanglement with multi-domain
attribute transfer on the pose-free texture.

Pipeline: an intrinsic deforming autoencoder factors an image into
texture (shading * albedo) and a monotone warp grid; a label-conditioned
generator edits attributes on the texture; the edited texture is warped
back into image space. Includes the staged trainer and the
verification/classification evaluation harness.
"""

from . import data, dae, evaluation, gan, identity, train, warp

__all__ = ["data", "dae", "evaluation", "gan", "identity", "train", "warp"]
__version__ = "0.1.0"
