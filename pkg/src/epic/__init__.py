"""Anchor-video machinery for camera-controlled video diffusion.

Submodules:
    geometry     camera models, pose algebra, (un)projection, mask dilation
    visibility   flow-traced visibility masks and masked anchor videos
    artifacts    dashed-ray artifact injection for training anchors
    render       point-cloud anchor rendering
    fusion       toy-scale control block, mask pooling and latent fusion
    metrics      RotErr / TransErr / CamMC camera metrics
    synth        synthetic scene oracle
    io           file formats
"""

__version__ = "0.1.0"
