"""MR-to-X-ray projection image synthesis toolkit.

Pipeline stages: procedural head phantom -> cone-beam forward projection
-> generator training (U-net / residual / cascaded refinement, l1 or
perceptual loss) -> MSE/SSIM/PSNR evaluation. Every stage is also
reachable from the ``projsynth`` command line tool.
"""

__version__ = "0.1.0"
