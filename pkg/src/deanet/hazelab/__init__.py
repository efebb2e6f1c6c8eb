"""Synthetic haze, image I/O and full-reference quality metrics."""

from deanet.hazelab.haze import HazeParams, gen_depth, procedural_clean, synthesize_haze
from deanet.hazelab.metrics import psnr, ssim
from deanet.hazelab.ppm import ImageBuffer, PPMError, read_ppm, write_ppm

__all__ = [
    "HazeParams",
    "ImageBuffer",
    "PPMError",
    "gen_depth",
    "procedural_clean",
    "psnr",
    "read_ppm",
    "ssim",
    "synthesize_haze",
    "write_ppm",
]
