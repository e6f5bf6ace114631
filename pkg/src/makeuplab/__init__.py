"""Parametric makeup rendering and single-image inverse parameter estimation.

The package renders lipstick / eye-shadow onto portrait images from a compact
7-component material vector (opacity, RGB color, gloss amount, gloss
roughness, reflection intensity), and learns the inverse map: estimating that
vector from one example image so the same makeup can be reproduced on any
source image or video.

Keep this module import-light: the CLI entry point tunes BLAS thread
environment variables before numpy is first imported.
"""

__version__ = "0.1.0"
