"""The shipped structured test image and its generator.

The fixture mixes content at four scales: a DC offset (keeps latent means
well away from zero so mean-ratio renormalization stays conditioned), a
6-pixel checkerboard (decays steadily under codec round-trips for a dozen
passes, driving sustained drift growth), a long-wavelength sine product
(survives blurring), a fine 2-pixel checker (dies in one pass, so the first
round-trip error is substantial), and a horizontal ramp.  Two binomial
smoothing passes give it the softness of a photographed scene.
"""

from __future__ import annotations

import importlib.resources

import numpy as np

from .codec import blur_grid
from .grid import LatentGrid, read_grid

FIXTURE_H = 36
FIXTURE_W = 36
FIXTURE_NAME = "fixture.grid"


def structured_fixture() -> LatentGrid:
    """Generate the fixture deterministically from its closed-form recipe."""
    yy, xx = np.meshgrid(np.arange(FIXTURE_H), np.arange(FIXTURE_W), indexing="ij")
    g = np.full((FIXTURE_H, FIXTURE_W), 1.5)
    g += 1.8 * ((xx // 6 + yy // 6) % 2 * 2 - 1.0)
    g += 1.8 * np.sin(2.0 * np.pi * xx / 40.0 + 0.7) * np.sin(2.0 * np.pi * yy / 40.0 + 1.1)
    g += 0.6 * ((xx // 2 + yy // 2) % 2 * 2 - 1.0)
    g += 0.5 * (2.0 * xx / (FIXTURE_W - 1) - 1.0)
    fixture = LatentGrid(g[:, :, None])
    for _ in range(2):
        fixture = blur_grid(fixture)
    return fixture


def fixture_path() -> str:
    """Filesystem path of the shipped fixture grid file."""
    return str(importlib.resources.files("latentedit").joinpath("data", FIXTURE_NAME))


def load_fixture() -> LatentGrid:
    """Read the shipped fixture; identical to ``structured_fixture()``."""
    return read_grid(fixture_path())
