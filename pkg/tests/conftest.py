import numpy as np
import pytest

from pinna.losses import LandmarkSet2D
from pinna.morphable import build_standin_shape_model, build_standin_texture_model


@pytest.fixture(scope="session")
def shape_model():
    return build_standin_shape_model(seed=0)


@pytest.fixture(scope="session")
def texture_model():
    return build_standin_texture_model(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_landmark_set(rng, center=(100.0, 100.0), spread=20.0) -> LandmarkSet2D:
    groups = (np.arange(0, 20), np.arange(20, 35), np.arange(35, 47), np.arange(47, 55))
    pts = rng.normal(size=(55, 2)) * spread + np.asarray(center)
    return LandmarkSet2D(pts, groups)


def straight_contour_set(offsets=None) -> LandmarkSet2D:
    """Four parallel horizontal polylines; optional per-point tangential offsets."""
    groups = (np.arange(0, 20), np.arange(20, 35), np.arange(35, 47), np.arange(47, 55))
    pts = np.empty((55, 2))
    for gi, g in enumerate(groups):
        xs = np.linspace(0.0, 100.0, len(g))
        pts[g, 0] = xs
        pts[g, 1] = 10.0 * gi
    if offsets is not None:
        pts = pts + offsets
    return LandmarkSet2D(pts, groups)
