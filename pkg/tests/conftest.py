import numpy as np
import pytest

from p2mx import autodiff as ad
from p2mx import camera as C


def make_ring_views(k, size=8, channels=(2, 3, 4), seed=0, radius=2.2, elevation=0.4):
    """K posed views on a camera ring with random feature pyramids."""
    rng = np.random.default_rng(seed)
    intr = C.CameraIntrinsics(fx=0.8 * size, fy=0.8 * size,
                              cx=(size - 1) / 2, cy=(size - 1) / 2,
                              width=size, height=size)
    views = []
    for i in range(k):
        angle = 2 * np.pi * i / k
        eye = np.array([radius * np.cos(angle), radius * np.sin(angle), elevation])
        ext = C.look_at(eye, np.zeros(3))
        pyramid = [ad.tensor(rng.uniform(size=(c, size // s, size // s)))
                   for c, s in zip(channels, (1, 2, 4))]
        views.append(C.View(intrinsics=intr, extrinsics=ext, pyramid=pyramid, strides=(1, 2, 4)))
    return views


@pytest.fixture
def ring_views():
    return make_ring_views
