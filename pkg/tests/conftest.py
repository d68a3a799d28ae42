"""Shared synthetic scenarios and helpers for the test suite."""

import numpy as np
import pytest
import scipy.ndimage as ndi

from qis.grid import BinaryMask, DeformationField, ScalarField, identity_deformation


def disk(h, w, cy, cx, r):
    ys, xs = np.mgrid[0:h, 0:w]
    return ((ys - cy + 0.5) ** 2 + (xs - cx + 0.5) ** 2 <= r * r)


def ellipse(h, w, cy, cx, ry, rx):
    ys, xs = np.mgrid[0:h, 0:w]
    return (((ys - cy + 0.5) / ry) ** 2 + ((xs - cx + 0.5) / rx) ** 2 <= 1.0)


def smooth_random_field(h_pixels, w_pixels, amplitude, sigma, seed):
    """Identity plus a band-limited random displacement, scaled to `amplitude`."""
    rng = np.random.RandomState(seed)
    pert = np.stack([ndi.gaussian_filter(rng.randn(h_pixels + 1, w_pixels + 1), sigma)
                     for _ in range(2)], axis=-1)
    pert *= amplitude / np.abs(pert).max()
    return DeformationField(identity_deformation(h_pixels, w_pixels).vectors + pert)


def taco_scene(size=256):
    """Plate disk with a taco ellipse on it; template slightly off-center.

    Step 0 segments taco+plate (their union is the fidelity argmin); one
    negative click on the visible plate ring should leave just the taco.
    """
    s = size / 256.0
    plate = disk(size, size, size // 2, size // 2, 85 * s)
    taco = ellipse(size, size, size // 2, size // 2, 35 * s, 60 * s)
    img = np.full((size, size), 20.0)
    img[plate] = 190.0
    img[taco] = 110.0
    template = BinaryMask(disk(size, size, int(125 * s), int(125 * s), 90 * s).astype(np.uint8))
    return {
        "image": ScalarField(img),
        "template": template,
        "truth": BinaryMask(taco.astype(np.uint8)),
        "union": BinaryMask(plate.astype(np.uint8)),
        "neg_click": (size // 2, int(50 * s)),
    }


def knife_scene(size=256):
    """A bright knife bar crossed by a dimmer fork bar drawn underneath it.

    The visible fork splits into two stubs, so excluding it takes one
    negative click per stub.
    """
    knife = np.zeros((size, size), dtype=bool)
    knife[118:139, 30:231] = True
    forkbar = np.zeros((size, size), dtype=bool)
    forkbar[30:231, 118:139] = True
    fork = forkbar & ~knife
    img = np.zeros((size, size))
    img[fork] = 115.0
    img[knife] = 240.0
    return {
        "image": ScalarField(img),
        "template": BinaryMask(disk(size, size, 128, 128, 110).astype(np.uint8)),
        "truth": BinaryMask(knife.astype(np.uint8)),
        "fork": fork,
        "cross": BinaryMask((knife | fork).astype(np.uint8)),
        "clicks": [(128, 60), (128, 196)],
    }


def circle_scene(size=128, noise_sigma=0.0, seed=7):
    truth = disk(size, size, size // 2, size // 2, int(0.22 * size))
    img = np.where(truth, 200.0, 50.0)
    if noise_sigma > 0:
        img = img + np.random.RandomState(seed).normal(0.0, noise_sigma, img.shape)
    template = disk(size, size, size // 2 - 6, size // 2 - 8, int(0.16 * size))
    return {
        "image": ScalarField(img),
        "template": BinaryMask(template.astype(np.uint8)),
        "truth": BinaryMask(truth.astype(np.uint8)),
    }


def blob_scene(size=96):
    """Small positive-click scenario: bright square A, dim square B below it.

    Step 0 segments A alone; a positive click on B extends the mask over B.
    """
    img = np.zeros((size, size))
    a_sq = np.zeros((size, size), dtype=bool)
    a_sq[20:61, 20:61] = True
    b_sq = np.zeros((size, size), dtype=bool)
    b_sq[61:81, 25:55] = True
    img[a_sq] = 200.0
    img[b_sq] = 60.0
    template = np.zeros((size, size), dtype=np.uint8)
    template[24:57, 24:57] = 1
    return {
        "image": ScalarField(img),
        "template": BinaryMask(template),
        "a": a_sq,
        "b": b_sq,
        "truth": BinaryMask((a_sq | b_sq).astype(np.uint8)),
        "pos_click": (40, 70),
    }


@pytest.fixture(scope="session")
def blob_session():
    from qis.session import init_session

    scene = blob_scene()
    state = init_session(scene["image"], scene["template"])
    return scene, state


@pytest.fixture(scope="session")
def taco_session():
    from qis.session import init_session

    scene = taco_scene()
    state = init_session(scene["image"], scene["template"])
    return scene, state
