import numpy as np
import pytest
import torch
from skimage import data as skdata
from skimage.transform import resize

from didface.data import synthetic_faces

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def faces():
    return synthetic_faces(8, size=64, seed=11)


@pytest.fixture(scope="session")
def natural():
    """A photographic 64x64 test image in [-1, 1]."""
    img = resize(skdata.astronaut(), (64, 64), anti_aliasing=True)
    return (img * 2.0 - 1.0).astype(np.float32)


@pytest.fixture(scope="session")
def natural_corpus():
    names = ["astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry", "retina", "cat", "colorwheel"]
    out = []
    for n in names:
        img = getattr(skdata, n)()
        if img.ndim == 2:
            img = np.stack([img] * 3, -1)
        img = resize(img[..., :3], (64, 64), anti_aliasing=True)
        out.append((img * 2.0 - 1.0).astype(np.float32))
    return np.stack(out)
