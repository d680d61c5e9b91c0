# Regenerates ssim.json with scikit-image as the reference implementation.
import json
import numpy as np
from skimage.metrics import structural_similarity

rng = np.random.default_rng(7)
cases = []


def add(name, a, b):
    kw = dict(gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0)
    if a.ndim == 3:
        kw["channel_axis"] = -1
    s = structural_similarity(a, b, **kw)
    shape = list(a.shape) if a.ndim == 3 else list(a.shape) + [1]
    cases.append({"name": name, "shape": shape, "a": a.ravel().tolist(), "b": b.ravel().tolist(), "ssim": float(s)})


a = rng.random((16, 16))
add("gray_uniform_noise", a, np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1))
add("gray_independent", rng.random((16, 16)), rng.random((16, 16)))
y, x = np.mgrid[0:24, 0:20] / 20.0
add("gray_ramp_vs_shifted", y * x, np.clip(y * x + 0.2 * np.sin(6 * x), 0, 1))
c = rng.random((20, 20, 3))
add("color_blur", c, (c + np.roll(c, 1, axis=0) + np.roll(c, 1, axis=1)) / 3.0)

with open("ssim.json", "w") as f:
    json.dump(cases, f)
