"""Reference SSIM values for the acceptance suite, computed with scikit-image.

Images are built from a stateless splitmix64 hash so the Rust side can
reproduce them exactly.
"""

import numpy as np
from skimage.metrics import structural_similarity

MASK = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return x ^ (x >> 31)


def unit(pair, x, y, c, salt):
    key = (pair << 40) | (y << 24) | (x << 8) | (c << 2) | salt
    return (splitmix64(key) >> 11) * 2.0**-53


def pair(k):
    w, h = 16 + k, 14 + 2 * k
    mix = 0.1 * (k + 1)
    a = np.zeros((h, w, 3))
    b = np.zeros((h, w, 3))
    for y in range(h):
        for x in range(w):
            for c in range(3):
                u = unit(k, x, y, c, 0)
                r = unit(k, x, y, c, 1)
                a[y, x, c] = u
                b[y, x, c] = (1.0 - mix) * u + mix * r
    return a, b


for k in range(10):
    a, b = pair(k)
    s = structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0, channel_axis=2
    )
    print(f"{float(s)!r},")
