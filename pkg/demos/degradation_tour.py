"""
Degradation tour
================

Generate a few synthetic faces, push each one through the blur / resample /
noise / JPEG chain at increasing severity and print how PSNR and SSIM fall.
Images are written to ``degradation_tour/`` for a look by eye.
"""

from pathlib import Path

import numpy as np

from didface.data import synthetic_faces, write_image_dir
from didface.degradation import DegradationParams, degrade
from didface.metrics import psnr, ssim

faces = synthetic_faces(4, size=64, seed=3)
out = Path("degradation_tour")

# (blur sigma, down-scale, noise sigma, jpeg quality), mild to severe
levels = [(1.0, 1.0, 0.0, 100), (2.0, 2.0, 5.0, 90), (4.0, 4.0, 10.0, 75), (8.0, 8.0, 20.0, 60)]

for k, (b, r, n, q) in enumerate(levels):
    params = DegradationParams(b, r, n, q, seed=k)
    lq = np.stack([degrade(img, params) for img in faces])
    p = np.mean([psnr(a, h) for a, h in zip(lq, faces)])
    s = np.mean([ssim(a, h) for a, h in zip(lq, faces)])
    print(f"blur {b:4.1f}  scale {r:3.1f}  noise {n:4.1f}  q {q:3d}   psnr {p:5.2f} dB  ssim {s:.3f}")
    write_image_dir(out / f"level{k}", lq)

write_image_dir(out / "hq", faces)
