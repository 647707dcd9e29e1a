"""Image-space building blocks: regularizers, Canny edges, quality metrics."""

import numpy as np

from gradlab.imaging import (CannyParams, canny_edges, gt_baseline_point,
                             mse, psnr, r_canny, r_mean, r_tv,
                             reconstruction_baseline_point, square_image, ssim)
from gradlab.tensor import Tensor

# --- smoothness penalty -----------------------------------------------------

flat = Tensor(np.full((1, 8, 8), 0.6))
checker = Tensor(np.indices((8, 8)).sum(axis=0)[None] % 2 * 1.0)
print("smoothness penalty: flat image", r_tv(flat).item(),
      "| checkerboard", round(r_tv(checker).item(), 3))

# --- channel-mean penalty ----------------------------------------------------

img = Tensor(np.full((1, 8, 8), 0.7))
print("channel-mean penalty vs reference 0.5:", round(r_mean(img, [0.5]).item(), 4),
      "(expect (0.2)^2 = 0.04)")

# --- Canny edges on a synthetic square ---------------------------------------

sq = square_image(24, 6, 12)
edges = canny_edges(sq, CannyParams())
print(f"\nCanny on a bright square: {len(edges)} edge pixels")
grid = [["." for _ in range(24)] for _ in range(24)]
for r, c in edges:
    grid[r][c] = "#"
print("\n".join("".join(row) for row in grid[3:22]))

scaled = canny_edges(sq * 2.0, CannyParams())
print("edge set unchanged under 2x contrast:", edges == scaled)

# --- subject baseline point and the edge-position penalty --------------------

g1 = np.zeros(16)
g1[2 * 4 + 1] = 100.0       # one strong coordinate at grid (2, 1) of 4x4
point = gt_baseline_point(g1, (24, 24))
print("\ngradient-derived baseline point:", point)
print("candidate's middle edge pixel:", reconstruction_baseline_point(sq))
print("edge-position penalty:", r_canny(sq, point))

# --- fidelity metrics ---------------------------------------------------------

rng = np.random.default_rng(0)
clean = sq
noisy = np.clip(sq + rng.normal(0, 0.05, sq.shape), 0, 1)
print("\nmetrics clean vs noisy copy:")
print("  MSE ", round(mse(clean, noisy), 5))
print("  PSNR", round(psnr(clean, noisy), 2), "dB")
print("  SSIM", round(ssim(clean, noisy), 4))
print("metrics clean vs itself: PSNR", psnr(clean, clean), " SSIM", ssim(clean, clean))
