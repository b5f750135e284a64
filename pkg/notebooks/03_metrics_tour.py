"""
Verification metrics on toy fields
==================================

Each score reacts to a different kind of error.  A shifted rain band, a
blurred one and a blocky one make that visible.
"""

import numpy as np

from latenthead import metrics as me
from latenthead.tensor_core import lat_weights, regular_grid

H, W, P = 32, 64, 4
lats, lons = regular_grid(H, W)
w = lat_weights(lats)
rng = np.random.default_rng(0)

# a rain band along a wavy line
y, x = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
centre = H / 2 + 4 * np.sin(2 * np.pi * x / W)
ref = 20.0 * np.exp(-0.5 * ((y - centre) / 2.0) ** 2) * rng.gamma(2.0, 0.5, (H, W))

shifted = np.roll(ref, 3, axis=0)
kernel = np.ones(5) / 5
blurred = np.apply_along_axis(lambda r: np.convolve(np.r_[r[-2:], r, r[:2]], kernel, "valid"), 1, ref)
blocky = np.kron(ref.reshape(H // P, P, W // P, P).mean(axis=(1, 3)), np.ones((P, P)))
# exactly flat blocks make the interior jumps vanish; real heads leave a little texture
blocky = blocky + 0.05 * ref.std() * rng.standard_normal((H, W))

# a climatology for SEEPS from noisy copies of the reference
clim = me.SeepsClimatology.from_series(ref * rng.gamma(1.0, 1.0, (200, H, W)))

print(f"{'':8s} {'rmse':>6s} {'pcc':>6s} {'w1':>6s} {'fss@1':>6s} {'seeps':>6s} {'patchy':>6s}")
for name, pred in [("shifted", shifted), ("blurred", blurred), ("blocky", blocky)]:
    print(f"{name:8s} {me.rmse(pred, ref, w):6.2f} {me.pcc(pred, ref):6.2f} {me.w1(pred, ref):6.2f} "
          f"{me.fss(pred, ref, 1.0, 11):6.2f} {me.seeps(pred, ref, clim, w):6.2f} "
          f"{me.patchiness(pred, ref, P):6.2f}")

# the displaced band keeps its distribution, so W1 is zero while RMSE is not.
# blurring spreads light rain around, which FSS at a low threshold forgives
# and patchiness does not see; the block field is flagged by patchiness.

spec_ref = me.energy_spectrum(ref, w)
spec_blur = me.energy_spectrum(blurred, w)
print("high-wavenumber energy kept by the blur: %.2f" % (spec_blur[16:].sum() / spec_ref[16:].sum()))
