"""
A small synthetic world
=======================

Generate a short trajectory, look at how strongly each target variable is
tied to the instantaneous base fields, and store one field on disk.
"""

import tempfile
from pathlib import Path

import numpy as np

from latenthead import synthworld as sw
from latenthead.tensor_core import read_tensor, write_tensor

# a 16 x 32 grid is enough to see the structure; the desk default is 32 x 64
config = sw.WorldConfig(H=16, W=32, n_steps=200, n_train=150, n_val=25, spinup=50)
ds = sw.generate(config)
print("variables:", sorted(ds.fields))
print("land fraction: %.2f" % ds.land_mask.mean())

# how much of each target can a quadratic regression on the base fields explain?
t = np.arange(20, 120)
feats = sw.base_features(*(ds.fields[v][t] for v in sw.BASE_VARS))
for v in sw.TARGET_VARS:
    y = ds.fields[v][t]
    if v in sw.LAND_ONLY:
        land = ds.land_mask > 0
        r2 = sw.explained_variance(y[:, land], [f[:, land] for f in feats])
    else:
        r2 = sw.explained_variance(y, feats)
    print(f"{v:14s} R^2 on base features: {r2:.2f}")

# storage integrates precipitation over time, so it barely follows the
# current state; evaporation is almost a closed-form function of it.

# the coupling of storage to the base state is a config knob
tight = sw.generate(sw.with_overrides(config, coupling={"storage_like": 0.9}))
land = tight.land_mask > 0
y = tight.fields["storage_like"][t][:, land]
f = sw.base_features(*(tight.fields[v][t] for v in sw.BASE_VARS))
print("storage R^2 with coupling 0.9: %.2f" % sw.explained_variance(y, [a[:, land] for a in f]))

# fields round-trip through the binary tensor format bit for bit
with tempfile.TemporaryDirectory() as d:
    p = Path(d) / "precip.lht"
    write_tensor(p, ds.fields["precip_like"][:10])
    back = read_tensor(p)
    print("round trip exact:", back.tobytes() == ds.fields["precip_like"][:10].tobytes())
