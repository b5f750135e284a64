"""
Decoder heads on a frozen backbone versus full fine-tuning
==========================================================

Pretrain a tiny backbone, then adapt it to the four target variables two
ways.  Small heads on the frozen latent are cheap and do well when a target
is a function of the current state.  Storage is weakly coupled to that state,
and only fine-tuning, which feeds the variable's own history back in, can
recover it.
"""

import numpy as np

from latenthead import backbone as bb
from latenthead import metrics as me
from latenthead import synthworld as sw
from latenthead import trainer as tr

world = sw.WorldConfig(H=16, W=32, n_steps=1400, n_train=1200, n_val=100)
ds = sw.generate(world)
cfg = bb.BackboneConfig(H=16, W=32, P=4, E=16, L_atm=world.atm_levels, L_lat=3)

model, res = tr.pretrain(ds, cfg, tr.TrainConfig(mode="pretrain", lr_max=1e-3, lr_min=1e-4,
                                                 epochs=8, input_noise=0.1))
print("pretrain val loss by epoch:", np.round(res.val_losses(), 3))
frozen_hash = model.hash()

heads, dres = tr.train_decoders(model, ds, sw.TARGET_VARS, tr.TrainConfig(mode="decoder"))
assert model.hash() == frozen_hash      # decoder training never touches the backbone

ft, fres = tr.finetune(model, ds, sw.TARGET_VARS, tr.TrainConfig(mode="finetune", epochs=5))

times = np.arange(ds.split_range("test").start + 1, ds.n_steps - 1)
lat = tr.surface_latents(model, ds, times)
ft_pred = ft.predict_new(ds, times)
land = ds.land_mask
print(f"{'variable':14s} {'decoder':>8s} {'finetune':>9s}")
for v in sw.TARGET_VARS:
    ref = ds.fields[v][times + 1]
    mask = land if v in sw.LAND_ONLY else None
    a = me.pcc(heads[v].predict(lat), ref, mask=None if mask is None else np.broadcast_to(mask, ref.shape))
    b = me.pcc(ft_pred[v], ref, mask=None if mask is None else np.broadcast_to(mask, ref.shape))
    print(f"{v:14s} {a:8.3f} {b:9.3f}")

dec_cost = tr.flop_count(cfg, "decoder", n_heads=4, batch_size=8, epochs=10)
ft_cost = tr.flop_count(cfg, "finetune", n_new=4, batch_size=8, epochs=3)
print("trainable parameters: decoder %d, finetune %d" % (dec_cost.trainable_params, ft_cost.trainable_params))
print("samples/s: decoder %.0f, finetune %.0f" % (dres.samples_per_second, fres.samples_per_second))
