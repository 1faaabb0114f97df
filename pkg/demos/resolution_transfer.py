# %% [markdown]
# # Moving a trained model to larger images
#
# Doubling the image side quadruples the token count.  `transfer_resolution`
# softens every decay, slows the rotary positions and reorders patches so each
# pre-training-sized section is read as one contiguous run.

# %%
import numpy as np

from defocus.diagnostics import rearrange_patches, transfer_resolution
from defocus.network import DefocusBlockConfig, DefocusNetwork, ModelConfig, forward

cfg = ModelConfig(image_size=16, patch_size=4, depth=2, block=DefocusBlockConfig(variant="vit"))
model = DefocusNetwork.init(cfg, 0)

# %%
print(rearrange_patches((4, 4), 2).reshape(4, 4))

# %%
big = transfer_resolution(model, 2)
lam_before = -np.exp(model.params["blocks/0/filter/lambda_hat"].data)
lam_after = -np.exp(big.params["blocks/0/filter/lambda_hat"].data)
print("per-step decay before", np.round(np.exp(lam_before), 4))
print("per-step decay after ", np.round(np.exp(lam_after), 4))
print("position scale", big.config.position_scale, "image size", big.config.image_size)

# %%
rng = np.random.default_rng(0)
print("logits on a 32x32 image:", forward(big, rng.random((1, 1, 32, 32))).cls_logits.data.round(4))
back = transfer_resolution(big, 0.5)
print("round trip max change:", max(np.abs(back.params[k].data - t.data).max() for k, t in model.params.items()))
