"""Localize text control on a hand-wired network and patch one prompt into another.

The oracle network routes the prompt's characters through a single block.  A
layer sweep should find exactly that block, and patching its text keys and
values is enough to change the rendered word.
"""

# %%
import numpy as np

from textpatch import denoiser as dn
from textpatch import glyphworld as gw
from textpatch import localizer as lz
from textpatch import metrics as mt
from textpatch import patchkit as pk

LAYER = 3

# %% one sweep per attention variant
pairs = lz.PromptPairSet.from_words(["STOP", "MAZE", "KITE", "WAVE"], 2, seed=0)
for variant in dn.VARIANTS:
    model = dn.build_oracle(variant, layer=LAYER, n_blocks=6)
    report = lz.sweep_layers(model, pairs, theta=0.05)
    print(f"{variant:7s} scores {np.round(report.scores, 2)} -> selected {report.selected}")

# %% edit a sign: STOP -> MAZE through the selected layer only
model = dn.build_oracle("static", layer=LAYER, n_blocks=6)
p_s, p_t = gw.Prompt(2, "STOP"), gw.Prompt(2, "MAZE")
res = pk.edit_text(model, p_s, p_t, seed=5, layers=[LAYER], t_s=model.schedule.T)
print("source OCR", mt.ocr_decode(res.source), "| edited OCR", mt.ocr_decode(res.edited))
outside = ~gw.plate_mask()
print(f"largest background change: {np.abs(res.source - res.edited)[outside].max():.1e}")

# %% patching a layer that carries no text leaves the image alone
other = pk.edit_text(model, p_s, p_t, seed=5, layers=[0], t_s=model.schedule.T)
print("patch layer 0 -> OCR", mt.ocr_decode(other.edited))
