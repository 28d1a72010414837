"""Train the default model, find its text layers, then edit and detoxify signs.

Training takes ten minutes or so on one core.  Pass a checkpoint directory as
the first argument to skip it::

    python demos/03_train_localize_edit.py runs/train-.../checkpoint
"""

# %%
import sys

import numpy as np

from textpatch import denoiser as dn
from textpatch import glyphworld as gw
from textpatch import guard as gd
from textpatch import localizer as lz
from textpatch import metrics as mt
from textpatch import patchkit as pk

data = gw.DatasetConfig.generated()
if len(sys.argv) > 1:
    model = dn.load_checkpoint(sys.argv[1])
else:
    model = dn.DenoiserModel.create(seed=0)
    result = dn.train(model, data.train_words, log=print)
    dn.save_checkpoint(model, "demo_checkpoint")

# %% how well does it write unseen words?
for i, word in enumerate(data.test_words[:8]):
    img = dn.sample(model, gw.Prompt(i % 5, word), seed=i)
    print(f"{word:8s} -> {mt.ocr_decode(img)!r}")

# %% layer sweep and patch-start sweep
pairs = lz.PromptPairSet.from_words(data.test_words, 10, seed=0)
report = lz.sweep_layers(model, pairs)
print("layer scores", np.round(report.scores, 3), "selected", report.selected)
rows = lz.sweep_ts(model, pairs, report.selected, [0, 10, 20, 30, 40, 50])
for row in rows:
    print("  ".join(f"{k} {v:.3g}" for k, v in zip(lz.TS_HEADER, row)))
t_s = lz.choose_ts(rows)
print("patch start", t_s)

# %% edit vs regenerating with the new prompt
p_s, p_t = gw.Prompt(1, "STOP"), gw.Prompt(1, "MAZE")
res = pk.edit_text(model, p_s, p_t, seed=7, layers=report.selected, t_s=t_s)
print("edited OCR", mt.ocr_decode(res.edited),
      "SSIM vs source: edit", round(mt.ssim(res.edited, res.source), 3),
      "prompt swap", round(mt.ssim(res.target, res.source), 3))

# %% keep a lexicon word off the sign
lex = gd.Lexicon.default()
for method in gd.METHODS:
    r = gd.detox_generate(model, gw.Prompt(0, "DAMN"), 3, method, report.selected, t_s, lex)
    print(f"{method:16s} OCR {r.ocr_text!r:10s} toxicity {r.toxicity:.2f} "
          f"SSIM {r.record.ssim:.3f}")
