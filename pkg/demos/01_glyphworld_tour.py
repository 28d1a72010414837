"""A walk through the synthetic sign world: rendering, OCR and prompt encoding.

Run with ``python demos/01_glyphworld_tour.py``.
"""

# %%
import numpy as np

from textpatch import glyphworld as gw
from textpatch import metrics as mt


def show(img):
    """Print a [0, 1] image with one character per pixel."""
    ramp = " .:-=+*#%@"
    for row in np.asarray(img):
        print("".join(ramp[int(v * (len(ramp) - 1) + 0.5)] for v in row))


# %% every template with the same word
for tpl, name in enumerate(gw.TEMPLATES):
    sample = gw.render_sample(gw.Prompt(tpl, "STOP"), seed=3)
    print(f"template {tpl} ({name}), OCR reads {mt.ocr_decode(sample.image)!r}")
show(gw.render_sample(gw.Prompt(2, "STOP"), seed=3).image)

# %% inverted plates and two-line text
img = gw.render_sample(gw.Prompt(4, "HELLO SIGN WORLD", "inverted"), seed=1).image
show(img)
print("OCR:", mt.ocr_decode(img))

# %% the text encoder: token ids and a per-token embedding
prompt = gw.Prompt(1, "MAZE")
enc = gw.encode_prompt(prompt)
print("token ids", enc.ids)
print("embedding", enc.embedding.shape, "row mean-square", np.round((enc.embedding ** 2).mean(1), 3))

# %% character F1 and edit distance against a keyword
for guess in ("STOP", "STP", "SPOT", "MAZE"):
    p, r, f = mt.char_f1(guess, "STOP")
    print(f"{guess:5s} F1 {f:.3f}  levenshtein {mt.levenshtein(guess, 'STOP')}")
