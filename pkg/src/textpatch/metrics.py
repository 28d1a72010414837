"""Evaluation: template-matching OCR, text and image alignment, kNN coverage."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import glyphworld as gw
from .numerics import ConfigurationError, DimensionError

METRICS_VERSION = "metrics-v1"
ENCODER_TAG = "frozen-proj-v1"
PSNR_CAP = 100.0
SSIM_WIN = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

_OCR_GLYPHS = [(ch, gw.GLYPHS[ch]) for ch in gw.CHARSET if ch != " "]
_GLYPH_STACK = np.stack([g for _, g in _OCR_GLYPHS])


# --------------------------------------------------------------------------
# OCR and text scores
# --------------------------------------------------------------------------


def _inverted(img):
    margin = img[[gw.PLATE_TOP, gw.LINE_TOPS[1] - 1, gw.PLATE_BOTTOM - 1], :].mean()
    return margin > 0.5


def decode_cell(bits):
    """Nearest glyph for a 5x3 boolean cell; ``" "`` within distance 1 of blank."""
    if bits.sum() <= 1:
        return " "
    dist = (_GLYPH_STACK != bits[None]).sum(axis=(1, 2))
    return _OCR_GLYPHS[int(np.argmin(dist))][0]


def ocr_decode(image):
    """Read the sign text of a 32x32 image in [0, 1].

    Polarity comes from the plate margin rows; each 3x5 cell is binarized at
    0.5 and matched to the font by Hamming distance (ties go to font order).
    The two lines are joined by a space.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (gw.SIZE, gw.SIZE):
        raise DimensionError(f"expected a 32x32 image, got {img.shape}")
    ink = img < 0.5 if _inverted(img) else img > 0.5
    lines = []
    for top in gw.LINE_TOPS:
        chars = []
        for i in range(gw.MAX_LINE):
            lo, hi = gw.cell_columns(i)
            chars.append(decode_cell(ink[top:top + gw.GLYPH_H, lo:hi]))
        lines.append("".join(chars).rstrip())
    return " ".join(l for l in lines if l).strip()


def normalize_text(s):
    return s.upper().strip()


def char_f1(pred, keyword):
    """Multiset character precision, recall and F1."""
    pred, keyword = normalize_text(pred), normalize_text(keyword)
    inter = sum((Counter(pred) & Counter(keyword)).values())
    p = inter / len(pred) if pred else 0.0
    r = inter / len(keyword) if keyword else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def levenshtein(a, b):
    a, b = normalize_text(a), normalize_text(b)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


# --------------------------------------------------------------------------
# image alignment
# --------------------------------------------------------------------------


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) * (a - b)))


def psnr(a, b):
    m = mse(a, b)
    if m < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(1.0 / m)))


def ssim(a, b, win=SSIM_WIN):
    """Mean SSIM over all ``win x win`` windows (stride 1, uniform weights)."""
    a, b = _pair(a, b)
    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    va = (wa * wa).mean(axis=(-1, -2)) - mu_a * mu_a
    vb = (wb * wb).mean(axis=(-1, -2)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (va + vb + SSIM_C2)
    return float(np.mean(num / den))


def image_align(a, b):
    return mse(a, b), ssim(a, b), psnr(a, b)


# --------------------------------------------------------------------------
# frozen embedding stand-in
# --------------------------------------------------------------------------


class FrozenEncoder:
    """Seeded random projection of images to unit 64-d features.

    Prompts are embedded by rendering them canonically (seed 0 background,
    plain text on a mid-gray field for bare strings) and passing the render
    through the same image branch.
    """

    dim = 64

    def __init__(self, tag=ENCODER_TAG):
        self.tag = tag
        rng = np.random.default_rng(np.random.SeedSequence([0xC11B, len(tag)]))
        self.proj = rng.standard_normal((gw.SIZE * gw.SIZE, self.dim)) / gw.SIZE

    def image(self, img):
        img = np.asarray(img, dtype=np.float64)
        if img.shape[-2:] != (gw.SIZE, gw.SIZE):
            raise DimensionError(f"expected 32x32 images, got {img.shape}")
        flat = (img - 0.5).reshape(*img.shape[:-2], -1)
        f = flat @ self.proj
        n = np.linalg.norm(f, axis=-1, keepdims=True)
        return f / np.where(n > 0, n, 1.0)

    def prompt(self, prompt):
        return self.image(canonical_render(prompt))


def canonical_render(prompt):
    if isinstance(prompt, gw.Prompt):
        return gw.render_sample(prompt, 0).image
    img = np.full((gw.SIZE, gw.SIZE), 0.5, dtype=np.float32)
    img[gw.PLATE_TOP:gw.PLATE_BOTTOM] = 0.0
    img[gw.text_mask(normalize_text(str(prompt)))] = 1.0
    return img


_ENCODER = None


def frozen_encoder():
    global _ENCODER
    if _ENCODER is None:
        _ENCODER = FrozenEncoder()
    return _ENCODER


def embed_align(image, prompt):
    enc = frozen_encoder()
    return float(enc.image(image) @ enc.prompt(prompt))


# --------------------------------------------------------------------------
# kNN precision / recall
# --------------------------------------------------------------------------


def _pairwise(a, b):
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def _radii(ref, k):
    d = _pairwise(ref, ref)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, k - 1]


def _coverage(ref, query, k):
    r = _radii(ref, k)
    d = _pairwise(query, ref)
    return float(np.mean((d <= r[None, :]).any(axis=1)))


def knn_precision_recall(real_feats, gen_feats, k=3):
    real = np.asarray(real_feats, dtype=np.float64)
    gen = np.asarray(gen_feats, dtype=np.float64)
    if k < 1 or k >= len(real) or k >= len(gen):
        raise ConfigurationError(
            f"k={k} needs more than k points per set (got {len(real)} real, {len(gen)} gen)"
        )
    return _coverage(real, gen, k), _coverage(gen, real, k)


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------


@dataclass
class MetricRecord:
    mse: float = 0.0
    ssim: float = 1.0
    psnr: float = PSNR_CAP
    ocr_f1: float = 0.0
    ocr_precision: float = 0.0
    ocr_recall: float = 0.0
    levenshtein: int = 0
    embed_align: float = 0.0
    knn_precision: float | None = None
    knn_recall: float | None = None

    def to_json(self):
        return asdict(self)

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]


def score(image, reference, keyword, prompt):
    """Full record: image alignment vs ``reference``, text alignment vs ``keyword``."""
    m, s, p = image_align(image, reference)
    text = ocr_decode(image)
    pr, rc, f1 = char_f1(text, keyword)
    return MetricRecord(
        mse=m, ssim=s, psnr=p, ocr_f1=f1, ocr_precision=pr, ocr_recall=rc,
        levenshtein=levenshtein(text, keyword), embed_align=embed_align(image, prompt),
    )


def mean_record(records):
    if not records:
        raise ValueError("no records to average")
    out = {}
    for name in MetricRecord.header():
        vals = [getattr(r, name) for r in records]
        out[name] = None if any(v is None for v in vals) else float(np.mean(vals))
    return MetricRecord(**out)


def fmt(x):
    """Stable text form for CSV/JSON numbers."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6f}"


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
