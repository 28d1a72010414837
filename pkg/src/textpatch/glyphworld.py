"""Synthetic sign images and the frozen toy text encoder.

An image is 32x32 grayscale: a procedural background chosen by the prompt's
template, with a dark sign plate across rows 12..24 carrying up to two lines
of 3x5 pixel-font text.  Everything is a pure function of (prompt, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FONT_VERSION = "glyph3x5-v1"

# fmt: off
FONT_ROWS = {
    "A": ("010", "101", "111", "101", "101"),
    "B": ("110", "101", "110", "101", "110"),
    "C": ("011", "100", "100", "100", "011"),
    "D": ("111", "101", "101", "101", "110"),
    "E": ("111", "100", "110", "100", "111"),
    "F": ("111", "100", "110", "100", "100"),
    "G": ("011", "100", "101", "101", "011"),
    "H": ("101", "101", "111", "101", "101"),
    "I": ("010", "000", "010", "010", "010"),
    "J": ("001", "001", "001", "101", "010"),
    "K": ("101", "110", "100", "110", "101"),
    "L": ("100", "100", "100", "100", "111"),
    "M": ("111", "111", "101", "101", "101"),
    "N": ("110", "101", "101", "101", "101"),
    "O": ("010", "101", "101", "101", "010"),
    "P": ("110", "101", "111", "100", "100"),
    "Q": ("010", "101", "101", "110", "011"),
    "R": ("110", "101", "110", "101", "101"),
    "S": ("011", "100", "010", "001", "110"),
    "T": ("111", "010", "010", "010", "010"),
    "U": ("101", "101", "101", "101", "111"),
    "V": ("101", "101", "101", "010", "010"),
    "W": ("101", "101", "111", "111", "111"),
    "X": ("101", "101", "010", "101", "101"),
    "Y": ("101", "101", "010", "010", "010"),
    "Z": ("111", "001", "010", "100", "111"),
    "*": ("000", "101", "010", "101", "000"),
    " ": ("000", "000", "000", "000", "000"),
}
# fmt: on

GLYPHS = {
    ch: np.array([[c == "1" for c in row] for row in rows], dtype=bool)
    for ch, rows in FONT_ROWS.items()
}
CHARSET = " ABCDEFGHIJKLMNOPQRSTUVWXYZ*"

SIZE = 32
GLYPH_H, GLYPH_W = 5, 3
PLATE_TOP, PLATE_BOTTOM = 12, 25  # rows 12..24
LINE_TOPS = (13, 19)
CELL_LEFT = 1
MAX_LINE = 10
MAX_LINES = 2

TEMPLATES = ("solid", "h-stripes", "checker", "v-gradient", "d-stripes")
STYLES = ("normal", "inverted")

# token ids
PAD, BOS, EOS = 0, 1, 2
TEMPLATE_BASE = 3
NULL_TEMPLATE = TEMPLATE_BASE + len(TEMPLATES)
STYLE_BASE = NULL_TEMPLATE + 1
CHAR_BASE = STYLE_BASE + len(STYLES)
VOCAB = CHAR_BASE + len(CHARSET)
SEQ_LEN = 16
MAX_TEXT_TOKENS = SEQ_LEN - 4  # BOS, template, style, EOS
D_TXT = 64
ENCODER_VERSION = "toyenc-v2"
ENCODER_SEED = 20240611


class ValidationError(ValueError):
    pass


class DatasetConfigError(ValueError):
    pass


def cell_columns(i):
    """Pixel columns covered by character cell ``i`` of a line."""
    lo = CELL_LEFT + GLYPH_W * i
    return lo, lo + GLYPH_W


def wrap_lines(text):
    if len(text) <= MAX_LINE:
        return [text]
    cut = text.rfind(" ", 0, MAX_LINE + 1)
    if cut <= 0:
        raise ValidationError(f"cannot fit {text!r} on {MAX_LINES} lines of {MAX_LINE}")
    first, second = text[:cut], text[cut + 1:]
    if len(second) > MAX_LINE:
        raise ValidationError(f"cannot fit {text!r} on {MAX_LINES} lines of {MAX_LINE}")
    return [first, second]


@dataclass(frozen=True)
class Prompt:
    template_id: int
    text: str
    style: str = "normal"

    def __post_init__(self):
        bad = sorted({c for c in self.text if c not in GLYPHS})
        if bad:
            raise ValidationError(f"unsupported characters in prompt text: {bad}")
        if self.style not in STYLES:
            raise ValidationError(f"unknown style {self.style!r}")
        if not (self.template_id == -1 or 0 <= self.template_id < len(TEMPLATES)):
            raise ValidationError(f"template_id {self.template_id} out of range")
        wrap_lines(self.text)

    @classmethod
    def null(cls):
        """Unconditional prompt used for classifier-free guidance."""
        return cls(-1, "", "normal")

    @property
    def is_null(self):
        return self.template_id == -1

    def with_text(self, text):
        return Prompt(self.template_id, text, self.style)

    def with_template(self, template_id):
        return Prompt(template_id, self.text, self.style)

    def __str__(self):
        return f'A sign that says "{self.text}".'

    def to_json(self):
        return {"template_id": self.template_id, "text": self.text, "style": self.style}

    @classmethod
    def from_json(cls, d):
        return cls(int(d["template_id"]), d["text"], d.get("style", "normal"))


def derive_seed(*keys):
    """64-bit seed from a tuple of non-negative ints (counter-based)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def _phase(seed):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xB4C6])).random()


def render_background(template_id, seed):
    phase = _phase(seed)
    y, x = np.mgrid[0:SIZE, 0:SIZE]
    lo, hi = 0.3, 0.7
    if template_id == 0:
        img = np.full((SIZE, SIZE), 0.3 + 0.4 * phase)
    elif template_id == 1:
        off = int(phase * 4)
        img = np.where(((y + off) // 2) % 2 == 0, lo, hi)
    elif template_id == 2:
        off = int(phase * 8)
        img = np.where((((x + off) // 4) + ((y + off) // 4)) % 2 == 0, lo, hi)
    elif template_id == 3:
        start = 0.2 + 0.3 * phase
        img = start + 0.3 * y / (SIZE - 1) + 0.0 * x
    elif template_id == 4:
        off = int(phase * 6)
        img = np.where(((x + y + off) // 3) % 2 == 0, lo, hi)
    else:
        img = np.full((SIZE, SIZE), 0.5)
    return img.astype(np.float32)


def text_mask(text):
    """Boolean 32x32 mask of glyph pixels for ``text``."""
    mask = np.zeros((SIZE, SIZE), dtype=bool)
    for top, line in zip(LINE_TOPS, wrap_lines(text)):
        for i, ch in enumerate(line):
            lo, hi = cell_columns(i)
            mask[top:top + GLYPH_H, lo:hi] = GLYPHS[ch]
    return mask


def plate_mask():
    m = np.zeros((SIZE, SIZE), dtype=bool)
    m[PLATE_TOP:PLATE_BOTTOM] = True
    return m


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    prompt: Prompt
    seed: int


def render_sample(prompt, seed):
    """Deterministic ground-truth image for ``prompt``."""
    if not isinstance(prompt, Prompt):
        prompt = Prompt(*prompt)
    img = render_background(prompt.template_id, seed)
    plate, ink = (1.0, 0.0) if prompt.style == "inverted" else (0.0, 1.0)
    img[PLATE_TOP:PLATE_BOTTOM] = plate
    img[text_mask(prompt.text)] = ink
    return Sample(img, prompt, int(seed))


# --------------------------------------------------------------------------
# frozen text encoder
# --------------------------------------------------------------------------


def _normalised_rows(a):
    a = a - a.mean(axis=1, keepdims=True)
    return a * (math.sqrt(a.shape[1]) / np.linalg.norm(a, axis=1, keepdims=True))


POSITION_PERIOD = 48.0  # pixels; wider than the span of all token slots


def token_column(i):
    """Pixel x-centre that sequence slot ``i`` maps to (slot 3 + k is cell k)."""
    return CELL_LEFT + GLYPH_W * (np.asarray(i, dtype=np.float64) - 3) + GLYPH_W / 2


def column_code(x, n_freq):
    """``[sin, cos](2 pi j x / POSITION_PERIOD)`` for j = 1..n_freq."""
    omega = 2 * math.pi * np.arange(1, n_freq + 1) / POSITION_PERIOD
    ang = np.asarray(x, dtype=np.float64).reshape(-1, 1) * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _build_tables():
    rng = np.random.default_rng(ENCODER_SEED)
    half = D_TXT // 2
    tok = _normalised_rows(rng.standard_normal((VOCAB, half)))
    # positions share the pixel frame of the image column code so that
    # slot 3 + k and the patches over cell k are close in code space
    pos = math.sqrt(2.0) * column_code(token_column(np.arange(SEQ_LEN)), half // 2)
    return tok.astype(np.float32), pos.astype(np.float32)


TOKEN_TABLE, POSITION_TABLE = _build_tables()
TOKEN_TABLE.setflags(write=False)
POSITION_TABLE.setflags(write=False)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple
    embedding: np.ndarray

    @property
    def pad_mask(self):
        return np.array(self.ids) != PAD


def tokenize(prompt):
    if len(prompt.text) > MAX_TEXT_TOKENS:
        raise ValidationError(
            f"text {prompt.text!r} has {len(prompt.text)} characters; "
            f"the encoder holds at most {MAX_TEXT_TOKENS}"
        )
    template = NULL_TEMPLATE if prompt.is_null else TEMPLATE_BASE + prompt.template_id
    ids = [BOS, template, STYLE_BASE + STYLES.index(prompt.style)]
    ids += [CHAR_BASE + CHARSET.index(c) for c in prompt.text]
    ids.append(EOS)
    ids += [PAD] * (SEQ_LEN - len(ids))
    return tuple(ids)


def embed_ids(ids):
    ids = np.asarray(ids)
    return np.concatenate([TOKEN_TABLE[ids], POSITION_TABLE[: len(ids)]], axis=1)


def encode_prompt(prompt):
    ids = tokenize(prompt)
    return TokenSeq(ids, embed_ids(ids))


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


def random_words(n, rng, min_len=3, max_len=6, exclude=()):
    """``n`` distinct random A-Z words, none of them in ``exclude``."""
    seen = set(exclude)
    out = []
    letters = CHARSET[1:27]
    while len(out) < n:
        k = int(rng.integers(min_len, max_len + 1))
        w = "".join(letters[i] for i in rng.integers(0, 26, size=k))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


@dataclass
class DatasetConfig:
    train_words: list
    val_words: list = field(default_factory=list)
    test_words: list = field(default_factory=list)
    templates: list = field(default_factory=lambda: list(range(len(TEMPLATES))))
    seeds_per_word: int = 1
    inverted_fraction: float = 0.0
    seed: int = 0

    @classmethod
    def generated(cls, n_train=200, n_val=20, n_test=50, seed=0, **kw):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x30D5]))
        train = random_words(n_train, rng)
        val = random_words(n_val, rng, exclude=train)
        test = random_words(n_test, rng, exclude=train + val)
        return cls(train, val, test, seed=seed, **kw)

    def validate(self):
        if not self.train_words:
            raise DatasetConfigError("train word list is empty")
        splits = {"train": self.train_words, "val": self.val_words, "test": self.test_words}
        names = list(splits)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                both = set(splits[a]) & set(splits[b])
                if both:
                    raise DatasetConfigError(
                        f"{a} and {b} word lists overlap: {sorted(both)[:5]}"
                    )
        for words in splits.values():
            for w in words:
                Prompt(0, w)  # raises on unrenderable text


@dataclass
class Dataset:
    entries: list  # dicts: index, template_id, text, style, seed, split
    images: np.ndarray

    def split(self, name):
        idx = [e["index"] for e in self.entries if e["split"] == name]
        return [self.entries[i] for i in idx], self.images[idx]

    def prompt(self, i):
        return Prompt.from_json(self.entries[i])


def build_dataset(config):
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xDA7A]))
    entries = []
    for split, words in (("train", config.train_words), ("val", config.val_words),
                         ("test", config.test_words)):
        for word in words:
            for template in config.templates:
                for _ in range(config.seeds_per_word):
                    style = "inverted" if rng.random() < config.inverted_fraction else "normal"
                    idx = len(entries)
                    entries.append({
                        "index": idx, "template_id": int(template), "text": word,
                        "style": style, "seed": derive_seed(config.seed, idx),
                        "split": split,
                    })
    images = np.empty((len(entries), SIZE, SIZE), dtype=np.float32)
    for e in entries:
        images[e["index"]] = render_sample(Prompt.from_json(e), e["seed"]).image
    return Dataset(entries, images)


def make_dataset(config, out_dir):
    """Render the dataset and write ``manifest.json`` + ``images.bin``."""
    ds = build_dataset(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob = ds.images.astype("<f4").tobytes()
    (out / "images.bin").write_bytes(blob)
    manifest = {
        "version": 1,
        "seed": config.seed,
        "font": FONT_VERSION,
        "encoder": ENCODER_VERSION,
        "config": asdict(config),
        "count": len(ds.entries),
        "images_sha256": hashlib.sha256(blob).hexdigest(),
        "entries": ds.entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return ds


def load_dataset(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    raw = np.frombuffer((path / "images.bin").read_bytes(), dtype="<f4")
    images = raw.reshape(len(manifest["entries"]), SIZE, SIZE).astype(np.float32)
    return Dataset(manifest["entries"], images)


def sample_batch(words, rng, size, templates=None, inverted_fraction=0.0):
    """Fresh ``(image, prompt)`` pairs: random word, template, style and background seed."""
    templates = list(range(len(TEMPLATES))) if templates is None else list(templates)
    out = []
    for _ in range(size):
        w = words[int(rng.integers(len(words)))]
        tpl = templates[int(rng.integers(len(templates)))]
        style = "inverted" if rng.random() < inverted_fraction else "normal"
        p = Prompt(tpl, w, style)
        out.append((render_sample(p, int(rng.integers(1 << 31))).image, p))
    return out


# --------------------------------------------------------------------------
# PGM
# --------------------------------------------------------------------------


def to_bytes(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image):
    img = to_bytes(np.asarray(image))
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    pix = np.frombuffer(data[pos + 1: pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return pix.astype(np.float32) / maxval
