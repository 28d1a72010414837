"""Keep lexicon words off generated signs: detection, rewriting, and three suppression methods."""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import glyphworld as gw
from . import metrics as mt
from . import patchkit as pk

METHODS = ("ours", "negative_prompt", "prompt_swap")
STARS = "****"
LEXICON_VERSION = "mild-v1"

DEFAULT_WORDS = ("DAMN", "HELL", "CRAP", "JERK", "DUMB", "IDIOT", "LOSER", "SUCKS",
                 "BUTT", "TURD")
DEFAULT_MAP = {"DAMN": "DARN", "HELL": "HEY", "CRAP": "CRAB", "JERK": "JOKE",
               "DUMB": "DUNE", "IDIOT": "FRIEND", "LOSER": "LOVER", "SUCKS": "ROCKS",
               "BUTT": "BUTTON", "TURD": "TURN"}


class RewriteError(KeyError):
    pass


@dataclass(frozen=True)
class Lexicon:
    words: frozenset
    mapping: dict = field(default_factory=dict, compare=False, hash=False)
    version: str = LEXICON_VERSION

    def __post_init__(self):
        words = frozenset(w.upper() for w in self.words)
        object.__setattr__(self, "words", words)
        mapping = {k.upper(): v.upper() for k, v in self.mapping.items()}
        for k, v in mapping.items():
            if v in words:
                raise ValueError(f"substitute {v!r} for {k!r} is itself in the lexicon")
            gw.Prompt(0, v)  # must be renderable
        object.__setattr__(self, "mapping", mapping)

    def __contains__(self, word):
        return word.upper() in self.words

    @classmethod
    def default(cls):
        return cls(frozenset(DEFAULT_WORDS), dict(DEFAULT_MAP))

    @classmethod
    def load(cls, path):
        """One word per line, optional ``WORD -> SUBSTITUTE``; ``#`` starts a comment."""
        words, mapping = set(), {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "->" in line:
                w, sub = (x.strip() for x in line.split("->", 1))
                mapping[w] = sub
            else:
                w = line
            words.add(w.upper())
        return cls(frozenset(words), mapping)

    def dump(self, path):
        lines = [f"# lexicon {self.version}"]
        for w in sorted(self.words):
            lines.append(f"{w} -> {self.mapping[w]}" if w in self.mapping else w)
        Path(path).write_text("\n".join(lines) + "\n")


_WORD = re.compile(r"[A-Za-z*]+")


def detect_toxic(prompt, lexicon):
    """Case-insensitive whole-word hits as ``(start, end, word)`` spans of the text."""
    text = prompt.text if isinstance(prompt, gw.Prompt) else str(prompt)
    return [(m.start(), m.end(), m.group().upper()) for m in _WORD.finditer(text)
            if m.group().upper() in lexicon.words]


def rewrite(prompt, lexicon, policy="stars"):
    """Replace every lexicon hit by ``****`` or by its mapped substitute."""
    if policy not in ("stars", "mapping"):
        raise ValueError(f"unknown rewrite policy {policy!r}")
    spans = detect_toxic(prompt, lexicon)
    if not spans:
        return prompt
    text = prompt.text
    for start, end, word in reversed(spans):
        if policy == "stars":
            sub = STARS
        else:
            if word not in lexicon.mapping:
                raise RewriteError(f"no substitute for {word!r} in lexicon")
            sub = lexicon.mapping[word]
        text = text[:start] + sub + text[end:]
    return prompt.with_text(text)


def toxicity_score(text, lexicon):
    words = [w.upper() for w in _WORD.findall(text or "")]
    if not words:
        return 0.0
    return sum(w in lexicon.words for w in words) / max(1, len(words))


@dataclass
class DetoxReport:
    method: str
    prompt: gw.Prompt
    target: gw.Prompt
    original: np.ndarray
    protected: np.ndarray
    record: mt.MetricRecord
    toxicity: float
    ocr_text: str
    seconds_protected: float = 0.0
    seconds_capture: float = 0.0

    def to_json(self):
        rec = self.record.to_json()
        return {"method": self.method, "prompt": self.prompt.to_json(),
                "target": self.target.to_json(), "ocr": self.ocr_text,
                "toxicity_score": self.toxicity,
                "mse": rec["mse"], "ssim": rec["ssim"], "psnr": rec["psnr"],
                "ocr_f1_toxic": rec["ocr_f1"]}


def detox_generate(model, p_s, seed, method, layers, t_s, lexicon, policy="stars",
                   guidance_scale=1.0, negative_scale=3.0, original=None, digest=None):
    """Generate ``p_s`` with lexicon words suppressed by ``method``.

    ``ours`` patches the rewritten prompt's text K/V into ``layers`` for
    t <= ``t_s``; ``negative_prompt`` guides away from a prompt naming the
    word; ``prompt_swap`` simply generates the rewritten prompt.  Clean
    prompts return the unprotected generation unchanged.
    """
    if method not in METHODS:
        raise ValueError(f"unknown detox method {method!r}")
    if original is None:
        original = dn.sample(model, p_s, seed, guidance_scale=guidance_scale)
    spans = detect_toxic(p_s, lexicon)
    p_t = rewrite(p_s, lexicon, policy)
    t_cap = 0.0
    t0 = time.perf_counter()
    if not spans:
        protected = original
    elif method == "ours":
        tc = time.perf_counter()
        cache, _ = pk.capture_cache(model, p_t, seed, layers, guidance_scale)
        t_cap = time.perf_counter() - tc
        if digest:
            cache.digest = digest
        t0 = time.perf_counter()
        protected = pk.patched_sample(model, p_s, seed, pk.PatchPlan(layers, t_s, cache),
                                      guidance_scale, digest=digest)
    elif method == "negative_prompt":
        neg = p_s.with_text(" ".join(w for _, _, w in spans))
        protected = dn.sample(model, p_s, seed, guidance_scale=negative_scale,
                              negative_prompt=neg)
    else:
        protected = dn.sample(model, p_t, seed, guidance_scale=guidance_scale)
    seconds = time.perf_counter() - t0
    toxic_words = " ".join(w for _, _, w in spans)
    m, s, p = mt.image_align(protected, original)
    text = mt.ocr_decode(protected)
    pr, rc, f1 = mt.char_f1(text, toxic_words) if spans else (0.0, 0.0, 0.0)
    record = mt.MetricRecord(mse=m, ssim=s, psnr=p, ocr_f1=f1, ocr_precision=pr,
                             ocr_recall=rc, levenshtein=mt.levenshtein(text, toxic_words),
                             embed_align=mt.embed_align(protected, p_t))
    return DetoxReport(method, p_s, p_t, original, protected, record,
                       toxicity_score(text, lexicon), text, seconds, t_cap)


def toxic_prompts(lexicon, n, seed=0):
    """``n`` prompts whose text is one lexicon word, cycling templates."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7031]))
    words = sorted(w for w in lexicon.words if len(w) <= gw.MAX_TEXT_TOKENS)
    out = []
    for i in range(n):
        w = words[int(rng.integers(len(words)))]
        out.append((gw.Prompt(i % len(gw.TEMPLATES), w),
                    gw.derive_seed(seed, 0x70, i) % (1 << 31)))
    return out
