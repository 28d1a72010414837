"""Find the layers whose text K/V control rendered text, and study patch schedules."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import denoiser as dn
from . import glyphworld as gw
from . import metrics as mt
from . import patchkit as pk
from .denoiser import RangeError
from .numerics import ContractError


class ScorerContractError(ValueError):
    pass


# --------------------------------------------------------------------------
# prompt pairs and scorers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptPair:
    source: gw.Prompt
    target: gw.Prompt
    seed: int

    def to_json(self):
        return {"source": self.source.to_json(), "target": self.target.to_json(),
                "seed": int(self.seed)}


class PromptPairSet(list):
    """List of :class:`PromptPair` with a stable digest."""

    def digest(self):
        blob = json.dumps([p.to_json() for p in self], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_words(cls, words, n, seed=0, templates=None, style="normal"):
        """``n`` pairs whose source and target texts have equal length.

        Words are bucketed by length; each pair draws two distinct words from
        one bucket and shares template, style and seed between its prompts.
        """
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A15]))
        templates = list(range(len(gw.TEMPLATES))) if templates is None else list(templates)
        buckets = {}
        for w in words:
            buckets.setdefault(len(w), []).append(w)
        lengths = sorted(k for k, v in buckets.items() if len(v) >= 2)
        if not lengths:
            raise ValueError("need at least two words of one length")
        out = cls()
        for i in range(n):
            bucket = buckets[lengths[int(rng.integers(len(lengths)))]]
            a, b = rng.choice(len(bucket), size=2, replace=False)
            tpl = templates[i % len(templates)]
            out.append(PromptPair(gw.Prompt(tpl, bucket[a], style),
                                  gw.Prompt(tpl, bucket[b], style),
                                  gw.derive_seed(seed, 0x5A, i) % (1 << 31)))
        return out


def text_scorer(image, target):
    return mt.char_f1(mt.ocr_decode(image), target.text)[2]


def style_scorer(image, target):
    """1 when the sign polarity matches the target style, else 0."""
    return float(mt._inverted(np.asarray(image)) == (target.style == "inverted"))


SCORERS = {"ocr_f1": text_scorer, "style": style_scorer}


def _check_score(v):
    v = float(v)
    if not 0.0 <= v <= 1.0 or not np.isfinite(v):
        raise ScorerContractError(f"scorer returned {v}, outside [0, 1]")
    return v


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# layer sweep and selection
# --------------------------------------------------------------------------


@dataclass
class LocalizationReport:
    scores: list
    l_max: int
    selected: list
    theta: float
    scorer: str
    n_pairs: int
    t_s: int
    config_digest: str

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)

    def csv(self, path=None):
        return mt.write_csv(path, ["layer", "score"],
                            [[i, s] for i, s in enumerate(self.scores)])

    def ranked(self):
        """Layers ordered by score, highest first (ties by lower index)."""
        return sorted(range(len(self.scores)), key=lambda l: (-self.scores[l], l))


def select_layers(scores, theta=0.05):
    """``{l_max} | {l : score[l_max] - score[l] < theta}``, argmax ties to the lowest layer."""
    if isinstance(scores, LocalizationReport):
        scores = scores.scores
    scores = list(scores)
    if not scores:
        raise ContractError("empty localization report")
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    l_max = int(np.argmax(scores))
    best = scores[l_max]
    return sorted({l_max} | {l for l, s in enumerate(scores) if best - s < theta})


def sweep_layers(model, pairs, scorer="ocr_f1", t_s=None, theta=0.05, guidance_scale=1.0,
                 threads=1):
    """Patch one layer at a time with the target prompt's text K/V and score."""
    if len(pairs) == 0:
        raise ValueError("sweep needs at least one prompt pair")
    name = scorer if isinstance(scorer, str) else getattr(scorer, "__name__", "custom")
    fn = SCORERS[scorer] if isinstance(scorer, str) else scorer
    n = model.config.n_blocks
    t_s = model.schedule.T if t_s is None else int(t_s)
    digest = model.digest()
    layers = list(range(n))

    def job(pair):
        cache, _ = pk.capture_cache(model, pair.target, pair.seed, layers, guidance_scale)
        row = []
        for l in layers:
            plan = pk.PatchPlan({l}, t_s, cache)
            img = pk.patched_sample(model, pair.source, pair.seed, plan, guidance_scale,
                                    digest=digest)
            row.append(_check_score(fn(img, pair.target)))
        return row

    table = np.array(_map(job, list(pairs), threads))
    scores = [float(s) for s in table.mean(axis=0)]
    selected = select_layers(scores, theta)
    cfg = json.dumps({"model": digest, "pairs": PromptPairSet(pairs).digest(), "scorer": name,
                      "t_s": t_s, "guidance": guidance_scale}, sort_keys=True)
    return LocalizationReport(
        scores=scores, l_max=int(np.argmax(scores)), selected=selected, theta=float(theta),
        scorer=name, n_pairs=len(pairs), t_s=t_s,
        config_digest=hashlib.sha256(cfg.encode()).hexdigest(),
    )


# --------------------------------------------------------------------------
# patch-start and layer-count studies
# --------------------------------------------------------------------------

TS_HEADER = ["t_s", "mse", "ssim", "psnr", "ocr_f1", "ld", "embed_align"]
COUNT_HEADER = ["k", "mse", "ssim", "psnr", "f1_text_s", "f1_text_t",
                "embed_align_s", "embed_align_t"]


def sweep_ts(model, pairs, layers, ts_grid, guidance_scale=1.0, threads=1):
    """Mean alignment metrics per patch start step; rows follow ``TS_HEADER``."""
    T = model.schedule.T
    grid = [int(t) for t in ts_grid]
    if any(not 0 <= t <= T for t in grid):
        raise RangeError(f"t_s grid {grid} outside 0..{T}")
    digest = model.digest()

    def job(pair):
        cache, _ = pk.capture_cache(model, pair.target, pair.seed, layers, guidance_scale)
        source = dn.sample(model, pair.source, pair.seed, guidance_scale=guidance_scale)
        out = []
        for t_s in grid:
            plan = pk.PatchPlan(layers, t_s, cache)
            img = pk.patched_sample(model, pair.source, pair.seed, plan, guidance_scale,
                                    digest=digest)
            r = mt.score(img, source, pair.target.text, pair.target)
            out.append([r.mse, r.ssim, r.psnr, r.ocr_f1, r.levenshtein, r.embed_align])
        return out

    table = np.array(_map(job, list(pairs), threads), dtype=np.float64)
    means = table.mean(axis=0)
    return [[t] + [float(v) for v in row] for t, row in zip(grid, means)]


def choose_ts(rows, tol=0.05):
    """Earliest-stopping patch start from a ``sweep_ts`` table.

    Returns the smallest ``t_s`` whose OCR F1 is within ``tol`` of the best
    row: the shortest patch window that still carries the target text.
    """
    if not rows:
        raise ContractError("empty t_s table")
    col = TS_HEADER.index("ocr_f1")
    best = max(r[col] for r in rows)
    return int(min(r[0] for r in rows if best - r[col] <= tol))


def layer_count_study(model, pairs, ranked_layers, sizes, t_s=None, guidance_scale=1.0,
                      threads=1):
    """Patch the top-k ranked layers for each k; rows follow ``COUNT_HEADER``."""
    n = model.config.n_blocks
    sizes = [int(k) for k in sizes]
    if any(k > n or k < 0 for k in sizes):
        raise RangeError(f"layer counts {sizes} outside 0..{n}")
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be nondecreasing")
    t_s = model.schedule.T if t_s is None else int(t_s)
    ranked = list(ranked_layers)
    digest = model.digest()

    def job(pair):
        cache, _ = pk.capture_cache(model, pair.target, pair.seed, range(n), guidance_scale)
        source = dn.sample(model, pair.source, pair.seed, guidance_scale=guidance_scale)
        out = []
        for k in sizes:
            if k == 0:
                img = source
            else:
                plan = pk.PatchPlan(ranked[:k], t_s, cache)
                img = pk.patched_sample(model, pair.source, pair.seed, plan, guidance_scale,
                                        digest=digest)
            text = mt.ocr_decode(img)
            m, s, p = mt.image_align(img, source)
            out.append([m, s, p, mt.char_f1(text, pair.source.text)[2],
                        mt.char_f1(text, pair.target.text)[2],
                        mt.embed_align(img, pair.source), mt.embed_align(img, pair.target)])
        return out

    table = np.array(_map(job, list(pairs), threads), dtype=np.float64)
    return [[k] + [float(v) for v in row] for k, row in zip(sizes, table.mean(axis=0))]


# --------------------------------------------------------------------------
# specialization stress test
# --------------------------------------------------------------------------

STRESS_HEADER = ["condition", "bg_agree_template_s", "bg_agree_template_t",
                 "embed_template_s", "embed_template_t", "f1_text_s", "f1_text_t", "runs"]
CONDITIONS = ("Template_S:Text_S", "Template_S:Text_T", "Template_T:Text_T")
BG_TOL = 0.1


def background_agreement(a, b, tol=BG_TOL):
    """Fraction of off-plate pixels where two images differ by less than ``tol``."""
    outside = ~gw.plate_mask()
    return float(np.mean(np.abs(np.asarray(a) - np.asarray(b))[outside] < tol))


def _background_probe(template_id):
    return gw.Prompt(template_id, "")


def stress_test(model, templates, texts, seeds, layers, t_s=None, guidance_scale=1.0,
                threads=1, max_runs=None):
    """Patch targets that change text, template, or both, and see what sticks.

    Every ordered pair of distinct templates and distinct texts is run with
    every seed; ``max_runs`` keeps an evenly spaced subset.  Returns rows
    following ``STRESS_HEADER`` (means over runs).
    """
    templates, texts = list(templates), list(texts)
    if len(templates) < 2 or len(texts) < 2:
        raise ValueError("stress test needs at least two templates and two texts")
    t_s = model.schedule.T if t_s is None else int(t_s)
    digest = model.digest()
    runs = [(ts_, tt, xs, xt, int(seed))
            for ts_ in templates for tt in templates if tt != ts_
            for xs in texts for xt in texts if xt != xs
            for seed in seeds]
    if max_runs and max_runs < len(runs):
        keep = np.linspace(0, len(runs) - 1, max_runs).round().astype(int)
        runs = [runs[i] for i in keep]

    def job(run):
        tpl_s, tpl_t, text_s, text_t, seed = run
        p_s = gw.Prompt(tpl_s, text_s)
        ref_s = dn.sample(model, p_s, seed, guidance_scale=guidance_scale)
        ref_t = dn.sample(model, gw.Prompt(tpl_t, text_t), seed, guidance_scale=guidance_scale)
        targets = (p_s, gw.Prompt(tpl_s, text_t), gw.Prompt(tpl_t, text_t))
        out = []
        for p_t in targets:
            cache, _ = pk.capture_cache(model, p_t, seed, layers, guidance_scale)
            img = pk.patched_sample(model, p_s, seed, pk.PatchPlan(layers, t_s, cache),
                                    guidance_scale, digest=digest)
            text = mt.ocr_decode(img)
            out.append([background_agreement(img, ref_s), background_agreement(img, ref_t),
                        mt.embed_align(img, _background_probe(tpl_s)),
                        mt.embed_align(img, _background_probe(tpl_t)),
                        mt.char_f1(text, text_s)[2], mt.char_f1(text, text_t)[2]])
        return out

    table = np.array(_map(job, runs, threads), dtype=np.float64)
    means = table.mean(axis=0)
    return [[c] + [float(v) for v in row] + [len(runs)] for c, row in zip(CONDITIONS, means)]
