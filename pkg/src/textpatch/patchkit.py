"""Capture text-side keys/values from one generation and substitute them in another."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import glyphworld as gw
from . import metrics as mt
from .denoiser import PlanError


class ProvenanceError(ValueError):
    pass


@dataclass
class KVCache:
    """(layer, t) -> (K_text, V_text) for the conditional branch of one run."""

    entries: dict
    prompt: gw.Prompt
    seed: int
    digest: str
    guidance_scale: float = 1.0
    layers: tuple = ()

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, key):
        return self.entries[key]

    def provenance(self):
        return {"prompt": self.prompt.to_json(), "seed": int(self.seed),
                "model_digest": self.digest, "guidance_scale": float(self.guidance_scale)}


@dataclass(frozen=True)
class PatchPlan:
    layers: frozenset
    t_s: int
    cache: KVCache = field(compare=False, repr=False)

    def __init__(self, layers, t_s, cache):
        object.__setattr__(self, "layers", frozenset(int(l) for l in layers))
        object.__setattr__(self, "t_s", int(t_s))
        object.__setattr__(self, "cache", cache)

    def active(self, layer, t):
        return layer in self.layers and t <= self.t_s


class _Recorder:
    def __init__(self, layers):
        self.layers = sorted(layers)
        self.wanted = set(self.layers)
        self.entries = {}

    def __call__(self, layer, t, k, v):
        if layer in self.wanted:
            self.entries[(layer, t)] = (k.copy(), v.copy())
        return k, v


class _Patcher:
    def __init__(self, plan):
        self.plan = plan
        self.layers = sorted(plan.layers)

    def __call__(self, layer, t, k, v):
        if not self.plan.active(layer, t):
            return k, v
        try:
            ck, cv = self.plan.cache.entries[(layer, t)]
        except KeyError:
            raise PlanError(f"cache has no entry for layer {layer}, t={t}") from None
        return ck.astype(k.dtype, copy=False), cv.astype(v.dtype, copy=False)


def capture_cache(model, target_prompt, seed, layers, guidance_scale=1.0):
    """Generate ``target_prompt`` once, recording text K/V at ``layers``.

    Returns ``(cache, image)``.
    """
    layers = sorted({int(l) for l in layers})
    if not layers:
        raise PlanError("capture needs at least one layer")
    rec = _Recorder(layers)
    dn.check_hooks(model, rec)
    img = dn.sample(model, target_prompt, seed, guidance_scale=guidance_scale, hooks=rec)
    cache = KVCache(rec.entries, target_prompt, int(seed), model.digest(),
                    float(guidance_scale), tuple(layers))
    return cache, img


def patched_sample(model, source_prompt, seed, plan, guidance_scale=1.0, trace=None,
                   digest=None):
    """``denoiser.sample`` with cached text K/V substituted where the plan is active.

    ``digest`` may be passed to skip re-hashing the weights.
    """
    digest = digest or model.digest()
    if digest != plan.cache.digest:
        raise ProvenanceError(
            f"cache was captured from model {plan.cache.digest[:12]}, not {digest[:12]}"
        )
    patcher = _Patcher(plan)
    dn.check_hooks(model, patcher)
    missing = [l for l in plan.layers if l not in plan.cache.layers]
    if missing and plan.t_s >= 1:
        raise PlanError(f"cache has no entries for layers {sorted(missing)}")
    return dn.sample(model, source_prompt, seed, guidance_scale=guidance_scale,
                     hooks=patcher, trace=trace)


@dataclass
class EditResult:
    edited: np.ndarray
    source: np.ndarray
    target: np.ndarray
    record: mt.MetricRecord


def edit_text(model, p_s, p_t, seed, layers, t_s, guidance_scale=1.0, digest=None):
    """Generate ``p_s`` while borrowing ``p_t``'s text K/V at ``layers`` for t <= t_s.

    The metric record compares the edit to the unpatched source generation
    (image alignment) and to ``p_t``'s text (text alignment).
    """
    digest = digest or model.digest()
    cache, target = capture_cache(model, p_t, seed, layers, guidance_scale)
    cache.digest = digest
    plan = PatchPlan(layers, t_s, cache)
    edited = patched_sample(model, p_s, seed, plan, guidance_scale, digest=digest)
    source = dn.sample(model, p_s, seed, guidance_scale=guidance_scale)
    record = mt.score(edited, source, p_t.text, p_t)
    return EditResult(edited, source, target, record)


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


def save_cache(cache, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for (layer, t) in sorted(cache.entries):
        k, v = cache.entries[(layer, t)]
        for kind, a in (("k", k), ("v", v)):
            table.append({"layer": layer, "t": t, "kind": kind,
                          "shape": list(a.shape), "offset": offset})
            offset += a.size
            chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    blob = b"".join(chunks)
    (path / "kv.bin").write_bytes(blob)
    manifest = {"version": 1, **cache.provenance(), "layers": list(cache.layers),
                "entries": table, "kv_sha256": hashlib.sha256(blob).hexdigest()}
    (path / "cache.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_cache(path):
    path = Path(path)
    manifest = json.loads((path / "cache.json").read_text())
    raw = np.frombuffer((path / "kv.bin").read_bytes(), dtype="<f4")
    parts = {}
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"]))
        a = raw[e["offset"]: e["offset"] + n].reshape(e["shape"]).astype(np.float32)
        parts.setdefault((e["layer"], e["t"]), {})[e["kind"]] = a
    entries = {key: (d["k"], d["v"]) for key, d in parts.items()}
    return KVCache(entries, gw.Prompt.from_json(manifest["prompt"]), manifest["seed"],
                   manifest["model_digest"], manifest["guidance_scale"],
                   tuple(manifest["layers"]))
