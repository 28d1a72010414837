"""Low-rank fine-tuning of the text K/V projections of a chosen layer set."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import glyphworld as gw
from . import metrics as mt
from . import numerics as nx
from .numerics import ConfigurationError, LoraAdapter, NumericError

CURVE_HEADER = ["step", "loss", "ocr_f1", "embed_align", "knn_precision", "knn_recall"]


class AdapterStateError(RuntimeError):
    pass


@dataclass
class FinetuneConfig:
    layer_set: object = "localized"  # "localized" | "all" | list of layer indices
    rank: int = 4
    alpha: float = 8.0
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 8
    eval_every: int = 500
    seed: int = 0
    n_eval: int = 30
    k: int = 3
    guidance_scale: float = 1.0

    def to_json(self):
        return asdict(self)


def resolve_layers(layer_set, n_blocks, report=None):
    if layer_set == "all":
        return list(range(n_blocks))
    if layer_set == "localized":
        if report is None:
            raise ConfigurationError("layer_set 'localized' needs a localization report")
        layers = list(report.selected if hasattr(report, "selected") else report["selected"])
    else:
        layers = sorted({int(l) for l in layer_set})
    bad = [l for l in layers if not 0 <= l < n_blocks]
    if bad or not layers:
        raise ConfigurationError(f"invalid layer set {layers} for {n_blocks} blocks")
    return layers


@dataclass
class LoraHandle:
    model: dn.DenoiserModel
    layers: list
    rank: int
    alpha: float
    frozen_digest: str

    @property
    def adapters(self):
        return self.model.adapters

    def trainable(self):
        out = {}
        for name in sorted(self.adapters):
            a = self.adapters[name]
            out[a.A.name] = a.A
            out[a.B.name] = a.B
        return out

    def n_trainable(self):
        return sum(t.data.size for t in self.trainable().values())


def attach_lora(model, layers, rank=4, alpha=8.0, seed=0):
    """Attach zero-initialized adapters to the text K/V projections of ``layers``.

    Every base tensor is frozen; the model's output is unchanged until the
    adapters are trained.
    """
    if model.adapters:
        raise AdapterStateError("model already has adapters attached")
    layers = resolve_layers(layers, model.config.n_blocks)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10BA]))
    model.set_trainable(())
    for l in layers:
        for name in dn.kv_text_names(model.config, l):
            d_in, d_out = model.params[name].shape
            model.adapters[name] = LoraAdapter.init(name, d_in, d_out, rank, alpha, rng,
                                                    model.dtype)
    return LoraHandle(model, layers, rank, float(alpha), frozen_digest(model))


def frozen_digest(model):
    return hashlib.sha256(model.weights_blob()).hexdigest()


def merged_model(handle):
    """Standalone model with ``W + (alpha/r) B A`` folded into the base weights."""
    params = handle.model.arrays()
    for name, a in handle.adapters.items():
        params[name] = nx.effective_weight(handle.model.params[name], a).data.copy()
    return dn.DenoiserModel(handle.model.config, {k: v.copy() for k, v in params.items()})


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def eval_prompts(words, n, seed=0):
    """``n`` (prompt, seed) pairs cycling through ``words`` and the templates."""
    return [(gw.Prompt(i % len(gw.TEMPLATES), words[i % len(words)]),
             gw.derive_seed(seed, 0xE7, i) % (1 << 31)) for i in range(n)]


def generate(model, prompts, guidance_scale=1.0):
    return np.stack([dn.sample(model, p, s, guidance_scale=guidance_scale) for p, s in prompts])


def eval_images(images, prompts, base_features=None, k=3):
    feats = mt.frozen_encoder().image(images)
    f1 = [mt.char_f1(mt.ocr_decode(img), p.text)[2] for img, (p, _) in zip(images, prompts)]
    align = [float(f @ mt.frozen_encoder().prompt(p)) for f, (p, _) in zip(feats, prompts)]
    rec = mt.MetricRecord(ocr_f1=float(np.mean(f1)), embed_align=float(np.mean(align)))
    if base_features is not None:
        rec.knn_precision, rec.knn_recall = mt.knn_precision_recall(base_features, feats, k)
    return rec


def eval_checkpoint(model, prompts, base_features, n_samples=None, k=3, guidance_scale=1.0):
    """OCR F1, embedding alignment and kNN coverage against base generations."""
    prompts = list(prompts)[: n_samples or len(prompts)]
    if len(prompts) <= k:
        raise ConfigurationError(f"need more than k={k} samples, got {len(prompts)}")
    return eval_images(generate(model, prompts, guidance_scale), prompts, base_features, k)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    handle: LoraHandle
    curve: list = field(default_factory=list)  # rows following CURVE_HEADER
    final: mt.MetricRecord | None = None

    def curve_csv(self, path=None):
        return mt.write_csv(path, CURVE_HEADER, self.curve)


def finetune(handle, train_words, eval_set, config, base_features=None, log=None):
    """Adam on the adapter tensors only; evaluates every ``eval_every`` steps."""
    if eval_set and train_words and {p.text for p, _ in eval_set} & set(train_words):
        raise ConfigurationError("fine-tuning words overlap the evaluation words")
    model = handle.model
    params = handle.trainable()
    state = nx.AdamState.zeros_like(params)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xF17E]))
    result = FinetuneResult(handle)
    losses = []

    def evaluate(step):
        rec = eval_checkpoint(model, eval_set, base_features, k=config.k,
                              guidance_scale=config.guidance_scale)
        loss = float(np.mean(losses[-config.eval_every:])) if losses else float("nan")
        result.curve.append([step, loss, rec.ocr_f1, rec.embed_align,
                             rec.knn_precision, rec.knn_recall])
        result.final = rec
        if log:
            log(f"step {step} loss {loss:.5f} ocr_f1 {rec.ocr_f1:.4f}")

    evaluate(0)
    for step in range(1, config.steps + 1):
        batch = gw.sample_batch(train_words, rng, config.batch)
        try:
            res = dn.train_step(model, batch, rng)
        except NumericError as exc:
            raise NumericError(f"fine-tuning aborted at step {step}: {exc}") from exc
        losses.append(res.loss)
        nx.adam_step(params, res.grads, state, config.lr)
        if step % config.eval_every == 0 or step == config.steps:
            evaluate(step)
    return result


# --------------------------------------------------------------------------
# adapter files
# --------------------------------------------------------------------------


def save_lora(handle, path, base_digest=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for name in sorted(handle.adapters):
        a = handle.adapters[name]
        entry = {"target": name}
        for kind, t in (("A", a.A), ("B", a.B)):
            entry[kind] = {"shape": list(t.shape), "offset": offset}
            offset += t.data.size
            chunks.append(t.data.astype("<f4").tobytes())
        table.append(entry)
    blob = b"".join(chunks)
    (path / "lora.bin").write_bytes(blob)
    manifest = {"version": 1, "rank": handle.rank, "alpha": handle.alpha,
                "layers": handle.layers, "base_digest": base_digest or handle.frozen_digest,
                "adapters": table, "lora_sha256": hashlib.sha256(blob).hexdigest()}
    (path / "lora.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_lora(model, path):
    path = Path(path)
    manifest = json.loads((path / "lora.json").read_text())
    if manifest["base_digest"] != frozen_digest(model):
        raise AdapterStateError("adapter file was trained on a different base model")
    handle = attach_lora(model, manifest["layers"], manifest["rank"], manifest["alpha"])
    raw = np.frombuffer((path / "lora.bin").read_bytes(), dtype="<f4")
    for entry in manifest["adapters"]:
        a = handle.adapters[entry["target"]]
        for kind, t in (("A", a.A), ("B", a.B)):
            spec = entry[kind]
            n = int(np.prod(spec["shape"]))
            t.data = raw[spec["offset"]: spec["offset"] + n].reshape(spec["shape"]).astype(
                model.dtype)
    return handle
