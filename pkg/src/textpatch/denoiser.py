"""Patch-transformer noise predictor with three conditioning-attention variants.

``static``  image queries attend to the encoder embedding ``e``; every block
            sees the same ``e`` (SD/SDXL-style cross-attention).
``concat``  keys/values are the concatenation of image-side and text-side
            projections (DeepFloyd-IF-style); queries come from the image.
``joint``   queries, keys and values are concatenations of both streams and
            the text stream is updated and carried from block to block
            (SD3/MM-DiT-style).

Images live in model space ``2*img - 1``.  The sampler is DDIM with eta=0,
so a (checkpoint, prompt, seed, hooks) tuple determines the output bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import glyphworld as gw
from . import numerics as nx
from .numerics import Tensor

VARIANTS = ("static", "concat", "joint")
PATCH = 4
GRID = gw.SIZE // PATCH
N_PATCHES = GRID * GRID
PATCH_DIM = PATCH * PATCH
# residual branches modulated by the timestep (shift, scale, gate each)
MOD_SITES = {
    "static": ("self", "cross", "mlp"),
    "concat": ("attn", "mlp"),
    "joint": ("attn", "mlp", "attn_txt", "mlp_txt"),
}


class RangeError(ValueError):
    pass


class PlanError(ValueError):
    pass


class ModelConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Linear-beta DDPM chain sampled at ``steps`` evenly spaced timesteps.

    The base chain has ``chain_length`` steps with beta rising linearly from
    ``beta_start`` to ``beta_end``; sampling step ``t`` (1..steps) sits at chain
    index ``1 + (t - 1) * chain_length // steps`` so step 1 is the first chain
    step and ``alpha_bar[0] == 1``.
    """

    steps: int = 50
    chain_length: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @property
    def T(self):
        return self.steps

    @property
    def chain_index(self):
        stride = self.chain_length // self.steps
        return np.concatenate([[0], 1 + stride * np.arange(self.steps)])

    @property
    def alpha_bar(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.chain_length, dtype=np.float64)
        chain = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return chain[self.chain_index]

    def check(self, t):
        if np.any(np.asarray(t) < 1) or np.any(np.asarray(t) > self.steps):
            raise RangeError(f"timestep {t} outside 1..{self.steps}")


def forward_noise(x0, t, eps, schedule=None, alpha_bar=None):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``alpha_bar`` overrides the schedule lookup (used for limit checks).
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise nx.DimensionError(f"noise shape {eps.shape} != image shape {x0.shape}")
    if alpha_bar is None:
        schedule = schedule or Schedule()
        schedule.check(t)
        alpha_bar = schedule.alpha_bar[np.asarray(t)]
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "static"
    n_blocks: int = 8
    d_model: int = 64
    heads: int = 4
    mlp_hidden: int = 256
    d_txt: int = gw.D_TXT
    prediction: str = "v"  # "eps", "x0" or "v"
    aligned_init: bool = True  # start two heads per text attention on nearby slots
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {self.variant!r}")
        if self.d_model % self.heads:
            raise ModelConfigError("d_model must be divisible by heads")
        if self.prediction not in ("eps", "x0", "v"):
            raise ModelConfigError(f"unknown prediction {self.prediction!r}")

    @property
    def cond_prefix(self):
        return "cross" if self.variant == "static" else "attn"

    def to_json(self):
        d = asdict(self)
        d["schedule"] = asdict(self.schedule)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["schedule"] = Schedule(**d.get("schedule", {}))
        return cls(**d)


def param_shapes(cfg):
    """Ordered name -> shape table for a configuration."""
    d, dt, m = cfg.d_model, cfg.d_txt, cfg.mlp_hidden
    shapes = {
        "patch_in.w": (PATCH_DIM, d), "patch_in.b": (d,),
        "pos_img": (N_PATCHES, d),
        "time.w1": (d, d), "time.b1": (d,), "time.w2": (d, d), "time.b2": (d,),
    }
    if cfg.variant == "joint":
        shapes.update({"ctx_in.w": (dt, d), "ctx_in.b": (d,)})

    def ln(p):
        shapes.update({f"{p}.g": (d,), f"{p}.b": (d,)})

    def lin(p, din, dout):
        shapes[p] = (din, dout)
        shapes[_bias_name(p)] = (dout,)

    def mlp(p):
        lin(f"{p}.w1", d, m)
        lin(f"{p}.w2", m, d)

    for i in range(cfg.n_blocks):
        b = f"blocks.{i}"
        lin(f"{b}.mod.w", d, 3 * len(MOD_SITES[cfg.variant]) * d)
        if cfg.variant == "static":
            ln(f"{b}.ln1")
            lin(f"{b}.self.wqkv", d, 3 * d)
            lin(f"{b}.self.wo", d, d)
            ln(f"{b}.ln2")
            lin(f"{b}.cross.wq", d, d)
            lin(f"{b}.cross.wk_txt", dt, d)
            lin(f"{b}.cross.wv_txt", dt, d)
            lin(f"{b}.cross.wo", d, d)
            ln(f"{b}.ln3")
            mlp(f"{b}.mlp")
        elif cfg.variant == "concat":
            ln(f"{b}.ln1")
            lin(f"{b}.attn.wq", d, d)
            lin(f"{b}.attn.wk_img", d, d)
            lin(f"{b}.attn.wv_img", d, d)
            lin(f"{b}.attn.wk_txt", dt, d)
            lin(f"{b}.attn.wv_txt", dt, d)
            lin(f"{b}.attn.wo", d, d)
            ln(f"{b}.ln2")
            mlp(f"{b}.mlp")
        else:
            ln(f"{b}.ln1")
            ln(f"{b}.ln1_txt")
            for side, din in (("img", d), ("txt", d)):
                for w in ("wq", "wk", "wv"):
                    lin(f"{b}.attn.{w}_{side}", din, d)
                lin(f"{b}.attn.wo_{side}", d, d)
            ln(f"{b}.ln2")
            ln(f"{b}.ln2_txt")
            mlp(f"{b}.mlp")
            mlp(f"{b}.mlp_txt")
    ln("ln_out")
    lin("final_mod.w", d, 2 * d)
    lin("patch_out.w", d, PATCH_DIM)
    return shapes


def _bias_name(weight_name):
    head, _, last = weight_name.rpartition(".")
    return f"{head}.b{last[1:]}" if last.startswith("w") and last != "w" else f"{head}.b"


def cond_output_names(cfg):
    """Weights whose zeroing severs text conditioning from the image stream."""
    p = cfg.cond_prefix
    wo = "wo_img" if cfg.variant == "joint" else "wo"
    return [f"blocks.{i}.{p}.{wo}" for i in range(cfg.n_blocks)]


def kv_text_names(cfg, layer):
    p = cfg.cond_prefix
    return [f"blocks.{layer}.{p}.wk_txt", f"blocks.{layer}.{p}.wv_txt"]


def init_params(cfg, seed=0, dtype=np.float32):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "pos_img":
            a = grid_code(cfg.d_model)
        elif len(shape) == 1:
            a = np.ones(shape) if leaf == "g" else np.zeros(shape)
        elif ".mod." in name or name.startswith("final_mod"):
            a = np.zeros(shape)
        else:
            a = rng.standard_normal(shape) / math.sqrt(shape[0])
            if name == "patch_out.w":
                a *= 0.1
        params[name] = a.astype(dtype)
    if cfg.aligned_init:
        _align_text_heads(params, cfg)
    return params


def grid_code(d):
    """2-D sinusoidal patch-position code: row half, then column half.

    Both halves use the text encoder's pixel frame, evaluated at patch centres.
    """
    q = d // 4
    r, c = np.divmod(np.arange(N_PATCHES), GRID)
    centre = PATCH / 2
    return np.concatenate([gw.column_code(PATCH * r + centre, q),
                           gw.column_code(PATCH * c + centre, q)], axis=1)


ALIGN_SHIFTS = (-1.0, 1.0)  # pixel offsets of the two aligned heads
ALIGN_GAIN = 3.0


def _align_text_heads(params, cfg):
    """Point the first heads of every text attention at nearby character slots.

    Query weights read the column half of the patch code, rotated by a pixel
    shift; key weights read the text position code.  The logit of patch
    column x against slot i is then ~ gain^2 * sum_j cos(w_j (x + shift - x_i)),
    peaked where the slot's cell lies under the patch.
    """
    d, dh = cfg.d_model, cfg.d_model // cfg.heads
    q = d // 4
    nf = min(dh // 2, q, cfg.d_txt // 4)
    if nf < 1 or (cfg.variant == "joint" and cfg.d_txt != d):
        return
    omega = 2 * np.pi * np.arange(1, nf + 1) / gw.POSITION_PERIOD
    col_sin, col_cos = 2 * q, 3 * q
    half = cfg.d_txt // 2
    pos_sin, pos_cos = half, half + half // 2
    if cfg.variant == "static":
        wq, wk = "cross.wq", "cross.wk_txt"
    elif cfg.variant == "concat":
        wq, wk = "attn.wq", "attn.wk_txt"
    else:
        wq, wk = "attn.wq_img", "attn.wk_txt"
    for i in range(cfg.n_blocks):
        Q, K = params[f"blocks.{i}.{wq}"], params[f"blocks.{i}.{wk}"]
        for hd, shift in enumerate(ALIGN_SHIFTS[: cfg.heads]):
            lo = hd * dh
            Q[:, lo:lo + dh] = 0.0
            K[:, lo:lo + dh] = 0.0
            cs, sn = np.cos(omega * shift), np.sin(omega * shift)
            for j in range(nf):
                # sin(w(x+s)) = sin(wx)cos(ws) + cos(wx)sin(ws); cos likewise
                Q[col_sin + j, lo + j] = ALIGN_GAIN * cs[j]
                Q[col_cos + j, lo + j] = ALIGN_GAIN * sn[j]
                Q[col_cos + j, lo + nf + j] = ALIGN_GAIN * cs[j]
                Q[col_sin + j, lo + nf + j] = -ALIGN_GAIN * sn[j]
                K[pos_sin + j, lo + j] = ALIGN_GAIN
                K[pos_cos + j, lo + nf + j] = ALIGN_GAIN
    if cfg.variant == "joint" and cfg.d_txt == d:
        params["ctx_in.w"] = np.eye(d, dtype=params["ctx_in.w"].dtype)


def timestep_features(tau, d):
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(tau, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def patchify(x):
    b = x.shape[0]
    return (x.reshape(b, GRID, PATCH, GRID, PATCH).swapaxes(2, 3)
            .reshape(b, N_PATCHES, PATCH_DIM))


def unpatchify(p):
    b = p.shape[0]
    return (p.reshape(b, GRID, GRID, PATCH, PATCH).swapaxes(2, 3)
            .reshape(b, gw.SIZE, gw.SIZE))


class BlockTrace:
    """Per-(layer, timestep) record of the K/V matrices that entered attention.

    Stores the hooked batch row only.  ``*_native`` entries are the text-side
    projections computed from the block's own input before any substitution.
    """

    def __init__(self):
        self.entries = {}
        self.inputs = {}  # t -> x_t fed to the model at that step (sampling only)

    def record(self, layer, t, **arrays):
        self.entries[(layer, int(t))] = {k: np.array(v) for k, v in arrays.items()}

    def __getitem__(self, key):
        return self.entries[key]

    def __iter__(self):
        return iter(sorted(self.entries))

    def __len__(self):
        return len(self.entries)


class DenoiserModel:
    """Named parameter table plus configuration.

    ``adapters`` maps a base weight name to a :class:`numerics.LoraAdapter`;
    forward passes use the effective weight ``W + (alpha/r) B A``.
    """

    def __init__(self, config, params):
        self.config = config
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ModelConfigError(
                f"parameter table does not match variant {config.variant!r}: "
                f"missing={missing[:4]} extra={extra[:4]}"
            )
        for k, shape in expected.items():
            if tuple(np.shape(params[k])) != tuple(shape):
                raise ModelConfigError(f"{k}: shape {np.shape(params[k])} != {shape}")
        self.params = {k: Tensor(np.asarray(params[k]), name=k) for k in expected}
        self.adapters = {}

    @classmethod
    def create(cls, config=None, seed=0, dtype=np.float32, **kw):
        config = config or ModelConfig(**kw)
        return cls(config, init_params(config, seed, dtype))

    @property
    def schedule(self):
        return self.config.schedule

    @property
    def dtype(self):
        return self.params["patch_in.w"].dtype

    def arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def astype(self, dtype):
        m = DenoiserModel(self.config, {k: v.astype(dtype) for k, v in self.arrays().items()})
        return m

    def copy(self):
        m = DenoiserModel(self.config, {k: v.copy() for k, v in self.arrays().items()})
        return m

    def set_trainable(self, names):
        names = set(names)
        for k, t in self.params.items():
            t.requires_grad = k in names

    def trainable(self):
        out = {k: t for k, t in self.params.items() if t.requires_grad}
        for a in self.adapters.values():
            out[a.A.name] = a.A
            out[a.B.name] = a.B
        return out

    def weights_blob(self):
        return b"".join(self.params[k].data.astype("<f4").tobytes() for k in self.params)

    def digest(self):
        h = hashlib.sha256(self.weights_blob())
        for name in sorted(self.adapters):
            a = self.adapters[name]
            h.update(name.encode())
            h.update(a.A.data.astype("<f4").tobytes())
            h.update(a.B.data.astype("<f4").tobytes())
            h.update(repr(a.alpha).encode())
        return h.hexdigest()

    # ---- forward -------------------------------------------------------

    def _lin(self, x, name):
        return nx.linear(x, self.params[name], self.params[_bias_name(name)],
                         self.adapters.get(name))

    def _ln(self, x, name):
        return nx.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _mlp(self, x, name):
        return self._lin(nx.gelu(self._lin(x, f"{name}.w1")), f"{name}.w2")

    def forward(self, x_t, t, e, hooks=None, hook_rows=(0,), trace=None, streams=None):
        """Predict noise for model-space images ``x_t`` (B, 32, 32).

        ``t`` is a sampling step (int, or one per batch row), ``e`` the text
        embeddings (B, 16, d_txt).  ``hooks(layer, t, k_txt, v_txt)`` may
        replace the text-side keys/values of the rows in ``hook_rows``; this
        requires a scalar ``t``.  Returns a Tensor of shape (B, 32, 32).
        """
        cfg = self.config
        x_t = np.asarray(x_t)
        b = x_t.shape[0]
        if x_t.shape[1:] != (gw.SIZE, gw.SIZE):
            raise nx.DimensionError(f"expected (B, 32, 32) images, got {x_t.shape}")
        e = np.asarray(e)
        if e.shape[1:] != (gw.SEQ_LEN, cfg.d_txt):
            raise nx.DimensionError(f"expected (B, 16, {cfg.d_txt}) text, got {e.shape}")
        t_arr = np.broadcast_to(np.asarray(t), (b,))
        cfg.schedule.check(t_arr)
        if hooks is not None and np.ndim(t) != 0:
            raise PlanError("hooks need a single timestep per call")
        dtype = self.dtype
        tau = cfg.schedule.chain_index[t_arr]

        temb = Tensor(timestep_features(tau, cfg.d_model).astype(dtype))
        temb = nx.silu(self._lin(nx.silu(self._lin(temb, "time.w1")), "time.w2"))
        h = self._lin(patchify(x_t.astype(dtype, copy=False)), "patch_in.w")
        h = nx.add(h, self.params["pos_img"])
        e = Tensor(e.astype(dtype, copy=False))
        c = self._lin(e, "ctx_in.w") if cfg.variant == "joint" else None
        one = Tensor(np.ones((), dtype))
        d = cfg.d_model

        def chunks(name, n):
            m = nx.reshape(self._lin(temb, name), (b, 1, n * d))
            return [nx.take(m, (Ellipsis, slice(j * d, (j + 1) * d))) for j in range(n)]

        def pre(x, ln, shift, scale):
            return nx.add(nx.mul(self._ln(x, ln), nx.add(scale, one)), shift)

        def gated(x, gate, y):
            return nx.add(x, nx.mul(gate, y))

        heads = cfg.heads
        for i in range(cfg.n_blocks):
            p = f"blocks.{i}"
            mod = chunks(f"{p}.mod.w", 3 * len(MOD_SITES[cfg.variant]))
            if cfg.variant == "static":
                a = pre(h, f"{p}.ln1", mod[0], mod[1])
                qkv = self._lin(a, f"{p}.self.wqkv")
                q = nx.take(qkv, (Ellipsis, slice(0, d)))
                k = nx.take(qkv, (Ellipsis, slice(d, 2 * d)))
                v = nx.take(qkv, (Ellipsis, slice(2 * d, 3 * d)))
                h = gated(h, mod[2], self._lin(nx.attention(q, k, v, heads), f"{p}.self.wo"))
                a = pre(h, f"{p}.ln2", mod[3], mod[4])
                q = self._lin(a, f"{p}.cross.wq")
                kt, vt = self._text_kv(e, f"{p}.cross", i, t, hooks, hook_rows, trace)
                h = gated(h, mod[5], self._lin(nx.attention(q, kt, vt, heads), f"{p}.cross.wo"))
                h = gated(h, mod[8], self._mlp(pre(h, f"{p}.ln3", mod[6], mod[7]), f"{p}.mlp"))
            elif cfg.variant == "concat":
                a = pre(h, f"{p}.ln1", mod[0], mod[1])
                q = self._lin(a, f"{p}.attn.wq")
                ki = self._lin(a, f"{p}.attn.wk_img")
                vi = self._lin(a, f"{p}.attn.wv_img")
                kt, vt = self._text_kv(e, f"{p}.attn", i, t, hooks, hook_rows, trace,
                                       ki=ki, vi=vi)
                o = nx.attention(q, nx.concat([ki, kt], 1), nx.concat([vi, vt], 1), heads)
                h = gated(h, mod[2], self._lin(o, f"{p}.attn.wo"))
                h = gated(h, mod[5], self._mlp(pre(h, f"{p}.ln2", mod[3], mod[4]), f"{p}.mlp"))
            else:
                a = pre(h, f"{p}.ln1", mod[0], mod[1])
                ac = pre(c, f"{p}.ln1_txt", mod[6], mod[7])
                qi = self._lin(a, f"{p}.attn.wq_img")
                ki = self._lin(a, f"{p}.attn.wk_img")
                vi = self._lin(a, f"{p}.attn.wv_img")
                qt = self._lin(ac, f"{p}.attn.wq_txt")
                kt, vt = self._text_kv(ac, f"{p}.attn", i, t, hooks, hook_rows, trace,
                                       ki=ki, vi=vi)
                o = nx.attention(nx.concat([qi, qt], 1), nx.concat([ki, kt], 1),
                                 nx.concat([vi, vt], 1), heads)
                oi = nx.take(o, (slice(None), slice(0, N_PATCHES)))
                ot = nx.take(o, (slice(None), slice(N_PATCHES, None)))
                h = gated(h, mod[2], self._lin(oi, f"{p}.attn.wo_img"))
                c = gated(c, mod[8], self._lin(ot, f"{p}.attn.wo_txt"))
                h = gated(h, mod[5], self._mlp(pre(h, f"{p}.ln2", mod[3], mod[4]), f"{p}.mlp"))
                c = gated(c, mod[11],
                          self._mlp(pre(c, f"{p}.ln2_txt", mod[9], mod[10]), f"{p}.mlp_txt"))
                if streams is not None:
                    streams.append(c.data.copy())

        shift, scale = chunks("final_mod.w", 2)
        out = self._lin(pre(h, "ln_out", shift, scale), "patch_out.w")
        out = nx.reshape(out, (b, GRID, GRID, PATCH, PATCH))
        out = Tensor(unpatchify(out.data)) if not out.requires_grad else _unpatchify_t(out, b)
        if cfg.prediction == "x0":
            ab = cfg.schedule.alpha_bar[t_arr].reshape(b, 1, 1)
            s1 = (1.0 / np.sqrt(1.0 - ab)).astype(dtype)
            s2 = (np.sqrt(ab) / np.sqrt(1.0 - ab)).astype(dtype)
            out = nx.add(Tensor(x_t.astype(dtype) * s1), nx.mul(out, Tensor(-s2)))
        elif cfg.prediction == "v":
            # eps = sqrt(ab) v + sqrt(1 - ab) x_t, so the x_t copy is exact at high noise
            ab = cfg.schedule.alpha_bar[t_arr].reshape(b, 1, 1)
            out = nx.add(Tensor(x_t.astype(dtype) * np.sqrt(1.0 - ab).astype(dtype)),
                         nx.mul(out, Tensor(np.sqrt(ab).astype(dtype))))
        return out

    def _text_kv(self, src, prefix, layer, t, hooks, hook_rows, trace, ki=None, vi=None):
        kt = self._lin(src, f"{prefix}.wk_txt")
        vt = self._lin(src, f"{prefix}.wv_txt")
        native = (kt, vt)
        if hooks is not None:
            kd, vd = kt.data.copy(), vt.data.copy()
            changed = False
            for r in hook_rows:
                nk, nv = hooks(layer, int(t), kd[r], vd[r])
                if nk is not kd[r] or nv is not vd[r]:
                    kd[r], vd[r] = nk, nv
                    changed = True
            if changed:
                kt, vt = Tensor(kd), Tensor(vd)
        if trace is not None:
            r = hook_rows[0]
            extra = {}
            if ki is not None:
                extra = {"k_img": ki.data[r], "v_img": vi.data[r]}
            trace.record(layer, int(np.asarray(t).reshape(-1)[0]),
                         k_txt=kt.data[r], v_txt=vt.data[r],
                         k_txt_native=native[0].data[r], v_txt_native=native[1].data[r],
                         **extra)
        return kt, vt


def _unpatchify_t(out, b):
    # (B, G, G, P, P) -> (B, 32, 32) as a differentiable reshape/transposition
    data = out.data.swapaxes(2, 3).reshape(b, gw.SIZE, gw.SIZE)
    res = Tensor(data)

    def backward():
        g = res.grad.reshape(b, GRID, PATCH, GRID, PATCH).swapaxes(2, 3)
        out._accum(np.ascontiguousarray(g))

    return nx._record(res, backward)


def denoiser_forward(x_t, t, e, model, **kw):
    """Array-level wrapper: returns the predicted noise as an ndarray."""
    return model.forward(x_t, t, e, **kw).data


def check_hooks(model, hooks):
    layers = getattr(hooks, "layers", None)
    if layers is None:
        return
    bad = [l for l in layers if not 0 <= l < model.config.n_blocks]
    if bad:
        raise PlanError(f"hook references layers {bad}; model has {model.config.n_blocks}")


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def initial_noise(seed, dtype=np.float32):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    return rng.standard_normal((gw.SIZE, gw.SIZE)).astype(dtype)


def sample(model, prompt, seed, guidance_scale=1.0, negative_prompt=None, hooks=None,
           trace=None):
    """Deterministic DDIM (eta=0) generation; returns a [0, 1] image.

    With ``guidance_scale == 1`` and no negative prompt the unconditional
    branch is skipped.  Otherwise ``eps = eps_neg + s (eps_cond - eps_neg)``
    where ``eps_neg`` uses ``negative_prompt`` or the null prompt.  Hooks
    only ever see the conditional branch.
    """
    check_hooks(model, hooks)
    sched = model.schedule
    ab = sched.alpha_bar
    dtype = model.dtype
    e_cond = gw.encode_prompt(prompt).embedding
    guided = guidance_scale != 1.0 or negative_prompt is not None
    if guided:
        neg = negative_prompt if negative_prompt is not None else gw.Prompt.null()
        e = np.stack([e_cond, gw.encode_prompt(neg).embedding])
    else:
        e = e_cond[None]
    e = e.astype(dtype)
    x = initial_noise(seed, dtype)[None]
    s = np.asarray(guidance_scale, dtype=dtype)
    for t in range(sched.T, 0, -1):
        if trace is not None:
            trace.inputs[t] = x[0].copy()
        xin = np.repeat(x, e.shape[0], axis=0)
        eps = model.forward(xin, t, e, hooks=hooks, hook_rows=(0,), trace=trace).data
        eps = eps[1:2] + s * (eps[0:1] - eps[1:2]) if guided else eps[0:1]
        a_t, a_prev = ab[t], ab[t - 1]
        x0 = (x - np.sqrt(1.0 - a_t).astype(dtype) * eps) / np.sqrt(a_t).astype(dtype)
        x0 = np.clip(x0, -1.0, 1.0)
        x = np.sqrt(a_prev).astype(dtype) * x0 + np.sqrt(1.0 - a_prev).astype(dtype) * eps
    img = np.clip((x[0] + 1.0) * 0.5, 0.0, 1.0).astype(np.float32)
    return img


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    grads: dict


def draw_timesteps(rng, size, T, mix=0.0, band_start=0.7):
    """Uniform steps on 1..T, with a fraction ``mix`` drawn from the high-noise
    band ``ceil(band_start * T)..T`` instead."""
    t = rng.integers(1, T + 1, size=size)
    if mix > 0:
        lo = min(T, max(1, int(np.ceil(band_start * T))))
        band = rng.integers(lo, T + 1, size=size)
        t = np.where(rng.random(size) < mix, band, t)
    return t


def train_step(model, batch, rng, p_uncond=0.1, t_mix=0.0, band_start=0.7):
    """One noise-regression step.

    ``batch`` is a sequence of ``(image, prompt)`` pairs with images in [0, 1].
    Returns the mean MSE between predicted and drawn noise and the gradient of
    every trainable tensor (including attached adapters).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    dtype = model.dtype
    x0 = np.stack([np.asarray(img, dtype=dtype) for img, _ in batch]) * 2 - 1
    b = len(batch)
    t = draw_timesteps(rng, b, model.schedule.T, t_mix, band_start)
    eps = rng.standard_normal(x0.shape).astype(dtype)
    drop = rng.random(b) < p_uncond
    null = gw.encode_prompt(gw.Prompt.null()).embedding
    e = np.stack([null if d else gw.encode_prompt(p).embedding for (_, p), d in zip(batch, drop)])
    x_t = forward_noise(x0, t, eps, model.schedule)
    params = model.trainable()
    with nx.GradTape() as tape:
        pred = model.forward(x_t, t, e.astype(dtype))
        per = np.square(pred.data - eps).reshape(b, -1).mean(axis=1)
        bad = np.flatnonzero(~np.isfinite(per))
        if bad.size:
            raise nx.NumericError(f"non-finite loss at batch index {int(bad[0])}")
        loss = nx.mse(pred, eps)
    grads = nx.backward(tape, loss, params)
    return StepResult(float(loss.data), grads)


TRAIN_CURVE_HEADER = ["step", "loss"]


@dataclass
class TrainConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 2e-3
    seed: int = 0
    p_uncond: float = 0.1
    t_mix: float = 0.0
    band_start: float = 0.7
    warmup_high: int = 800  # opening steps that draw t only from the high-noise band
    inverted_fraction: float = 0.0
    log_every: int = 100

    def to_json(self):
        return asdict(self)


@dataclass
class TrainResult:
    steps: int
    final_loss: float
    curve: list  # rows following TRAIN_CURVE_HEADER
    seconds: float


def train(model, words, config=None, templates=None, log=None):
    """Adam on every trainable tensor over freshly rendered batches of ``words``.

    A model with nothing marked trainable trains all of its base tensors.

    Batches, timesteps and noise all come from one rng seeded by
    ``config.seed``, so a fixed step count gives a bit-identical model.
    """
    config = config or TrainConfig()
    if not words:
        raise ValueError("training needs at least one word")
    if config.steps < 1 or config.batch < 1:
        raise nx.ConfigurationError("steps and batch must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EA1]))
    if not model.trainable():
        model.set_trainable(model.params)  # a fresh model trains every base tensor
    params = model.trainable()
    state = nx.AdamState.zeros_like(params)
    curve, window = [], []
    t0 = time.perf_counter()
    for step in range(1, config.steps + 1):
        batch = gw.sample_batch(words, rng, config.batch, templates, config.inverted_fraction)
        try:
            mix = 1.0 if step <= config.warmup_high else config.t_mix
            res = train_step(model, batch, rng, config.p_uncond, mix, config.band_start)
        except nx.NumericError as exc:
            raise nx.NumericError(f"training aborted at step {step}: {exc}") from exc
        nx.adam_step(params, res.grads, state, config.lr)
        window.append(res.loss)
        if step % config.log_every == 0 or step == config.steps:
            curve.append([step, float(np.mean(window))])
            window = []
            if log:
                log(f"step {step} loss {curve[-1][1]:.5f} "
                    f"({time.perf_counter() - t0:.0f} s)")
    return TrainResult(config.steps, curve[-1][1], curve, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# hand-wired oracle
# --------------------------------------------------------------------------

ORACLE_D = 128
_ROW, _COL, _CODE_A, _CODE_B, _PIX = 0, 8, 16, 46, 76  # residual-stream layout
_CODE = 2 * gw.GLYPH_H * gw.GLYPH_W  # each glyph bit stored as (bit, 1 - bit)
_SHARP = 400.0  # attention logit gain for slot selection
_FIRE = 40.0  # MLP threshold gain


def _patch_cells(c):
    """Character cells under the left and right halves of patch column ``c``."""
    cols = [x for x in range(PATCH * c, PATCH * c + PATCH)
            if gw.CELL_LEFT <= x < gw.CELL_LEFT + gw.GLYPH_W * gw.MAX_LINE]
    cells = [(x - gw.CELL_LEFT) // gw.GLYPH_W for x in cols]
    return cells[0], cells[-1]


def _glyph_code_table():
    """Balanced bit code for every token that can sit in a character slot."""
    ids = [gw.CHAR_BASE + i for i in range(len(gw.CHARSET))] + [gw.EOS, gw.PAD]
    codes = []
    for tok in ids:
        bits = np.zeros(gw.GLYPH_H * gw.GLYPH_W)
        if tok >= gw.CHAR_BASE:
            bits = gw.GLYPHS[gw.CHARSET[tok - gw.CHAR_BASE]].reshape(-1).astype(np.float64)
        codes.append(np.stack([bits, 1 - bits], axis=1).reshape(-1))
    return ids, np.array(codes)


def _ln_affine(w, b, ones, d, eps=1e-5):
    """Fold a LayerNorm of a 0/1 vector with ``ones`` ones into ``x @ w + b``."""
    mu = ones / d
    sigma = math.sqrt(mu - mu * mu + eps)
    return w * sigma, b + mu * w.sum(axis=0)


def build_oracle(variant, layer, n_blocks=8, heads=4, mlp_hidden=256, schedule=None):
    """Exact text renderer whose only text path runs through block ``layer``.

    Every other residual branch is gated off.  Patch positions are one-hot
    row/column bands; two heads of block ``layer`` fetch the glyph codes of the
    character cells under each patch, and the MLP turns them into the patch's
    line-1 pixels.  The network predicts x0 directly, ignoring x_t, so its
    sample is the sign text on black with the prompt's text (up to one line).
    """
    if variant not in VARIANTS:
        raise ModelConfigError(f"unknown variant {variant!r}")
    if not 0 <= layer < n_blocks:
        raise ModelConfigError(f"oracle layer {layer} outside 0..{n_blocks - 1}")
    d, dh = ORACLE_D, ORACLE_D // heads
    if heads < 2 or dh < max(gw.SEQ_LEN, _CODE):
        raise ModelConfigError("oracle needs at least two heads of width >= 30")
    cfg = ModelConfig(variant=variant, n_blocks=n_blocks, d_model=d, heads=heads,
                      mlp_hidden=mlp_hidden, prediction="x0",
                      schedule=schedule or Schedule())
    params = {n: np.zeros(s) for n, s in param_shapes(cfg).items()}
    for n in params:
        if n.endswith(".g"):
            params[n][:] = 1.0
    r, c = np.divmod(np.arange(N_PATCHES), GRID)
    params["pos_img"][np.arange(N_PATCHES), _ROW + r] = 1.0
    params["pos_img"][np.arange(N_PATCHES), _COL + c] = 1.0

    # text side: key = one-hot slot, value = glyph code of the slot's token
    dt = cfg.d_txt
    half = dt // 2
    key_e = np.zeros((dt, gw.SEQ_LEN))
    key_e[half:] = np.linalg.pinv(gw.POSITION_TABLE.astype(np.float64))
    ids, codes = _glyph_code_table()
    tok = np.concatenate([gw.TOKEN_TABLE[ids].astype(np.float64), np.ones((len(ids), 1))], 1)
    sol = np.linalg.lstsq(tok, codes, rcond=None)[0]
    val_e, val_b = np.zeros((dt, _CODE)), sol[-1]
    val_e[:half] = sol[:-1]

    p = f"blocks.{layer}"
    pre = cfg.cond_prefix
    text_scale = 1.0
    if variant == "joint":
        # text stream c = [e, -e]: zero mean and unit variance, so LN(c) ~ c
        params["ctx_in.w"][:, :dt] = np.eye(dt)
        params["ctx_in.w"][:, dt:2 * dt] = -np.eye(dt)
        ms = float(np.mean(np.square(gw.embed_ids([gw.PAD]))))
        text_scale = math.sqrt(ms + 1e-5)
    wq = {"static": f"{p}.cross.wq", "concat": f"{p}.attn.wq", "joint": f"{p}.attn.wq_img"}
    wo = {"static": f"{p}.cross.wo", "concat": f"{p}.attn.wo", "joint": f"{p}.attn.wo_img"}
    K, V = params[f"{p}.{pre}.wk_txt"], params[f"{p}.{pre}.wv_txt"]
    bv = params[f"{p}.{pre}.bv_txt"]
    q_w = np.zeros((d, d))
    o_w = np.zeros((d, d))
    for hd, (dest, side) in enumerate(((_CODE_A, 0), (_CODE_B, 1))):
        lo = hd * dh
        K[:dt, lo:lo + gw.SEQ_LEN] = key_e * text_scale
        V[:dt, lo:lo + _CODE] = val_e * text_scale
        bv[lo:lo + _CODE] = val_b
        for col in range(GRID):
            q_w[_COL + col, lo + 3 + _patch_cells(col)[side]] = _SHARP
        o_w[lo:lo + _CODE, dest:dest + _CODE] = np.eye(_CODE)
    params[wq[variant]], params[_bias_name(wq[variant])] = _ln_affine(q_w, np.zeros(d), 2, d)
    params[wo[variant]] = o_w

    # MLP: one unit per line-1 glyph pixel, firing when its bit is set
    w1, b1 = np.zeros((d, mlp_hidden)), np.zeros(mlp_hidden)
    w2, b2 = np.zeros((mlp_hidden, d)), np.zeros(d)
    b2[_PIX + 1:_PIX + 2 * PATCH * PATCH:2] = 1.0  # (p, 1 - p) pairs start at p = 0
    unit = 0
    top = gw.LINE_TOPS[0]
    for row in range(top, top + gw.GLYPH_H):
        for x in range(gw.CELL_LEFT, gw.CELL_LEFT + gw.GLYPH_W * gw.MAX_LINE):
            pr, pc = divmod(row, PATCH)[0], x // PATCH
            cell, gcol = divmod(x - gw.CELL_LEFT, gw.GLYPH_W)
            left, right = _patch_cells(pc)
            base = _CODE_A if cell == left else _CODE_B
            bit = 2 * ((row - top) * gw.GLYPH_W + gcol)
            if unit >= mlp_hidden:
                raise ModelConfigError("oracle needs mlp_hidden >= 150")
            w1[base + bit, unit] = _FIRE
            w1[_ROW + pr, unit] = _FIRE
            w1[_COL + pc, unit] = _FIRE
            b1[unit] = -2.5 * _FIRE
            pix = (row % PATCH) * PATCH + x % PATCH
            w2[unit, _PIX + 2 * pix] = 1.0 / (0.5 * _FIRE)
            w2[unit, _PIX + 2 * pix + 1] = -1.0 / (0.5 * _FIRE)
            unit += 1
    ones_mlp = 2 + 2 * _CODE // 2
    params[f"{p}.mlp.w1"], params[f"{p}.mlp.b1"] = _ln_affine(w1, b1, ones_mlp, d)
    params[f"{p}.mlp.w2"], params[f"{p}.mlp.b2"] = w2, b2

    # gates: 1 on this block's text attention and MLP, 0 elsewhere
    sites = MOD_SITES[variant]
    gate = np.zeros(3 * len(sites) * d)
    for site in (("cross" if variant == "static" else "attn"), "mlp"):
        j = sites.index(site)
        gate[(3 * j + 2) * d:(3 * j + 3) * d] = 1.0
    params[f"{p}.mod.b"] = gate

    # output: x0 = 2 p - 1 for each pixel of the patch
    out = np.zeros((d, PATCH_DIM))
    for pix in range(PATCH_DIM):
        out[_PIX + 2 * pix, pix] = 1.0
        out[_PIX + 2 * pix + 1, pix] = -1.0
    ones_out = ones_mlp + PATCH_DIM
    params["patch_out.w"], params["patch_out.b"] = _ln_affine(out, np.zeros(PATCH_DIM),
                                                              ones_out, d)
    return DenoiserModel(cfg, {n: a.astype(np.float32) for n, a in params.items()})


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(model, path, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, offset = [], 0
    for name, t in model.params.items():
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += int(np.prod(t.shape))
    blob = model.weights_blob()
    (path / "weights.bin").write_bytes(blob)
    cfg = model.config
    manifest = {
        "version": 1,
        "variant": cfg.variant,
        "n_blocks": cfg.n_blocks,
        "d_model": cfg.d_model,
        "heads": cfg.heads,
        "mlp_hidden": cfg.mlp_hidden,
        "d_txt": cfg.d_txt,
        "prediction": cfg.prediction,
        "schedule": asdict(cfg.schedule),
        "encoder": gw.ENCODER_VERSION,
        "params": table,
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_checkpoint(path):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    cfg = ModelConfig(
        variant=manifest["variant"], n_blocks=manifest["n_blocks"],
        d_model=manifest["d_model"], heads=manifest["heads"],
        mlp_hidden=manifest["mlp_hidden"], d_txt=manifest["d_txt"],
        prediction=manifest.get("prediction", "eps"),
        schedule=Schedule(**manifest["schedule"]),
    )
    wpath = path / "weights.bin"
    if not wpath.exists():
        raise FileNotFoundError(f"checkpoint weights not found: {wpath}")
    raw = np.frombuffer(wpath.read_bytes(), dtype="<f4")
    params = {}
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"]))
        params[entry["name"]] = raw[entry["offset"]: entry["offset"] + n].reshape(
            entry["shape"]).astype(np.float32)
    return DenoiserModel(cfg, params)
