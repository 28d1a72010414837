"""Command-line entry point: ``textpatch <command> [--config FILE] [overrides]``.

Every run writes a fresh directory holding the fully resolved config, any
checkpoint, CSV/JSON reports, PGM images and a plain-text log.  Exit codes:
0 ok, 2 usage, 3 config (bad schema, missing files), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import denoiser as dn
from . import glyphworld as gw
from . import guard
from . import localizer as lz
from . import metrics as mt
from . import patchkit as pk
from . import tuner

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4

_PROMPT = {"template_id": 0, "text": "", "style": "normal"}

DEFAULTS = {
    "model": {"variant": "static", "n_blocks": 8, "d_model": 64, "heads": 4,
              "mlp_hidden": 256, "prediction": "v", "seed": 0, "checkpoint": None,
              "guidance_scale": 1.0, "oracle_layer": None},
    "dataset": {"n_train": 200, "n_val": 20, "n_test": 50, "seed": 0, "seeds_per_word": 1,
                "inverted_fraction": 0.0},
    "train": dn.TrainConfig().to_json(),
    "localize": {"n_pairs": 20, "pair_seed": 0, "theta": 0.05, "scorer": "ocr_f1",
                 "t_s": None, "layers": None, "report": None,
                 "ts_grid": [0, 10, 20, 30, 40, 50], "count_sizes": [],
                 "stress_runs": 0, "stress_texts": ["STOP", "MAZE", "WAVE"],
                 "stress_templates": [0, 2]},
    "edit": {"source": dict(_PROMPT, text="STOP"), "target": dict(_PROMPT, text="MAZE"),
             "seed": 0, "layers": None, "t_s": None},
    "finetune": {**tuner.FinetuneConfig().to_json(), "layer_set": "localized"},
    "detox": {"methods": ["ours", "negative_prompt", "prompt_swap"], "n_prompts": 50,
              "policy": "stars", "lexicon": None, "negative_scale": 3.0, "seed": 0,
              "layers": None, "t_s": None, "save_images": 4},
    "eval": {"n_samples": 50, "seed": 0},
}

# allowed JSON types for fields whose default is None or a list
_LOOSE = {
    "/model/checkpoint": (str, type(None)),
    "/model/oracle_layer": (int, type(None)),
    "/localize/t_s": (int, type(None)),
    "/localize/layers": (list, type(None)),
    "/localize/report": (str, type(None)),
    "/edit/layers": (list, type(None)),
    "/edit/t_s": (int, type(None)),
    "/finetune/layer_set": (str, list),
    "/detox/lexicon": (str, type(None)),
    "/detox/layers": (list, type(None)),
    "/detox/t_s": (int, type(None)),
}


class ConfigError(ValueError):
    def __init__(self, pointer, message):
        super().__init__(f"config error at {pointer or '/'}: {message}")
        self.pointer = pointer


def _check(node, default, pointer):
    if pointer in _LOOSE:
        if not isinstance(node, _LOOSE[pointer]) or isinstance(node, bool):
            raise ConfigError(pointer, f"unexpected type {type(node).__name__}")
        return node
    if isinstance(default, dict):
        if not isinstance(node, dict):
            raise ConfigError(pointer, "expected an object")
        unknown = sorted(set(node) - set(default))
        if unknown:
            raise ConfigError(f"{pointer}/{unknown[0]}", "unknown field")
        return {k: _check(node.get(k, copy.deepcopy(v)), v, f"{pointer}/{k}")
                for k, v in default.items()}
    if isinstance(default, bool):
        ok = isinstance(node, bool)
    elif isinstance(default, int):
        ok = isinstance(node, int) and not isinstance(node, bool)
    elif isinstance(default, float):
        ok = isinstance(node, (int, float)) and not isinstance(node, bool)
        node = float(node) if ok else node
    elif isinstance(default, str):
        ok = isinstance(node, str)
    elif isinstance(default, list):
        ok = isinstance(node, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(pointer, f"expected {type(default).__name__}, "
                                   f"got {type(node).__name__}")
    return node


def resolve_config(user=None):
    """Merge ``user`` over the defaults, validating every field."""
    return _check(user or {}, DEFAULTS, "")


def config_digest(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# run directory
# --------------------------------------------------------------------------


class RunDir:
    def __init__(self, root, command, cfg, run_id=None):
        root = Path(root)
        base = run_id or f"{command}-{config_digest(cfg)[:10]}"
        path, n = root / base, 1
        while path.exists():
            n += 1
            path = root / f"{base}-{n}"
        self.path = path
        for sub in ("reports", "images"):
            (path / sub).mkdir(parents=True, exist_ok=True)
        (path / "config.resolved.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
        self._log = open(path / "log.txt", "a")

    def log(self, msg):
        self._log.write(msg + "\n")
        self._log.flush()

    def report(self, name):
        return self.path / "reports" / name

    def json(self, name, obj):
        self.report(name).write_text(json.dumps(obj, indent=1, sort_keys=True))

    def image(self, name, img):
        gw.write_pgm(self.path / "images" / name, img)

    def close(self):
        self._log.close()


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _missing(path, what):
    raise ConfigError(what, f"file not found: {path}")


def load_model(cfg):
    m = cfg["model"]
    if m["checkpoint"] is None:
        raise ConfigError("/model/checkpoint", "a checkpoint is required (--checkpoint)")
    ckpt = Path(m["checkpoint"])
    for f in ("manifest.json", "weights.bin"):
        if not (ckpt / f).exists():
            _missing(ckpt / f, "/model/checkpoint")
    return dn.load_checkpoint(ckpt)


_NEEDS_MODEL = {"localize", "sweep-ts", "edit", "finetune", "detox", "eval"}


def preflight(cfg, command):
    """Check referenced files before a run directory is created."""
    if command in _NEEDS_MODEL:
        if cfg["model"]["checkpoint"] is None:
            raise ConfigError("/model/checkpoint", "a checkpoint is required (--checkpoint)")
        for f in ("manifest.json", "weights.bin"):
            path = Path(cfg["model"]["checkpoint"]) / f
            if not path.exists():
                _missing(path, "/model/checkpoint")
    for pointer, path in (("/localize/report", cfg["localize"]["report"]),
                          ("/detox/lexicon", cfg["detox"]["lexicon"])):
        if path is not None and not Path(path).exists():
            _missing(path, pointer)


def dataset_config(cfg):
    d = cfg["dataset"]
    return gw.DatasetConfig.generated(d["n_train"], d["n_val"], d["n_test"], d["seed"],
                                      seeds_per_word=d["seeds_per_word"],
                                      inverted_fraction=d["inverted_fraction"])


def _report_layers(cfg, section):
    layers = cfg[section].get("layers")
    if layers is not None:
        return [int(l) for l in layers]
    report = cfg["localize"]["report"]
    if report is None:
        raise ConfigError(f"/{section}/layers", "give layers or /localize/report")
    if not Path(report).exists():
        _missing(report, "/localize/report")
    return json.loads(Path(report).read_text())["selected"]


def _t_s(cfg, section, model):
    t = cfg[section].get("t_s")
    return model.schedule.T if t is None else int(t)


def _prompt(d, pointer):
    try:
        return gw.Prompt.from_json(d)
    except (gw.ValidationError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(pointer, str(exc)) from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(cfg, run, threads):
    dcfg = dataset_config(cfg)
    ds = gw.make_dataset(dcfg, run.path / "dataset")
    run.log(f"dataset: {len(ds.entries)} samples")
    for i in range(min(4, len(ds.entries))):
        run.image(f"sample_{i}.pgm", ds.images[i])
    return 0


def cmd_train(cfg, run, threads):
    m = cfg["model"]
    if m["oracle_layer"] is not None:
        model = dn.build_oracle(m["variant"], m["oracle_layer"], n_blocks=m["n_blocks"])
        dn.save_checkpoint(model, run.path / "checkpoint")
        run.log(f"hand-wired oracle, text routed through layer {m['oracle_layer']}")
        return 0
    mcfg = dn.ModelConfig(variant=m["variant"], n_blocks=m["n_blocks"], d_model=m["d_model"],
                          heads=m["heads"], mlp_hidden=m["mlp_hidden"],
                          prediction=m["prediction"])
    model = dn.DenoiserModel.create(mcfg, seed=m["seed"])
    dcfg = dataset_config(cfg)
    tcfg = dn.TrainConfig(**cfg["train"])
    result = dn.train(model, dcfg.train_words, tcfg, log=run.log)
    dn.save_checkpoint(model, run.path / "checkpoint")
    mt.write_csv(run.report("train_curve.csv"), dn.TRAIN_CURVE_HEADER, result.curve)
    run.json("train.json", {"steps": result.steps, "final_loss": result.final_loss,
                            "model_digest": model.digest()})
    run.log(f"trained {result.steps} steps in {result.seconds:.1f} s")
    return 0


def _pairs(cfg):
    lc = cfg["localize"]
    words = dataset_config(cfg).test_words
    return lz.PromptPairSet.from_words(words, lc["n_pairs"], seed=lc["pair_seed"])


def cmd_localize(cfg, run, threads):
    model = load_model(cfg)
    lc = cfg["localize"]
    pairs = _pairs(cfg)
    report = lz.sweep_layers(model, pairs, lc["scorer"], t_s=lc["t_s"], theta=lc["theta"],
                             guidance_scale=cfg["model"]["guidance_scale"], threads=threads)
    run.json("localization.json", report.to_json())
    report.csv(run.report("layers.csv"))
    run.log(f"selected layers {report.selected} (l_max {report.l_max})")
    g = cfg["model"]["guidance_scale"]
    if lc["count_sizes"]:
        rows = lz.layer_count_study(model, pairs, report.ranked(), lc["count_sizes"],
                                    t_s=lc["t_s"], guidance_scale=g, threads=threads)
        mt.write_csv(run.report("layer_count.csv"), lz.COUNT_HEADER, rows)
    if lc["stress_runs"]:
        rows = lz.stress_test(model, lc["stress_templates"], lc["stress_texts"],
                              range(lc["stress_runs"]), report.selected, t_s=lc["t_s"],
                              guidance_scale=g, threads=threads, max_runs=lc["stress_runs"])
        mt.write_csv(run.report("stress.csv"), lz.STRESS_HEADER, rows)
    return 0


def cmd_sweep_ts(cfg, run, threads):
    model = load_model(cfg)
    layers = _report_layers(cfg, "localize")
    rows = lz.sweep_ts(model, _pairs(cfg), layers, cfg["localize"]["ts_grid"],
                       guidance_scale=cfg["model"]["guidance_scale"], threads=threads)
    mt.write_csv(run.report("sweep_ts.csv"), lz.TS_HEADER, rows)
    return 0


def cmd_edit(cfg, run, threads):
    model = load_model(cfg)
    ec = cfg["edit"]
    p_s = _prompt(ec["source"], "/edit/source")
    p_t = _prompt(ec["target"], "/edit/target")
    layers = _report_layers(cfg, "edit")
    t_s = _t_s(cfg, "edit", model)
    g = cfg["model"]["guidance_scale"]
    res = pk.edit_text(model, p_s, p_t, ec["seed"], layers, t_s, guidance_scale=g)
    cache, _ = pk.capture_cache(model, p_t, ec["seed"], layers, g)
    pk.save_cache(cache, run.path / "cache")
    run.image("edited.pgm", res.edited)
    run.image("source.pgm", res.source)
    run.image("target.pgm", res.target)
    rec = res.record.to_json()
    rec.update({"ocr": mt.ocr_decode(res.edited), "layers": layers, "t_s": t_s})
    run.json("edit.json", rec)
    mt.write_csv(run.report("edit.csv"), mt.MetricRecord.header(),
                 [[rec[k] for k in mt.MetricRecord.header()]])
    return 0


def cmd_finetune(cfg, run, threads):
    model = load_model(cfg)
    fc = dict(cfg["finetune"])
    report = None
    if fc["layer_set"] == "localized":
        path = cfg["localize"]["report"]
        if path is None:
            if cfg["localize"]["layers"] is None:
                raise ConfigError("/finetune/layer_set", "'localized' needs /localize/report")
            report = {"selected": cfg["localize"]["layers"]}
        else:
            if not Path(path).exists():
                _missing(path, "/localize/report")
            report = json.loads(Path(path).read_text())
    config = tuner.FinetuneConfig(**fc)
    layers = tuner.resolve_layers(config.layer_set, model.config.n_blocks, report)
    dcfg = dataset_config(cfg)
    evals = tuner.eval_prompts(dcfg.test_words, config.n_eval, seed=config.seed)
    base = tuner.generate(model, evals, config.guidance_scale)
    base_feats = mt.frozen_encoder().image(base)
    handle = tuner.attach_lora(model, layers, config.rank, config.alpha, seed=config.seed)
    result = tuner.finetune(handle, dcfg.train_words, evals, config, base_feats, log=run.log)
    tuner.save_lora(handle, run.path / "lora")
    dn.save_checkpoint(tuner.merged_model(handle), run.path / "checkpoint_merged")
    result.curve_csv(run.report("curve.csv"))
    run.json("finetune.json", {"layers": layers, "trainable": handle.n_trainable(),
                               "frozen_digest_before": handle.frozen_digest,
                               "frozen_digest_after": tuner.frozen_digest(model),
                               "final": result.final.to_json()})
    return 0


def cmd_detox(cfg, run, threads):
    model = load_model(cfg)
    dc = cfg["detox"]
    if dc["lexicon"] is not None:
        if not Path(dc["lexicon"]).exists():
            _missing(dc["lexicon"], "/detox/lexicon")
        lex = guard.Lexicon.load(dc["lexicon"])
    else:
        lex = guard.Lexicon.default()
    layers = _report_layers(cfg, "detox")
    t_s = _t_s(cfg, "detox", model)
    g = cfg["model"]["guidance_scale"]
    digest = model.digest()
    prompts = guard.toxic_prompts(lex, dc["n_prompts"], seed=dc["seed"])

    def job(item):
        p, seed = item
        original = dn.sample(model, p, seed, guidance_scale=g)
        return [guard.detox_generate(model, p, seed, method, layers, t_s, lex, dc["policy"],
                                     g, dc["negative_scale"], original, digest)
                for method in dc["methods"]]

    reports = lz._map(job, prompts, threads)
    rows, summary = [], {}
    for i, per in enumerate(reports):
        for r in per:
            j = r.to_json()
            rows.append([i, r.method, r.prompt.text, r.ocr_text, j["mse"], j["ssim"], j["psnr"],
                         j["ocr_f1_toxic"], j["toxicity_score"]])
            if i < dc["save_images"]:
                run.image(f"{i:03d}_{r.method}.pgm", r.protected)
            run.log(f"{i} {r.method} protected {r.seconds_protected:.3f}s "
                    f"capture {r.seconds_capture:.3f}s")
        if i < dc["save_images"]:
            run.image(f"{i:03d}_original.pgm", per[0].original)
    header = ["index", "method", "text", "ocr", "mse", "ssim", "psnr", "ocr_f1_toxic",
              "toxicity_score"]
    mt.write_csv(run.report("detox.csv"), header, rows)
    for method in dc["methods"]:
        sel = [r for r in rows if r[1] == method]
        summary[method] = {k: float(np.mean([r[c] for r in sel]))
                           for c, k in zip(range(4, 9), header[4:])}
    run.json("detox.json", summary)
    return 0


def cmd_eval(cfg, run, threads):
    model = load_model(cfg)
    ec = cfg["eval"]
    prompts = tuner.eval_prompts(dataset_config(cfg).test_words, ec["n_samples"], ec["seed"])
    g = cfg["model"]["guidance_scale"]
    images = lz._map(lambda ps: dn.sample(model, ps[0], ps[1], guidance_scale=g), prompts,
                     threads)
    rows = []
    for i, (img, (p, seed)) in enumerate(zip(images, prompts)):
        text = mt.ocr_decode(img)
        pr, rc, f1 = mt.char_f1(text, p.text)
        rows.append([i, p.template_id, p.text, seed, text, pr, rc, f1,
                     mt.levenshtein(text, p.text), mt.embed_align(img, p)])
        if i < 8:
            run.image(f"eval_{i:03d}.pgm", img)
    header = ["index", "template_id", "text", "seed", "ocr", "ocr_precision", "ocr_recall",
              "ocr_f1", "levenshtein", "embed_align"]
    mt.write_csv(run.report("eval.csv"), header, rows)
    run.json("eval.json", {"n": len(rows), "ocr_f1": float(np.mean([r[7] for r in rows])),
                           "levenshtein": float(np.mean([r[8] for r in rows])),
                           "embed_align": float(np.mean([r[9] for r in rows]))})
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "localize": cmd_localize,
    "sweep-ts": cmd_sweep_ts, "edit": cmd_edit, "finetune": cmd_finetune,
    "detox": cmd_detox, "eval": cmd_eval,
}


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="textpatch", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", default="runs", help="root directory for run folders")
        p.add_argument("--run-id", help="run folder name (default: command + config digest)")
        p.add_argument("--checkpoint", help="checkpoint directory")
        p.add_argument("--report", help="localization report JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=dn.VARIANTS)
        p.add_argument("--layers", help="comma-separated layer indices")
        p.add_argument("--ts", type=int, help="patch start step t_s")
        p.add_argument("--theta", type=float)
        p.add_argument("--threads", type=int, default=1)
        if name == "train":
            p.add_argument("--oracle-layer", type=int,
                           help="write a hand-wired checkpoint routing text through this layer")
            p.add_argument("--steps", type=int)
        if name == "edit":
            p.add_argument("--source-text")
            p.add_argument("--target-text")
    return ap


_SEED_SECTION = {"gen-data": "dataset", "train": "train", "localize": "localize",
                 "sweep-ts": "localize", "edit": "edit", "finetune": "finetune",
                 "detox": "detox", "eval": "eval"}


def apply_overrides(user, args):
    user = copy.deepcopy(user)

    def put(section, key, value):
        user.setdefault(section, {})[key] = value

    if args.checkpoint is not None:
        put("model", "checkpoint", args.checkpoint)
    if args.report is not None:
        put("localize", "report", args.report)
    if args.variant is not None:
        put("model", "variant", args.variant)
    if args.seed is not None:
        key = "pair_seed" if _SEED_SECTION[args.command] == "localize" else "seed"
        put(_SEED_SECTION[args.command], key, args.seed)
    if args.layers is not None:
        try:
            layers = [int(x) for x in args.layers.split(",") if x.strip()]
        except ValueError:
            raise ConfigError("/layers", f"bad layer list {args.layers!r}") from None
        for section in ("localize", "edit", "detox"):
            put(section, "layers", layers)
        put("finetune", "layer_set", layers)
    if args.ts is not None:
        for section in ("localize", "edit", "detox"):
            put(section, "t_s", args.ts)
    if args.theta is not None:
        put("localize", "theta", args.theta)
    if getattr(args, "oracle_layer", None) is not None:
        put("model", "oracle_layer", args.oracle_layer)
    if getattr(args, "steps", None) is not None:
        put("train", "steps", args.steps)
    if getattr(args, "source_text", None) is not None:
        user.setdefault("edit", {}).setdefault("source", dict(_PROMPT))["text"] = args.source_text
    if getattr(args, "target_text", None) is not None:
        user.setdefault("edit", {}).setdefault("target", dict(_PROMPT))["text"] = args.target_text
    return user


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        user = {}
        if args.config:
            path = Path(args.config)
            if not path.exists():
                raise ConfigError("", f"file not found: {path}")
            try:
                user = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError("", f"invalid JSON: {exc}") from None
        cfg = resolve_config(apply_overrides(user, args))
        preflight(cfg, args.command)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = RunDir(args.out, args.command, cfg, args.run_id)
    t0 = time.perf_counter()
    try:
        # BLAS stays single-threaded so results never depend on --threads
        with threadpool_limits(limits=1):
            code = COMMANDS[args.command](cfg, run, args.threads)
    except ConfigError as exc:
        run.log(f"error: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a structured runtime error
        msg = f"{type(exc).__name__}: {exc}"
        run.log(f"error: {msg}")
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        run.log(f"elapsed {time.perf_counter() - t0:.2f} s")
        run.close()
    print(run.path)
    return code


if __name__ == "__main__":
    sys.exit(main())
