import json

import pytest

from textpatch import cli

SMALL = {"model": {"n_blocks": 3}, "localize": {"n_pairs": 2, "ts_grid": [0, 50]},
         "detox": {"n_prompts": 2, "save_images": 1}, "eval": {"n_samples": 3}}


@pytest.fixture(scope="module")
def oracle(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert cli.main(["train", "--config", str(cfg), "--oracle-layer", "1", "--out", str(root),
                     "--run-id", "oracle"]) == 0
    return root, cfg, root / "oracle" / "checkpoint"


def run(args, root, run_id):
    code = cli.main(args + ["--out", str(root), "--run-id", run_id])
    return code, root / run_id


def files(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file() and p.suffix in (".csv", ".json", ".pgm")}


class TestConfig:
    def test_defaults_resolve(self):
        cfg = cli.resolve_config()
        assert set(cfg) == set(cli.DEFAULTS)
        assert cli.resolve_config(cfg) == cfg

    def test_pointer_type(self):
        with pytest.raises(cli.ConfigError) as exc:
            cli.resolve_config({"localize": {"theta": "high"}})
        assert exc.value.pointer == "/localize/theta"

    def test_pointer_unknown(self):
        with pytest.raises(cli.ConfigError) as exc:
            cli.resolve_config({"edit": {"source": {"colour": 1}}})
        assert exc.value.pointer == "/edit/source/colour"

    def test_int_promoted_to_float(self):
        assert cli.resolve_config({"localize": {"theta": 0}})["localize"]["theta"] == 0.0


class TestExitCodes:
    def test_usage(self, tmp_path):
        assert cli.main(["edit", "--bogus", "--out", str(tmp_path)]) == 2
        assert cli.main(["nonsense"]) == 2

    def test_schema(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"d_model": "wide"}}))
        assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 3
        assert "/model/d_model" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 3

    def test_missing_checkpoint(self, tmp_path, capsys):
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "gone"), "--out",
                         str(tmp_path / "runs")])
        assert code == 3
        assert "gone/manifest.json" in capsys.readouterr().err
        assert not (tmp_path / "runs").exists()

    def test_runtime(self, oracle):
        root, cfg, ckpt = oracle
        code, _ = run(["localize", "--config", str(cfg), "--checkpoint", str(ckpt),
                       "--theta", "-1"], root, "neg-theta")
        assert code == 4


class TestCommands:
    def test_localize_oracle(self, oracle):
        root, cfg, ckpt = oracle
        code, path = run(["localize", "--config", str(cfg), "--checkpoint", str(ckpt)],
                         root, "loc")
        assert code == 0
        report = json.loads((path / "reports" / "localization.json").read_text())
        assert report["selected"] == [1]
        assert (path / "config.resolved.json").exists() and (path / "log.txt").exists()

    def test_noop_edit(self, oracle):
        root, cfg, ckpt = oracle
        code, path = run(["edit", "--config", str(cfg), "--checkpoint", str(ckpt),
                          "--layers", "1", "--source-text", "MAZE", "--target-text", "MAZE"],
                         root, "noop")
        assert code == 0
        rec = json.loads((path / "reports" / "edit.json").read_text())
        assert rec["mse"] == 0.0 and rec["ssim"] == 1.0

    def test_rerun_is_byte_identical(self, oracle):
        root, cfg, ckpt = oracle
        args = ["detox", "--config", str(cfg), "--checkpoint", str(ckpt), "--layers", "1"]
        _, a = run(args, root, "dx")
        run(args + ["--threads", "3"], root, "dx")
        b = root / "dx-2"  # reruns never overwrite an existing run
        fa, fb = files(a), files(b)
        assert fa and fa == fb

    def test_resolved_config_round_trip(self, oracle):
        root, cfg, ckpt = oracle
        _, a = run(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)], root, "ev")
        _, b = run(["eval", "--config", str(a / "config.resolved.json")], root, "ev-again")
        assert files(a) == files(b)

    def test_sweep_ts_and_gen_data(self, oracle):
        root, cfg, ckpt = oracle
        code, path = run(["sweep-ts", "--config", str(cfg), "--checkpoint", str(ckpt),
                          "--layers", "1"], root, "sts")
        assert code == 0
        rows = (path / "reports" / "sweep_ts.csv").read_text().splitlines()
        assert rows[0] == "t_s,mse,ssim,psnr,ocr_f1,ld,embed_align" and len(rows) == 3
        code, path = run(["gen-data", "--config", str(cfg)], root, "data")
        assert code == 0 and (path / "dataset" / "manifest.json").exists()
