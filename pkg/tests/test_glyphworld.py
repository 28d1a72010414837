import itertools

import numpy as np
import pytest

from textpatch import glyphworld as gw
from textpatch import metrics as mt


class TestFont:
    def test_all_glyphs_are_3x5_and_distinct(self):
        for ch, g in gw.GLYPHS.items():
            assert g.shape == (gw.GLYPH_H, gw.GLYPH_W), ch
        for a, b in itertools.combinations(gw.CHARSET, 2):
            assert (gw.GLYPHS[a] != gw.GLYPHS[b]).sum() >= 2, (a, b)

    def test_blank_is_space(self):
        assert not gw.GLYPHS[" "].any()


class TestPrompt:
    def test_canonical_string(self):
        assert str(gw.Prompt(0, "STOP")) == 'A sign that says "STOP".'

    def test_bad_character_named(self):
        with pytest.raises(gw.ValidationError, match="'!'"):
            gw.Prompt(0, "HI!")

    def test_bad_template_and_style(self):
        with pytest.raises(gw.ValidationError):
            gw.Prompt(5, "A")
        with pytest.raises(gw.ValidationError):
            gw.Prompt(0, "A", "italic")

    def test_wrap_two_lines(self):
        assert gw.wrap_lines("HELLO BRAVE WORLD"[:16]) == ["HELLO", "BRAVE WORL"]
        with pytest.raises(gw.ValidationError):
            gw.wrap_lines("ABCDEFGHIJK")

    def test_json_round_trip(self):
        p = gw.Prompt(3, "MAZE", "inverted")
        assert gw.Prompt.from_json(p.to_json()) == p


class TestRender:
    def test_empty_text_has_no_glyph_pixels(self):
        img = gw.render_sample(gw.Prompt(0, ""), 0).image
        assert np.all(img[gw.PLATE_TOP:gw.PLATE_BOTTOM] == 0.0)
        assert mt.ocr_decode(img) == ""

    def test_deterministic(self):
        a = gw.render_sample(gw.Prompt(2, "STOP"), 7).image
        b = gw.render_sample(gw.Prompt(2, "STOP"), 7).image
        assert a.tobytes() == b.tobytes()

    def test_range_and_shape(self):
        img = gw.render_sample(gw.Prompt(4, "ABC"), 3).image
        assert img.shape == (32, 32) and img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0

    @pytest.mark.parametrize("template", range(5))
    def test_ocr_round_trip_single_letters_and_words(self, template):
        words = list(gw.CHARSET[1:27]) + ["STOP", "MAZE", "QUICK", "ZZZZZ", "JAWBONE"]
        for w in words:
            for style in gw.STYLES:
                img = gw.render_sample(gw.Prompt(template, w, style), 11).image
                assert mt.ocr_decode(img) == w

    def test_ocr_round_trip_all_pairs(self):
        letters = gw.CHARSET[1:27]
        for a, b in itertools.product(letters, letters):
            img = gw.render_sample(gw.Prompt(0, a + b), 0).image
            assert mt.ocr_decode(img) == a + b

    def test_two_line_round_trip(self):
        p = gw.Prompt(1, "ABCDEFGHIJ KLMNOPQRST")
        assert mt.ocr_decode(gw.render_sample(p, 5).image) == p.text

    def test_background_independent_of_text(self):
        a = gw.render_sample(gw.Prompt(2, "STOP"), 9).image
        b = gw.render_sample(gw.Prompt(2, "WAVE"), 9).image
        outside = ~gw.plate_mask()
        assert np.array_equal(a[outside], b[outside])

    def test_inverted_polarity(self):
        img = gw.render_sample(gw.Prompt(0, "A", "inverted"), 0).image
        assert img[gw.PLATE_TOP, 0] == 1.0
        assert img[gw.text_mask("A")].max() == 0.0


class TestEncoder:
    def test_length_and_purity(self):
        a = gw.encode_prompt(gw.Prompt(0, "STOP"))
        b = gw.encode_prompt(gw.Prompt(0, "STOP"))
        assert len(a.ids) == gw.SEQ_LEN
        assert a.embedding.shape == (gw.SEQ_LEN, gw.D_TXT)
        assert a.embedding.tobytes() == b.embedding.tobytes()

    def test_template_change_touches_one_row(self):
        a = gw.encode_prompt(gw.Prompt(0, "STOP")).embedding
        b = gw.encode_prompt(gw.Prompt(3, "STOP")).embedding
        rows = np.flatnonzero((a != b).any(axis=1))
        assert rows.tolist() == [1]

    def test_shared_prefix(self):
        a = gw.tokenize(gw.Prompt(0, "STOP"))
        b = gw.tokenize(gw.Prompt(0, "STOPS"))
        assert a[3:7] == b[3:7]
        assert a != b

    def test_too_long(self):
        with pytest.raises(gw.ValidationError):
            gw.encode_prompt(gw.Prompt(0, "ABCDEFG HIJKLM"))

    def test_distinct_prompts_distinct_ids(self):
        cfg = gw.DatasetConfig.generated(n_train=50, n_val=5, n_test=5)
        ids = {gw.tokenize(gw.Prompt(t, w, s)) for w in cfg.train_words
               for t in range(5) for s in gw.STYLES}
        assert len(ids) == len(cfg.train_words) * 5 * 2

    def test_position_code_shares_image_frame(self):
        # slot 3 + k sits over character cell k
        lo, hi = gw.cell_columns(4)
        assert gw.token_column(3 + 4) == pytest.approx((lo + hi) / 2)


class TestDataset:
    def test_count(self):
        cfg = gw.DatasetConfig(train_words=gw.DatasetConfig.generated(20).train_words,
                               seeds_per_word=2)
        assert len(gw.build_dataset(cfg).entries) == 200

    def test_regenerates_identically(self, tmp_path):
        cfg = gw.DatasetConfig.generated(n_train=10, n_val=2, n_test=2)
        gw.make_dataset(cfg, tmp_path / "a")
        gw.make_dataset(cfg, tmp_path / "b")
        for f in ("images.bin", "manifest.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        ds = gw.load_dataset(tmp_path / "a")
        assert np.array_equal(ds.images, gw.build_dataset(cfg).images)

    def test_split_overlap_rejected(self):
        cfg = gw.DatasetConfig(train_words=["ABC"], val_words=["XYZ"], test_words=["XYZ"])
        with pytest.raises(gw.DatasetConfigError, match="XYZ"):
            gw.build_dataset(cfg)

    def test_generated_splits_disjoint(self):
        cfg = gw.DatasetConfig.generated()
        assert len(cfg.train_words) == 200
        assert not set(cfg.train_words) & set(cfg.test_words)
        assert not set(cfg.val_words) & set(cfg.test_words)


class TestPgm:
    def test_round_trip(self, tmp_path):
        img = gw.render_sample(gw.Prompt(3, "PGM"), 1).image
        gw.write_pgm(tmp_path / "x.pgm", img)
        raw = (tmp_path / "x.pgm").read_bytes()
        assert raw.startswith(b"P5\n32 32\n255\n")
        back = gw.read_pgm(tmp_path / "x.pgm")
        assert np.array_equal(np.round(back * 255), gw.to_bytes(img).astype(float))
