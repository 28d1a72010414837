import numpy as np
import pytest

from textpatch import denoiser as dn
from textpatch import glyphworld as gw


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(variant="static", n_blocks=2, d_model=16, heads=2, dtype=np.float32, seed=0,
               randomize_mod=True):
    """Small random model; modulation weights are randomized so no branch is gated off."""
    cfg = dn.ModelConfig(variant=variant, n_blocks=n_blocks, d_model=d_model, heads=heads,
                         mlp_hidden=2 * d_model)
    model = dn.DenoiserModel.create(cfg, seed=seed, dtype=dtype)
    if randomize_mod:
        r = np.random.default_rng(seed + 99)
        for name, t in model.params.items():
            if ".mod." in name or name.startswith("final_mod") or name == "patch_out.w":
                t.data[...] = (0.3 * r.standard_normal(t.shape)).astype(dtype)
    return model


@pytest.fixture(params=dn.VARIANTS)
def variant(request):
    return request.param


@pytest.fixture
def prompts():
    return [gw.Prompt(0, "STOP"), gw.Prompt(2, "MAZE"), gw.Prompt(1, "WAVE", "inverted")]


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[1])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
