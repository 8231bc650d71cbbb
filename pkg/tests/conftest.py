import numpy as np
import pytest

from metcc import dataio, synthgen

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    cfg = synthgen.SynthConfig(
        n_samples=160, n_features=80, n_institutions=2, n_batches=4, disease_effect_scale=4.0,
        institution_effect_scale=4.0, batch_effect_scale=4.0, age_effect_scale=2.0, seed=7,
    )
    m, meta, gt = synthgen.generate(cfg)
    return dataio.preprocess(m, ("chrX", "chrY")), meta, gt
