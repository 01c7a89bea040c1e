"""Shared tiny-scale fixtures so unit tests stay fast.

The tiny task (6 labels, 4 feature dims, short utterances) trains in seconds
and exercises every code path; acceptance tests build the real-size pipeline
themselves.
"""

import pytest

from alignrefine import harness as hz
from alignrefine import synthdata as sd

TINY_TASK = dict(num_labels=6, feature_dim=4, train_size=40, dev_size=12,
                 test_size=12, max_length=5)

# acceptance tests append "criterion N: PASS/FAIL - ..." lines here; the
# terminal summary echoes them even when every test passed
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(master_seed=5, **overrides):
    sections = dict(
        task=dict(TINY_TASK),
        first_pass=dict(layers=1, dim=16, heads=2, ffn_mult=2),
        refiner=dict(layers=1, dim=16, heads=2, ffn_mult=2,
                     train_steps=2, infer_steps=2),
        train_first_pass=dict(max_steps=25, eval_interval=10, warmup_steps=5,
                              batch_size=4),
        train_refiner=dict(max_steps=8, eval_interval=4, warmup_steps=4,
                           batch_size=2),
    )
    for key, val in overrides.items():
        sections.setdefault(key, {})
        sections[key] = {**sections[key], **val}
    return hz.make_experiment_config(master_seed, **sections)


@pytest.fixture(scope="session")
def tiny_corpora():
    spec = sd.TaskSpec(**TINY_TASK)
    return {
        "train": sd.generate_corpus(spec, "train", spec.train_size, 5),
        "dev": sd.generate_corpus(spec, "dev", spec.dev_size, 5),
        "test": sd.generate_corpus(spec, "test", spec.test_size, 5),
    }


@pytest.fixture(scope="session")
def tiny_first_pass(tiny_corpora, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_fp")
    return hz.train_first_pass(tiny_config(), tiny_corpora, str(out),
                               clock=hz.FixedClock())


@pytest.fixture(scope="session")
def tiny_refiner(tiny_corpora, tiny_first_pass, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_ref")
    return hz.train_refiner(tiny_config(), tiny_corpora, tiny_first_pass,
                            str(out), clock=hz.FixedClock())
