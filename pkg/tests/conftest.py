import time

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from glioma_mtl.augment import AugmentConfig
from glioma_mtl.data_model import Sample
from glioma_mtl.network import NetworkSpec, build_psnet
from glioma_mtl.preprocess import PreprocessConfig, preprocess_case
from glioma_mtl.synthdata import PhantomSpec, brain_mask, generate
from glioma_mtl.trainer import TrainConfig, train

settings.register_profile("repo", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# Toy end-to-end setting, fixed before looking at held-out results.
E2E_CASES = 200
E2E_TRAIN = 160
E2E_SEED = 1
E2E_EPOCHS = 40


def toy_network_spec(input_shape, **overrides):
    kw = dict(input_shape=tuple(input_shape) + (4,), depths=3, base_filters=8,
              dropout_rate=0.1, l2_strength=0.0)
    kw.update(overrides)
    return NetworkSpec(**kw)


def phantom_samples(n, seed=0, **spec_overrides):
    spec = PhantomSpec(seed=seed, **spec_overrides)
    cases, truths = generate(spec, n, with_truth=True)
    bm = brain_mask(spec)
    processed = [preprocess_case(c, PreprocessConfig(), bm)[0] for c in cases]
    return [Sample.from_case(c) for c in processed], truths, processed


@pytest.fixture(scope="session")
def toy_e2e():
    """A toy PS-Net trained on 160 phantoms; the last 40 are held out."""
    torch.set_num_threads(max(1, torch.get_num_threads()))
    start = time.perf_counter()
    samples, truths, cases = phantom_samples(E2E_CASES, seed=E2E_SEED)
    train_set, test_set = samples[:E2E_TRAIN], samples[E2E_TRAIN:]
    spec = toy_network_spec(samples[0].image.shape[1:])
    model = build_psnet(spec, seed=0)
    config = TrainConfig(initial_lr=1e-3, weight_decay=1e-5, max_epochs=E2E_EPOCHS,
                         plateau_patience=10, early_stop_window=50, virtual_batch=8,
                         micro_batch=8, seed=0)
    result = train(model, train_set, None, config, AugmentConfig(probability=0.0, factor=1))
    elapsed = time.perf_counter() - start
    return {"result": result, "model": result.model, "train": train_set, "test": test_set,
            "test_truths": truths[E2E_TRAIN:], "test_cases": cases[E2E_TRAIN:],
            "elapsed": elapsed, "train_samples_observed": train_set}


# verdict lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Small CLI run: enough to exercise every stage in seconds.
CLI_CONFIG = """
[data]
run_dir = unused
[synth]
n = 20
seed = 2
missing_segmentation = 0.3
[network]
depths = 2
base_filters = 4
[train]
initial_lr = 1e-3
weight_decay = 1e-5
seed = 0
max_epochs = 2
virtual_batch = 4
micro_batch = 2
threads = 1
[grid]
dropout_rate = (0.1, 0.2)
l2 = (0.0, 1e-5)
learning_rate = (1e-3,)
weight_decay = (1e-5,)
augmentation_factor = (1,)
augmentation_probability = (0.0,)
[gate]
max_rounds = 2
[interpret]
n_samples = 2
"""


def run_cli_pipeline(root, stages=("synth", "preprocess", "train", "predict", "evaluate")):
    """Run the listed CLI stages into ``root``; returns the exit codes."""
    from glioma_mtl.cli import main

    cfg = root / "run.ini"
    cfg.parent.mkdir(parents=True, exist_ok=True)
    cfg.write_text(CLI_CONFIG)
    codes = []
    for stage in stages:
        codes.append(main([stage, "-c", str(cfg), "--run-dir", str(root)]))
    return codes
