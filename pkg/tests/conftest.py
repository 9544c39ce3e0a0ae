import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eegground.encoders import EncoderConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_enc():
    return EncoderConfig(channels=2, samples=32, patch_length=16, image_size=16, image_patch=8,
                         model_dim=8, heads=2, layers=1, shared_dim=4, projector_hidden=6)


def tiny_pipeline_config(root, **overrides):
    """Small but complete pipeline config; every stage runs in seconds."""
    from eegground.config import load_config

    base = {
        "paths": {"data_root": str(root / "data"), "output_root": str(root / "runs")},
        "data": {"split": [0.5, 0.25, 0.25], "datasets": [
            {"name": "visual", "kind": "visual", "num_classes": 4, "samples_per_class": 8, "noise_level": 0.5},
            {"name": "clinical_a", "kind": "clinical", "num_classes": 2, "samples_per_class": 8,
             "noise_level": 0.5, "sampling_weight": 0.3, "class_names": ["normal", "abnormal"]},
        ]},
        "encoder": {"channels": 2, "samples": 64, "patch_length": 16, "image_size": 16, "image_patch": 8,
                    "model_dim": 8, "heads": 2, "layers": 1, "shared_dim": 8, "projector_hidden": 8},
        "tokenizer": {"codebook_size": 8, "decoder_steps": 20, "decoder_batch": 16},
        "proxy": {"steps": 4, "batch_size": 8},
        "stage1": {"steps": 4, "batch_size": 8},
        "stage2": {"steps": 4, "batch_size": 8, "heads": 2, "layers": 1},
        "stage3": {"steps": 4, "batch_size": 8, "dim": 8, "heads": 2, "layers": 1},
        "ablation": {"seeds": [0, 1, 2]},
    }
    from eegground.config import merge

    return load_config(None, overrides=merge(base, overrides))


@pytest.fixture
def tiny_cfg(tmp_path):
    return lambda **over: tiny_pipeline_config(tmp_path, **over)


@pytest.fixture(scope="session")
def tiny_corpora(tmp_path_factory):
    """(visual, clinical) corpora matching the ``tiny_enc`` shapes."""
    from eegground.data import Corpus, DatasetSpec, generate_dataset, stratified_split

    root = tmp_path_factory.mktemp("corpora")
    out = []
    for spec in (DatasetSpec("visual", "visual", 4, 8, 0.3, 0, channels=2, samples=32, image_size=16),
                 DatasetSpec("clinical_a", "clinical", 2, 8, 0.3, 0, channels=2, samples=32, image_size=16,
                             sampling_weight=0.3, class_names=["normal", "abnormal"])):
        m = generate_dataset(spec, root / spec.name)
        stratified_split(m, (0.5, 0.25, 0.25), 0)
        m.save()
        out.append(Corpus.load(m))
    return tuple(out)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
