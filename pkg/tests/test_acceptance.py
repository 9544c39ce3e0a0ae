"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines. The pipeline criteria
(4, 7-11) train at default scale and share one workspace, so later criteria reuse cached stages.
"""

import pytest

from eegground import acceptance
from eegground.config import load_config

LINES = []


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def default_cfg(workspace):
    return load_config(None, out=str(workspace / "runs"))


def report(result):
    LINES.append(result.line())
    print("\n" + result.line())
    assert result.passed, result.line()


def test_criterion_01_gradient_checks():
    report(acceptance.check_gradients())


def test_criterion_02_loss_oracles():
    report(acceptance.check_losses())


def test_criterion_03_token_distribution():
    report(acceptance.check_token_distribution())


def test_criterion_04_quantization(default_cfg, workspace):
    report(acceptance.check_quantization(default_cfg, workspace))


def test_criterion_05_metric_oracles():
    report(acceptance.check_metrics())


def test_criterion_06_sampler_statistics():
    report(acceptance.check_samplers())


def test_criterion_07_end_to_end(default_cfg, workspace):
    report(acceptance.check_end_to_end(default_cfg, workspace))


def test_criterion_08_alignment_trend(default_cfg, workspace):
    report(acceptance.check_alignment_trend(default_cfg, workspace))


def test_criterion_09_stage_trend(default_cfg, workspace):
    report(acceptance.check_stage_trend(default_cfg, workspace))


def test_criterion_10_reconstruction_probe(default_cfg, workspace):
    report(acceptance.check_reconstruction(default_cfg, workspace))


def test_criterion_11_determinism_and_formats(default_cfg, workspace):
    report(acceptance.check_determinism(default_cfg, workspace))
