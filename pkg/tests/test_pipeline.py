import json
import os

import numpy as np
import pytest

from eegground.acceptance import roundtrip_failures
from eegground.evaluation import (BudgetMismatch, audit_budgets, derangement, probe_ordering,
                                  run_alignment_ablation, run_stage_ablation)
from eegground.pipeline import LockError, Pipeline, comparable, output_lock, run_pipeline


def test_full_tiny_run_is_cached_and_reproducible(tiny_cfg, tmp_path):
    cfg = tiny_cfg()
    pipe, rec = run_pipeline(cfg)
    assert set(rec["stage_keys"]) == {"synth", "tokenizer", "proxy", "align", "predictor", "understand", "eval",
                                      "reconstruct"}
    assert not any(rec["run"]["cached"].values())
    _, again = run_pipeline(cfg)
    assert all(again["run"]["cached"].values())
    assert again["run"]["training_steps_run"] == 0
    assert comparable(again) == comparable(rec)
    # a fresh root reproduces every hash and metric
    other = json.loads(json.dumps(cfg))
    other["paths"] = {"data_root": str(tmp_path / "b" / "data"), "output_root": str(tmp_path / "b" / "runs")}
    _, fresh = run_pipeline(other)
    assert comparable(fresh) == comparable(rec)
    n, bad = roundtrip_failures(tmp_path)
    assert n > 0 and not bad


def test_outputs_on_disk(tiny_cfg):
    pipe, rec = run_pipeline(tiny_cfg())
    un = pipe.outputs["understand"].dir
    assert (un / "head.gvgt").exists() and (un / "task_visual.json").exists()
    assert (un / "predictions_visual_val.csv").exists()
    assert (pipe.outputs["align"].dir / "loss.csv").exists()
    proxies = pipe.outputs["proxy"].dir / "proxies" / "clinical_a"
    assert len(list(proxies.glob("*.img"))) == 16
    ev = rec["metrics"]["eval"]
    assert set(ev) == {"visual", "clinical_a", "average"}
    assert 0 <= rec["metrics"]["understand"]["token_segment_sensitivity"] <= 1


def test_force_reruns(tiny_cfg):
    cfg = tiny_cfg()
    run_pipeline(cfg, until="tokenizer")
    pipe, rec = run_pipeline(cfg, until="tokenizer", force=True)
    assert not rec["run"]["cached"]["tokenizer"]


def test_stage1_disabled_keeps_init(tiny_cfg):
    pipe, rec = run_pipeline(tiny_cfg(stage1={"enabled": False}), until="align")
    assert rec["budget"]["align"]["steps"] == 0
    enc = pipe.load_encoders(pipe.outputs["align"].dir / "encoders.gvgt")
    init = pipe.init_encoders()
    from eegground.checkpoint import quantize

    for k, v in enc.state_dict().items():
        np.testing.assert_array_equal(v, quantize(init.state_dict()[k]))


def test_unknown_stage_rejected(tiny_cfg):
    with pytest.raises(ValueError):
        Pipeline(tiny_cfg()).run("deploy")


def test_lock_excludes_second_writer(tmp_path):
    with output_lock(tmp_path):
        with pytest.raises(LockError):
            with output_lock(tmp_path):
                pass
    with output_lock(tmp_path):
        pass


def test_stale_lock_is_reclaimed(tmp_path):
    (tmp_path / ".lock").write_text("999999999")
    with output_lock(tmp_path):
        assert (tmp_path / ".lock").read_text().strip() == str(os.getpid())


def test_derangement_has_no_fixed_points():
    for n in range(2, 30):
        p = derangement(n, n)
        assert sorted(p) == list(range(n)) and np.all(p != np.arange(n))
    with pytest.raises(ValueError):
        derangement(1, 0)


def test_probe_ordering_logic():
    rep = {"gt_token": {"psnr": {"mean": 20}}, "eeg_predicted": {"psnr": {"mean": 15}},
           "shuffled": {"psnr": {"mean": 12}}, "untrained_gap": {"mean": 0.1, "se": 0.1}}
    assert all(probe_ordering(rep).values())
    rep["untrained_gap"] = {"mean": 1.0, "se": 0.1}
    assert not probe_ordering(rep)["untrained_collapses"]


def test_budget_audit_rejects_mismatch():
    a = {"config": "x", "seed": 0, "record": {"data_hashes": {"d": 1}, "budget": {"align": {"steps": 3}}}}
    b = {"config": "y", "seed": 0, "record": {"data_hashes": {"d": 1}, "budget": {"align": {"steps": 4}}}}
    with pytest.raises(BudgetMismatch):
        audit_budgets([a, b])
    audit_budgets([a, b], exempt={"y": {"align"}})
    c = {"config": "z", "seed": 0, "record": {"data_hashes": {"d": 2}, "budget": {"align": {"steps": 3}}}}
    with pytest.raises(BudgetMismatch):
        audit_budgets([a, c])


@pytest.mark.slow
def test_tiny_ablations_write_reports(tiny_cfg):
    cfg = tiny_cfg()
    rep = run_alignment_ablation(cfg, [0, 1, 2])
    assert set(rep["summary"]) == {"text_only", "image_only", "trimodal"}
    assert rep["summary"]["trimodal"]["average"]["n"] == 3
    st = run_stage_ablation(cfg, [0, 1, 2])
    assert list(st["summary"]) == ["w/o_stage1", "w/o_stage2", "full"]
    out = cfg["paths"]["output_root"] + "/ablation"
    for stem in ("alignment", "stages"):
        for suffix in (".csv", "_long.csv", "_plot.csv", ".json"):
            assert os.path.exists(f"{out}/{stem}{suffix}")
    with pytest.raises(ValueError):
        run_alignment_ablation(cfg, [0, 1])
