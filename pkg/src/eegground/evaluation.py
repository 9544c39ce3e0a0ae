"""Reconstruction probe, classification reports and the two ablation runners."""

from __future__ import annotations

import copy
import csv
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_json
from .data import Corpus, DatasetManifest, write_image
from .metrics import classification_report, psnr, ssim
from .predictor import TokenPredictor, predict_token_grid
from .tokenizer import Tokenizer
from .understanding import Upstream

log = logging.getLogger(__name__)


class BudgetMismatch(ValueError):
    pass


# -- classification -------------------------------------------------------------------
def reports_from_predictions(pred_dir, manifests: Sequence[DatasetManifest]) -> dict:
    """Per-dataset, per-split classification reports from the prediction CSVs."""
    out: dict = {}
    for m in manifests:
        lookup = {name: i for i, name in enumerate(m.classes)}
        for split in ("val", "test"):
            path = Path(pred_dir) / f"predictions_{m.name}_{split}.csv"
            if not path.exists():
                continue
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            y_true = [lookup[r["true_class"]] for r in rows]
            y_pred = [lookup[r["predicted_class"]] for r in rows]
            rep = classification_report(y_true, y_pred, m.num_classes)
            out.setdefault(m.name, {})[split] = {
                "balanced_accuracy": rep.balanced_accuracy, "weighted_f1": rep.weighted_f1,
                "confusion": rep.confusion.tolist(), "precision": rep.precision.tolist(),
                "recall": rep.recall.tolist(), "f1": rep.f1.tolist(), "count": rep.count,
                "chance": 1.0 / m.num_classes}
    for split in ("val", "test"):
        vals = [v[split]["balanced_accuracy"] for v in out.values() if split in v]
        if vals:
            out.setdefault("average", {})[split] = {"balanced_accuracy": float(np.mean(vals))}
    return out


# -- reconstruction -------------------------------------------------------------------
def derangement(n: int, seed: int) -> np.ndarray:
    """A permutation with no fixed points (n >= 2)."""
    if n < 2:
        raise ValueError("shuffled pairing needs at least two samples")
    perm = np.random.default_rng([seed, 8]).permutation(n)
    return perm[(np.argsort(perm) + 1) % n]


def _psnrs(recon: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.array([psnr(np.clip(a, 0, 1), b) for a, b in zip(recon, target)])


def _ssims(recon: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.array([ssim(a, b) for a, b in zip(recon, target)])


def _summary(x: np.ndarray) -> dict:
    return {"mean": float(np.mean(x)), "sd": float(np.std(x, ddof=1)) if len(x) > 1 else 0.0,
            "se": float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0}


def reconstruction_probe(visual: Sequence[Corpus], up: Upstream, tokenizer: Tokenizer,
                         untrained: TokenPredictor, seed: int, out_dir=None, split: str = "val",
                         examples: int = 4) -> dict:
    """PSNR/SSIM of GT-token, EEG-predicted, shuffled-pairing and untrained-predictor reconstructions."""
    if not visual:
        raise ValueError("reconstruction probe needs a visual dataset")
    images, eeg = [], []
    for c in visual:
        idx = c.split(split)
        images.append(c.image_stack(idx))
        eeg.append(c.eeg[idx])
    images, eeg = np.concatenate(images), np.concatenate(eeg)
    gt = tokenizer.detokenize(tokenizer.tokenize(images))
    pred = tokenizer.detokenize(predict_token_grid(up.encoders, up.predictor, up.codebook, eeg))
    raw = tokenizer.detokenize(predict_token_grid(up.encoders, untrained, up.codebook, eeg))
    perm = derangement(len(images), seed)
    series = {
        "gt_token": (gt, images),
        "eeg_predicted": (pred, images),
        "shuffled": (pred, images[perm]),
        "untrained": (raw, images),
        "untrained_shuffled": (raw, images[perm]),
    }
    out: dict = {"split": split, "count": int(len(images))}
    per_psnr = {}
    for name, (recon, target) in series.items():
        p = _psnrs(recon, target)
        per_psnr[name] = p
        out[name] = {"psnr": _summary(p), "ssim": _summary(_ssims(recon, target))}
    diff = per_psnr["untrained"] - per_psnr["untrained_shuffled"]
    out["untrained_gap"] = {"mean": float(diff.mean()),
                            "se": float(diff.std(ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0}
    if out_dir is not None:
        ex = Path(out_dir) / "examples"
        ex.mkdir(parents=True, exist_ok=True)
        for i in range(min(examples, len(images))):
            write_image(ex / f"{i:02d}_original.img", images[i])
            write_image(ex / f"{i:02d}_gt_token.img", gt[i])
            write_image(ex / f"{i:02d}_eeg_predicted.img", pred[i])
    return out


def probe_ordering(report: dict, noise_se: float = 2.0) -> dict:
    """Checks GT >= predicted > shuffled, and untrained within ``noise_se`` paired standard errors of its shuffle."""
    g, p, s = (report[k]["psnr"]["mean"] for k in ("gt_token", "eeg_predicted", "shuffled"))
    gap = report["untrained_gap"]
    return {"gt_ge_pred": g >= p, "pred_gt_shuffled": p > s,
            "untrained_collapses": abs(gap["mean"]) <= noise_se * max(gap["se"], 1e-12)}


# -- ablations ------------------------------------------------------------------------
def _cell_config(base: dict, seed: int, out_root: Path, **changes) -> dict:
    from .pipeline import Pipeline

    cfg = copy.deepcopy(base)
    cfg["data_seed"] = Pipeline(base).data_seed
    cfg["seed"] = seed
    cfg["paths"]["output_root"] = str(out_root)
    for path, value in changes.items():
        block, _, key = path.partition(".")
        if key:
            cfg[block][key] = value
        else:
            cfg[block] = value
    return cfg


def _run_cell(cfg: dict) -> dict:
    from .pipeline import Pipeline

    pipe = Pipeline(cfg)
    pipe.run("eval")
    rec = pipe.record()
    reports = rec["metrics"]["eval"]
    return {"record": rec, "reports": reports}


def audit_budgets(cells: Sequence[dict], exempt: dict[str, set[str]] | None = None) -> None:
    """Every cell must share data hashes and per-stage budgets, except stages exempted for its row."""
    exempt = exempt or {}
    if not cells:
        return
    ref = cells[0]
    for c in cells[1:]:
        if c["record"]["data_hashes"] != ref["record"]["data_hashes"]:
            raise BudgetMismatch(f"cell {c['config']}/{c['seed']}: data differs from {ref['config']}/{ref['seed']}")
        skip = exempt.get(c["config"], set()) | exempt.get(ref["config"], set())
        for stage, budget in ref["record"]["budget"].items():
            if stage in skip:
                continue
            other = c["record"]["budget"].get(stage)
            if other != budget:
                raise BudgetMismatch(f"cell {c['config']}/{c['seed']}: {stage} budget {other} vs {budget}")


def _table(cells: Sequence[dict], split: str) -> tuple[list[dict], dict]:
    long_rows = []
    for c in cells:
        for ds, rep in c["reports"].items():
            if ds == "average" or split not in rep:
                continue
            long_rows.append({"dataset": ds, "config": c["config"], "seed": c["seed"],
                              "balanced_accuracy": rep[split]["balanced_accuracy"],
                              "weighted_f1": rep[split]["weighted_f1"], "chance": rep[split]["chance"]})
    summary: dict = {}
    configs = list(dict.fromkeys(c["config"] for c in cells))
    datasets = list(dict.fromkeys(r["dataset"] for r in long_rows))
    for cfg in configs:
        entry = {}
        for ds in [*datasets, "average"]:
            if ds == "average":
                per_seed = {}
                for r in long_rows:
                    if r["config"] == cfg:
                        per_seed.setdefault(r["seed"], []).append(r["balanced_accuracy"])
                vals = np.array([np.mean(v) for v in per_seed.values()])
                chance = float(np.mean([r["chance"] for r in long_rows if r["config"] == cfg][:len(datasets)]))
            else:
                vals = np.array([r["balanced_accuracy"] for r in long_rows if r["config"] == cfg and r["dataset"] == ds])
                chance = next(r["chance"] for r in long_rows if r["dataset"] == ds)
            entry[ds] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                         "n": int(len(vals)), "chance": chance}
        summary[cfg] = entry
    return long_rows, summary


def _write_reports(out_dir: Path, stem: str, cells: Sequence[dict], long_rows, summary, meta: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = [d for d in next(iter(summary.values())) if d != "average"]
    with open(out_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "seed", *datasets, "average"])
        for c in cells:
            vals = [c["reports"][d][meta["split"]]["balanced_accuracy"] for d in datasets]
            w.writerow([c["config"], c["seed"], *[f"{v:.6f}" for v in vals], f"{np.mean(vals):.6f}"])
    with open(out_dir / f"{stem}_long.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["dataset", "config", "seed", "balanced_accuracy", "weighted_f1", "chance"])
        w.writeheader()
        w.writerows(long_rows)
    with open(out_dir / f"{stem}_plot.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "config", "dataset", "mean", "sd"])
        for x, (cfg, entry) in enumerate(summary.items()):
            for ds, s in entry.items():
                w.writerow([x, cfg, ds, f"{s['mean']:.6f}", f"{s['sd']:.6f}"])
    budgets = {f"{c['config']}/{c['seed']}": c["record"]["budget"] for c in cells}
    save_json(out_dir / f"{stem}.json", {**meta, "summary": summary, "budgets": budgets})


def run_alignment_ablation(base: dict, seeds: Sequence[int], modes: Sequence[str] | None = None,
                           out_root=None, split: str = "test") -> dict:
    """Full pipeline under each alignment mode and seed, identical budgets; returns the summary."""
    if len(seeds) < 3:
        raise ValueError("ablations need at least 3 seeds")
    modes = list(modes or ("text_only", "image_only", "trimodal"))
    root = Path(out_root or base["paths"]["output_root"])
    cells = []
    for seed in seeds:
        for mode in modes:
            log.info("alignment ablation: mode=%s seed=%d", mode, seed)
            res = _run_cell(_cell_config(base, seed, root, alignment_mode=mode))
            cells.append({"config": mode, "seed": seed, **res})
    audit_budgets(cells)
    long_rows, summary = _table(cells, split)
    meta = {"kind": "alignment", "split": split, "seeds": list(seeds), "configs": modes}
    _write_reports(root / "ablation", "alignment", cells, long_rows, summary, meta)
    return {**meta, "summary": summary, "rows": long_rows}


STAGE_ROWS = ("w/o_stage1", "w/o_stage2", "full")


def run_stage_ablation(base: dict, seeds: Sequence[int], out_root=None, split: str = "test") -> dict:
    """w/o Stage 1 (random frozen encoders), w/o Stage 2 (random tokens) and the full trimodal pipeline."""
    if len(seeds) < 3:
        raise ValueError("ablations need at least 3 seeds")
    root = Path(out_root or base["paths"]["output_root"])
    variants = {
        "w/o_stage1": {"alignment_mode": "trimodal", "stage1.enabled": False},
        "w/o_stage2": {"alignment_mode": "trimodal", "stage3.token_source": "random"},
        "full": {"alignment_mode": "trimodal"},
    }
    cells = []
    for seed in seeds:
        for name, changes in variants.items():
            log.info("stage ablation: %s seed=%d", name, seed)
            res = _run_cell(_cell_config(base, seed, root, **changes))
            cells.append({"config": name, "seed": seed, **res})
    audit_budgets(cells, exempt={"w/o_stage1": {"align"}})
    long_rows, summary = _table(cells, split)
    meta = {"kind": "stage", "split": split, "seeds": list(seeds), "configs": list(variants)}
    _write_reports(root / "ablation", "stages", cells, long_rows, summary, meta)
    return {**meta, "summary": summary, "rows": long_rows}
