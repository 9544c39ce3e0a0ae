"""Stage orchestration with content-hash caching and run records."""

from __future__ import annotations

import contextlib
import copy
import hashlib
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .alignment import AlignmentConfig, train_stage1, write_loss_log
from .checkpoint import atomic_write, file_hash, load_json, load_tensors, save_json, save_tensors
from .config import config_hash
from .data import Corpus, DatasetManifest, DatasetSpec, generate_dataset, prompt_for, stratified_split
from .encoders import EncoderConfig, Encoders, Vocabulary
from .predictor import PredictorConfig, TokenPredictor, train_stage2
from .proxy import (ProxyBank, attach_proxies, build_bank, class_consistency, class_text_accuracy,
                    generate_proxies, train_clinical_text_alignment)
from .tokenizer import Tokenizer, build_tokenizer, fixed_point_rate, train_patch_decoder
from .understanding import (McqHead, Stage3Model, TaskPrompt, UnderstandingConfig, Upstream, evaluate,
                            prepare_task_data, task_for, train_stage3, write_predictions)

log = logging.getLogger(__name__)

STAGES = ("synth", "tokenizer", "proxy", "align", "predictor", "understand", "eval", "reconstruct")
DONE = "stage.json"


class StageFailure(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


class LockError(RuntimeError):
    pass


@contextlib.contextmanager
def output_lock(root):
    """Exclusive ownership of an output root through an O_EXCL lock file."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / ".lock"
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or 0)
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError, PermissionError, OSError):
                path.unlink(missing_ok=True)  # stale lock from a dead process
                continue
            raise LockError(f"{root} is locked by process {pid}") from None
    else:
        raise LockError(f"cannot acquire {path}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("GVG_THREADS", "1")))
    except ValueError:
        return 1


def dir_digest(root, patterns=("*",)) -> str:
    """sha256 over (relative path, content hash) of matching files, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    files = sorted({p for pat in patterns for p in root.rglob(pat) if p.is_file() and p.name != DONE})
    for p in files:
        h.update(str(p.relative_to(root)).encode())
        h.update(file_hash(p).encode())
    return h.hexdigest()


@dataclass
class StageOutput:
    name: str
    key: str
    dir: Path
    cached: bool
    steps_run: int
    metrics: dict
    hashes: dict
    budget: dict = field(default_factory=dict)


def build_vocab(manifests) -> Vocabulary:
    texts = []
    for m in manifests:
        texts += [prompt_for(c) for c in m.classes]
        texts.append(task_for(m).instruction)
    return Vocabulary.from_texts(texts)


class Pipeline:
    """One configured run; each stage output lives in ``<root>/<stage>/<key>`` and is reused when present."""

    def __init__(self, cfg: dict, force: bool = False):
        self.cfg = copy.deepcopy(cfg)
        self.force = force
        self.out = Path(cfg["paths"]["output_root"])
        self.data_root = Path(cfg["paths"]["data_root"])
        self.outputs: dict[str, StageOutput] = {}
        self._forced: set[str] = set()

    # -- plumbing -------------------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    @property
    def data_seed(self) -> int:
        ds = self.cfg.get("data_seed")
        return self.seed if ds is None else int(ds)

    @property
    def enc_cfg(self) -> EncoderConfig:
        return EncoderConfig(**self.cfg["encoder"])

    def _run(self, name: str, parts: dict, fn, root: Path | None = None) -> StageOutput:
        key = config_hash({"version": __version__, "stage": name, **parts})
        d = (root or self.out) / name / key[:16]
        if self.force and key not in self._forced and d.exists():
            shutil.rmtree(d)
        self._forced.add(key)
        done = d / DONE
        if done.exists():
            rec = load_json(done)
            out = StageOutput(name, key, d, True, 0, rec["metrics"], rec["hashes"], rec.get("budget", {}))
            log.info("%s: cached (%s)", name, d)
        else:
            if d.exists():
                shutil.rmtree(d)  # partial output from an interrupted run
            d.mkdir(parents=True)
            t0 = time.perf_counter()
            log.info("%s: running -> %s", name, d)
            try:
                metrics, steps, budget = fn(d)
            except Exception as exc:
                raise StageFailure(name, exc) from exc
            hashes = {"outputs": dir_digest(d, ("*.gvgt", "*.img", "*.eeg", "*.csv"))}
            for p in sorted(d.glob("*.gvgt")):
                hashes[p.name] = file_hash(p)
            save_json(done, {"stage": name, "key": key, "parts": parts, "metrics": metrics, "hashes": hashes,
                             "budget": budget, "steps": steps, "seconds": time.perf_counter() - t0})
            out = StageOutput(name, key, d, False, steps, metrics, hashes, budget)
        self.outputs[name] = out
        return out

    # -- stages ---------------------------------------------------------------------
    def synth(self) -> StageOutput:
        enc = self.cfg["encoder"]
        parts = {"data": self.cfg["data"], "data_seed": self.data_seed, "channels": enc["channels"],
                 "samples": enc["samples"], "image_size": enc["image_size"]}

        def fn(d):
            counts = {}
            for ds in self.cfg["data"]["datasets"]:
                spec = DatasetSpec(seed=self.data_seed, channels=enc["channels"], samples=enc["samples"],
                                   image_size=enc["image_size"], **ds)
                m = generate_dataset(spec, d / ds["name"])
                stratified_split(m, tuple(self.cfg["data"]["split"]), self.data_seed)
                m.save()
                counts[ds["name"]] = {s: int(len(m.indices(s))) for s in ("train", "val", "test")}
            hashes = {ds["name"]: dir_digest(d / ds["name"]) for ds in self.cfg["data"]["datasets"]}
            return {"counts": counts, "data_hashes": hashes}, 0, {}

        return self._run("synth", parts, fn, root=self.data_root)

    def manifests(self, with_proxies: bool = True) -> list[DatasetManifest]:
        syn = self.outputs.get("synth") or self.synth()
        out = []
        proxy = self.outputs.get("proxy") if with_proxies else None
        for ds in self.cfg["data"]["datasets"]:
            p = syn.dir / ds["name"]
            if proxy is not None and ds["kind"] == "clinical" and self.cfg["proxy"]["enabled"]:
                p = proxy.dir / "proxies" / ds["name"]
            out.append(DatasetManifest.load(p))
        return out

    def corpora(self, with_proxies: bool = True) -> list[Corpus]:
        return [Corpus.load(m) for m in self.manifests(with_proxies)]

    def vocab(self) -> Vocabulary:
        return build_vocab(self.manifests(with_proxies=False))

    def init_encoders(self) -> Encoders:
        return Encoders(self.enc_cfg, self.vocab(), self.seed)

    def load_encoders(self, path) -> Encoders:
        enc = self.init_encoders()
        enc.load_state_dict(load_tensors(path))
        return enc

    def load_tokenizer(self) -> Tokenizer:
        return Tokenizer.load(self.outputs["tokenizer"].dir / "tokenizer.gvgt", self.enc_cfg)

    def tokenizer(self) -> StageOutput:
        syn = self.outputs.get("synth") or self.synth()
        tcfg = self.cfg["tokenizer"]
        parts = {"tokenizer": tcfg, "encoder": self.cfg["encoder"], "seed": self.seed, "synth": syn.key}

        def fn(d):
            visual = [c for c in self.corpora(False) if c.manifest.kind == "visual"]
            train = np.concatenate([c.image_stack(c.split("train")) for c in visual])
            val = [c.image_stack(c.split("val")) for c in visual if len(c.split("val"))]
            enc = self.init_encoders()
            pe = enc.enc_img.patch_embed
            tok = build_tokenizer(self.enc_cfg, pe.weight.data, pe.bias.data, train, tcfg["codebook_size"], self.seed)
            rep = train_patch_decoder(tok, train, np.concatenate(val) if val else None, self.seed,
                                      steps=tcfg["decoder_steps"], lr=tcfg["decoder_lr"], batch=tcfg["decoder_batch"])
            tok.save(d / "tokenizer.gvgt")
            tok = Tokenizer.load(d / "tokenizer.gvgt", self.enc_cfg)
            rng = np.random.default_rng([self.seed, 7])
            grids = rng.integers(0, tok.codebook.size, size=(100, tok.grid_length))
            from .tokenizer import reconstruction_mse
            metrics = {"train_mse": reconstruction_mse(tok, train),
                       "val_mse": reconstruction_mse(tok, np.concatenate(val)) if val else float("nan"),
                       "untrained_mse": rep.init_train_mse, "pixel_variance": float(np.var(train)),
                       "fixed_point_rate": fixed_point_rate(tok, grids), "codebook_digest": tok.codebook.digest()}
            return metrics, tcfg["decoder_steps"], {"decoder_steps": tcfg["decoder_steps"]}

        return self._run("tokenizer", parts, fn)

    def _align_cfg(self, block: dict, mode: str) -> AlignmentConfig:
        keys = ("lambda_ei", "lambda_et", "lambda_it", "alpha", "temperature", "batch_size", "steps", "lr",
                "warmup_frac")
        return AlignmentConfig(**{k: block[k] for k in keys if k in block}, seed=self.seed, alignment_mode=mode)

    def proxy(self) -> StageOutput:
        syn = self.outputs.get("synth") or self.synth()
        tok_out = self.outputs.get("tokenizer") or self.tokenizer()
        pcfg = self.cfg["proxy"]
        parts = {"proxy": pcfg, "encoder": self.cfg["encoder"], "seed": self.seed, "synth": syn.key,
                 "tokenizer": tok_out.key}

        def fn(d):
            if not pcfg["enabled"]:
                return {"enabled": False}, 0, {}
            corpora = self.corpora(False)
            clinical = [c for c in corpora if c.manifest.kind == "clinical"]
            visual = [c for c in corpora if c.manifest.kind == "visual"]
            if not clinical:
                return {"enabled": True, "clinical": 0}, 0, {}
            acfg = self._align_cfg(pcfg, "trimodal")
            res = train_clinical_text_alignment(acfg, clinical, self.enc_cfg, self.vocab(),
                                                visual if pcfg["visual_anchor"] else ())
            save_tensors(d / "proxy_encoders.gvgt", res.encoders.state_dict())
            write_loss_log(res.log, d / "proxy_loss.csv")
            enc = self.load_encoders(d / "proxy_encoders.gvgt")
            tok = self.load_tokenizer()
            bank = build_bank(visual, enc, tok)
            bank.save(d / "bank")
            bank = ProxyBank.load(d / "bank")
            metrics = {"enabled": True, "bank_size": len(bank), "bank_hash": bank.digest(), "datasets": {}}
            for c in clinical:
                recs = generate_proxies(c, bank, enc)
                attach_proxies(c.manifest, recs, tok, d, bank)
                hit, chance = class_consistency(recs, c.manifest, bank)
                metrics["datasets"][c.name] = {
                    "class_text_accuracy": class_text_accuracy(enc, c, "val"), "class_consistency": hit,
                    "consistency_chance": chance, "mean_score": float(np.mean([r.score for r in recs]))}
            return metrics, acfg.steps, {"steps": acfg.steps, "batch_size": acfg.batch_size}

        return self._run("proxy", parts, fn)

    def align(self) -> StageOutput:
        syn = self.outputs.get("synth") or self.synth()
        prx = self.outputs.get("proxy") or self.proxy()
        s1 = self.cfg["stage1"]
        mode = self.cfg["alignment_mode"]
        parts = {"stage1": s1, "mode": mode, "encoder": self.cfg["encoder"], "seed": self.seed,
                 "synth": syn.key, "proxy": prx.key}

        def fn(d):
            acfg = self._align_cfg(s1, mode)
            if not s1["enabled"]:
                acfg.steps = 0
            res = train_stage1(acfg, self.corpora(), self.enc_cfg, self.vocab(), self.init_encoders())
            save_tensors(d / "encoders.gvgt", res.encoders.state_dict())
            save_json(d / "config.json", {"alignment": acfg.__dict__, "encoder": self.cfg["encoder"]})
            write_loss_log(res.log, d / "loss.csv")
            losses = [r["total"] for r in res.log]
            metrics = {"val_retrieval": res.val_retrieval, "retrieval_chance": res.chance,
                       "skipped_steps": res.skipped_steps,
                       "loss_first10": float(np.mean(losses[:10])) if losses else float("nan"),
                       "loss_last10": float(np.mean(losses[-10:])) if losses else float("nan")}
            return metrics, acfg.steps, {"steps": acfg.steps, "batch_size": acfg.batch_size}

        return self._run("align", parts, fn)

    def _predictor_cfg(self) -> PredictorConfig:
        return PredictorConfig(**self.cfg["stage2"], seed=self.seed)

    def predictor(self) -> StageOutput:
        tok_out = self.outputs.get("tokenizer") or self.tokenizer()
        al = self.outputs.get("align") or self.align()
        parts = {"stage2": self.cfg["stage2"], "seed": self.seed, "align": al.key, "tokenizer": tok_out.key}

        def fn(d):
            pcfg = self._predictor_cfg()
            enc = self.load_encoders(al.dir / "encoders.gvgt")
            tok = self.load_tokenizer()
            visual = [c for c in self.corpora() if c.manifest.kind == "visual"]
            res = train_stage2(pcfg, visual, enc, tok)
            save_tensors(d / "predictor.gvgt", res.predictor.state_dict("predictor/"))
            save_json(d / "predictor.json", {"head_mode": pcfg.head_mode, "config": pcfg.__dict__})
            if pcfg.tune_encoder:
                save_tensors(d / "encoders.gvgt", enc.state_dict())
            metrics = {"val_token_accuracy": res.val_accuracy, "chance": res.chance, "init_loss": res.init_loss,
                       "final_loss": res.log[-1]["loss"] if res.log else float("nan")}
            return metrics, pcfg.steps, {"steps": pcfg.steps, "batch_size": pcfg.batch_size}

        return self._run("predictor", parts, fn)

    def load_upstream(self) -> Upstream:
        al, pr = self.outputs["align"], self.outputs["predictor"]
        enc_path = pr.dir / "encoders.gvgt" if (pr.dir / "encoders.gvgt").exists() else al.dir / "encoders.gvgt"
        enc = self.load_encoders(enc_path)
        tok = self.load_tokenizer()
        pred = self.fresh_predictor(tok)
        pred.load_state_dict(load_tensors(pr.dir / "predictor.gvgt"), "predictor/")
        return Upstream(enc, pred, tok.codebook)

    def fresh_predictor(self, tok: Tokenizer) -> TokenPredictor:
        return TokenPredictor(self._predictor_cfg(), self.enc_cfg.model_dim, tok.grid_length, tok.codebook.dim,
                              tok.codebook.size)

    def _stage3_cfg(self) -> UnderstandingConfig:
        return UnderstandingConfig(**self.cfg["stage3"], seed=self.seed)

    def understand(self) -> StageOutput:
        prx = self.outputs.get("proxy") or self.proxy()
        pr = self.outputs.get("predictor") or self.predictor()
        parts = {"stage3": self.cfg["stage3"], "seed": self.seed, "predictor": pr.key, "proxy": prx.key}

        def fn(d):
            ucfg = self._stage3_cfg()
            up = self.load_upstream()
            corpora = self.corpora()
            tasks = [task_for(c.manifest) for c in corpora]
            for t in tasks:
                t.save(d / f"task_{t.task_id}.json")
            datas = [prepare_task_data(c, t, up, ucfg) for c, t in zip(corpora, tasks)]
            res = train_stage3(ucfg, corpora, tasks, up, datas)
            save_tensors(d / "head.gvgt", res.model.head.state_dict("head/"))
            if ucfg.tune_scope != "head_only":
                save_tensors(d / "predictor.gvgt", up.predictor.state_dict("predictor/"))
            if ucfg.tune_scope == "all":
                save_tensors(d / "encoders.gvgt", up.encoders.state_dict())
            for data in datas:
                for split in ("val", "test"):
                    rows = data.corpus.split(split)
                    if len(rows):
                        write_predictions(d / f"predictions_{data.corpus.name}_{split}.csv", res.model, data, rows)
            metrics = {"val_balanced_accuracy": res.val_bacc,
                       "test_balanced_accuracy": evaluate(res.model, datas, "test"),
                       "init_loss": res.init_loss, "final_loss": res.log[-1]["loss"] if res.log else float("nan"),
                       "token_segment_sensitivity": token_segment_sensitivity(res.model, datas, "val")}
            return metrics, ucfg.steps, {"steps": ucfg.steps, "batch_size": ucfg.batch_size,
                                         "tune_scope": ucfg.tune_scope}

        return self._run("understand", parts, fn)

    def eval(self) -> StageOutput:
        un = self.outputs.get("understand") or self.understand()
        parts = {"understand": un.key}

        def fn(d):
            from .evaluation import reports_from_predictions
            reports = reports_from_predictions(un.dir, self.manifests())
            save_json(d / "classification.json", reports)
            return reports, 0, {}

        return self._run("eval", parts, fn)

    def reconstruct(self) -> StageOutput:
        pr = self.outputs.get("predictor") or self.predictor()
        parts = {"predictor": pr.key, "seed": self.seed}

        def fn(d):
            from .evaluation import reconstruction_probe
            up = self.load_upstream()
            tok = self.load_tokenizer()
            visual = [c for c in self.corpora() if c.manifest.kind == "visual"]
            untrained = self.fresh_predictor(tok)
            report = reconstruction_probe(visual, up, tok, untrained, self.seed, d)
            save_json(d / "reconstruction.json", report)
            return report, 0, {}

        return self._run("reconstruct", parts, fn)

    def load_stage3_model(self) -> tuple[Stage3Model, list]:
        """Trained Stage-3 model and its per-corpus task data, from the cached outputs."""
        un = self.outputs["understand"]
        ucfg = self._stage3_cfg()
        up = self.load_upstream()
        if (un.dir / "predictor.gvgt").exists():
            up.predictor.load_state_dict(load_tensors(un.dir / "predictor.gvgt"), "predictor/")
        if (un.dir / "encoders.gvgt").exists():
            up.encoders.load_state_dict(load_tensors(un.dir / "encoders.gvgt"))
        enc_cfg = up.encoders.config
        head = McqHead(ucfg, enc_cfg.model_dim, enc_cfg.model_dim, up.codebook.size)
        head.load_state_dict(load_tensors(un.dir / "head.gvgt"), "head/")
        model = Stage3Model(ucfg, up, head)
        corpora = self.corpora()
        datas = [prepare_task_data(c, TaskPrompt.load(un.dir / f"task_{c.name}.json"), up, ucfg) for c in corpora]
        return model, datas

    def run(self, until: str = "reconstruct") -> dict:
        """Run every stage up to and including ``until`` in dependency order."""
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}")
        for name in STAGES[:STAGES.index(until) + 1]:
            if name not in self.outputs:
                getattr(self, name)()
        return self.record()

    # -- records --------------------------------------------------------------------
    def record(self, wall_clock: float | None = None) -> dict:
        hashed_cfg = {k: v for k, v in self.cfg.items() if k != "paths"}
        syn = self.outputs.get("synth")
        return {
            "tool_version": __version__,
            "config_hash": config_hash(hashed_cfg),
            "config": hashed_cfg,
            "data_hashes": syn.metrics["data_hashes"] if syn else {},
            "checkpoint_hashes": {n: o.hashes for n, o in self.outputs.items()},
            "stage_keys": {n: o.key for n, o in self.outputs.items()},
            "metrics": {n: o.metrics for n, o in self.outputs.items()},
            "budget": {n: o.budget for n, o in self.outputs.items()},
            "run": {"cached": {n: o.cached for n, o in self.outputs.items()},
                    "training_steps_run": int(sum(o.steps_run for o in self.outputs.values())),
                    "wall_clock_s": wall_clock, "threads": thread_count()},
        }

    def write_record(self, wall_clock: float | None = None, name: str = "run_record.json") -> Path:
        path = self.out / name
        self.out.mkdir(parents=True, exist_ok=True)
        atomic_write(path, (canonical_pretty(self.record(wall_clock))).encode())
        return path


def canonical_pretty(obj) -> str:
    import json

    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not JSON serializable: {type(x)}")


def comparable(record: dict) -> dict:
    """Record minus run-volatile fields (timing, cache hits)."""
    return {k: v for k, v in record.items() if k != "run"}


def token_segment_sensitivity(model: Stage3Model, datas, split: str) -> float:
    """Fraction of predictions that change when the image-token segment is zeroed."""
    changed, total = 0, 0
    for d in datas:
        rows = d.corpus.split(split)
        if len(rows) == 0:
            continue
        a = model.predict(d, rows)
        b = model.predict(d, rows, token_source="zero")
        changed += int(np.sum(a != b))
        total += len(rows)
    return changed / total if total else float("nan")


@contextlib.contextmanager
def deterministic_threads():
    with threadpool_limits(limits=thread_count()):
        yield


def run_pipeline(cfg: dict, until: str = "reconstruct", force: bool = False) -> tuple[Pipeline, dict]:
    t0 = time.perf_counter()
    with deterministic_threads():
        pipe = Pipeline(cfg, force=force)
        pipe.run(until)
        path = pipe.write_record(time.perf_counter() - t0)
    return pipe, load_json(path)
