"""Training loop, checkpoints, evaluation metrics and the ablation runner."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ABLATION_ROWS, TrainConfig, load_config, parse_config
from .container import read_container, write_container
from .data import AnswerVocabulary, DatasetManifest, SampleRecord, load_manifest
from .errors import ConfigurationError, FormatError, IntegrityError, TrainingDivergedError
from .head import predicted_answer
from .model import OAMVQA, collate

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "attrfuse-checkpoint v1"


@dataclass
class MetricsReport:
    overall_accuracy: float
    soft_accuracy: float
    per_type_accuracy: dict[str, float]
    per_type_soft_accuracy: dict[str, float]
    per_type_count: dict[str, int]
    n_samples: int
    loss_curves: list[dict[str, float]] = field(default_factory=list)
    metadata: dict[str, object] = field(default_factory=dict)
    heldout: "MetricsReport | None" = None

    def recomposed_accuracy(self) -> float:
        total = sum(self.per_type_count.values())
        return sum(self.per_type_count[t] * a for t, a in self.per_type_accuracy.items()) / total

    def comparable(self) -> dict:
        """Everything except wall-clock timing, for reproducibility checks."""
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "heldout"}
        d["metadata"] = {k: v for k, v in self.metadata.items() if k != "wall_time"}
        d["heldout"] = self.heldout.comparable() if self.heldout else None
        return d

    def records(self, prefix: str = "") -> list[tuple[str, float]]:
        out = [(f"{prefix}accuracy", self.overall_accuracy),
               (f"{prefix}soft_accuracy", self.soft_accuracy),
               (f"{prefix}n_samples", self.n_samples)]
        for t, a in self.per_type_accuracy.items():
            out.append((f"{prefix}accuracy/{t}", a))
            out.append((f"{prefix}soft_accuracy/{t}", self.per_type_soft_accuracy[t]))
            out.append((f"{prefix}count/{t}", self.per_type_count[t]))
        if self.heldout is not None:
            out += self.heldout.records(prefix + "heldout/")
        return out

    def table(self, title: str = "") -> str:
        types = list(self.per_type_accuracy)
        head = ["All", "Soft"] + types
        vals = [self.overall_accuracy, self.soft_accuracy] + [self.per_type_accuracy[t] for t in types]
        lines = [title] if title else []
        lines.append(" | ".join(f"{h:>10}" for h in head))
        lines.append(" | ".join(f"{100 * v:>10.2f}" for v in vals))
        return "\n".join(lines)


def compute_metrics(
    predictions: Sequence[int],
    targets: np.ndarray,
    question_types: Sequence[str],
    question_type_set: Sequence[str] | None = None,
    soft_scale: float = 1.0,
) -> MetricsReport:
    """Hard-match accuracy (predicted answer has target > 0) and soft-score
    accuracy ``min(1, target[pred] * soft_scale)``, overall and per type.
    Types with no samples are left out of the per-type maps."""
    targets = np.asarray(targets, dtype=np.float64)
    preds = np.asarray(predictions, dtype=np.int64)
    n = len(preds)
    if n == 0:
        raise IntegrityError("cannot compute metrics over zero samples")
    picked = targets[np.arange(n), preds]
    hard = (picked > 0).astype(np.float64)
    soft = np.minimum(1.0, picked * soft_scale)
    types = list(question_type_set) if question_type_set else sorted(set(question_types))
    qt = np.asarray(question_types)
    per, per_soft, counts = {}, {}, {}
    for t in types:
        mask = qt == t
        c = int(mask.sum())
        if c == 0:
            continue
        counts[t] = c
        per[t] = float(hard[mask].sum()) / c
        per_soft[t] = float(soft[mask].sum()) / c
    return MetricsReport(float(hard.sum()) / n, float(soft.sum()) / n, per, per_soft, counts, n)


@dataclass
class Checkpoint:
    config: TrainConfig
    vocabulary: AnswerVocabulary
    state: dict[str, torch.Tensor]
    epoch: int

    def model(self) -> OAMVQA:
        m = OAMVQA(self.config, len(self.vocabulary))
        m.load_state_dict(self.state)
        m.eval()
        return m

    def save(self, out_dir: str | os.PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_container(out / "params.tc",
                        {k: v.detach().cpu().numpy() for k, v in self.state.items()})
        self.config.save(out / "config.txt")
        self.vocabulary.save(out / "vocab.txt")
        (out / "checkpoint.txt").write_text(
            f"{CHECKPOINT_MAGIC}\nepoch = {self.epoch}\nanswers = {len(self.vocabulary)}\n",
            encoding="utf-8")
        return out

    @classmethod
    def load(cls, ckpt_dir: str | os.PathLike) -> "Checkpoint":
        d = Path(ckpt_dir)
        try:
            meta = (d / "checkpoint.txt").read_text(encoding="utf-8").splitlines()
        except FileNotFoundError as exc:
            raise IntegrityError(f"{d} is not a checkpoint directory") from exc
        if not meta or meta[0] != CHECKPOINT_MAGIC:
            raise FormatError(f"{d}: bad checkpoint header")
        values = dict(line.split(" = ", 1) for line in meta[1:] if " = " in line)
        cfg = parse_config((d / "config.txt").read_text(encoding="utf-8"))
        vocab = AnswerVocabulary.load(d / "vocab.txt")
        state = {k: torch.from_numpy(np.array(v)) for k, v in read_container(d / "params.tc").items()}
        return cls(cfg, vocab, state, int(values.get("epoch", 0)))


def _as_samples(data) -> tuple[list[SampleRecord], AnswerVocabulary, list[str]]:
    if isinstance(data, (str, os.PathLike)):
        data = load_manifest(data)
    if isinstance(data, DatasetManifest):
        return data.samples(), data.vocabulary, data.question_type_set
    samples, vocab = data
    return list(samples), vocab, sorted({s.question_type for s in samples})


def predict_samples(model: OAMVQA, samples: Sequence[SampleRecord],
                    chunk: int = 256) -> np.ndarray:
    preds = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            groups = collate(samples[i:i + chunk], model.cfg.knowledge_streams, model.dtype)
            out, _ = model.run(groups)
            preds.append(predicted_answer(out.scores).numpy())
    return np.concatenate(preds)


def _evaluate_model(model, samples, qtype_set, scale) -> MetricsReport:
    preds = predict_samples(model, samples)
    targets = np.stack([s.answer_targets for s in samples])
    return compute_metrics(preds, targets, [s.question_type for s in samples], qtype_set, scale)


def evaluate(checkpoint: Checkpoint | str | os.PathLike, manifest) -> MetricsReport:
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    samples, vocab, qtypes = _as_samples(manifest)
    if vocab != checkpoint.vocabulary:
        raise IntegrityError("checkpoint vocabulary does not match the dataset vocabulary")
    report = _evaluate_model(checkpoint.model(), samples, qtypes, checkpoint.config.soft_score_scale)
    report.metadata = {"config_hash": checkpoint.config.hash(), "seed": checkpoint.config.seed,
                       "epoch": checkpoint.epoch}
    return report


def _epoch_batches(order: np.ndarray, batch_size: int, min_size: int) -> list[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < min_size:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    report: MetricsReport
    shuffle_log: list[list[int]]

    def __iter__(self):
        return iter((self.checkpoint, self.report))


def train(cfg: TrainConfig, train_data=None, eval_data=None, on_epoch=None) -> TrainResult:
    """AdamW over shuffled mini-batches; deterministic for a fixed config.

    ``train_data``/``eval_data`` default to the manifests named in the config
    and may also be a manifest, a path or a ``(samples, vocabulary)`` pair.
    ``on_epoch(epoch, model, losses)`` is called after every epoch.
    """
    cfg.validate()
    train_data = train_data if train_data is not None else cfg.train_manifest
    if not train_data:
        raise ConfigurationError("no training data: set train_manifest")
    samples, vocab, qtypes = _as_samples(train_data)
    if cfg.contrastive_active and len(samples) < 2:
        raise ConfigurationError("the contrastive loss needs at least 2 training samples")
    eval_data = eval_data if eval_data is not None else (cfg.eval_manifest or None)

    started = time.perf_counter()
    model = OAMVQA(cfg, len(vocab))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.data_seed)
    min_batch = 2 if cfg.contrastive_active else 1
    curves, shuffle_log = [], []
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(samples))
        shuffle_log.append(order.tolist())
        sums = {"vqa": 0.0, "cl": 0.0, "total": 0.0}
        for idx in _epoch_batches(order, cfg.batch_size, min_batch):
            groups = collate([samples[i] for i in idx], cfg.knowledge_streams, model.dtype)
            out, targets = model.run(groups)
            parts = model.losses(out, targets)
            if not torch.isfinite(parts.total):
                culprit = model.first_nonfinite(out) or "loss"
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}; first non-finite tensor: {culprit}")
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            w = len(idx)
            sums["vqa"] += w * parts.vqa.item()
            sums["total"] += w * parts.total.item()
            if parts.cl is not None:
                sums["cl"] += w * parts.cl.item()
        curves.append({"epoch": epoch, **{k: v / len(samples) for k, v in sums.items()}})
        log.debug("epoch %d: %s", epoch, curves[-1])
        if on_epoch is not None:
            on_epoch(epoch, model, curves[-1])

    report = _evaluate_model(model, samples, qtypes, cfg.soft_score_scale)
    if eval_data is not None:
        ev_samples, ev_vocab, ev_types = _as_samples(eval_data)
        if ev_vocab != vocab:
            raise IntegrityError("evaluation vocabulary differs from training vocabulary")
        report.heldout = _evaluate_model(model, ev_samples, ev_types, cfg.soft_score_scale)
    report.loss_curves = curves
    report.metadata = {"config_hash": cfg.hash(), "seed": cfg.seed, "data_seed": cfg.data_seed,
                       "epochs": cfg.epochs, "wall_time": time.perf_counter() - started,
                       "learning_rate": cfg.learning_rate, "batch_size": cfg.batch_size}
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return TrainResult(Checkpoint(cfg, vocab, state, cfg.epochs), report, shuffle_log)


@dataclass
class AblationRow:
    name: str
    config: TrainConfig
    report: MetricsReport

    @property
    def heldout_accuracy(self) -> float:
        r = self.report.heldout or self.report
        return r.overall_accuracy


def run_ablation_suite(base: TrainConfig, train_data=None, eval_data=None) -> list[AblationRow]:
    rows = []
    for name, toggles in ABLATION_ROWS.items():
        cfg = replace(base, **toggles).validate()
        result = train(cfg, train_data, eval_data)
        rows.append(AblationRow(name, cfg, result.report))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'Models':<12} | {'Held-out':>9} | {'Soft':>7} | {'Train':>7} | config",
             "-" * 60]
    for r in rows:
        held = r.report.heldout or r.report
        lines.append(f"{r.name:<12} | {100 * held.overall_accuracy:>9.2f} | "
                     f"{100 * held.soft_accuracy:>7.2f} | "
                     f"{100 * r.report.overall_accuracy:>7.2f} | {r.config.hash()}")
    return "\n".join(lines)


def write_report(report: MetricsReport, out_dir: str | os.PathLike, stem: str = "metrics") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{stem}.jsonl", "w", encoding="utf-8") as fh:
        for metric, value in report.records():
            fh.write(json.dumps({"metric": metric, "value": value}) + "\n")
        for key, value in report.metadata.items():
            fh.write(json.dumps({"metric": f"meta/{key}", "value": value}) + "\n")
    if report.loss_curves:
        with open(out / "losses.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "vqa", "cl", "total"])
            writer.writeheader()
            writer.writerows(report.loss_curves)


def write_shuffle_log(shuffle_log: list[list[int]], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for epoch, order in enumerate(shuffle_log):
            fh.write(f"epoch {epoch} order {' '.join(map(str, order))}\n")


__all__ = [
    "Checkpoint",
    "MetricsReport",
    "TrainResult",
    "ablation_table",
    "compute_metrics",
    "evaluate",
    "load_config",
    "run_ablation_suite",
    "train",
    "write_report",
]
