"""On-disk dataset contract, answer vocabulary and the synthetic fixture generator.

A dataset split is three files side by side: a text manifest, a tensor
container holding every per-sample feature tensor, and a vocabulary file.

Manifest layout (tab separated ``key=value`` fields)::

    ATTRFUSE-MANIFEST v1
    name=...  split=train  vocab=vocab.txt  container=train.tc  qtypes=a,b
    meta  qa_pairs=118K  images=123K                 (optional, display only)
    record  id=...  qtype=...  visual=...  question=...  attributes=...
            caption=...  targets=...  knowledge.<stream>=...
"""
from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .container import TensorContainer, write_container
from .errors import DomainError, FormatError, IntegrityError, PreconditionError

log = logging.getLogger(__name__)

MANIFEST_MAGIC = "ATTRFUSE-MANIFEST v1"
SPLITS = ("train", "val", "test")
KNOWLEDGE_STREAMS = ("ofa", "blip", "blip2", "synthetic")
FEATURE_KEYS = ("visual", "question", "attributes", "caption", "targets")

# Display-only statistics of the benchmark datasets (QA pairs, images, image source).
DATASET_STATISTICS = {
    "COCO-QA": {"qa_pairs": "118K", "images": "123K", "source": "COCO"},
    "TDIUC": {"qa_pairs": "1.6M", "images": "167K", "source": "COCO+VG"},
    "VQA-CPv1": {"qa_pairs": "370K", "images": "205K", "source": "COCO"},
    "VQA-CPv2": {"qa_pairs": "603K", "images": "219K", "source": "COCO"},
    "VQAv2": {"qa_pairs": "1.1M", "images": "204K", "source": "COCO"},
    "VQAvs": {"qa_pairs": "658K", "images": "877K", "source": "COCO"},
}


class AnswerVocabulary:
    def __init__(self, answers: Iterable[str]):
        self.answers = list(answers)
        self.index = {a: i for i, a in enumerate(self.answers)}
        if len(self.index) != len(self.answers):
            raise IntegrityError("answer vocabulary contains duplicates")
        if any(not a or "\n" in a for a in self.answers):
            raise IntegrityError("answers must be non-empty single-line strings")

    def __len__(self) -> int:
        return len(self.answers)

    def __eq__(self, other) -> bool:
        return isinstance(other, AnswerVocabulary) and self.answers == other.answers

    def __getitem__(self, i: int) -> str:
        return self.answers[i]

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(a + "\n" for a in self.answers), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AnswerVocabulary":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise IntegrityError(f"vocabulary file {path} does not exist") from exc
        return cls(line for line in text.split("\n") if line)


def encode_answer_targets(
    answers: Sequence[tuple[str, float]],
    vocab: AnswerVocabulary,
    stats: Counter | None = None,
) -> np.ndarray:
    """Soft-score target vector; unknown answers are skipped and counted."""
    out = np.zeros(len(vocab), dtype=np.float64)
    for answer, score in answers:
        if not 0.0 <= score <= 1.0:
            raise DomainError(f"answer score {score} for {answer!r} is outside [0, 1]")
        idx = vocab.index.get(answer)
        if idx is None:
            log.warning("answer %r not in vocabulary; skipped", answer)
            if stats is not None:
                stats["unknown_answer"] += 1
            continue
        out[idx] = max(out[idx], score)
    return out


@dataclass
class SampleRecord:
    id: str
    visual_features: np.ndarray
    question_features: np.ndarray
    attribute_embeddings: np.ndarray
    caption_features: np.ndarray
    knowledge_features: dict[str, np.ndarray]
    answer_targets: np.ndarray
    question_type: str

    def validate(self, vocab_size: int | None = None) -> None:
        for name in ("visual_features", "question_features", "attribute_embeddings",
                     "caption_features"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise IntegrityError(f"{self.id}: {name} must be a non-empty matrix")
            if not np.isfinite(arr).all():
                raise IntegrityError(f"{self.id}: {name} has non-finite entries")
        if not self.knowledge_features:
            raise IntegrityError(f"{self.id}: no knowledge stream present")
        for stream, arr in self.knowledge_features.items():
            if stream not in KNOWLEDGE_STREAMS:
                raise IntegrityError(f"{self.id}: unknown knowledge stream {stream!r}")
            if arr.ndim != 2 or not np.isfinite(arr).all():
                raise IntegrityError(f"{self.id}: knowledge stream {stream} is malformed")
        t = self.answer_targets
        if t.ndim != 1 or (vocab_size is not None and t.shape[0] != vocab_size):
            raise IntegrityError(f"{self.id}: answer targets do not match the vocabulary")
        if ((t < 0) | (t > 1)).any():
            raise IntegrityError(f"{self.id}: answer targets outside [0, 1]")

    def knowledge(self, streams: Sequence[str]) -> np.ndarray:
        """Requested knowledge streams stacked along the token axis."""
        try:
            return np.concatenate([self.knowledge_features[s] for s in streams], axis=0)
        except KeyError as exc:
            raise IntegrityError(f"{self.id}: knowledge stream {exc.args[0]!r} missing") from None


@dataclass(frozen=True)
class RecordEntry:
    id: str
    question_type: str
    tensors: Mapping[str, str]  # feature key -> tensor name in the container


def _fields(parts: Sequence[str], where: str) -> dict[str, str]:
    out = {}
    for p in parts:
        key, sep, value = p.partition("=")
        if not sep:
            raise FormatError(f"{where}: field {p!r} is not key=value")
        out[key] = value
    return out


@dataclass
class DatasetManifest:
    name: str
    split: str
    vocabulary_path: Path
    container_path: Path
    records: list[RecordEntry]
    question_type_set: list[str]
    metadata: dict[str, str] = field(default_factory=dict)
    _container: TensorContainer | None = field(default=None, repr=False, compare=False)
    _vocab: AnswerVocabulary | None = field(default=None, repr=False, compare=False)

    @property
    def N(self) -> int:
        return len(self.records)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def container(self) -> TensorContainer:
        if self._container is None:
            self._container = TensorContainer(self.container_path)
        return self._container

    @property
    def vocabulary(self) -> AnswerVocabulary:
        if self._vocab is None:
            self._vocab = AnswerVocabulary.load(self.vocabulary_path)
        return self._vocab

    def sample(self, i: int) -> SampleRecord:
        rec = self.records[i]
        c = self.container
        knowledge = {
            key.split(".", 1)[1]: np.asarray(c[name])
            for key, name in rec.tensors.items() if key.startswith("knowledge.")
        }
        return SampleRecord(
            id=rec.id,
            visual_features=np.asarray(c[rec.tensors["visual"]]),
            question_features=np.asarray(c[rec.tensors["question"]]),
            attribute_embeddings=np.asarray(c[rec.tensors["attributes"]]),
            caption_features=np.asarray(c[rec.tensors["caption"]]),
            knowledge_features=knowledge,
            answer_targets=np.asarray(c[rec.tensors["targets"]]),
            question_type=rec.question_type,
        )

    def samples(self) -> list[SampleRecord]:
        return [self.sample(i) for i in range(len(self.records))]

    def validate(self) -> None:
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise IntegrityError(f"{self.name}: duplicate sample ids")
        c = self.container
        for rec in self.records:
            for key in FEATURE_KEYS:
                if key not in rec.tensors:
                    raise IntegrityError(f"sample {rec.id}: no {key} tensor listed")
            if not any(k.startswith("knowledge.") for k in rec.tensors):
                raise IntegrityError(f"sample {rec.id}: no knowledge stream listed")
            for key, name in rec.tensors.items():
                if name not in c:
                    raise IntegrityError(f"sample {rec.id}: tensor {name!r} ({key}) is absent")
            targets = c.entries[rec.tensors["targets"]]
            if targets.shape != (len(self.vocabulary),):
                raise IntegrityError(f"sample {rec.id}: targets shape {targets.shape} "
                                     f"does not match vocabulary size {len(self.vocabulary)}")
            if rec.question_type not in self.question_type_set:
                raise IntegrityError(f"sample {rec.id}: unlisted question type")

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        base = path.parent

        def rel(p: Path) -> str:
            return os.path.relpath(p, base)

        lines = [MANIFEST_MAGIC, "\t".join([
            f"name={self.name}", f"split={self.split}",
            f"vocab={rel(self.vocabulary_path)}", f"container={rel(self.container_path)}",
            f"qtypes={','.join(self.question_type_set)}",
        ])]
        if self.metadata:
            lines.append("\t".join(["meta"] + [f"{k}={v}" for k, v in self.metadata.items()]))
        for r in self.records:
            fields = [f"id={r.id}", f"qtype={r.question_type}"]
            fields += [f"{k}={v}" for k, v in r.tensors.items()]
            lines.append("\t".join(["record"] + fields))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise IntegrityError(f"manifest {path} does not exist") from exc
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise FormatError(f"{path}: not an attrfuse manifest")
    if len(lines) < 2:
        raise FormatError(f"{path}: missing header line")
    head = _fields(lines[1].split("\t"), f"{path} header")
    for key in ("name", "split", "vocab", "container"):
        if key not in head:
            raise FormatError(f"{path}: header lacks {key}")
    if head["split"] not in SPLITS:
        raise FormatError(f"{path}: unknown split {head['split']!r}")

    metadata: dict[str, str] = {}
    records: list[RecordEntry] = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        kind, *parts = line.split("\t")
        f = _fields(parts, f"{path}:{lineno}")
        if kind == "meta":
            metadata.update(f)
        elif kind == "record":
            if "id" not in f or "qtype" not in f:
                raise FormatError(f"{path}:{lineno}: record needs id and qtype")
            rid, qtype = f.pop("id"), f.pop("qtype")
            records.append(RecordEntry(rid, qtype, f))
        else:
            raise FormatError(f"{path}:{lineno}: unknown line kind {kind!r}")

    qtypes = [q for q in head.get("qtypes", "").split(",") if q]
    if not qtypes:
        qtypes = sorted({r.question_type for r in records})
    manifest = DatasetManifest(
        name=head["name"],
        split=head["split"],
        vocabulary_path=path.parent / head["vocab"],
        container_path=path.parent / head["container"],
        records=records,
        question_type_set=qtypes,
        metadata=metadata,
    )
    manifest.validate()
    return manifest


def write_dataset(
    out_dir: str | os.PathLike,
    samples: Sequence[SampleRecord],
    vocab: AnswerVocabulary,
    name: str,
    split: str,
    question_type_set: Sequence[str] | None = None,
    metadata: Mapping[str, str] | None = None,
    dtype=np.float32,
) -> DatasetManifest:
    """Write ``<split>.manifest``, ``<split>.tc`` and ``vocab.txt`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab_path = out / "vocab.txt"
    vocab.save(vocab_path)
    tensors: dict[str, np.ndarray] = {}
    records = []
    for s in samples:
        s.validate(len(vocab))
        names = {
            "visual": s.visual_features, "question": s.question_features,
            "attributes": s.attribute_embeddings, "caption": s.caption_features,
            "targets": s.answer_targets,
        }
        names.update({f"knowledge.{k}": v for k, v in s.knowledge_features.items()})
        entry = {}
        for key, arr in names.items():
            tname = f"{s.id}/{key}"
            tensors[tname] = np.asarray(arr, dtype=dtype)
            entry[key] = tname
        records.append(RecordEntry(s.id, s.question_type, entry))
    container_path = out / f"{split}.tc"
    write_container(container_path, tensors)
    qtypes = list(question_type_set) if question_type_set else sorted(
        {s.question_type for s in samples})
    manifest = DatasetManifest(name, split, vocab_path, container_path, records, qtypes,
                               dict(metadata or {}))
    manifest.save(out / f"{split}.manifest")
    return load_manifest(out / f"{split}.manifest")


@dataclass
class FixtureConfig:
    n_samples: int = 64
    M: int = 6
    L: int = 8
    d_v: int = 32
    d_e: int = 32
    d_t: int = 32
    n_t: int = 4
    n_p: int = 3
    n_c: int = 2
    vocab_size: int = 10
    attribute_words: int = 24
    attribute_signal: bool = True
    knowledge_signal: bool = True
    knowledge_noise: float = 1.0
    seed: int = 0
    split: str = "train"
    name: str = "synthetic"
    question_types: tuple[str, ...] = ("object", "number", "color", "location")

    def validate(self) -> None:
        for key in ("n_samples", "M", "L", "d_v", "d_e", "d_t", "n_t", "n_p", "n_c"):
            if getattr(self, key) < 1:
                raise PreconditionError(f"fixture {key} must be >= 1")
        if self.attribute_words < 0:
            raise PreconditionError("fixture attribute_words must be >= 0")
        if self.vocab_size < 2:
            raise PreconditionError("fixture vocab_size must be >= 2")
        if self.split not in SPLITS:
            raise PreconditionError(f"unknown split {self.split!r}")


def hidden_answer_map(cfg: FixtureConfig) -> np.ndarray:
    """The fixture's secret linear map; depends on the seed only, never the split."""
    rng = np.random.default_rng([cfg.seed, 0])
    width = cfg.d_e if cfg.attribute_signal else cfg.d_v
    w = rng.standard_normal((width, cfg.vocab_size))
    return w / np.linalg.norm(w, axis=0, keepdims=True)


def attribute_word_table(cfg: FixtureConfig) -> np.ndarray | None:
    """Embedding table of the fixture's attribute words (shared by all splits)."""
    if cfg.attribute_words == 0:
        return None
    rng = np.random.default_rng([cfg.seed, 100])
    return rng.standard_normal((cfg.attribute_words, cfg.d_e))


def knowledge_projection(cfg: FixtureConfig) -> np.ndarray:
    """Fixed map from attribute-embedding space into the text-feature space."""
    rng = np.random.default_rng([cfg.seed, 200])
    return rng.standard_normal((cfg.d_e, cfg.d_t)) / np.sqrt(cfg.d_e)


def fixture_answer_index(features: np.ndarray, hidden_map: np.ndarray) -> int:
    """Label rule: argmax of the hidden map applied to the row mean."""
    return int(np.argmax(features.mean(axis=0) @ hidden_map))


def synthetic_samples(cfg: FixtureConfig) -> tuple[list[SampleRecord], AnswerVocabulary]:
    cfg.validate()
    w = hidden_answer_map(cfg)
    words = attribute_word_table(cfg)
    to_text = knowledge_projection(cfg)
    rng = np.random.default_rng([cfg.seed, 1 + SPLITS.index(cfg.split)])
    vocab = AnswerVocabulary(f"answer_{i:02d}" for i in range(cfg.vocab_size))
    samples = []
    for i in range(cfg.n_samples):
        visual = rng.standard_normal((cfg.M, cfg.d_v))
        if words is None:
            attrs = rng.standard_normal((cfg.L, cfg.d_e))
        else:
            attrs = words[rng.integers(cfg.attribute_words, size=cfg.L)]
        question = rng.standard_normal((cfg.n_t, cfg.d_t))
        caption = rng.standard_normal((cfg.n_c, cfg.d_t))
        knowledge = cfg.knowledge_noise * rng.standard_normal((cfg.n_p, cfg.d_t))
        if cfg.knowledge_signal:
            # each knowledge token paraphrases one of the image's attribute words
            picks = rng.integers(cfg.L, size=cfg.n_p)
            knowledge = knowledge + attrs[picks] @ to_text
        qtype = cfg.question_types[int(rng.integers(len(cfg.question_types)))]
        source = attrs if cfg.attribute_signal else visual
        answer = fixture_answer_index(source, w)
        targets = encode_answer_targets([(vocab[answer], 1.0)], vocab)
        samples.append(SampleRecord(
            id=f"{cfg.split}{i:05d}",
            visual_features=visual,
            question_features=question,
            attribute_embeddings=attrs,
            caption_features=caption,
            knowledge_features={"synthetic": knowledge},
            answer_targets=targets,
            question_type=qtype,
        ))
    return samples, vocab


def generate_synthetic_fixture(cfg: FixtureConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    samples, vocab = synthetic_samples(cfg)
    meta = {"generator": "synthetic", "seed": str(cfg.seed),
            "attribute_signal": str(cfg.attribute_signal).lower()}
    return write_dataset(out_dir, samples, vocab, cfg.name, cfg.split,
                         question_type_set=cfg.question_types, metadata=meta)
