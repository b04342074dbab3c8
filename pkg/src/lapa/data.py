"""Deterministic synthetic Med-VQA data and the JSONL dataset format.

Each image shows one organ, coded by the quadrant and shape of a blob, and one
disease, coded by the blob's intensity and texture.  Questions ask for one of
the two attributes (open) or confirm one (closed, yes/no), so answers follow
from the image alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .knowledge import KnowledgeGraph, build_graph

ORGAN_NAMES = ["liver", "lung", "heart", "kidney", "brain", "spleen", "colon", "bladder"]
DISEASE_NAMES = [
    "tumor", "cyst", "edema", "nodule", "fibrosis", "effusion", "abscess", "hemorrhage",
    "atrophy", "stenosis", "infarct", "polyp", "calculus", "lesion", "mass", "scarring",
]
OPEN_TEMPLATES = {"organ": "what organ is shown", "disease": "what disease is present"}
CLOSED_TEMPLATES = {"organ": "is the organ {}", "disease": "is the disease {}"}
QTYPES = ("open", "closed")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Raised for invalid specs or malformed dataset files."""


@dataclass
class QASample:
    image: np.ndarray
    question: str
    answer: str
    qtype: str

    def to_record(self) -> dict:
        return {
            "image": np.round(self.image, 6).tolist(),
            "question": self.question,
            "answer": self.answer,
            "qtype": self.qtype,
        }

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, QASample)
            and self.question == other.question
            and self.answer == other.answer
            and self.qtype == other.qtype
            and np.array_equal(self.image, other.image)
        )


@dataclass
class SyntheticSpec:
    n_train: int = 512
    n_val: int = 128
    n_test: int = 128
    organs: int = 4
    diseases: int = 8
    seed: int = 7
    image_size: int = 32
    noise: float = 0.0

    def validate(self) -> None:
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be at least 1")
        if not 1 <= self.organs <= 26 or not 1 <= self.diseases <= 26:
            raise DataError("organ and disease counts must lie in [1, 26]")
        if self.diseases < self.organs:
            raise DataError(
                f"{self.diseases} diseases cannot give each of {self.organs} organs an adjacent disease"
            )
        if self.image_size < 8 or self.image_size % 4:
            raise DataError("image_size must be a multiple of 4 and at least 8")
        if not 0.0 <= self.noise <= 0.2:
            raise DataError(f"noise level {self.noise} outside [0, 0.2]")


@dataclass
class SyntheticData:
    train: list[QASample]
    val: list[QASample]
    test: list[QASample]
    vocab: list[str]
    graph: KnowledgeGraph

    def split(self, name: str) -> list[QASample]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _names(base: list[str], n: int, prefix: str) -> list[str]:
    if n <= len(base):
        return base[:n]
    return base + [f"{prefix}{chr(ord('a') + i)}" for i in range(n - len(base))]


def synthetic_graph(organs: int, diseases: int) -> KnowledgeGraph:
    """Disease j touches organ j mod O; the first D//2 diseases also touch organ (j+1) mod O."""
    organ_names = _names(ORGAN_NAMES, organs, "organ")
    disease_names = _names(DISEASE_NAMES, diseases, "disease")
    edges = []
    for j in range(diseases):
        edges.append([j % organs, organs + j])
        if organs > 1 and j < diseases // 2:
            edges.append([(j + 1) % organs, organs + j])
    return build_graph(organ_names + disease_names, ["organ"] * organs + ["disease"] * diseases, edges)


def answer_vocabulary(graph: KnowledgeGraph) -> list[str]:
    return ["yes", "no"] + list(graph.names)


def render(organ: int, disease: int, size: int, jitter: tuple[int, int, float], noise: float, rng) -> np.ndarray:
    """Draw one image; `jitter` = (dy, dx, background) is the per-sample nuisance."""
    dy, dx, background = jitter
    img = np.full((size, size), background)
    half = size // 2
    # organ: quadrant (cycled) plus shape
    q = organ % 4
    cy = (q // 2) * half + half // 2 + dy
    cx = (q % 2) * half + half // 2 + dx
    r = max(2, size // 8 + (organ // 4) % 2)
    yy, xx = np.mgrid[0:size, 0:size]
    shape = (organ // 4) % 2
    if shape == 0:
        region = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    else:
        region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # disease: intensity level and stripe texture
    level = 0.45 + 0.55 * ((disease % 4) + 1) / 4
    if (disease // 4) % 2:
        texture = np.where(yy % 2 == 0, 1.0, 0.55)
    else:
        texture = np.ones_like(img)
    if disease >= 8:
        texture = texture * np.where(xx % 2 == 0, 1.0, 0.8)
    img = np.where(region, level * texture, img)
    if noise:
        img = img + rng.normal(0.0, noise, size=img.shape)
    # rounded so images survive the 6-decimal JSON records unchanged
    return np.round(np.clip(img, 0.0, 1.0), 6)


def _sample(organ_names, disease_names, pairs, spec, rng, used, closed_counter):
    while True:
        o, s = pairs[rng.integers(len(pairs))]
        jitter = (int(rng.integers(-1, 2)), int(rng.integers(-1, 2)), round(float(rng.uniform(0.0, 0.1)), 6))
        key = (o, s) + jitter
        if key not in used:
            used.add(key)
            break
    image = render(o, s, spec.image_size, jitter, spec.noise, rng)
    attribute = "organ" if rng.random() < 0.5 else "disease"
    truth = organ_names[o] if attribute == "organ" else disease_names[s]
    if rng.random() < 0.5:
        return QASample(image, OPEN_TEMPLATES[attribute], truth, "open")
    pool = organ_names if attribute == "organ" else disease_names
    yes = closed_counter[0] % 2 == 0
    closed_counter[0] += 1
    if yes or len(pool) == 1:
        named, answer = truth, "yes"
    else:
        others = [n for n in pool if n != truth]
        named, answer = others[rng.integers(len(others))], "no"
    return QASample(image, CLOSED_TEMPLATES[attribute].format(named), answer, "closed")


def generate(spec: SyntheticSpec) -> SyntheticData:
    """Build train/val/test splits, answer vocabulary and knowledge graph from `spec`."""
    spec.validate()
    graph = synthetic_graph(spec.organs, spec.diseases)
    organ_names = graph.names[: spec.organs]
    disease_names = graph.names[spec.organs :]
    adj = graph.adjacency
    pairs = [(o, s) for o in range(spec.organs) for s in range(spec.diseases) if adj[o, spec.organs + s]]
    rng = np.random.default_rng(spec.seed)
    used: set = set()
    counter = [0]
    splits = []
    for n in (spec.n_train, spec.n_val, spec.n_test):
        splits.append([_sample(organ_names, disease_names, pairs, spec, rng, used, counter) for _ in range(n)])
    return SyntheticData(*splits, answer_vocabulary(graph), graph)


# ---------------------------------------------------------------------------
# files


def write_samples(samples: Sequence[QASample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def write_dataset(data: SyntheticData, out_dir, spec: SyntheticSpec | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_samples(data.split(name), out / f"{name}.jsonl")
    (out / "vocab.json").write_text(json.dumps(data.vocab) + "\n", encoding="utf-8")
    data.graph.save(out / "graph.json")
    if spec is not None:
        (out / "spec.json").write_text(json.dumps(asdict(spec), indent=1) + "\n", encoding="utf-8")
    return out


def load_vocab(path) -> list[str]:
    try:
        vocab = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
    if not isinstance(vocab, list) or not vocab or not all(isinstance(v, str) for v in vocab):
        raise DataError(f"{path}: vocabulary must be a non-empty JSON array of strings")
    if len(set(vocab)) != len(vocab):
        raise DataError(f"{path}: duplicate answers in vocabulary")
    return vocab


def parse_record(obj, vocab: set[str], where: str) -> QASample:
    if not isinstance(obj, dict):
        raise DataError(f"{where}: record is not an object")
    missing = {"image", "question", "answer", "qtype"} - obj.keys()
    if missing:
        raise DataError(f"{where}: missing fields {sorted(missing)}")
    qtype = obj["qtype"]
    if qtype not in QTYPES:
        raise DataError(f"{where}: qtype {qtype!r} must be 'open' or 'closed'")
    answer = obj["answer"]
    if answer not in vocab:
        raise DataError(f"{where}: answer {answer!r} not in vocabulary")
    if qtype == "closed" and answer not in ("yes", "no"):
        raise DataError(f"{where}: closed question with answer {answer!r}")
    if not isinstance(obj["question"], str) or not obj["question"].split():
        raise DataError(f"{where}: empty question")
    try:
        image = np.asarray(obj["image"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: image is not a numeric grid") from exc
    if image.ndim != 2 or not np.all((image >= 0) & (image <= 1)):
        raise DataError(f"{where}: image must be a 2-D grid of intensities in [0, 1]")
    return QASample(image, obj["question"], answer, qtype)


def load(path, vocab: Sequence[str] | None = None) -> tuple[list[QASample], list[str]]:
    """Read a JSONL split; `vocab` defaults to ``vocab.json`` beside the file."""
    path = Path(path)
    vocab = list(vocab) if vocab is not None else load_vocab(path.parent / "vocab.json")
    known = set(vocab)
    samples = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
        samples.append(parse_record(obj, known, f"{path}:{lineno}"))
    if not samples:
        raise DataError(f"{path}: no samples")
    return samples, vocab


def load_dataset(data_dir) -> dict:
    """All splits, vocabulary and graph from a directory written by :func:`write_dataset`."""
    from .knowledge import load_knowledge_graph

    d = Path(data_dir)
    vocab = load_vocab(d / "vocab.json")
    out = {"vocab": vocab, "graph": load_knowledge_graph(d / "graph.json")}
    for name in SPLITS:
        if (d / f"{name}.jsonl").exists():
            out[name] = load(d / f"{name}.jsonl", vocab)[0]
    if "train" not in out:
        raise DataError(f"{d}: train.jsonl missing")
    return out
