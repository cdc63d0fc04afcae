"""Synthetic spelling-correction corpus, vocabulary and confusion set.

Clean sentences come from a seeded order-2 transition table. Each token ``b``
owns a small successor list; the token before ``b`` decides how the
successor probabilities are arranged.  Corruption swaps a token for a
random member of its confusion cluster.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PAD, MASK, UNK = "[PAD]", "[MASK]", "[UNK]"
PAD_ID, MASK_ID, UNK_ID = 0, 1, 2
RESERVED = (PAD, MASK, UNK)

TokenSeq = tuple[int, ...]


class ConfigError(ValueError):
    pass


class CorpusFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            raise CorpusFormatError(f"first three vocab entries must be {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise CorpusFormatError("duplicate vocab entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def content_ids(self) -> range:
        return range(len(RESERVED), len(self.tokens))

    def encode(self, tokens: Iterable[str]) -> TokenSeq:
        return tuple(self.index.get(t, UNK_ID) for t in tokens)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])


class ConfusionSet:
    """token id -> ids of tokens easily misused in its place."""

    def __init__(self, neighbors: Mapping[int, Iterable[int]] | None = None):
        self.neighbors: dict[int, frozenset[int]] = {}
        for tok, ns in (neighbors or {}).items():
            ns = frozenset(int(n) for n in ns)
            if tok in ns:
                raise ValueError(f"token {tok} listed in its own confusion set")
            if any(n < len(RESERVED) for n in ns) or tok < len(RESERVED):
                raise ValueError("reserved ids cannot take part in confusion sets")
            if ns:
                self.neighbors[int(tok)] = ns

    def __getitem__(self, tok: int) -> frozenset[int]:
        return self.neighbors.get(tok, frozenset())

    def __len__(self) -> int:
        return len(self.neighbors)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionSet) and self.neighbors == other.neighbors

    def padded(self, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
        """(ids, valid) arrays of shape (vocab_size, max_set) for vectorised losses."""
        width = max((len(v) for v in self.neighbors.values()), default=0)
        ids = np.zeros((vocab_size, max(width, 1)), dtype=np.int64)
        valid = np.zeros((vocab_size, max(width, 1)), dtype=bool)
        for tok, ns in self.neighbors.items():
            members = sorted(ns)
            ids[tok, : len(members)] = members
            valid[tok, : len(members)] = True
        return ids, valid

    def save(self, path, vocab: Vocab) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in sorted(self.neighbors):
                names = " ".join(vocab.tokens[n] for n in sorted(self.neighbors[tok]))
                fh.write(f"{vocab.tokens[tok]}: {names}\n")


@dataclass(frozen=True)
class SentencePair:
    src: TokenSeq
    tgt: TokenSeq

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise ValueError(f"src/tgt length mismatch: {len(self.src)} vs {len(self.tgt)}")

    def __len__(self) -> int:
        return len(self.src)

    @property
    def error_positions(self) -> tuple[int, ...]:
        return tuple(i for i, (a, b) in enumerate(zip(self.src, self.tgt)) if a != b)


@dataclass
class CorpusGenConfig:
    vocab_size: int = 200
    cluster_size: int = 4
    sentence_count: int = 10000
    min_len: int = 8
    max_len: int = 40
    corruption_rate: float = 0.1
    successors: int = 3
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 2 or self.cluster_size < 2:
            raise ConfigError("vocab_size and cluster_size must be at least 2")
        if self.vocab_size % self.cluster_size:
            raise ConfigError(f"vocab_size {self.vocab_size} not divisible by cluster_size {self.cluster_size}")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigError(f"corruption_rate must lie in [0, 1], got {self.corruption_rate}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.sentence_count < 1:
            raise ConfigError("sentence_count must be positive")
        if not 1 <= self.successors <= self.vocab_size:
            raise ConfigError("successors must lie in [1, vocab_size]")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError("split must be three nonnegative fractions summing to 1")


@dataclass
class GeneratedCorpus:
    vocab: Vocab
    confusion: ConfusionSet
    splits: dict[str, list[SentencePair]]
    audit: dict[str, list[tuple[int, ...]]] = field(default_factory=dict)


class TransitionTable:
    """Order-2 language: P(w | a, b) supported on ``succ[b]`` with weights
    rotated by ``a`` so the previous-but-one token matters."""

    def __init__(self, succ: np.ndarray, weights: np.ndarray):
        self.succ = succ
        self.weights = weights

    def probs(self, a: int, b: int) -> np.ndarray:
        return np.roll(self.weights, a % len(self.weights))

    @classmethod
    def random(cls, content: np.ndarray, vocab_total: int, width: int, rng: np.random.Generator):
        succ = np.zeros((vocab_total, width), dtype=np.int64)
        for b in content:
            succ[b] = rng.choice(content, size=width, replace=False)
        raw = np.array([2.0 ** -i for i in range(width)])
        return cls(succ, raw / raw.sum())


def _sample_sentence(table: TransitionTable, content: np.ndarray, n: int, rng) -> list[int]:
    out = [int(rng.choice(content))]
    if n > 1:
        out.append(int(table.succ[out[0]][rng.choice(len(table.weights), p=table.weights)]))
    while len(out) < n:
        a, b = out[-2], out[-1]
        out.append(int(table.succ[b][rng.choice(len(table.weights), p=table.probs(a, b))]))
    return out


def generate_corpus(cfg: CorpusGenConfig) -> GeneratedCorpus:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    vocab = Vocab(list(RESERVED) + [f"w{i:03d}" for i in range(cfg.vocab_size)])
    content = np.arange(len(RESERVED), len(vocab))

    order = rng.permutation(content)
    clusters = order.reshape(-1, cfg.cluster_size)
    confusion = ConfusionSet({int(t): [int(u) for u in cl if u != t] for cl in clusters for t in cl})
    conf_lists = {t: np.array(sorted(ns)) for t, ns in confusion.neighbors.items()}

    table = TransitionTable.random(content, len(vocab), cfg.successors, rng)

    pairs, audit = [], []
    for _ in range(cfg.sentence_count):
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        tgt = _sample_sentence(table, content, n, rng)
        flips = rng.random(n) < cfg.corruption_rate
        src = list(tgt)
        for i in np.flatnonzero(flips):
            src[i] = int(rng.choice(conf_lists[tgt[i]]))
        pairs.append(SentencePair(tuple(src), tuple(tgt)))
        audit.append(tuple(int(i) for i in np.flatnonzero(flips)))

    n_train = int(round(cfg.split[0] * cfg.sentence_count))
    n_dev = int(round(cfg.split[1] * cfg.sentence_count))
    bounds = {"train": (0, n_train), "dev": (n_train, n_train + n_dev), "test": (n_train + n_dev, cfg.sentence_count)}
    splits = {k: pairs[a:b] for k, (a, b) in bounds.items()}
    audits = {k: audit[a:b] for k, (a, b) in bounds.items()}
    return GeneratedCorpus(vocab, confusion, splits, audits)


def write_corpus(corpus: GeneratedCorpus, out_dir, cfg: CorpusGenConfig | None = None) -> dict[str, Path]:
    """Write vocab.txt, confusion.txt, <split>.jsonl and <split>.audit.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"vocab": out / "vocab.txt", "confusion": out / "confusion.txt"}
    corpus.vocab.save(paths["vocab"])
    corpus.confusion.save(paths["confusion"], corpus.vocab)
    for name, pairs in corpus.splits.items():
        paths[name] = out / f"{name}.jsonl"
        write_pairs(pairs, corpus.vocab, paths[name])
        audit_path = out / f"{name}.audit.json"
        audit_path.write_text(json.dumps([list(a) for a in corpus.audit.get(name, [])]), encoding="utf-8")
        paths[f"{name}_audit"] = audit_path
    if cfg is not None:
        paths["gen_config"] = out / "gen_config.json"
        paths["gen_config"].write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True), encoding="utf-8")
    return paths


def write_pairs(pairs: Iterable[SentencePair], vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            rec = {"src": vocab.decode(p.src), "tgt": vocab.decode(p.tgt)}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_audit(path) -> list[tuple[int, ...]]:
    return [tuple(a) for a in json.loads(Path(path).read_text(encoding="utf-8"))]


def load_corpus(path, vocab: Vocab) -> tuple[list[SentencePair], list[tuple[int, str]]]:
    """Read a JSONL corpus.

    Returns the accepted pairs and a list of ``(record_index, reason)`` for
    records rejected because src and tgt lengths differ.
    """
    pairs, rejected = [], []
    with open(path, encoding="utf-8") as fh:
        for idx, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                src, tgt = rec["src"], rec["tgt"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"malformed record: {exc}", line=idx + 1) from None
            if not isinstance(src, list) or not isinstance(tgt, list):
                raise CorpusFormatError("src and tgt must be token lists", line=idx + 1)
            if len(src) != len(tgt):
                rejected.append((idx, f"length mismatch {len(src)} != {len(tgt)}"))
                continue
            pairs.append(SentencePair(vocab.encode(src), vocab.encode(tgt)))
    return pairs, rejected


def load_confusion_set(path, vocab: Vocab) -> tuple[ConfusionSet, list[tuple[int, str]]]:
    """Parse ``<token>: <neighbor> <neighbor> ...`` lines.

    Unknown tokens are skipped and reported as ``(line_number, token)``.
    Symmetry is not enforced.
    """
    neighbors: dict[int, set[int]] = {}
    skipped: list[tuple[int, str]] = []
    reserved = set(range(len(RESERVED)))
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            head, sep, tail = line.partition(":")
            head = head.strip()
            if not sep or not head or " " in head:
                raise CorpusFormatError(f"expected '<token>: <neighbors...>', got {line!r}", line=lineno)
            tok = vocab.index.get(head)
            if tok is None or tok in reserved:
                skipped.append((lineno, head))
                continue
            for name in tail.split():
                n = vocab.index.get(name)
                if n is None or n in reserved or n == tok:
                    skipped.append((lineno, name))
                    continue
                neighbors.setdefault(tok, set()).add(n)
    return ConfusionSet(neighbors), skipped


def file_digest(path) -> bytes:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.digest()


def corpus_paths(data_dir) -> dict[str, str]:
    d = os.fspath(data_dir)
    return {
        "vocab": os.path.join(d, "vocab.txt"),
        "confusion": os.path.join(d, "confusion.txt"),
        **{s: os.path.join(d, f"{s}.jsonl") for s in ("train", "dev", "test")},
        **{f"{s}_audit": os.path.join(d, f"{s}.audit.json") for s in ("train", "dev", "test")},
    }
