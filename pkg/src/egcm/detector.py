"""Zero-shot error detection with a small masked language model.

For a sentence of n tokens we build n copies, copy r having position r
replaced by MASK, and run them through the MLM in one batch.  A token whose
original id is not among the top-k predictions for its own position is
flagged as probably wrong.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import MASK_ID, PAD_ID, ConfigError, SentencePair, TokenSeq, file_digest
from .model import (
    InputError,
    ParamStore,
    assign_params,
    embed,
    encoder_layer,
    is_decayed,
    ln,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import Tensor
from .optim import Adam, warmup_linear

log = logging.getLogger(__name__)


class StaleCacheError(RuntimeError):
    pass


@dataclass
class MlmConfig:
    vocab_size: int
    d_model: int = 64
    d_ff: int = 256
    heads: int = 4
    layers: int = 2
    max_len: int = 64
    dropout: float = 0.1


@dataclass
class MlmTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-3
    mask_prob: float = 0.15
    weight_decay: float = 0.01
    warmup: float = 0.1
    seed: int = 0


class MlmModel:
    MAGIC = b"EGMM"

    def __init__(self, cfg: MlmConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        p = self.params = ParamStore(np.random.default_rng(seed), dtype)
        p.normal("tok_emb", (cfg.vocab_size, cfg.d_model))
        p.normal("pos_emb", (cfg.max_len, cfg.d_model))
        p.layer_norm("emb_ln", cfg.d_model)
        for i in range(cfg.layers):
            p.encoder_layer(f"enc.{i}", cfg.d_model, cfg.d_ff)
        p.layer_norm("enc.final_ln", cfg.d_model)
        p.const("out.b", (cfg.vocab_size,), 0.0)
        self.dropout_rng: np.random.Generator | None = None

    def logits(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[1] > self.cfg.max_len:
            raise InputError(f"sequence length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        drop = self.cfg.dropout if self.dropout_rng is not None else 0.0
        keep = ids != PAD_ID
        h = embed(self.params, ids, drop, self.dropout_rng)
        for i in range(self.cfg.layers):
            h = encoder_layer(self.params, f"enc.{i}", h, keep, self.cfg.heads, drop, self.dropout_rng)
        h = ln(self.params, "enc.final_ln", h)
        tied = nx.transpose(self.params["tok_emb"], (1, 0))
        return nx.matmul(h, tied) + self.params["out.b"]

    def probs(self, ids: np.ndarray) -> np.ndarray:
        return nx.softmax_rows(self.logits(ids)).data

    def save(self, path) -> None:
        save_checkpoint(path, self.MAGIC, asdict(self.cfg), self.params)

    @classmethod
    def load(cls, path) -> "MlmModel":
        cfg, tensors = load_checkpoint(path, cls.MAGIC)
        model = cls(MlmConfig(**cfg))
        assign_params(model.params, tensors)
        return model


def pad_batch(seqs: Sequence[Sequence[int]], width: int | None = None) -> np.ndarray:
    width = width or max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def length_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator | None):
    """Group indices of similar length; shuffled batch order when ``rng`` given."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    if rng is not None:
        # jitter inside length buckets so batches differ between epochs
        order = np.lexsort((rng.random(len(order)), np.asarray(lengths)))
    batches = [order[i: i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def mask_for_mlm(batch: np.ndarray, prob: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    real = batch != PAD_ID
    chosen = (rng.random(batch.shape) < prob) & real
    # at least one target per sentence
    for r in np.flatnonzero(~chosen.any(axis=1)):
        cols = np.flatnonzero(real[r])
        chosen[r, rng.choice(cols)] = True
    masked = np.where(chosen, MASK_ID, batch)
    return masked, chosen


def _mlm_loss(model: MlmModel, masked: np.ndarray, targets: np.ndarray, chosen: np.ndarray) -> Tensor:
    lp = nx.log_softmax(model.logits(masked))
    rows = np.flatnonzero(chosen.reshape(-1))
    picked = nx.gather_last(nx.select_rows(lp, rows), targets.reshape(-1)[rows][:, None])
    return nx.mean(picked) * -1.0


def masked_accuracy(model: MlmModel, sentences: Sequence[TokenSeq], rng: np.random.Generator,
                    prob: float = 0.15, batch_size: int = 64) -> float:
    hits = total = 0
    for idx in length_batches([len(s) for s in sentences], batch_size, None):
        batch = pad_batch([sentences[i] for i in idx])
        masked, chosen = mask_for_mlm(batch, prob, rng)
        pred = model.probs(masked).argmax(axis=-1)
        hits += int((pred[chosen] == batch[chosen]).sum())
        total += int(chosen.sum())
    return hits / max(total, 1)


def train_mlm(sentences: Sequence[TokenSeq], vocab_size: int, cfg: MlmTrainConfig | None = None,
              model_cfg: MlmConfig | None = None, dev: Sequence[TokenSeq] | None = None) -> tuple[MlmModel, list[dict]]:
    """Train on clean sentences with random masking; loss on masked slots only."""
    cfg = cfg or MlmTrainConfig()
    if not sentences:
        raise ConfigError("cannot train the MLM on an empty corpus")
    model_cfg = model_cfg or MlmConfig(vocab_size=vocab_size)
    rng = np.random.default_rng(cfg.seed)
    model = MlmModel(model_cfg, seed=cfg.seed)
    steps_per_epoch = -(-len(sentences) // cfg.batch_size)
    opt = Adam(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay, decay_filter=is_decayed,
               schedule=warmup_linear(steps_per_epoch * cfg.epochs, cfg.warmup))
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.dropout_rng = rng
        losses = []
        for idx in length_batches([len(s) for s in sentences], cfg.batch_size, rng):
            batch = pad_batch([sentences[i] for i in idx])
            masked, chosen = mask_for_mlm(batch, cfg.mask_prob, rng)
            with nx.recording() as tape:
                loss = _mlm_loss(model, masked, batch, chosen)
            opt.zero_grad()
            nx.backward(loss, tape)
            opt.step()
            losses.append(loss.item())
        model.dropout_rng = None
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.current_lr}
        if dev:
            rec["dev_masked_acc"] = masked_accuracy(model, dev, np.random.default_rng(cfg.seed + 1))
        log.info("mlm %s", rec)
        history.append(rec)
    return model, history


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


@dataclass
class DetectionOutcome:
    flags: np.ndarray
    tokens: TokenSeq
    candidates: np.ndarray | None = None
    candidate_probs: np.ndarray | None = None

    @property
    def gam_row(self) -> np.ndarray:
        return np.where(self.flags, 0, 1).astype(np.int64)

    @property
    def gfi(self) -> TokenSeq:
        return tuple(MASK_ID if f else t for t, f in zip(self.tokens, self.flags))

    @property
    def flagged(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.flags))

    def __eq__(self, other) -> bool:
        return (isinstance(other, DetectionOutcome) and self.tokens == other.tokens
                and np.array_equal(self.flags, other.flags))


def in_top_k(probs: np.ndarray, token: int, k: int) -> bool:
    """Top-k containment with ties at rank k going to the lower token id."""
    p = probs[token]
    rank = int((probs > p).sum()) + int((probs[:token] == p).sum())
    return rank < k


def top_k(probs: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def _expanded_rows(x: Sequence[int]) -> np.ndarray:
    n = len(x)
    rows = np.tile(np.asarray(x, dtype=np.int64), (n, 1))
    rows[np.arange(n), np.arange(n)] = MASK_ID
    return rows


def _outcome_from_probs(x: TokenSeq, diag: np.ndarray, k: int) -> DetectionOutcome:
    """``diag[j]`` is the MLM distribution at position j with j masked."""
    xs = np.asarray(x, dtype=np.int64)
    own = diag[np.arange(len(xs)), xs]
    above = (diag > own[:, None]).sum(axis=1)
    ties_lower = ((diag == own[:, None]) & (np.arange(diag.shape[1])[None, :] < xs[:, None])).sum(axis=1)
    flags = (above + ties_lower) >= k
    cand = top_k(diag, k)
    return DetectionOutcome(flags=flags, tokens=tuple(x), candidates=cand,
                            candidate_probs=np.take_along_axis(diag, cand, axis=1))


class Detector:
    """Runs the n-copies expansion; counts the masked rows it pushes through the MLM."""

    def __init__(self, mlm: MlmModel, k: int = 2, rows_per_batch: int = 512):
        if not 1 <= k <= mlm.cfg.vocab_size:
            raise ValueError(f"k must lie in [1, {mlm.cfg.vocab_size}], got {k}")
        self.mlm, self.k, self.rows_per_batch = mlm, k, rows_per_batch
        self.rows_run = 0

    def detect(self, x: Sequence[int]) -> DetectionOutcome:
        return self.detect_many([x])[0]

    def detect_many(self, sentences: Sequence[Sequence[int]]) -> list[DetectionOutcome]:
        for s in sentences:
            if len(s) == 0:
                raise InputError("cannot run detection on an empty sentence")
            if len(s) > self.mlm.cfg.max_len:
                raise InputError(f"sentence length {len(s)} exceeds MLM max_len {self.mlm.cfg.max_len}")
        results: list[DetectionOutcome | None] = [None] * len(sentences)
        order = np.argsort([len(s) for s in sentences], kind="stable")
        i = 0
        while i < len(order):
            group, rows = [], 0
            while i < len(order) and (not group or rows + len(sentences[order[i]]) <= self.rows_per_batch):
                group.append(order[i])
                rows += len(sentences[order[i]])
                i += 1
            width = max(len(sentences[g]) for g in group)
            batch = np.concatenate([pad_to(_expanded_rows(sentences[g]), width) for g in group])
            probs = self.mlm.probs(batch)
            self.rows_run += batch.shape[0]
            off = 0
            for g in group:
                n = len(sentences[g])
                diag = probs[off + np.arange(n), np.arange(n)]
                results[g] = _outcome_from_probs(tuple(sentences[g]), diag, self.k)
                off += n
        return results  # type: ignore[return-value]


def pad_to(rows: np.ndarray, width: int) -> np.ndarray:
    if rows.shape[1] == width:
        return rows
    out = np.full((rows.shape[0], width), PAD_ID, dtype=np.int64)
    out[:, : rows.shape[1]] = rows
    return out


def detect(x: Sequence[int], mlm: MlmModel, k: int = 2) -> DetectionOutcome:
    return Detector(mlm, k).detect(x)


def gold_outcome(pair: SentencePair) -> DetectionOutcome:
    """Oracle guidance: flags exactly where source and target differ."""
    flags = np.array([a != b for a, b in zip(pair.src, pair.tgt)], dtype=bool)
    return DetectionOutcome(flags=flags, tokens=tuple(pair.src))


# ---------------------------------------------------------------------------
# sidecar cache: b"EGDT", u32 version, u32 k, 32-byte sha256 of the corpus
# file, u32 sentence count, then per sentence u32 length + packed flag bits
# ---------------------------------------------------------------------------

DET_MAGIC = b"EGDT"
DET_VERSION = 1


def cache_path(corpus_path) -> Path:
    return Path(str(corpus_path) + ".det")


def write_cache(path, outcomes: Sequence[DetectionOutcome], k: int, digest: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(DET_MAGIC)
        fh.write(struct.pack("<II", DET_VERSION, k))
        fh.write(digest)
        fh.write(struct.pack("<I", len(outcomes)))
        for o in outcomes:
            fh.write(struct.pack("<I", len(o.flags)))
            fh.write(np.packbits(o.flags.astype(np.uint8)).tobytes())


def read_cache(path, sources: Sequence[TokenSeq], digest: bytes | None = None,
               k: int | None = None) -> tuple[int, list[DetectionOutcome]]:
    data = Path(path).read_bytes()
    if data[:4] != DET_MAGIC:
        raise StaleCacheError(f"{path}: not a detection cache")
    version, cached_k = struct.unpack_from("<II", data, 4)
    if version != DET_VERSION:
        raise StaleCacheError(f"{path}: unsupported cache version {version}")
    cached_digest = data[12:44]
    if digest is not None and cached_digest != digest:
        raise StaleCacheError(f"{path}: corpus hash mismatch, rerun `egcm detect`")
    if k is not None and cached_k != k:
        raise StaleCacheError(f"{path}: cache built with k={cached_k}, requested k={k}")
    (count,) = struct.unpack_from("<I", data, 44)
    if count != len(sources):
        raise StaleCacheError(f"{path}: cache holds {count} sentences, corpus has {len(sources)}")
    off, out = 48, []
    for src in sources:
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        nbytes = (n + 7) // 8
        if n != len(src):
            raise StaleCacheError(f"{path}: sentence length mismatch ({n} vs {len(src)})")
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off))[:n].astype(bool)
        off += nbytes
        out.append(DetectionOutcome(flags=bits, tokens=tuple(src)))
    return cached_k, out


def detect_batch(corpus_path, pairs: Sequence[SentencePair], mlm: MlmModel, k: int = 2,
                 refresh: bool = False) -> list[DetectionOutcome]:
    """Detect on every source sentence, reusing ``<corpus>.det`` when it is current."""
    digest = file_digest(corpus_path)
    path = cache_path(corpus_path)
    sources = [p.src for p in pairs]
    if path.exists() and not refresh:
        try:
            _, outcomes = read_cache(path, sources, digest=digest, k=k)
            return outcomes
        except StaleCacheError as exc:
            log.info("recomputing detection: %s", exc)
    outcomes = Detector(mlm, k).detect_many(sources)
    write_cache(path, outcomes, k, digest)
    return outcomes


def load_detection(corpus_path, pairs: Sequence[SentencePair], k: int | None = None) -> list[DetectionOutcome]:
    """Strict cache read for training and correction; never recomputes."""
    path = cache_path(corpus_path)
    if not path.exists():
        raise FileNotFoundError(f"no detection cache at {path}; run `egcm detect` on {corpus_path} first")
    _, outcomes = read_cache(path, [p.src for p in pairs], digest=file_digest(corpus_path), k=k)
    return outcomes
