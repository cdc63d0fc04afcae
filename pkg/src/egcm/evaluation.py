"""Sentence-level detection/correction metrics, detector coverage, timing."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import SentencePair
from .decoding import autoregressive_decode, mask_predict
from .detector import DetectionOutcome


@dataclass(frozen=True)
class EvalItem:
    x: tuple[int, ...]
    y: tuple[int, ...]
    z: tuple[int, ...]

    def __post_init__(self):
        if not len(self.x) == len(self.y) == len(self.z):
            raise ValueError("source, gold and prediction lengths differ")


@dataclass
class LevelScores:
    acc: float
    pre: float
    rec: float
    f1: float
    tp: int
    fp: int
    fn: int


@dataclass
class MetricsReport:
    detection: LevelScores
    correction: LevelScores
    sentences: int

    def to_dict(self) -> dict:
        return asdict(self)


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _diff(a: Sequence[int], b: Sequence[int]) -> frozenset[int]:
    return frozenset(i for i, (u, v) in enumerate(zip(a, b)) if u != v)


def sentence_metrics(items: Iterable[EvalItem]) -> MetricsReport:
    """A sentence counts as detected when its edited-position set equals the
    gold error set, and as corrected when the whole output equals the gold.
    Precision is over sentences with any edit, recall over sentences with
    any gold error; 0/0 is reported as 0."""
    items = list(items)
    if not items:
        raise ValueError("sentence_metrics needs at least one item")
    n = len(items)
    pred_pos = gold_pos = 0
    det_tp = cor_tp = det_hit = cor_hit = 0
    for it in items:
        d_pred, d_gold = _diff(it.z, it.x), _diff(it.y, it.x)
        pred_pos += bool(d_pred)
        gold_pos += bool(d_gold)
        same = d_pred == d_gold
        fixed = it.z == it.y
        det_hit += same
        cor_hit += fixed
        if d_pred and same:
            det_tp += 1
        if d_pred and fixed:
            cor_tp += 1

    def level(tp: int, hits: int) -> LevelScores:
        p = tp / pred_pos if pred_pos else 0.0
        r = tp / gold_pos if gold_pos else 0.0
        return LevelScores(hits / n, p, r, _f1(p, r), tp, pred_pos - tp, gold_pos - tp)

    return MetricsReport(level(det_tp, det_hit), level(cor_tp, cor_hit), n)


@dataclass
class ZeroShotReport:
    k: int
    error_mask_rate: float | None  # flagged true errors / true errors
    correct_unmask_rate: float | None  # truly correct / unflagged
    errors: int
    flagged: int
    unmasked: int


def zero_shot_eval(pairs: Sequence[SentencePair], outcomes: Sequence[DetectionOutcome], k: int) -> ZeroShotReport:
    """Coverage of true errors by the detector and purity of what it leaves alone."""
    errors = hit = unmasked = unmasked_ok = flagged = 0
    for p, o in zip(pairs, outcomes, strict=True):
        wrong = np.asarray(p.src) != np.asarray(p.tgt)
        f = np.asarray(o.flags, dtype=bool)
        errors += int(wrong.sum())
        hit += int((wrong & f).sum())
        flagged += int(f.sum())
        unmasked += int((~f).sum())
        unmasked_ok += int((~f & ~wrong).sum())
    return ZeroShotReport(
        k=k,
        error_mask_rate=hit / errors if errors else None,
        correct_unmask_rate=unmasked_ok / unmasked if unmasked else None,
        errors=errors,
        flagged=flagged,
        unmasked=unmasked,
    )


def zero_shot_from_audit(audit: Sequence[Sequence[int]], lengths: Sequence[int],
                         flagged: Sequence[Sequence[int]]) -> tuple[float | None, float | None]:
    """Same two rates, counted from the generator's corruption log and flagged index lists."""
    errors = hit = unmasked = unmasked_ok = 0
    for corrupted, n, fl in zip(audit, lengths, flagged, strict=True):
        corrupted, fl = set(corrupted), set(fl)
        errors += len(corrupted)
        hit += len(corrupted & fl)
        free = set(range(n)) - fl
        unmasked += len(free)
        unmasked_ok += len(free - corrupted)
    return (hit / errors if errors else None, unmasked_ok / unmasked if unmasked else None)


class SampleSizeError(ValueError):
    pass


@dataclass
class BenchResult:
    mode: str
    n: int
    T: int
    ms_median: float
    passes_median: float
    speedup: float | None = None


def bench(model, sources: Sequence[Sequence[int]], detections: Sequence[DetectionOutcome], mode: str,
          iterations: int = 10, warmup: int = 5) -> BenchResult:
    """Median wall-clock milliseconds per sentence; warmup runs are not timed."""
    if len(sources) < 10:
        raise SampleSizeError(f"bench needs at least 10 sentences, got {len(sources)}")
    if mode not in ("mask-predict", "autoregressive"):
        raise ValueError(f"unknown mode {mode!r}")

    def run(x, d):
        if mode == "autoregressive":
            return autoregressive_decode(x, model, d)
        return mask_predict(x, model, d, iterations)

    for x, d in list(zip(sources, detections))[:warmup]:
        run(x, d)
    times, passes = [], []
    for x, d in zip(sources, detections):
        t0 = time.perf_counter()
        res = run(x, d)
        times.append((time.perf_counter() - t0) * 1000.0)
        passes.append(res.passes)
    return BenchResult(mode, len(sources), iterations, statistics.median(times), statistics.median(passes))


def bench_pair(model, sources, detections, iterations: int = 5, warmup: int = 5) -> tuple[BenchResult, BenchResult]:
    """Mask-predict and autoregressive timings on identical data; speedup = AR / MP."""
    mp = bench(model, sources, detections, "mask-predict", iterations, warmup)
    ar = bench(model, sources, detections, "autoregressive", iterations, warmup)
    mp.speedup = ar.ms_median / mp.ms_median if mp.ms_median > 0 else float("inf")
    ar.speedup = 1.0
    return mp, ar
