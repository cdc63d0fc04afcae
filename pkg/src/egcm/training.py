"""Target masking, the NLL / confusion / combined losses, and the training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import MASK_ID, PAD_ID, ConfusionSet, SentencePair
from .detector import DetectionOutcome, gold_outcome, length_batches, pad_batch
from .model import EGCM, ModelConfig, is_decayed
from .numerics import Tensor
from .optim import Adam, warmup_linear

log = logging.getLogger(__name__)

DEN_EPS = 1e-8


@dataclass
class MaskSample:
    y_in: tuple[int, ...]
    mask_set: tuple[int, ...]
    obs_set: tuple[int, ...]
    strategy: str


def sample_mask(y: Sequence[int], rng: np.random.Generator) -> MaskSample:
    """Mask-separate or mask-range, chosen by a fair coin.

    Mask-separate draws a count uniformly from 1..len(y) and masks that many
    distinct positions; mask-range masks one contiguous span of 2 or 3.
    One-token sentences always use mask-separate.
    """
    n = len(y)
    if n == 0:
        raise ValueError("cannot mask an empty sentence")
    strategy = "separate" if n < 2 or rng.random() < 0.5 else "range"
    if strategy == "separate":
        m = int(rng.integers(1, n + 1))
        positions = np.sort(rng.choice(n, size=m, replace=False))
    else:
        span = min(int(rng.integers(2, 4)), n)
        start = int(rng.integers(0, n - span + 1))
        positions = np.arange(start, start + span)
    mask = tuple(int(i) for i in positions)
    masked = set(mask)
    y_in = tuple(MASK_ID if i in masked else int(t) for i, t in enumerate(y))
    obs = tuple(i for i in range(n) if i not in masked)
    return MaskSample(y_in, mask, obs, strategy)


# ---------------------------------------------------------------------------
# losses.  All take log-probabilities shaped (..., n, |V|) and a boolean
# mask over positions, and return the sum over masked positions averaged
# over leading batch entries.
# ---------------------------------------------------------------------------


def _as_batch(log_probs: Tensor, y, mask) -> tuple[Tensor, np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.int64)
    mask = np.asarray(mask)
    if mask.dtype != bool:  # index list
        m = np.zeros(y.shape, dtype=bool)
        m[..., np.asarray(mask, dtype=np.int64)] = True
        mask = m
    if y.ndim == 1:
        y, mask = y[None], mask[None]
        if log_probs.data.ndim == 2:
            log_probs = nx.reshape(log_probs, (1,) + log_probs.shape)
    return log_probs, y, mask


def _masked_rows(log_probs: Tensor, y: np.ndarray, mask: np.ndarray):
    rows = np.flatnonzero(mask.reshape(-1))
    if rows.size == 0:
        raise ValueError("mask_set is empty")
    return nx.select_rows(log_probs, rows), y.reshape(-1)[rows]


def nll_loss(log_probs: Tensor, y, mask) -> Tensor:
    """-sum over masked positions of log P(y_i)."""
    log_probs, y, mask = _as_batch(log_probs, y, mask)
    sel, targets = _masked_rows(log_probs, y, mask)
    picked = nx.gather_last(sel, targets[:, None])
    return nx.sum_(picked) * (-1.0 / y.shape[0])


def _confusion_terms(sel: Tensor, targets: np.ndarray, conf_ids: np.ndarray, conf_valid: np.ndarray):
    has_conf = conf_valid[targets].any(axis=1)
    if not has_conf.any():
        return None
    keep = np.flatnonzero(has_conf)
    sel = nx.select_rows(sel, keep)
    targets = targets[keep]
    own = nx.reshape(nx.gather_last(sel, targets[:, None]), (len(keep),))
    neigh = nx.gather_last(sel, conf_ids[targets])
    denom = nx.sum_(neigh * Tensor(conf_valid[targets].astype(sel.dtype)), axis=-1)
    denom = nx.clamp_max(denom, -DEN_EPS)
    return own / denom


def confusion_loss(log_probs: Tensor, y, mask, conf: ConfusionSet | tuple[np.ndarray, np.ndarray]) -> Tensor:
    """-sum over masked i of log P(y_i) / sum_{c in conf(y_i)} log P(c).

    Tokens with an empty confusion set contribute nothing; the denominator is
    kept at or below -1e-8.
    """
    log_probs, y, mask = _as_batch(log_probs, y, mask)
    if isinstance(conf, ConfusionSet):
        conf = conf.padded(log_probs.shape[-1])
    sel, targets = _masked_rows(log_probs, y, mask)
    ratio = _confusion_terms(sel, targets, *conf)
    if ratio is None:
        return Tensor(np.zeros((), dtype=log_probs.dtype))
    return nx.sum_(ratio) * (-1.0 / y.shape[0])


def total_loss(log_probs: Tensor, y, mask, conf, gamma: float) -> Tensor:
    nll = nll_loss(log_probs, y, mask)
    if gamma == 0:
        return nll
    return nll + confusion_loss(log_probs, y, mask, conf) * gamma


def loss_terms(log_probs: Tensor, y, mask, conf, gamma: float) -> tuple[Tensor, Tensor, Tensor]:
    """(L_nll, L_cs, L_f) sharing one row selection."""
    log_probs, y, mask = _as_batch(log_probs, y, mask)
    if isinstance(conf, ConfusionSet):
        conf = conf.padded(log_probs.shape[-1])
    bsz = y.shape[0]
    sel, targets = _masked_rows(log_probs, y, mask)
    nll = nx.sum_(nx.gather_last(sel, targets[:, None])) * (-1.0 / bsz)
    ratio = _confusion_terms(sel, targets, *conf)
    cs = Tensor(np.zeros((), dtype=log_probs.dtype)) if ratio is None else nx.sum_(ratio) * (-1.0 / bsz)
    return nll, cs, (nll + cs * gamma if gamma else nll)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-6
    weight_decay: float = 0.01
    dropout: float = 0.3
    gamma: float = 2.0
    warmup: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    use_efenc: bool = True
    use_cfl: bool = True
    use_gfi: bool = True
    gold_guidance: bool = False
    iterations: int = 10
    dev_limit: int | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        self.betas = tuple(self.betas)

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.use_cfl else 0.0


def build_batch(pairs: Sequence[SentencePair], outcomes: Sequence[DetectionOutcome], rng: np.random.Generator):
    x = pad_batch([p.src for p in pairs])
    y = pad_batch([p.tgt for p in pairs])
    y_in = np.full_like(y, PAD_ID)
    mask = np.zeros(y.shape, dtype=bool)
    gam = np.ones(y.shape, dtype=np.int64)
    for r, (p, o) in enumerate(zip(pairs, outcomes)):
        s = sample_mask(p.tgt, rng)
        n = len(p)
        y_in[r, :n] = s.y_in
        mask[r, list(s.mask_set)] = True
        gam[r, :n] = o.gam_row
    return x, y, y_in, mask, gam


def train(pairs: Sequence[SentencePair], outcomes: Sequence[DetectionOutcome] | None, conf: ConfusionSet,
          vocab_size: int, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          dev: tuple[Sequence[SentencePair], Sequence[DetectionOutcome]] | None = None,
          log_path=None) -> tuple[EGCM, list[dict]]:
    """Fit an EGCM; returns the model and one log record per epoch."""
    from .decoding import correct_corpus
    from .evaluation import EvalItem, sentence_metrics

    if cfg.gold_guidance:
        outcomes = [gold_outcome(p) for p in pairs]
    if outcomes is None:
        raise FileNotFoundError("detection outcomes missing; run `egcm detect` on the training corpus first")
    if len(outcomes) != len(pairs):
        raise ValueError(f"{len(outcomes)} detection outcomes for {len(pairs)} sentences")

    rng = np.random.default_rng(cfg.seed)
    model_cfg = model_cfg or ModelConfig(vocab_size=vocab_size)
    model_cfg.dropout = cfg.dropout
    model_cfg.use_efenc = cfg.use_efenc
    model = EGCM(model_cfg, seed=cfg.seed)
    conf_arrays = conf.padded(vocab_size)
    gamma = cfg.effective_gamma

    steps_per_epoch = -(-len(pairs) // cfg.batch_size)
    opt = Adam(model.params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
               decay_filter=is_decayed, schedule=warmup_linear(steps_per_epoch * cfg.epochs, cfg.warmup))
    history = []
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train(rng)
            sums = np.zeros(3)
            count = 0
            for idx in length_batches([len(p) for p in pairs], cfg.batch_size, rng):
                x, y, y_in, mask, gam = build_batch([pairs[i] for i in idx], [outcomes[i] for i in idx], rng)
                with nx.recording() as tape:
                    lp = model.forward_log_probs(x, y_in, gam)
                    nll, cs, lf = loss_terms(lp, y, mask, conf_arrays, gamma)
                opt.zero_grad()
                nx.backward(lf, tape)
                opt.step()
                sums += len(idx) * np.array([nll.item(), cs.item(), lf.item()])
                count += len(idx)
            model.eval()
            rec = {"epoch": epoch, "l_nll": sums[0] / count, "l_cs": sums[1] / count, "l_f": sums[2] / count,
                   "dev_det_f1": None, "dev_cor_f1": None, "lr": opt.current_lr}
            if dev is not None:
                dev_pairs, dev_out = dev
                if cfg.dev_limit:
                    dev_pairs, dev_out = dev_pairs[: cfg.dev_limit], dev_out[: cfg.dev_limit]
                preds = correct_corpus(model, [p.src for p in dev_pairs], dev_out, cfg.iterations, use_gfi=cfg.use_gfi)
                report = sentence_metrics([EvalItem(p.src, p.tgt, z) for p, z in zip(dev_pairs, preds)])
                rec["dev_det_f1"] = report.detection.f1
                rec["dev_cor_f1"] = report.correction.f1
            rec = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in rec.items()}
            log.info("train %s", rec)
            history.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return model, history


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
