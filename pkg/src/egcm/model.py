"""The error-guided correction network.

A source encoder turns the (possibly misspelled) input into ``hs``.  An
error-focused encoder re-reads ``hs`` with attention keys restricted to the
positions the detector flagged.  Each decoder layer runs bidirectional
self-attention over the partially masked target, then attends to ``hs``,
then to ``hef``, and the last hidden state is projected onto the vocabulary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nx
from .corpus import MASK_ID, PAD_ID
from .numerics import Tensor


class InputError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    d_ff: int = 256
    heads: int = 4
    src_layers: int = 2
    ef_layers: int = 1
    dec_layers: int = 2
    max_len: int = 64
    dropout: float = 0.3
    use_efenc: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        for name in ("vocab_size", "d_model", "d_ff", "heads", "src_layers", "ef_layers", "dec_layers", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------


class ParamStore(dict):
    """Ordered name -> Tensor mapping with BERT-style initialisation."""

    def __init__(self, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        self.rng = rng
        self.dtype = dtype

    def normal(self, name, shape, std=0.02):
        self[name] = Tensor(self.rng.normal(0.0, std, size=shape).astype(self.dtype), requires_grad=True, name=name)

    def const(self, name, shape, value):
        self[name] = Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True, name=name)

    def attention(self, prefix, d):
        for w in ("q", "k", "v", "o"):
            self.normal(f"{prefix}.w{w}", (d, d))
            self.const(f"{prefix}.b{w}", (d,), 0.0)

    def layer_norm(self, prefix, d):
        self.const(f"{prefix}.gamma", (d,), 1.0)
        self.const(f"{prefix}.beta", (d,), 0.0)

    def ffn(self, prefix, d, d_ff):
        self.normal(f"{prefix}.w1", (d, d_ff))
        self.const(f"{prefix}.b1", (d_ff,), 0.0)
        self.normal(f"{prefix}.w2", (d_ff, d))
        self.const(f"{prefix}.b2", (d,), 0.0)

    def encoder_layer(self, prefix, d, d_ff):
        self.layer_norm(f"{prefix}.ln1", d)
        self.attention(f"{prefix}.attn", d)
        self.layer_norm(f"{prefix}.ln2", d)
        self.ffn(f"{prefix}.ffn", d, d_ff)


def is_decayed(name: str) -> bool:
    """Weight decay applies to matrices and embeddings, not biases or norms."""
    leaf = name.rsplit(".", 1)[-1]
    return not (leaf.startswith("b") or leaf in ("gamma", "beta"))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nx.matmul(x, w) + b


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return nx.transpose(nx.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def multi_head_attention(p: dict, prefix: str, xq: Tensor, xkv: Tensor, keep: np.ndarray,
                         heads: int, trace: Optional[dict] = None) -> Tensor:
    """``keep`` is a boolean (B, Lq, Lk) or (B, Lk) keep-mask."""
    q = split_heads(linear(xq, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), heads)
    k = split_heads(linear(xkv, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), heads)
    v = split_heads(linear(xkv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), heads)
    keep = keep[:, None, None, :] if keep.ndim == 2 else keep[:, None, :, :]
    out, weights = nx.scaled_dot_attention(q, k, v, key_mask=keep, return_weights=True)
    if trace is not None:
        trace[f"{prefix}.weights"] = weights.data
        trace[f"{prefix}.q"], trace[f"{prefix}.k"], trace[f"{prefix}.v"] = q.data, k.data, v.data
    return linear(merge_heads(out), p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def ln(p: dict, prefix: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])


def ffn(p: dict, prefix: str, x: Tensor) -> Tensor:
    return linear(nx.gelu(linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"])), p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def encoder_layer(p: dict, prefix: str, x: Tensor, keep: np.ndarray, heads: int, dropout: float,
                  rng, trace=None) -> Tensor:
    h = ln(p, f"{prefix}.ln1", x)
    x = x + nx.dropout(multi_head_attention(p, f"{prefix}.attn", h, h, keep, heads, trace), dropout, rng)
    h = ln(p, f"{prefix}.ln2", x)
    return x + nx.dropout(ffn(p, f"{prefix}.ffn", h), dropout, rng)


def embed(p: dict, ids: np.ndarray, dropout: float, rng) -> Tensor:
    n = ids.shape[1]
    x = nx.embedding(p["tok_emb"], ids) + nx.embedding(p["pos_emb"], np.arange(n))
    return nx.dropout(ln(p, "emb_ln", x), dropout, rng)


def as_batch(ids, name: str) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise InputError(f"{name} must be a token sequence or a padded batch")
    return arr


def guidance_keep_mask(gam: np.ndarray, pad: np.ndarray) -> np.ndarray:
    """Key mask for the error-focused encoder.

    Keys with GAM == 0 (probably wrong) stay attendable, keys with GAM == 1
    are blocked, every query keeps itself.  A sentence with nothing flagged
    falls back to ordinary padding-only attention.
    """
    valid = ~pad
    open_keys = (gam == 0) & valid
    bsz, n = gam.shape
    eye = np.eye(n, dtype=bool)[None]
    keep = open_keys[:, None, :] | eye
    none_flagged = ~open_keys.any(axis=1)
    if none_flagged.any():
        keep[none_flagged] = np.broadcast_to(valid[none_flagged][:, None, :], (int(none_flagged.sum()), n, n))
        keep[none_flagged] |= eye[0]
    return keep


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


class EGCM:
    MAGIC = b"EGCM"

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.params = ParamStore(np.random.default_rng(seed), dtype)
        self._build()
        self.training = False
        self.dropout_rng: np.random.Generator | None = None
        self.trace: dict | None = None

    def _build(self):
        c, p = self.cfg, self.params
        p.normal("tok_emb", (c.vocab_size, c.d_model))
        p.normal("pos_emb", (c.max_len, c.d_model))
        p.layer_norm("emb_ln", c.d_model)
        for i in range(c.src_layers):
            p.encoder_layer(f"src.{i}", c.d_model, c.d_ff)
        p.layer_norm("src.final_ln", c.d_model)
        if c.use_efenc:
            for i in range(c.ef_layers):
                p.encoder_layer(f"ef.{i}", c.d_model, c.d_ff)
            p.layer_norm("ef.final_ln", c.d_model)
        for i in range(c.dec_layers):
            pre = f"dec.{i}"
            p.layer_norm(f"{pre}.ln_self", c.d_model)
            p.attention(f"{pre}.self", c.d_model)
            p.layer_norm(f"{pre}.ln_src", c.d_model)
            p.attention(f"{pre}.src", c.d_model)
            if c.use_efenc:
                p.layer_norm(f"{pre}.ln_ef", c.d_model)
                p.attention(f"{pre}.ef", c.d_model)
            p.layer_norm(f"{pre}.ln2", c.d_model)
            p.ffn(f"{pre}.ffn", c.d_model, c.d_ff)
        p.layer_norm("dec.final_ln", c.d_model)
        p.normal("out.W", (c.d_model, c.vocab_size))
        p.const("out.b", (c.vocab_size,), 0.0)

    # -- mode switches -------------------------------------------------------

    def train(self, rng: np.random.Generator) -> None:
        self.training, self.dropout_rng = True, rng

    def eval(self) -> None:
        self.training, self.dropout_rng = False, None

    @property
    def _drop(self) -> float:
        return self.cfg.dropout if self.training else 0.0

    def astype(self, dtype) -> "EGCM":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        self.params.dtype = dtype
        return self

    def _check_len(self, n: int) -> None:
        if n > self.cfg.max_len:
            raise InputError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")

    # -- encoders and decoder ----------------------------------------------

    def encode_source(self, x) -> Tensor:
        x = as_batch(x, "X")
        self._check_len(x.shape[1])
        keep = x != PAD_ID
        h = embed(self.params, x, self._drop, self.dropout_rng)
        for i in range(self.cfg.src_layers):
            h = encoder_layer(self.params, f"src.{i}", h, keep, self.cfg.heads, self._drop, self.dropout_rng, self.trace)
        h = ln(self.params, "src.final_ln", h)
        if self.trace is not None:
            self.trace["H_s"] = h.data
        return h

    def encode_error_focused(self, hs: Tensor, gam, pad: np.ndarray) -> Tensor:
        gam = as_batch(gam, "gam_row")
        if gam.shape != hs.shape[:2]:
            raise InputError(f"gam_row shape {gam.shape} does not match source {hs.shape[:2]}")
        keep = guidance_keep_mask(gam, pad)
        if self.trace is not None:
            self.trace["ef_keep"] = keep
        h = hs
        for i in range(self.cfg.ef_layers):
            h = encoder_layer(self.params, f"ef.{i}", h, keep, self.cfg.heads, self._drop, self.dropout_rng, self.trace)
        h = ln(self.params, "ef.final_ln", h)
        if self.trace is not None:
            self.trace["H_ef"] = h.data
        return h

    def decode_logits(self, y_in, hs: Tensor, hef: Tensor | None, src_keep: np.ndarray) -> Tensor:
        y_in = as_batch(y_in, "Y_in")
        if y_in.shape != hs.shape[:2]:
            raise InputError(f"Y_in shape {y_in.shape} does not match source {hs.shape[:2]}")
        p, c, heads = self.params, self.cfg, self.cfg.heads
        drop, rng, tr = self._drop, self.dropout_rng, self.trace
        self_keep = y_in != PAD_ID
        h = embed(p, y_in, drop, rng)
        for i in range(c.dec_layers):
            pre = f"dec.{i}"
            a = ln(p, f"{pre}.ln_self", h)
            h = h + nx.dropout(multi_head_attention(p, f"{pre}.self", a, a, self_keep, heads, tr), drop, rng)
            if tr is not None:
                tr[f"{pre}.H_d1"] = h.data
            a = ln(p, f"{pre}.ln_src", h)
            h = h + nx.dropout(multi_head_attention(p, f"{pre}.src", a, hs, src_keep, heads, tr), drop, rng)
            if tr is not None:
                tr[f"{pre}.H_d2"] = h.data
            if c.use_efenc:
                a = ln(p, f"{pre}.ln_ef", h)
                h = h + nx.dropout(multi_head_attention(p, f"{pre}.ef", a, hef, src_keep, heads, tr), drop, rng)
            a = ln(p, f"{pre}.ln2", h)
            h = h + nx.dropout(ffn(p, f"{pre}.ffn", a), drop, rng)
            if tr is not None:
                tr[f"{pre}.H_l"] = h.data
        h = ln(p, "dec.final_ln", h)
        logits = linear(h, p["out.W"], p["out.b"])
        if tr is not None:
            tr["H_l"] = h.data
            tr["logits"] = logits.data
        return logits

    def encode(self, x, gam) -> tuple[Tensor, Tensor | None, np.ndarray]:
        x = as_batch(x, "X")
        pad = x == PAD_ID
        hs = self.encode_source(x)
        hef = self.encode_error_focused(hs, gam, pad) if self.cfg.use_efenc else None
        return hs, hef, ~pad

    def decode(self, y_in, hs: Tensor, hef: Tensor | None, src_keep: np.ndarray) -> Tensor:
        """Per-position distribution P over the vocabulary."""
        return nx.softmax_rows(self.decode_logits(y_in, hs, hef, src_keep))

    def forward_log_probs(self, x, y_in, gam) -> Tensor:
        x, y_in = as_batch(x, "X"), as_batch(y_in, "Y_in")
        if x.shape != y_in.shape:
            raise InputError(f"X shape {x.shape} and Y_in shape {y_in.shape} differ")
        hs, hef, keep = self.encode(x, gam)
        return nx.log_softmax(self.decode_logits(y_in, hs, hef, keep))

    def forward(self, x, y_in, gam) -> Tensor:
        x, y_in = as_batch(x, "X"), as_batch(y_in, "Y_in")
        if x.shape != y_in.shape:
            raise InputError(f"X shape {x.shape} and Y_in shape {y_in.shape} differ")
        hs, hef, keep = self.encode(x, gam)
        return self.decode(y_in, hs, hef, keep)

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.MAGIC, asdict(self.cfg), self.params)

    @classmethod
    def load(cls, path) -> "EGCM":
        cfg, tensors = load_checkpoint(path, cls.MAGIC)
        model = cls(ModelConfig.from_dict(cfg), seed=0)
        assign_params(model.params, tensors)
        return model


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 version, u32 len + JSON config, then tensors
# (u32 name len, name, u32 rank, u32 dims..., little-endian float32 values)
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, magic: bytes, config: dict, params: dict) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name, t in params.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    config = json.loads(data[off: off + n].decode("utf-8"))
    off += n
    tensors = {}
    while off < len(data):
        (ln_,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off: off + ln_].decode("utf-8")
        off += ln_
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
        off += 4 * count
    return config, tensors


def assign_params(params: dict, tensors: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    for name, t in params.items():
        if t.data.shape != tensors[name].shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} != expected {t.data.shape}")
        t.data = tensors[name].copy()
