from types import SimpleNamespace

import numpy as np
import pytest

from egcm.corpus import MASK_ID, CorpusGenConfig, SentencePair, generate_corpus, write_pairs, Vocab
from egcm.detector import (
    Detector,
    MlmConfig,
    MlmModel,
    MlmTrainConfig,
    StaleCacheError,
    cache_path,
    detect,
    detect_batch,
    gold_outcome,
    in_top_k,
    load_detection,
    mask_for_mlm,
    read_cache,
    train_mlm,
)
from egcm.model import InputError

V = 12


class TableMlm:
    """Stand-in MLM: the distribution at a masked slot is a fixed table row
    chosen by position, so every flag can be worked out by hand."""

    def __init__(self, table, max_len=16):
        self.table = np.asarray(table, dtype=np.float64)
        self.cfg = SimpleNamespace(vocab_size=self.table.shape[1], max_len=max_len)

    def probs(self, ids):
        out = np.full(ids.shape + (self.cfg.vocab_size,), 1.0 / self.cfg.vocab_size)
        for r, c in zip(*np.nonzero(ids == MASK_ID)):
            out[r, c] = self.table[c % len(self.table)]
        return out


def peaked(best, second=None):
    row = np.full(V, 0.01)
    row[best] = 0.6
    if second is not None:
        row[second] = 0.2
    return row / row.sum()


def tiny_mlm(seed=0):
    return MlmModel(MlmConfig(vocab_size=V, d_model=8, d_ff=16, heads=2, layers=1, max_len=16), seed=seed)


class TestContainment:
    def test_top_one_token_kept_at_k1(self):
        mlm = TableMlm([peaked(5)])
        assert not detect([5, 5, 5], mlm, k=1).flags.any()

    def test_absent_from_top2_flagged(self):
        mlm = TableMlm([peaked(5, 6)])
        out = detect([5, 6, 7], mlm, k=2)
        assert out.flags.tolist() == [False, False, True]
        assert out.gam_row.tolist() == [1, 1, 0]
        assert out.gfi == (5, 6, MASK_ID)

    def test_k_equal_vocab_flags_nothing(self):
        x = [3, 9, 4, 4, 11]
        out = detect(x, tiny_mlm(), k=V)
        assert not out.flags.any()
        assert out.gfi == tuple(x)

    def test_tie_at_rank_k_goes_to_lower_id(self):
        row = np.full(V, 0.05)
        row[[4, 7]] = 0.3
        row /= row.sum()
        assert in_top_k(row, 4, 1) and not in_top_k(row, 7, 1)
        out = detect([4, 7], TableMlm([row]), k=1)
        assert out.flags.tolist() == [False, True]

    def test_candidates_have_k_entries(self):
        out = detect([3, 4, 5, 6], tiny_mlm(), k=3)
        assert out.candidates.shape == (4, 3)
        assert (np.diff(out.candidate_probs, axis=1) <= 0).all()

    def test_flags_agree_with_candidate_list(self):
        out = detect([3, 8, 5, 6, 10, 2], tiny_mlm(seed=4), k=2)
        # ties are measure-zero for a float model, so membership decides
        for j, tok in enumerate(out.tokens):
            assert out.flags[j] == (tok not in out.candidates[j])

    def test_overlong_sentence_rejected(self):
        with pytest.raises(InputError):
            detect([3] * 17, tiny_mlm(), k=2)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            Detector(tiny_mlm(), k=0)


def test_guidance_is_a_function_of_flags():
    out = detect([3, 8, 5, 6, 10], tiny_mlm(seed=1), k=1)
    assert ((out.gam_row == 0) == out.flags).all()
    assert all((g == MASK_ID) == f for g, f in zip(out.gfi, out.flags))


def test_batched_rows_equal_single_sentence_rows():
    mlm = tiny_mlm(seed=2)
    rng = np.random.default_rng(0)
    sents = [tuple(rng.integers(3, V, size=int(n)).tolist()) for n in rng.integers(1, 15, size=25)]
    det = Detector(mlm, k=2, rows_per_batch=40)
    many = det.detect_many(sents)
    assert det.rows_run == sum(len(s) for s in sents)
    for s, o in zip(sents, many):
        assert o.flags.tolist() == detect(s, mlm, k=2).flags.tolist()


def test_k_monotone():
    mlm = tiny_mlm(seed=3)
    rng = np.random.default_rng(1)
    sents = [tuple(rng.integers(3, V, size=10).tolist()) for _ in range(40)]
    by_k = {k: Detector(mlm, k).detect_many(sents) for k in (1, 2, 3)}
    for a, b, c in zip(by_k[1], by_k[2], by_k[3]):
        assert not (c.flags & ~b.flags).any()
        assert not (b.flags & ~a.flags).any()


def test_gold_outcome_marks_differences():
    g = gold_outcome(SentencePair((3, 4, 5), (3, 9, 5)))
    assert g.flags.tolist() == [False, True, False]


# -- cache -------------------------------------------------------------------


@pytest.fixture
def written(tmp_path):
    vocab = Vocab(["[PAD]", "[MASK]", "[UNK]"] + [f"t{i}" for i in range(V - 3)])
    rng = np.random.default_rng(5)
    pairs = []
    for _ in range(30):
        s = tuple(rng.integers(3, V, size=int(rng.integers(1, 12))).tolist())
        pairs.append(SentencePair(s, s))
    path = tmp_path / "c.jsonl"
    write_pairs(pairs, vocab, path)
    return path, pairs, vocab


def test_cache_hit_equals_fresh(written):
    path, pairs, _ = written
    mlm = tiny_mlm(seed=6)
    fresh = detect_batch(path, pairs, mlm, k=2)
    raw = cache_path(path).read_bytes()
    assert raw[:4] == b"EGDT"
    again = detect_batch(path, pairs, tiny_mlm(seed=99), k=2)  # different weights: must come from cache
    assert again == fresh
    assert load_detection(path, pairs, k=2) == fresh
    assert cache_path(path).read_bytes() == raw


def test_stale_cache_detected(written):
    path, pairs, vocab = written
    detect_batch(path, pairs, tiny_mlm(), k=2)
    changed = pairs[:-1] + [SentencePair((3, 3), (3, 3))]
    write_pairs(changed, vocab, path)
    with pytest.raises(StaleCacheError):
        load_detection(path, changed)


def test_cache_k_mismatch(written):
    path, pairs, _ = written
    detect_batch(path, pairs, tiny_mlm(), k=2)
    with pytest.raises(StaleCacheError):
        read_cache(cache_path(path), [p.src for p in pairs], k=3)


def test_missing_cache_names_the_command(written):
    path, pairs, _ = written
    with pytest.raises(FileNotFoundError, match="egcm detect"):
        load_detection(path, pairs)


# -- MLM training ------------------------------------------------------------


def test_masking_picks_at_least_one_slot_per_sentence():
    batch = np.array([[3, 4, 5, 0], [6, 7, 0, 0]])
    masked, chosen = mask_for_mlm(batch, 0.0, np.random.default_rng(0))
    assert chosen.sum(axis=1).tolist() == [1, 1]
    assert (masked[chosen] == MASK_ID).all()
    assert not chosen[batch == 0].any()


def test_mlm_rows_are_distributions():
    p = tiny_mlm().probs(np.array([[3, MASK_ID, 5, 0]]))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_empty_corpus_rejected():
    from egcm.corpus import ConfigError

    with pytest.raises(ConfigError):
        train_mlm([], V)


@pytest.fixture(scope="module")
def one_epoch():
    corpus = generate_corpus(CorpusGenConfig(sentence_count=6250, seed=0))
    sents = [p.tgt for p in corpus.splits["train"]][:5000]
    dev = [p.tgt for p in corpus.splits["dev"]]
    vocab_size = len(corpus.vocab)
    cfg = MlmTrainConfig(epochs=1, seed=0)
    model_cfg = MlmConfig(vocab_size=vocab_size, d_model=32, d_ff=64, heads=2, layers=1)
    return vocab_size, sents, dev, cfg, model_cfg


def test_one_epoch_beats_uniform(one_epoch):
    vocab_size, sents, dev, cfg, model_cfg = one_epoch
    _, hist = train_mlm(sents, vocab_size, cfg, model_cfg, dev=dev)
    assert hist[-1]["dev_masked_acc"] > 1.0 / vocab_size


def test_mlm_training_deterministic(one_epoch):
    vocab_size, sents, _, cfg, model_cfg = one_epoch
    a = train_mlm(sents[:600], vocab_size, cfg, model_cfg)[1]
    b = train_mlm(sents[:600], vocab_size, cfg, model_cfg)[1]
    assert a[-1]["loss"] == b[-1]["loss"]


def test_mlm_checkpoint_round_trip(tmp_path):
    m = tiny_mlm(seed=8)
    m.save(tmp_path / "m.bin")
    back = MlmModel.load(tmp_path / "m.bin")
    ids = np.array([[3, MASK_ID, 4]])
    np.testing.assert_array_equal(back.probs(ids), m.probs(ids))
