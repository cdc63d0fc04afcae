import numpy as np
import pytest

from egcm import numerics as nx
from egcm.corpus import MASK_ID, PAD_ID, ConfusionSet
from egcm.model import EGCM, CheckpointError, InputError, ModelConfig, guidance_keep_mask
from egcm.numerics import Tensor
from egcm.training import total_loss

V = 23


def tiny(use_efenc=True, seed=0, dtype=np.float64, **kw):
    cfg = ModelConfig(vocab_size=V, d_model=8, d_ff=16, heads=2, src_layers=1, ef_layers=1, dec_layers=1,
                      max_len=12, dropout=0.0, use_efenc=use_efenc, **kw)
    return EGCM(cfg, seed=seed, dtype=dtype)


def sentence(n, seed=0):
    return np.random.default_rng(seed).integers(3, V, size=n)


def test_source_encoding_shape():
    m = tiny()
    for n in (1, 5, 12):
        assert m.encode_source(sentence(n)).shape == (1, n, 8)


def test_overlong_input_rejected():
    with pytest.raises(InputError):
        tiny().encode_source(sentence(13))


def test_pad_tail_does_not_leak():
    m = tiny()
    x = sentence(6)
    a = np.concatenate([x, [PAD_ID] * 3])
    b = np.concatenate([x, [PAD_ID] * 3])
    b[7] = PAD_ID  # same tail, verifies pad-only tails are position-agnostic
    ha = m.encode_source(a[None]).data[0, :6]
    hb = m.encode_source(b[None]).data[0, :6]
    short = m.encode_source(x[None]).data[0]
    np.testing.assert_allclose(ha, hb)
    np.testing.assert_allclose(ha, short, atol=1e-12)


def test_eval_mode_is_deterministic():
    m = tiny(dtype=np.float32)
    x = sentence(7)
    assert m.encode_source(x).data.tobytes() == m.encode_source(x).data.tobytes()
    gam = np.ones(7, dtype=int)
    assert m.forward(x, x, gam).data.tobytes() == m.forward(x, x, gam).data.tobytes()


def test_dropout_changes_training_forward():
    m = tiny()
    m.cfg.dropout = 0.3
    x = sentence(7)
    gam = np.ones(7, dtype=int)
    m.train(np.random.default_rng(0))
    a = m.forward(x, x, gam).data
    b = m.forward(x, x, gam).data
    m.eval()
    assert not np.array_equal(a, b)


class TestErrorFocusedEncoder:
    def _keys(self, gam):
        gam = np.asarray(gam)[None]
        return guidance_keep_mask(gam, np.zeros_like(gam, dtype=bool))[0]

    def test_no_flag_falls_back_to_full_attention(self):
        m = tiny()
        x = sentence(6)
        hs = m.encode_source(x)
        pad = np.zeros((1, 6), dtype=bool)
        hef = m.encode_error_focused(hs, np.ones(6, dtype=int), pad).data
        # same computation with an explicit all-true key mask
        m.trace = {}
        keep = self._keys(np.ones(6, dtype=int))
        assert keep.all()
        m.encode_error_focused(hs, np.ones(6, dtype=int), pad)
        assert m.trace["ef_keep"].all()
        np.testing.assert_array_equal(m.trace["H_ef"], hef)

    def test_single_flag_takes_all_non_self_mass(self):
        m = tiny()
        m.trace = {}
        x = sentence(6)
        gam = np.ones(6, dtype=int)
        gam[3] = 0
        m.encode_error_focused(m.encode_source(x), gam, np.zeros((1, 6), dtype=bool))
        w = m.trace["ef.0.attn.weights"][0]  # heads, q, k
        for q in range(6):
            for k in range(6):
                if k not in (q, 3):
                    assert (w[:, q, k] == 0).all()
            off_self = w[:, q, [k for k in range(6) if k != q]].sum(axis=-1)
            if q != 3:
                np.testing.assert_allclose(off_self, w[:, q, 3])

    def test_blocked_token_reaches_others_only_through_self(self):
        """Perturbing the input of a blocked key changes only its own output row."""
        m = tiny()
        x = sentence(6, seed=1)
        gam = np.array([1, 0, 1, 1, 0, 1])
        pad = np.zeros((1, 6), dtype=bool)
        hs = m.encode_source(x).data.copy()
        base = m.encode_error_focused(Tensor(hs), gam, pad).data[0]
        bumped = hs.copy()
        bumped[0, 2] += np.random.default_rng(0).normal(size=bumped.shape[-1])
        moved = m.encode_error_focused(Tensor(bumped), gam, pad).data[0]
        changed = np.abs(moved - base).max(axis=1) > 1e-12
        assert changed.tolist() == [False, False, True, False, False, False]

    def test_length_mismatch(self):
        m = tiny()
        hs = m.encode_source(sentence(5))
        with pytest.raises(InputError):
            m.encode_error_focused(hs, np.ones(4, dtype=int), np.zeros((1, 5), dtype=bool))


class TestDecoder:
    def test_distribution_shape_and_normalisation(self):
        m = tiny()
        x = sentence(9)
        p = m.forward(x, x, np.ones(9, dtype=int)).data[0]
        assert p.shape == (9, V)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)

    def test_all_mask_input_is_valid(self):
        m = tiny()
        x = sentence(5)
        p = m.forward(x, np.full(5, MASK_ID), np.ones(5, dtype=int)).data
        assert np.isfinite(p).all()

    def test_zero_projection_is_uniform(self):
        m = tiny()
        m.params["out.W"].data[:] = 0
        x = sentence(5)
        p = m.forward(x, x, np.ones(5, dtype=int)).data[0]
        entropy = -(p * np.log(p)).sum(axis=-1)
        np.testing.assert_allclose(entropy, np.log(V), atol=1e-9)

    def test_self_attention_is_bidirectional(self):
        m = tiny()
        x = sentence(6)
        gam = np.ones(6, dtype=int)
        y = x.copy()
        y[2] = MASK_ID
        p1 = m.forward(x, y, gam).data[0, 2]
        y[3] = (y[3] + 1 - 3) % (V - 3) + 3
        p2 = m.forward(x, y, gam).data[0, 2]
        assert np.abs(p1 - p2).max() > 1e-9

    def test_length_mismatch(self):
        m = tiny()
        with pytest.raises(InputError):
            m.forward(sentence(5), sentence(4), np.ones(5, dtype=int))

    def test_intermediates_are_inspectable(self):
        m = tiny()
        m.trace = {}
        x = sentence(4)
        m.forward(x, x, np.ones(4, dtype=int))
        for key in ("H_s", "H_ef", "dec.0.H_d1", "dec.0.H_d2", "H_l", "logits", "dec.0.src.weights", "dec.0.ef.weights"):
            assert key in m.trace


def test_ablation_without_error_focused_encoder():
    m = tiny(use_efenc=False)
    assert not any(k.startswith("ef.") or ".ef." in k for k in m.params)
    x = sentence(5)
    p = m.forward(x, x, np.ones(5, dtype=int)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_d_model_must_divide_heads():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, heads=3)


def test_checkpoint_round_trip(tmp_path):
    m = tiny(dtype=np.float32, seed=5)
    path = tmp_path / "m.egcm"
    m.save(path)
    assert path.read_bytes()[:4] == b"EGCM"
    back = EGCM.load(path)
    assert back.cfg == m.cfg
    for name, t in m.params.items():
        np.testing.assert_array_equal(back.params[name].data, t.data)
    x = sentence(6)
    gam = np.ones(6, dtype=int)
    np.testing.assert_array_equal(back.forward(x, x, gam).data, m.forward(x, x, gam).data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.bin"
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(CheckpointError):
        EGCM.load(path)


def randomise(model, seed):
    """Move to a random point where gradients sit well above difference noise."""
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        t.data = rng.normal(0.0, 0.5, size=t.shape) + (1.0 if name.endswith("gamma") else 0.0)


# central differences at step 1e-5 carry ~1e-10 roundoff, so coordinates
# whose gradient is below this floor are compared absolutely
NOISE_FLOOR = 1e-6


def check_gradients(records):
    worst_rel = worst_abs = 0.0
    for _, _, ana, num in records:
        if max(abs(ana), abs(num)) >= NOISE_FLOOR:
            worst_rel = max(worst_rel, nx.relative_error(ana, num))
        else:
            worst_abs = max(worst_abs, abs(ana - num))
    return worst_rel, worst_abs


def egcm_batch():
    x = np.stack([sentence(5, seed=2), sentence(5, seed=9)])
    y = x.copy()
    y[0, 1] = (y[0, 1] + 1 - 3) % (V - 3) + 3
    y_in = y.copy()
    y_in[0, [1, 3]] = MASK_ID
    y_in[1, [0, 4]] = MASK_ID
    gam = np.array([[1, 0, 1, 1, 1], [0, 1, 1, 1, 0]])
    conf = ConfusionSet({int(y[0, 1]): [int(x[0, 1]), 4], int(y[0, 3]): [5], int(y[1, 0]): [6, 7]})
    return x, y, y_in, y_in == MASK_ID, gam, conf


@pytest.mark.parametrize("use_efenc", [True, False])
def test_gradients_through_forward_match_finite_differences(use_efenc):
    m = tiny(seed=3, use_efenc=use_efenc)
    randomise(m, 1)
    x, y, y_in, mask, gam, conf = egcm_batch()
    records = nx.param_finite_diff(lambda: total_loss(m.forward_log_probs(x, y_in, gam), y, mask, conf, 2.0),
                                   m.params)
    assert len(records) == sum(t.data.size for t in m.params.values())
    worst_rel, worst_abs = check_gradients(records)
    assert worst_rel < 1e-4
    assert worst_abs < 1e-8
