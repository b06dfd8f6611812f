import numpy as np
import pytest

from pqgen import model as M
from pqgen import tensor as T


def toy_config(**kw):
    base = dict(vocab_size=12, d_model=8, n_heads=2, n_enc_layers=2,
                n_dec_layers=2, d_ff=16, max_len=16)
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.fixture()
def params():
    return M.init_params(toy_config(), seed=0)


def log_softmax(row):
    s = row - row.max()
    return s - np.log(np.exp(s).sum())


def test_config_divisibility_error():
    with pytest.raises(M.ConfigError):
        toy_config(d_model=8, n_heads=3)


def test_init_deterministic_and_seed_sensitive():
    a = M.init_params(toy_config(), seed=1)
    b = M.init_params(toy_config(), seed=1)
    c = M.init_params(toy_config(), seed=2)
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())


def test_init_norm_gains_and_biases(params):
    np.testing.assert_array_equal(params["enc0.self.ln.g"].data, np.ones(8))
    np.testing.assert_array_equal(params["dec1.ffn.b2"].data, np.zeros(8))


def test_parameter_count_pure_function_of_config():
    a = M.init_params(toy_config(), seed=1)
    b = M.init_params(toy_config(), seed=99)
    assert a.n_parameters == b.n_parameters


@pytest.mark.parametrize("d_model,n_heads", [(8, 1), (8, 2), (16, 2)])
@pytest.mark.parametrize("layers", [1, 2, 3])
def test_shape_contracts(d_model, n_heads, layers):
    cfg = toy_config(d_model=d_model, n_heads=n_heads, n_enc_layers=layers,
                     n_dec_layers=layers, d_ff=3 * d_model)
    p = M.init_params(cfg, seed=3)
    enc = M.encode(p, [5, 6, 7])
    assert enc.h_e.shape == (3, d_model)
    trace = M.decode_teacher_forced(p, enc, [8, 9])
    assert trace.logits.shape == (3, cfg.vocab_size)  # len(target)+1 rows
    assert len(trace.layer_states) == layers
    for st in trace.layer_states:
        assert st.shape == (3, d_model)
    assert trace.target_mask == [False, True, True]
    assert trace.predict_ids == (8, 9, cfg.eos_id)


def test_encode_pad_invariance(params):
    ctx = [5, 6, 7, 8]
    base = M.encode(params, ctx)
    padded = M.encode(params, ctx + [0, 0, 0])
    np.testing.assert_allclose(padded.h_e.data[:4], base.h_e.data, atol=1e-10)
    t1 = M.decode_teacher_forced(params, base, [9, 10])
    t2 = M.decode_teacher_forced(params, padded, [9, 10])
    np.testing.assert_allclose(t1.logits.data, t2.logits.data, atol=1e-10)


def test_encode_position_sensitivity(params):
    a = M.encode(params, [5, 6, 7]).h_e.data
    b = M.encode(params, [6, 5, 7]).h_e.data
    assert not np.allclose(a, b, atol=1e-6)


def test_encode_length_and_pad_errors(params):
    with pytest.raises(M.SequenceLengthError):
        M.encode(params, [5] * 17)
    with pytest.raises(M.SequenceLengthError):
        M.encode(params, [])
    with pytest.raises(T.EmptyPoolError):
        M.encode(params, [0, 0])
    with pytest.raises(IndexError):
        M.encode(params, [5, 99])


def test_decoder_causality(params):
    enc = M.encode(params, [5, 6, 7])
    base = M.decode_teacher_forced(params, enc, [8, 9, 10, 11]).logits.data
    for j, new_tok in [(1, 4), (2, 5), (3, 6)]:
        tgt = [8, 9, 10, 11]
        tgt[j] = new_tok
        changed = M.decode_teacher_forced(params, enc, tgt).logits.data
        np.testing.assert_allclose(changed[:j + 1], base[:j + 1], atol=1e-10)
        assert not np.allclose(changed[j + 1], base[j + 1], atol=1e-8)


def test_single_layer_states_feed_cg_head():
    cfg = toy_config(n_dec_layers=1)
    p = M.init_params(cfg, seed=4)
    enc = M.encode(p, [5, 6])
    trace = M.decode_teacher_forced(p, enc, [7, 8])
    recomputed = T.matmul(trace.layer_states[0], p["cg_head.w"])
    np.testing.assert_allclose(recomputed.data, trace.logits.data, atol=1e-12)


def test_decode_teacher_forced_rejects_bos_eos_and_empty(params):
    enc = M.encode(params, [5, 6])
    with pytest.raises(ValueError):
        M.decode_teacher_forced(params, enc, [7, 1])
    with pytest.raises(ValueError):
        M.decode_teacher_forced(params, enc, [2, 7])
    with pytest.raises(M.SequenceLengthError):
        M.decode_teacher_forced(params, enc, [])


def test_decode_step_consistency_every_prefix(params):
    enc = M.encode(params, [5, 6, 7])
    target = [8, 9, 10, 4]
    trace = M.decode_teacher_forced(params, enc, target)
    for r in range(len(target) + 1):
        step = M.decode_step(params, enc, [1] + target[:r])
        assert abs(np.exp(step).sum() - 1.0) < 1e-10
        np.testing.assert_allclose(step, log_softmax(trace.logits.data[r]),
                                   atol=1e-10)


def test_decode_step_validates_prefix(params):
    enc = M.encode(params, [5])
    with pytest.raises(ValueError):
        M.decode_step(params, enc, [5, 6])  # missing BOS
    with pytest.raises(M.SequenceLengthError):
        M.decode_step(params, enc, [1] + [5] * 16)


def test_sequence_log_likelihood_identity(params):
    ctx, tgt = [5, 6, 7], [8, 9, 10]
    sll = M.sequence_log_likelihood(params, ctx, tgt)
    assert sll <= 0.0
    enc = M.encode(params, ctx)
    trace = M.decode_teacher_forced(params, enc, tgt)
    ce = T.cross_entropy(trace.logits, list(trace.predict_ids),
                         pad_id=params.config.pad_id).item()
    n_tokens = len(tgt) + 1
    assert abs(sll + n_tokens * ce) < 1e-10


def test_decode_step_records_nothing(params):
    enc = M.encode(params, [5, 6])
    n_before = len(T.active_tape())
    M.decode_step(params, enc, [1, 8])
    assert len(T.active_tape()) == n_before


def test_checkpoint_round_trip(tmp_path, params):
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(path, params, vocab_tokens=["is", "it", "?"])
    loaded, vocab = M.load_checkpoint(path)
    assert vocab == ["is", "it", "?"]
    assert loaded.config == params.config
    for name in params.names():
        np.testing.assert_array_equal(loaded[name].data, params[name].data)
    # Saving again is byte-identical.
    path2 = tmp_path / "m2.ckpt"
    M.save_checkpoint(path2, params, vocab_tokens=["is", "it", "?"])
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_validation_errors(tmp_path, params):
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(path, params)
    raw = path.read_bytes()

    bad_magic = tmp_path / "bad1.ckpt"
    bad_magic.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(bad_magic)

    truncated = tmp_path / "bad2.ckpt"
    truncated.write_bytes(raw[:-16])
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(truncated)

    trailing = tmp_path / "bad3.ckpt"
    trailing.write_bytes(raw + b"\x00" * 8)
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(trailing)
