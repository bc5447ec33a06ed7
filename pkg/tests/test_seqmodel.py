import math

import numpy as np
import pytest

import oracle
from numcode import gradcore as gc
from numcode.encoders import Normalizer, project_number
from numcode.numtext import IMAGE_TOKEN_INDEX, NUMBER_TOKEN_INDEX
from numcode.seqmodel import (
    AlignmentError,
    ModelConfig,
    SeqModel,
    SequenceTooLong,
    assemble_batch,
    assemble_input,
    lm_logits,
    regress_number,
)


def P(model):
    return {k: t.data for k, t in model.params.items()}


def _ids(vocab, text):
    return vocab.encode(text)[0]


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d=30, n_heads=4)
    assert ModelConfig().vocab_size == 104


def test_init_scales(model):
    p = model.params
    assert np.all(p["blocks.0.attn.bq"].data == 0)
    assert np.all(p["num_head.ln.gamma"].data == 1)
    assert abs(p["blocks.1.mlp.w1"].data.std() - 0.02) < 0.002


def test_no_placeholders_rows_from_table(model, vocab):
    ids = _ids(vocab, "<user>hello<eos>")
    inp = assemble_input(model, ids, [])
    np.testing.assert_array_equal(inp.embeddings.data[0], model.params["tok_emb"].data[ids])


def test_row_identity_two_numbers_one_obs(model, vocab, rng):
    ids = _ids(vocab, "<user><image>a <number_token> b <number_token><eos>")
    obs = rng.normal(size=(1, 4))
    inp = assemble_input(model, ids, [3.5, -1.0], obs)
    rows = inp.embeddings.data[0]
    num_pos = [i for i, t in enumerate(ids) if t == NUMBER_TOKEN_INDEX]
    img_pos = [i for i, t in enumerate(ids) if t == IMAGE_TOKEN_INDEX]
    # batched and single-row BLAS calls may differ in the last bit
    np.testing.assert_allclose(rows[num_pos[0]], project_number(model.projector, 3.5), rtol=0, atol=1e-15)
    np.testing.assert_allclose(rows[num_pos[1]], project_number(model.projector, -1.0), rtol=0, atol=1e-15)
    expect_obs = obs[0] @ model.params["obs_proj.w"].data + model.params["obs_proj.b"].data
    np.testing.assert_allclose(rows[img_pos[0]], expect_obs, rtol=0, atol=1e-15)
    ref = oracle.reference_inputs(P(model), np.array([ids]), [[3.5, -1.0]], [obs], 5.0, 3.0,
                                  vocab.pad_id)
    np.testing.assert_allclose(rows, ref[0], rtol=0, atol=1e-14)


def test_swapping_numbers_changes_only_their_rows(model, vocab):
    ids = _ids(vocab, "x <number_token> y <number_token> z")
    a = assemble_input(model, ids, [1.0, 2.0]).embeddings.data[0]
    b = assemble_input(model, ids, [2.0, 1.0]).embeddings.data[0]
    changed = np.flatnonzero(np.any(a != b, axis=1))
    assert changed.tolist() == [i for i, t in enumerate(ids) if t == NUMBER_TOKEN_INDEX]


def test_alignment_errors(model, vocab):
    ids = _ids(vocab, "a <number_token> b")
    with pytest.raises(AlignmentError):
        assemble_input(model, ids, [])
    with pytest.raises(AlignmentError):
        assemble_input(model, ids, [1.0, 2.0])
    with pytest.raises(AlignmentError):
        assemble_input(model, _ids(vocab, "<image>"), [], np.zeros((2, 4)))


def test_xval_rows(vocab):
    m = SeqModel.create(ModelConfig(), 0, Normalizer(0.0, 2.0), encoding="xval")
    ids = _ids(vocab, "a <number_token>")
    rows = assemble_input(m, ids, [3.0]).embeddings.data[0]
    np.testing.assert_array_equal(rows[-1], 1.5 * m.params["tok_emb"].data[vocab.num_id])


def test_forward_matches_reference(model, vocab, rng):
    ids = np.array([_ids(vocab, "<user><image>go <number_token> now<eos><assistant>ok")])
    inp = assemble_batch(model, ids, [[4.0]], [rng.normal(size=(1, 4))])
    h = model.forward(inp).data
    ref = oracle.reference_hidden(P(model), inp.embeddings.data, 2, 4)
    assert h.shape == (1, ids.shape[1], 64)
    np.testing.assert_allclose(h, ref, rtol=0, atol=1e-12)


def test_single_layer_single_head_hand_attention(vocab):
    cfg = ModelConfig(d=4, n_layers=1, n_heads=1, max_seq_len=8)
    m = SeqModel.create(cfg, 3, Normalizer())
    for t in m.params.values():
        t.data[...] = np.random.default_rng(5).normal(size=t.shape) * 0.5
    x = np.random.default_rng(6).normal(size=(1, 3, 4))
    got = m.forward(gc.Tensor(x)).data[0]

    p = {k: t.data for k, t in m.params.items()}
    pos = np.array([[math.sin(i / 10000 ** (0 / 4)), math.cos(i / 10000 ** (0 / 4)),
                     math.sin(i / 10000 ** (2 / 4)), math.cos(i / 10000 ** (2 / 4))]
                    for i in range(3)]) / 2.0

    def ln(v, g, b):
        mu = sum(v) / len(v)
        var = sum((e - mu) ** 2 for e in v) / len(v)
        return [(e - mu) / math.sqrt(var + 1e-5) * gg + bb for e, gg, bb in zip(v, g, b)]

    def lin(v, w, b):
        return [sum(v[i] * w[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]

    def gelu(v):
        return [0.5 * e * (1 + math.erf(e / math.sqrt(2))) for e in v]

    xs = [list(x[0, i] + pos[i]) for i in range(3)]
    a = [ln(r, p["blocks.0.ln1.gamma"], p["blocks.0.ln1.beta"]) for r in xs]
    q = [lin(r, p["blocks.0.attn.wq"], p["blocks.0.attn.bq"]) for r in a]
    k = [lin(r, p["blocks.0.attn.wk"], p["blocks.0.attn.bk"]) for r in a]
    v = [lin(r, p["blocks.0.attn.wv"], p["blocks.0.attn.bv"]) for r in a]
    out = []
    for i in range(3):
        s = [sum(q[i][c] * k[j][c] for c in range(4)) / 2.0 for j in range(i + 1)]
        e = [math.exp(z - max(s)) for z in s]
        w = [z / sum(e) for z in e]
        att = [sum(w[j] * v[j][c] for j in range(i + 1)) for c in range(4)]
        r = [xs[i][c] + o for c, o in enumerate(lin(att, p["blocks.0.attn.wo"], p["blocks.0.attn.bo"]))]
        mm = gelu(lin(ln(r, p["blocks.0.ln2.gamma"], p["blocks.0.ln2.beta"]),
                      p["blocks.0.mlp.w1"], p["blocks.0.mlp.b1"]))
        r = [r[c] + o for c, o in enumerate(lin(mm, p["blocks.0.mlp.w2"], p["blocks.0.mlp.b2"]))]
        out.append(ln(r, p["ln_f.gamma"], p["ln_f.beta"]))
    np.testing.assert_allclose(got, np.array(out), rtol=0, atol=1e-12)


def test_causality(model, rng):
    x = rng.normal(size=(1, 10, 64))
    base = model.forward(gc.Tensor(x)).data
    x2 = x.copy()
    x2[0, -1] += rng.normal(size=64) * 5
    pert = model.forward(gc.Tensor(x2)).data
    np.testing.assert_array_equal(base[0, :-1], pert[0, :-1])


def test_too_long(model):
    with pytest.raises(SequenceTooLong):
        model.forward(gc.Tensor(np.zeros((1, 257, 64))))


def test_lm_logits_dense_algebra(model, rng):
    h = rng.normal(size=64)
    expect = h @ model.params["lm_head.w"].data + model.params["lm_head.b"].data
    got = lm_logits(model, h)
    assert got.shape == (104,)
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-13)
    model.params["lm_head.w"].data[:, 0] += 1.0
    assert lm_logits(model, h)[0] != got[0]


def test_digit_model_never_emits_num(vocab):
    m = SeqModel.create(ModelConfig(), 0, Normalizer(), encoding="digits")
    m.params["lm_head.b"].data[vocab.num_id] = 1e6
    assert m.lm_logits(np.zeros(64))[vocab.num_id] == -np.inf


def test_regress_number_zero_h_and_reference(model, rng):
    # biases zero at init and LN beta zero -> head output is b2 = 0, then de-normalised
    assert regress_number(model.head, np.zeros(64)) == 5.0
    for name in ("num_head.b1", "num_head.ln.beta", "num_head.b2"):
        model.params[name].data[...] = rng.normal(size=model.params[name].shape)
    h = rng.normal(size=64)
    z = oracle.reference_head(P(model), h)
    assert regress_number(model.head, h) == pytest.approx(z * 3.0 + 5.0, abs=1e-12)


def test_end_to_end_gradient_reaches_both_heads_and_projector(model, vocab):
    ids = np.array([_ids(vocab, "a <number_token> b <number_token>")])
    inp = assemble_batch(model, ids, [[1.0, 7.0]])
    h = model.forward(inp)
    z = model.head(gc.gather_rows(h, (np.array([0]), np.array([3]))))
    loss = gc.add(gc.sum_(gc.mul(model.logits(h), gc.Tensor(np.ones(h.shape[:2] + (104,))))),
                  gc.sum_(gc.mul(z, z)))
    model.params.zero_grad()
    loss.backward()
    for name in ("num_proj.w1", "num_proj.w2", "num_head.w1", "num_head.w2", "lm_head.w"):
        assert np.any(model.params[name].grad != 0), name
