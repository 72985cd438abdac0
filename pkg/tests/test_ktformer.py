import numpy as np
import pytest

from kptpose import frontend, ktformer, nn
from kptpose import tensor as T


def rng():
    return np.random.default_rng(0)


def tokens_matrix(n, d=32, seed=0):
    return T.Tensor(np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32))


# ---------------------------------------------------------------------------
# attention

def test_mha_rejects_indivisible_width():
    with pytest.raises(T.ShapeError):
        ktformer.MultiHeadAttention(rng(), 30, 4)


def test_single_token_self_attention_is_projection_chain():
    mha = ktformer.MultiHeadAttention(rng(), 16, 4)
    x = tokens_matrix(1, 16)
    out, w = mha(x, x)
    # softmax over a single key is 1: output = out(v(x))
    want = mha.out(mha.v(x))
    np.testing.assert_allclose(out.data, want.data, atol=1e-6)
    np.testing.assert_array_equal(w, np.ones((4, 1, 1)))


def test_attention_rows_sum_to_one():
    mha = ktformer.MultiHeadAttention(rng(), 16, 2)
    q = tokens_matrix(5, 16, seed=1)
    kv = tokens_matrix(9, 16, seed=2)
    _, w = mha(q, kv)
    assert w.shape == (2, 5, 9)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_two_token_attention_matches_scalar_oracle():
    mha = ktformer.MultiHeadAttention(rng(), 8, 1)
    x = tokens_matrix(2, 8, seed=3)
    out, w = mha(x, x)
    q = x.data @ mha.q.w.data + mha.q.b.data
    k = x.data @ mha.k.w.data + mha.k.b.data
    v = x.data @ mha.v.w.data + mha.v.b.data
    scores = q @ k.T / np.sqrt(8)
    attn = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn /= attn.sum(axis=1, keepdims=True)
    want = (attn @ v) @ mha.out.w.data + mha.out.b.data
    np.testing.assert_allclose(out.data, want, atol=1e-5)
    np.testing.assert_allclose(w[0], attn, atol=1e-6)


def test_duplicate_token_renormalizes_consistently():
    mha = ktformer.MultiHeadAttention(rng(), 8, 1)
    q = tokens_matrix(1, 8, seed=4)
    kv2 = tokens_matrix(2, 8, seed=5)
    kv3 = T.const(np.concatenate([kv2.data, kv2.data[:1]]))  # duplicate token 0
    _, w2 = mha(q, kv2)
    _, w3 = mha(q, kv3)
    # scalar oracle: duplicated key splits its softmax mass
    np.testing.assert_allclose(w3[0, 0, 0] + w3[0, 0, 2], 2 * w3[0, 0, 0], atol=1e-7)
    e = np.array([w2[0, 0, 0], w2[0, 0, 1], w2[0, 0, 0]])
    np.testing.assert_allclose(w3[0, 0], e / e.sum(), atol=1e-6)


# ---------------------------------------------------------------------------
# encoder

def enc(d=32, layers=2):
    return ktformer.Encoder(rng(), d, layers, 4, 2 * d)


def test_encoder_rejects_zero_tokens():
    with pytest.raises(ktformer.DegenerateFrameError):
        enc()(tokens_matrix(0))


def test_encoder_layer_count_and_shapes():
    e = enc(layers=3)
    x = tokens_matrix(7)
    encoded, logits, attn = e(x)
    assert encoded.data.shape == (7, 32)
    assert len(logits) == 3 and len(attn) == 3
    assert all(l.data.shape == (7, ktformer.N_CLASSES) for l in logits)


def test_encoder_identity_heads_share_parameters():
    e = enc(layers=3)
    # the shared head is literally one module: perturb it, every layer moves
    x = tokens_matrix(4)
    _, logits_a, _ = e(x)
    e.identity_head.proj.b.data = e.identity_head.proj.b.data + 1.0
    _, logits_b, _ = e(x)
    for a, b in zip(logits_a, logits_b):
        np.testing.assert_allclose(b.data - a.data, 1.0, atol=1e-5)


def test_encoder_gradients_accumulate_into_shared_head():
    e = enc(layers=2)
    x = tokens_matrix(3)
    with T.Tape() as tape:
        _, logits, _ = e(x)
        loss = ktformer.identity_loss(logits, [0, 1, 2])
        tape.backward(loss)
    assert e.identity_head.proj.w.grad is not None
    assert np.abs(e.identity_head.proj.w.grad).sum() > 0


def test_encoder_permutation_equivariance_bitwise():
    e = enc()
    x = tokens_matrix(9, seed=11)
    perm = np.random.default_rng(1).permutation(9)
    enc_a, logits_a, _ = e(x)
    enc_b, logits_b, _ = e(T.const(x.data[perm]))
    np.testing.assert_array_equal(enc_b.data, enc_a.data[perm])
    for la, lb in zip(logits_a, logits_b):
        np.testing.assert_array_equal(lb.data, la.data[perm])


def test_encoder_duplicate_tokens_identical_rows():
    e = enc()
    base = tokens_matrix(5, seed=12)
    dup = T.const(np.concatenate([base.data, base.data[2:3]]))
    encoded, _, _ = e(dup)
    np.testing.assert_array_equal(encoded.data[2], encoded.data[5])


# ---------------------------------------------------------------------------
# decoder

def make_decoder(joints_per_hand=20, with_object=True, layers=2, d=32):
    q = ktformer.QuerySet(rng(), d, joints_per_hand, with_object)
    dec = ktformer.Decoder(rng(), d, layers, 4, 2 * d, 3, 6, with_object)
    return q, dec


def test_query_counts_per_representation():
    # 20/hand + extra = 41; 21/hand + extra = 43; 16/hand + extra = 33
    for jph, want in ((20, 41), (21, 43), (16, 33)):
        q = ktformer.QuerySet(rng(), 32, jph, with_object=False)
        assert q.count == want
    q = ktformer.QuerySet(rng(), 32, 20, with_object=True)
    assert q.count == 43  # +2 object queries


def test_decoder_layer_outputs_and_cross_attention():
    q, dec = make_decoder()
    encoded = tokens_matrix(6, seed=13)
    outs, cross = dec(q, encoded)
    assert len(outs) == 2 and len(cross) == 2
    for raw in outs:
        assert raw["joints"].data.shape == (40, 3)
        assert raw["extra"].data.shape == (6,)
        assert raw["obj_rot"].data.shape == (6,)
        assert raw["obj_trans"].data.shape == (3,)
    for w in cross:
        assert w.shape == (4, 43, 6)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_decoder_single_token_attention_is_one():
    q, dec = make_decoder()
    _, cross = dec(q, tokens_matrix(1, seed=14))
    for w in cross:
        np.testing.assert_allclose(w, 1.0, atol=1e-7)


def test_decoder_pose_heads_shared_across_layers():
    q, dec = make_decoder(layers=3)
    encoded = tokens_matrix(4, seed=15)
    with T.Tape() as tape:
        outs, _ = dec(q, encoded)
        total = T.mean(T.concat([o["joints"] for o in outs], axis=0))
        tape.backward(total)
    # one shared projection accumulates gradient from all three layers
    assert dec.heads.joint_proj.w.grad is not None
    assert len(dec.layers) == 3


def test_rotation_head_bias_initialized_to_identity():
    q, dec = make_decoder()
    np.testing.assert_array_equal(dec.heads.rot_proj.b.data, [1, 0, 0, 0, 1, 0])


# ---------------------------------------------------------------------------
# association

def kp(u, v, source=frontend.HAND_SOURCE):
    return frontend.Keypoint((u, v), 1.0, source)


def _uv(px, size=32):
    return (px + 0.5) / size


def test_associate_exact_hit():
    gt = np.zeros((2, 21, 2))
    gt[0, 7] = [10.0, 12.0]
    valid = np.zeros((2, 21), bool)
    valid[0, 7] = True
    targets = ktformer.associate_keypoints(
        [kp(_uv(10.0), _uv(12.0))], gt, valid, 3.0, (32, 32))
    assert targets.tolist() == [7]


def test_associate_background_when_far():
    gt = np.zeros((2, 21, 2))
    gt[0, 0] = [5.0, 5.0]
    valid = np.zeros((2, 21), bool)
    valid[0, 0] = True
    targets = ktformer.associate_keypoints(
        [kp(_uv(20.0), _uv(20.0))], gt, valid, 3.0, (32, 32))
    assert targets.tolist() == [ktformer.BACKGROUND_CLASS]


def test_associate_tie_takes_lower_class_index():
    gt = np.zeros((2, 21, 2))
    gt[0, 4] = [8.0, 10.0]
    gt[1, 2] = [12.0, 10.0]  # classes 4 and 23, keypoint equidistant
    valid = np.zeros((2, 21), bool)
    valid[0, 4] = valid[1, 2] = True
    targets = ktformer.associate_keypoints(
        [kp(_uv(10.0), _uv(10.0))], gt, valid, 3.0, (32, 32))
    assert targets.tolist() == [4]


def test_associate_object_source_gets_object_class():
    gt = np.zeros((2, 21, 2))
    valid = np.ones((2, 21), bool)
    targets = ktformer.associate_keypoints(
        [kp(0.5, 0.5, frontend.OBJECT_SOURCE)], gt, valid, 3.0, (32, 32))
    assert targets.tolist() == [ktformer.OBJECT_CLASS]


def test_associate_matches_exhaustive_oracle():
    rngx = np.random.default_rng(9)
    gt = rngx.uniform(0, 31, (2, 21, 2))
    valid = rngx.uniform(0, 1, (2, 21)) > 0.3
    kps = [kp(_uv(x), _uv(y)) for x, y in rngx.uniform(0, 31, (40, 2))]
    got = ktformer.associate_keypoints(kps, gt, valid, 3.0, (32, 32))
    for i, k in enumerate(kps):
        px = np.array([k.uv[0] * 32 - 0.5, k.uv[1] * 32 - 0.5])
        best, bd = ktformer.BACKGROUND_CLASS, np.inf
        for cls in range(42):
            h, j = divmod(cls, 21)
            if not valid[h, j]:
                continue
            d = np.linalg.norm(px - gt[h, j])
            if d < bd:
                bd, best = d, cls
        want = best if bd <= 3.0 else ktformer.BACKGROUND_CLASS
        assert got[i] == want


def test_associate_rejects_bad_gamma():
    with pytest.raises(ValueError):
        ktformer.associate_keypoints([], np.zeros((2, 21, 2)), np.ones((2, 21), bool),
                                     0.0, (32, 32))


# ---------------------------------------------------------------------------
# identity loss

def test_identity_loss_uniform_is_log_classes():
    logits = [T.const(np.zeros((3, 44), np.float32))]
    loss = ktformer.identity_loss(logits, [0, 1, 2])
    np.testing.assert_allclose(float(loss.data), 3 * np.log(44), rtol=1e-5)


def test_identity_loss_one_hot_limit():
    strong = np.full((2, 44), -50.0, np.float32)
    strong[0, 5] = strong[1, 9] = 50.0
    loss = ktformer.identity_loss([T.const(strong)], [5, 9])
    assert float(loss.data) < 1e-6


def test_identity_loss_matches_scalar_oracle_and_layer_average():
    rngx = np.random.default_rng(4)
    l1 = rngx.standard_normal((5, 44)).astype(np.float32)
    l2 = rngx.standard_normal((5, 44)).astype(np.float32)
    targets = [3, 40, 42, 43, 0]

    def ce_sum(mat):
        tot = 0.0
        for row, t in zip(mat, targets):
            e = np.exp(row - row.max())
            tot += -np.log(e[t] / e.sum())
        return tot

    loss = ktformer.identity_loss([T.const(l1), T.const(l2)], targets)
    np.testing.assert_allclose(float(loss.data), (ce_sum(l1) + ce_sum(l2)) / 2, rtol=1e-5)


def test_trained_identity_argmax_matches_targets():
    # encoder invariant: once the summed CE is < 0.1, argmax identity
    # recovers the association target nearly everywhere (here: all tokens)
    rngx = np.random.default_rng(6)
    d = 32
    x = T.const(rngx.standard_normal((8, d)).astype(np.float32))
    targets = np.array([0, 1, 2, 3, 42, 43, 21, 25])
    e = ktformer.Encoder(rngx, d, 1, 4, 64)
    params = [p for _, p in e.params()]
    opt = T.Adam(params, lr=3e-3)
    loss_val = np.inf
    for _ in range(400):
        with T.Tape() as tape:
            _, logits, _ = e(x)
            loss = ktformer.identity_loss(logits, targets)
            tape.backward(loss)
        opt.step()
        opt.zero_grad()
        loss_val = float(loss.data)
        if loss_val < 0.1:
            break
    assert loss_val < 0.1
    _, logits, _ = e(x)
    pred = np.argmax(logits[-1].data, axis=1)
    assert (pred == targets).mean() > 0.9


def test_export_cross_attention_structure():
    q, dec = make_decoder()
    kps = [kp(0.2, 0.3), kp(0.7, 0.6)]
    _, cross = dec(q, tokens_matrix(2, seed=16))
    out = ktformer.export_cross_attention(cross, kps, q)
    assert len(out) == 2
    entry = out[-1]["queries"][0]
    assert entry["query"] == "joint:right:0"
    assert len(entry["keypoints"]) == 2
    w = sum(k["weight"] for k in entry["keypoints"])
    np.testing.assert_allclose(w, 1.0, atol=1e-5)
