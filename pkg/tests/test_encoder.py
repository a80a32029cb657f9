from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmlop.encoder import (
    BackboneConfig,
    BackboneError,
    build_anchor,
    build_backbone,
    encode_classes,
    encode_image,
    encode_text,
    load_backbone,
    save_backbone,
    text_sequence,
    vision_sequence,
    zero_shot_predict,
)
from mmlop.prompts import PromptConfig, init_stack, materialize
from mmlop.tensor import ShapeError

SMALL = BackboneConfig(d_in=4, d_v=8, d_t=6, d_out=5, n_layers=3, n_heads=2, n_patches=3, n_words=2,
                       n_templates=4, fit_samples=128)


@pytest.fixture(scope="module")
def bb():
    return build_backbone(SMALL)


def stack_for(bb, depth=2, length=2, mode="shared", seed=0, init_std=0.5):
    cfg = PromptConfig(mode=mode, depth=depth, length=length, v_length=length, rank=1,
                       d_v=bb.d_v, d_t=bb.d_t, init_std=init_std)
    return init_stack(cfg, seed)


# ---------------------------------------------------------------- plain numpy oracle


def ref_ln(x, g, b):
    mu = sum(x) / len(x)
    var = sum((xi - mu) ** 2 for xi in x) / len(x)
    return np.array([(xi - mu) / math.sqrt(var + 1e-5) for xi in x]) * g + b


def ref_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def ref_block(p, prefix, X, causal, n_heads):
    n, d = X.shape
    dh = d // n_heads
    w = lambda k: p[f"{prefix}.{k}"]  # noqa: E731
    H = np.array([ref_ln(row, w("ln1_g"), w("ln1_b")) for row in X])
    attn = np.zeros_like(X)
    for h in range(n_heads):
        c = slice(h * dh, (h + 1) * dh)
        Q, K, V = H @ w("Wq")[:, c], H @ w("Wk")[:, c], H @ w("Wv")[:, c]
        for i in range(n):
            keys = range(i + 1) if causal else range(n)
            s = np.array([Q[i] @ K[j] / math.sqrt(dh) for j in keys])
            a = np.exp(s - s.max())
            a /= a.sum()
            ctx = sum(a[t] * V[j] for t, j in enumerate(keys))
            attn[i] += ctx @ w("Wo")[c, :]
    X = X + attn
    out = np.zeros_like(X)
    for i in range(n):
        h2 = ref_ln(X[i], w("ln2_g"), w("ln2_b"))
        out[i] = X[i] + ref_gelu(h2 @ w("W1") + w("b1")) @ w("W2") + w("b2")
    return out


def ref_encode(bb, tower, content, prompts=None):
    """One unbatched sample. ``prompts`` is a list of per-layer (n, d) arrays."""
    p, cfg = bb.params, bb.config
    prompts = prompts or []
    if tower == "v":
        X = np.vstack([p["v.cls"], content @ p["v.patch_proj"]]) + p["v.pos"][: len(content) + 1]
    else:
        X = np.vstack([p["t.sos"], content @ p["t.tok_proj"], p["t.eos"]]) + p["t.pos"][: len(content) + 2]
    n_p = len(prompts[0]) if prompts else 0
    for layer in range(cfg.n_layers):
        if layer < len(prompts):
            P = prompts[layer]
            if tower == "v":
                rest = X if layer == 0 else X[n_p:]
                X = np.vstack([P, rest])
            else:
                rest = X[1:] if layer == 0 else X[1 + n_p:]
                X = np.vstack([X[:1], P, rest])
        X = ref_block(p, f"{tower}.block{layer}", X, tower == "t", cfg.n_heads)
    tok = X[n_p] if tower == "v" else X[-1]
    h = ref_ln(tok, p[f"{tower}.ln_out_g"], p[f"{tower}.ln_out_b"]) @ p[f"{tower}.proj"]
    return h / np.linalg.norm(h)


def test_single_block_identity_oracle():
    cfg = BackboneConfig(d_in=4, d_v=4, d_t=4, d_out=4, n_layers=1, n_heads=1, n_patches=3, n_words=2,
                         n_templates=2, identity=True)
    bb = build_backbone(cfg)
    for k in ("v.patch_proj", "t.tok_proj", "v.proj", "t.proj"):
        assert np.array_equal(bb.params[k], np.eye(4))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    assert np.max(np.abs(encode_image(bb, None, x).data - ref_encode(bb, "v", x))) < 1e-10
    assert np.max(np.abs(encode_text(bb, None, y).data - ref_encode(bb, "t", y))) < 1e-10


@pytest.mark.parametrize("depth", [0, 1, 2, 3])
@pytest.mark.parametrize("mode", ["shared", "independent", "full"])
def test_prompted_forward_matches_oracle(bb, depth, mode):
    stack = stack_for(bb, depth=depth, mode=mode, seed=depth) if depth else None
    prompts_v = [materialize(stack, l)[0].data for l in range(1, depth + 1)] if depth else []
    prompts_t = [materialize(stack, l)[1].data for l in range(1, depth + 1)] if depth else []
    rng = np.random.default_rng(depth)
    xs = rng.normal(size=(2, 3, 4))
    ys = rng.normal(size=(2, 3, 4))
    fv = encode_image(bb, stack, xs).data
    ft = encode_text(bb, stack, ys).data
    for i in range(2):
        assert np.max(np.abs(fv[i] - ref_encode(bb, "v", xs[i], prompts_v))) < 1e-10
        assert np.max(np.abs(ft[i] - ref_encode(bb, "t", ys[i], prompts_t))) < 1e-10


# ---------------------------------------------------------------- contracts


def test_depth_zero_stack_matches_no_stack(bb):
    x = np.random.default_rng(1).normal(size=(4, 3, 4))
    zero = stack_for(bb, depth=0)
    assert np.array_equal(encode_image(bb, None, x).data, encode_image(bb, zero, x).data)
    y = np.random.default_rng(2).normal(size=(4, 3, 4))
    assert np.array_equal(encode_text(bb, None, y).data, encode_text(bb, zero, y).data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_features_unit_norm(seed):
    bb = build_backbone(SMALL)
    rng = np.random.default_rng(seed)
    stack = stack_for(bb, depth=int(rng.integers(0, 4)), seed=seed)
    f = encode_image(bb, stack, rng.normal(size=(3, 3, 4)) * 3).data
    g = encode_text(bb, stack, rng.normal(size=(3, 3, 4)) * 3).data
    assert np.allclose(np.linalg.norm(f, axis=1), 1, atol=1e-9)
    assert np.allclose(np.linalg.norm(g, axis=1), 1, atol=1e-9)


def test_prompted_text_differs(bb):
    words = np.random.default_rng(3).normal(size=(2, 4))
    plain = encode_classes(bb, None, words).data
    prompted = encode_classes(bb, stack_for(bb, depth=2), words).data
    assert np.max(np.abs(plain - prompted)) > 1e-3


def test_identical_sequences_identical_features(bb):
    w = np.random.default_rng(4).normal(size=4)
    g = encode_classes(bb, stack_for(bb), np.stack([w, w])).data
    assert np.array_equal(g[0], g[1])


def test_single_input_returns_vector(bb):
    x = np.random.default_rng(5).normal(size=(3, 4))
    assert encode_image(bb, None, x).shape == (SMALL.d_out,)
    assert np.array_equal(encode_image(bb, None, x).data, encode_image(bb, None, x[None]).data[0])


def test_token_sequence_helpers():
    seq = text_sequence(np.ones((3, 4)), np.zeros((2, 4)))
    assert seq.tokens.shape == (3, 3, 4)
    assert seq.special_indices(2) == {"sos": 0, "eos": 6}
    assert vision_sequence(np.ones((5, 4))).special_indices(3) == {"cls": 3}


def test_width_mismatch_errors(bb):
    wrong = PromptConfig(mode="shared", depth=1, length=2, v_length=2, rank=1, d_v=bb.d_v + 1, d_t=bb.d_t)
    with pytest.raises(ShapeError):
        encode_image(bb, init_stack(wrong, 0), np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        encode_image(bb, None, np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        encode_text(bb, None, np.zeros((3, 7)))


def test_depth_beyond_backbone_rejected(bb):
    with pytest.raises(ShapeError):
        encode_image(bb, stack_for(bb, depth=4), np.zeros((3, 4)))


def test_backbone_weights_read_only(bb):
    with pytest.raises(ValueError):
        bb.params["v.block0.Wq"][0, 0] = 1.0


def test_build_is_deterministic():
    assert build_backbone(SMALL).checksum() == build_backbone(SMALL).checksum()
    assert build_backbone(SMALL).checksum() != build_backbone(replace(SMALL, seed=1)).checksum()


def test_invalid_backbone_config():
    with pytest.raises(BackboneError):
        build_backbone(replace(SMALL, n_heads=3))
    with pytest.raises(BackboneError):
        build_backbone(replace(SMALL, identity=True))


# ---------------------------------------------------------------- serialization


def test_backbone_roundtrip(bb, tmp_path):
    save_backbone(bb, tmp_path / "b.mmbb")
    back = load_backbone(tmp_path / "b.mmbb")
    assert back.config == bb.config
    assert back.checksum() == bb.checksum()
    assert all(np.array_equal(back.params[k], v) for k, v in bb.params.items())


@pytest.mark.parametrize("damage", ["magic", "flip", "truncate", "append"])
def test_backbone_corruption_detected(bb, tmp_path, damage):
    path = tmp_path / "b.mmbb"
    save_backbone(bb, path)
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[0:5] = b"XXXXX"
    elif damage == "flip":
        raw[300] ^= 0xFF
    elif damage == "truncate":
        raw = raw[:-100]
    else:
        raw += b"\x00" * 8
    path.write_bytes(bytes(raw))
    with pytest.raises(BackboneError):
        load_backbone(path)


# ---------------------------------------------------------------- zero-shot anchor


def test_anchor_single_template_equals_encode_text(bb):
    words = np.random.default_rng(6).normal(size=(3, 4))
    tpl = bb.templates[1]
    anchor = build_anchor(bb, words, [tpl])
    # renormalizing an already unit vector may move the last bit
    assert np.max(np.abs(anchor.features - encode_text(bb, None, text_sequence(words, tpl)).data)) <= 1e-15


def test_anchor_duplicate_template_invariance(bb):
    words = np.random.default_rng(7).normal(size=(3, 4))
    once = build_anchor(bb, words, bb.templates[:2]).features
    twice = build_anchor(bb, words, bb.templates[[0, 0, 1, 1]]).features
    assert np.allclose(once, twice, atol=1e-15)


def test_anchor_matches_sum_divide_normalize(bb):
    rng = np.random.default_rng(8)
    words = rng.normal(size=(4, 4))
    tpls = rng.normal(size=(3, 2, 4))
    expected = np.zeros((4, SMALL.d_out))
    for t in tpls:
        for k in range(4):
            expected[k] += ref_encode(bb, "t", np.vstack([t, words[k]]))
    expected /= 3
    expected /= np.linalg.norm(expected, axis=1, keepdims=True)
    assert np.max(np.abs(build_anchor(bb, words, tpls).features - expected)) < 1e-12


def test_anchor_empty_templates(bb):
    with pytest.raises(BackboneError):
        build_anchor(bb, np.ones((2, 4)), np.zeros((0, 2, 4)))


def test_anchor_default_uses_all_templates(bb):
    anchor = build_anchor(bb, np.ones((2, 4)))
    assert anchor.n_templates == SMALL.n_templates
    assert np.allclose(np.linalg.norm(anchor.features, axis=1), 1, atol=1e-12)


def test_zero_shot_hand_value():
    g = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = zero_shot_predict(np.array([1.0, 0.0]), g, tau=1.0)
    assert p == pytest.approx([math.e / (math.e + 1), 1 / (math.e + 1)], abs=1e-12)


def test_zero_shot_identical_anchors_uniform():
    g = np.tile([0.6, 0.8], (5, 1))
    assert np.allclose(zero_shot_predict(np.array([1.0, 0.0]), g, 0.01), 0.2, atol=1e-15)


def test_zero_shot_empty_rejected():
    with pytest.raises(BackboneError):
        zero_shot_predict(np.ones(2) / np.sqrt(2), np.zeros((0, 2)), 0.01)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 9))
def test_zero_shot_argmax_is_nearest(seed, n_classes):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(n_classes, 6))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    f = rng.normal(size=6)
    f /= np.linalg.norm(f)
    cosines = [float(f @ gk) for gk in g]
    assert int(np.argmax(zero_shot_predict(f, g, 0.01))) == cosines.index(max(cosines))


def test_default_backbone_zero_shot_separates_prototypes():
    # sanity of the fitted projections: noiseless prototypes are classified by the anchor
    bb = build_backbone()
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    x = np.repeat(q[:, None, :], bb.config.n_patches, axis=1)
    pred = zero_shot_predict(encode_image(bb, None, x).data, build_anchor(bb, q), bb.tau).argmax(1)
    assert np.array_equal(pred, np.arange(8))
