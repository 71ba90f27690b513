"""Dual-encoder model: encoder contracts, the contrastive loss, training
behavior, and checkpoint persistence."""

import math

import numpy as np
import pytest

from uaplab import synthdata, toyvlp
from uaplab.autodiff import Graph
from uaplab.rng import Rng
from uaplab.toyvlp import (CheckpointError, TrainConfig, TrainingError,
                           contrastive_loss, encode_image, encode_text,
                           init_params, load_checkpoint, save_checkpoint,
                           train)


@pytest.fixture(scope="module")
def small_data():
    return synthdata.generate_dataset(3, 48, 12)


@pytest.fixture(scope="module")
def params():
    return init_params(3)


# --------------------------------------------------------------------------
# encoders
# --------------------------------------------------------------------------

def test_encode_image_unit_rows_and_determinism(params, small_data):
    train, _ = small_data
    emb = encode_image(params, train.images[:6])
    assert emb.shape == (6, 32)
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)
    again = encode_image(params, train.images[:6])
    assert np.array_equal(emb, again)


def test_identical_images_identical_rows(params, small_data):
    train, _ = small_data
    stack = np.stack([train.images[0], train.images[0]])
    emb = encode_image(params, stack)
    assert np.array_equal(emb[0], emb[1])


def test_image_mean_pool_matches_per_patch_average(params, small_data):
    """Brute-force oracle: per-patch features computed independently, then
    averaged, must reproduce the tower's pooled vector."""
    train, _ = small_data
    img = train.images[0]
    feats = []
    for py in range(4):
        for px in range(4):
            patch = img[py * 4:(py + 1) * 4, px * 4:(px + 1) * 4, :].ravel()
            j = py * 4 + px
            pre = patch @ params.patch_w + params.patch_b + params.img_pos[j]
            feats.append(np.tanh(pre))
    pooled = np.mean(feats, axis=0)
    h = np.tanh(pooled @ params.img_w1 + params.img_b1)
    out = h @ params.img_w2 + params.img_b2
    expected = out / np.linalg.norm(out)
    got = encode_image(params, img[None])[0]
    assert np.allclose(got, expected, atol=1e-12)


def test_text_mean_over_nonpad_matches_brute_force(params, small_data):
    train, _ = small_data
    tokens = train.tokens[0]
    live = [t for t in tokens if t != synthdata.PAD]
    feats = [np.tanh(params.tok_embed[tok] + params.pos_embed[p])
             for p, tok in enumerate(live)]
    pooled = np.sum(feats, axis=0) / len(live)
    h = np.tanh(pooled @ params.txt_w1 + params.txt_b1)
    out = h @ params.txt_w2 + params.txt_b2
    expected = out / np.linalg.norm(out)
    got = encode_text(params, tokens[None])[0]
    assert np.allclose(got, expected, atol=1e-12)


def test_text_unit_rows(params, small_data):
    train, _ = small_data
    emb = encode_text(params, train.tokens[:8])
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)


def test_override_with_own_embedding_is_identity(params, small_data):
    train, _ = small_data
    tokens = train.tokens[:4]
    positions = np.full(4, 2)
    plain = encode_text(params, tokens)
    # all four sequences share position 2, but tokens differ, so check one
    # sequence at a time with its own embedding
    for i in range(4):
        vec = params.tok_embed[tokens[i, 2]] + 0.0
        out = encode_text(params, tokens[i:i + 1], override_positions=positions[i:i + 1],
                          override_vector=vec)
        assert np.allclose(out[0], plain[i], atol=1e-12)


def test_override_position_out_of_range(params, small_data):
    train, _ = small_data
    with pytest.raises(ValueError, match="out of range"):
        encode_text(params, train.tokens[:1], override_positions=[8],
                    override_vector=np.zeros(32))


# --------------------------------------------------------------------------
# contrastive loss
# --------------------------------------------------------------------------

def test_contrastive_loss_orthonormal_closed_form():
    """Two pairs with identity-like embeddings: J = ln(1 + exp(-1/tau))."""
    g = Graph()
    e = np.eye(2)
    img = g.leaf(e)
    txt = g.leaf(e)
    j = toyvlp.contrastive_node(g, img, txt, 0.07)
    expected = math.log1p(math.exp(-1.0 / 0.07))
    assert np.isclose(float(j.data), expected, rtol=1e-12)
    assert float(j.data) < 1e-5


def test_contrastive_loss_nonnegative_and_permutation_invariant(params, small_data):
    train, _ = small_data
    imgs, toks = train.images[:8], train.tokens[:8]
    j = contrastive_loss(params, imgs, toks)
    assert j >= 0.0
    perm = [3, 1, 7, 0, 5, 2, 6, 4]
    j_perm = contrastive_loss(params, imgs[perm], toks[perm])
    assert np.isclose(j, j_perm, rtol=1e-12)


def test_contrastive_loss_gradient_matches_finite_differences(small_data):
    train, _ = small_data
    params = init_params(17)
    imgs, toks = train.images[:4], train.tokens[:4]

    g = Graph()
    pn = toyvlp.param_leaves(g, params, requires_grad=True)
    img_emb = toyvlp.image_tower(g, pn, g.leaf(toyvlp.flatten_images(imgs)))
    txt_emb, _ = toyvlp.text_tower(g, pn, toks)
    loss = toyvlp.contrastive_node(g, img_emb, txt_emb, params.temperature)
    g.backward(loss)

    rng = Rng(4)
    eps = 1e-6
    worst = 0.0
    for name in toyvlp.PARAM_SHAPES:
        arr = getattr(params, name)
        leaf = pn[name]
        for _ in range(3):  # spot-check entries of every parameter tensor
            idx = tuple(rng.below(s) for s in arr.shape)
            if name == "img_pos":
                ana = leaf[idx[0]].grad
                ana = 0.0 if ana is None else ana[idx[1]]
            else:
                ana = 0.0 if leaf.grad is None else leaf.grad[idx]
            keep = arr[idx]
            arr[idx] = keep + eps
            lp = contrastive_loss(params, imgs, toks)
            arr[idx] = keep - eps
            lm = contrastive_loss(params, imgs, toks)
            arr[idx] = keep
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    assert worst <= 1e-4


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def test_train_zero_lr_keeps_params_bit_exact(small_data):
    train_set, _ = small_data
    params = init_params(5)
    out, curve = train(params, train_set, TrainConfig(lr=0.0, epochs=2, batch=8, seed=1))
    for name in toyvlp.PARAM_SHAPES:
        assert np.array_equal(getattr(out, name), getattr(params, name)), name
    assert len(curve) == 2


def test_train_same_seed_same_checkpoint(tmp_path, small_data):
    train_set, _ = small_data
    cfg = TrainConfig(epochs=2, batch=8, seed=9)
    out1, curve1 = train(init_params(5), train_set, cfg)
    out2, curve2 = train(init_params(5), train_set, cfg)
    assert curve1 == curve2
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(out1, p1)
    save_checkpoint(out2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_train_loss_trend_and_alignment(small_data):
    train_set, _ = small_data
    out, curve = train(init_params(5), train_set, TrainConfig(epochs=8, batch=8, seed=2))
    assert curve[-1] < curve[0]
    img = encode_image(out, train_set.images)
    txt = encode_text(out, train_set.tokens)
    sim = img @ txt.T
    diag = np.mean(np.diag(sim))
    off = (sim.sum() - np.trace(sim)) / (sim.size - len(sim))
    assert diag > off


def test_train_validates_config(small_data):
    train_set, _ = small_data
    with pytest.raises(TrainingError):
        train(init_params(1), train_set, TrainConfig(lr=-1.0))
    with pytest.raises(TrainingError):
        train(init_params(1), train_set, TrainConfig(batch=1))
    with pytest.raises(TrainingError):
        train(init_params(1), train_set, TrainConfig(batch=4096))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = init_params(21)
    p1 = tmp_path / "m.ckpt"
    save_checkpoint(params, p1)
    loaded = load_checkpoint(p1)
    for name in toyvlp.PARAM_SHAPES:
        assert np.array_equal(getattr(loaded, name), getattr(params, name))
    assert loaded.temperature == params.temperature
    p2 = tmp_path / "m2.ckpt"
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(1), path)
    blob = bytearray(path.read_bytes())
    blob[0] = 0
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_crc_guard(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(1), path)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(path)


def test_checkpoint_truncated_section_named(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(1), path)
    blob = path.read_bytes()
    # cut inside the first tensor section, then re-append a valid CRC so the
    # section parser (not the CRC guard) reports the problem
    import struct
    import zlib
    cut = blob[:300]
    path.write_bytes(cut + struct.pack("<I", zlib.crc32(cut)))
    with pytest.raises(CheckpointError, match="truncated tensor section"):
        load_checkpoint(path)
