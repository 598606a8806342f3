import json
import math

import numpy as np
import pytest
import torch

from topicflow.contrastive import ContrastiveConfig, total_loss_terms
from topicflow.encoder import (
    EncoderConfig, EncoderModel, encode, encode_gradients, encode_many, load_checkpoint, pad_batch,
    save_checkpoint,
)
from topicflow.tensorio import CheckpointError

from gradcheck import fd_check


def tiny(**kw):
    base = dict(vocab_size=20, n=8, max_positions=8, seed=3)
    base.update(kw)
    return EncoderModel(EncoderConfig(**base))


def numpy_forward(model, tokens):
    """Independent forward pass written with plain numpy."""
    p = {k: v for k, v in model.tensors().items()}
    n = model.n
    toks = [t for t in tokens]
    x = p["embed"][toks]
    if model.config.use_attention:
        x = x + p["pos"][: len(toks)]
        q, k, v = x @ p["wq"], x @ p["wk"], x @ p["wv"]
        s = q @ k.T / math.sqrt(n)
        s = s - s.max(axis=1, keepdims=True)
        a = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
        x = x + a @ v @ p["wo"]
    m = x.mean(axis=0)
    return m + p["w2"] @ np.tanh(p["w1"] @ m + p["b1"]) + p["b2"]


def test_single_token_identity_projection_is_embedding_row():
    model = tiny(use_attention=False, projection_init="identity")
    h = encode([7], model)
    np.testing.assert_array_equal(h, model.embed[7].detach().numpy())


def test_duplicate_tokens_same_as_one():
    model = tiny(use_attention=False)
    np.testing.assert_allclose(encode([7, 7], model), encode([7], model), atol=1e-15)


def test_forward_matches_numpy_oracle():
    model = tiny()
    with torch.no_grad():
        model.b1.copy_(torch.linspace(-0.3, 0.3, 8, dtype=torch.float64))
        model.b2.copy_(torch.linspace(0.2, -0.2, 8, dtype=torch.float64))
    np.testing.assert_allclose(encode([6, 11, 4], model), numpy_forward(model, [6, 11, 4]), rtol=0, atol=1e-9)


def test_padding_invariance():
    model = tiny()
    a = model.encode_batch([[6, 7, 8]])
    b = model(torch.tensor([[6, 7, 8, 0, 0]]))
    torch.testing.assert_close(a, b, rtol=0, atol=1e-12)
    batch = encode_many([[6, 7, 8], [9]], model)
    np.testing.assert_allclose(batch[0], encode([6, 7, 8], model), atol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    model = tiny()
    grads = encode_gradients([[6, 7], [8, 9, 10]], model, np.zeros((2, 8)))
    assert all(np.all(g == 0) for g in grads.values())


def test_upstream_shape_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        encode_gradients([[6, 7]], tiny(), np.zeros((2, 8)))


def test_vjp_matches_finite_differences():
    model = tiny()
    upstream = np.random.default_rng(0).normal(size=(2, 8))
    seqs = [[6, 7, 12], [8, 9]]
    seeds = [5, 6]
    up = torch.as_tensor(upstream)
    worst = fd_check(list(model.named_parameters()),
                     lambda: (model.encode_batch(seqs, seeds) * up).sum())
    assert max(worst.values()) < 1e-4, worst
    grads = encode_gradients(seqs, model, upstream, seeds)
    again = encode_gradients(seqs, model, upstream, seeds)
    for k in grads:
        assert np.array_equal(grads[k], again[k])


@pytest.mark.parametrize("mode", ["literal", "weighted"])
def test_total_loss_gradients_match_finite_differences(mode):
    model = tiny(dropout_rate=0.2)
    cfg = ContrastiveConfig(tau=0.5, lambda1_mode=mode)
    tokens = [[6, 7, 8], [9, 10], [11, 12, 13, 14], [15, 6]]
    views_b = [[6, 8], [9, 10, 3], [11, 12, 14], [15, 6]]
    mask = np.array([False, True, False])

    def loss():
        ha = model.encode_batch(tokens, [1, 2, 3, 4])
        hb = model.encode_batch(views_b, [None, None, None, 9])
        h = model.encode_batch(tokens)
        return total_loss_terms(ha, hb, h, mask, cfg)["loss_total"]

    worst = fd_check(list(model.named_parameters()), loss)
    assert max(worst.values()) < 1e-4, worst


def test_train_mode_dropout_is_seeded():
    model = tiny(dropout_rate=0.3)
    a = encode([6, 7, 8], model, mode="train", seed=4)
    b = encode([6, 7, 8], model, mode="train", seed=4)
    c = encode([6, 7, 8], model, mode="train", seed=5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    with pytest.raises(ValueError):
        encode([6], model, mode="train")


def test_out_of_range_token():
    with pytest.raises(ValueError):
        encode([25], tiny())


def test_pad_batch():
    assert pad_batch([[1, 2], [3]]).tolist() == [[1, 2], [3, 0]]


def test_checkpoint_roundtrip(tmp_path):
    model = tiny()
    path = tmp_path / "enc.json"
    save_checkpoint(model, path, "abc")
    loaded = load_checkpoint(path, "abc")
    for k, v in model.tensors().items():
        assert np.array_equal(v, loaded.tensors()[k])


def test_checkpoint_wrong_vocab(tmp_path):
    path = tmp_path / "enc.json"
    save_checkpoint(tiny(), path, "abc")
    with pytest.raises(CheckpointError, match="vocabulary hash"):
        load_checkpoint(path, "other")


def test_checkpoint_unknown_version(tmp_path):
    path = tmp_path / "enc.json"
    save_checkpoint(tiny(), path, "abc")
    env = json.loads(path.read_text())
    env["format_version"] = 99
    path.write_text(json.dumps(env))
    with pytest.raises(CheckpointError, match="99.*1"):
        load_checkpoint(path, "abc")


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, n=1)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, dropout_rate=1.0)
