import numpy as np
import pytest

from chunktrain.errors import ConfigError
from chunktrain.model import (
    AdamState,
    ModelConfig,
    adam_step,
    desk_config,
    init_params,
    load_checkpoint,
    load_config,
    param_count,
    param_shapes,
    parse_config_text,
    save_checkpoint,
    zeros_like,
)


def test_defaults_follow_training_setup():
    c = ModelConfig()
    assert c.page_size == 128
    assert c.chunk_size == 4096
    assert c.retrieval_budget // c.page_size == 64


def test_desk_defaults():
    c = desk_config()
    assert (c.n_layers, c.d_model, c.n_q_heads, c.n_kv_heads, c.head_dim) == (2, 64, 4, 2, 16)
    assert (c.vocab_size, c.page_size, c.chunk_size) == (256, 16, 64)
    assert c.group == 2


@pytest.mark.parametrize(
    "bad",
    [
        dict(n_q_heads=3),
        dict(chunk_size=40),
        dict(retrieval_budget=24),
        dict(vocab_size=1),
        dict(attention_mode=["dense"]),
        dict(attention_mode="sliding"),
        dict(head_dim=15),
        dict(precision="bf16"),
    ],
)
def test_config_invariants(bad):
    with pytest.raises(ConfigError):
        desk_config(**bad)


def test_init_deterministic():
    c = desk_config()
    a, b = init_params(c, 3), init_params(c, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    other = init_params(c, 4)
    assert not np.array_equal(a["layers.0.Wq"], other["layers.0.Wq"])


def test_init_scale():
    c = desk_config(d_model=64, vocab_size=2048)
    std = init_params(c, 0)["emb"].std()
    assert abs(std - 64**-0.5) < 0.01


def test_param_count_matches_enumeration():
    for c in (desk_config(), desk_config(n_layers=3, attention_mode="dense", d_ff=96, vocab_size=100, n_kv_heads=1)):
        enumerated = sum(int(np.prod(s)) for s in param_shapes(c).values())
        assert param_count(c) == enumerated
        assert sum(p.size for p in init_params(c, 0).values()) == enumerated


def test_precision_sets_dtype():
    assert init_params(desk_config(precision="f64"), 0)["emb"].dtype == np.float64
    assert init_params(desk_config(), 0)["emb"].dtype == np.float32


# -- adam -----------------------------------------------------------------------


def test_adam_zero_grads_is_noop():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.for_params(params)
    adam_step(params, zeros_like(params), state)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert not state.m["w"].any() and not state.v["w"].any()


def test_adam_defaults():
    import inspect

    sig = inspect.signature(adam_step).parameters
    assert sig["lr"].default == 5e-5
    assert (sig["beta1"].default, sig["beta2"].default) == (0.9, 0.98)


def test_adam_matches_closed_form():
    lr, b1, b2, eps = 0.1, 0.9, 0.98, 1e-8
    params = {"w": np.array([2.0])}
    grads = {"w": np.array([1.0])}
    state = AdamState.for_params(params)
    w = 2.0
    m = v = 0.0
    for t in range(1, 4):
        adam_step(params, grads, state, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert params["w"][0] == pytest.approx(w, abs=1e-12)
    # first step of Adam moves by ~lr regardless of gradient scale
    assert grads["w"][0] == 1.0


# -- files ----------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(desk_config(), 0)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    assert raw[:4] == b"OOMB"
    assert int.from_bytes(raw[4:8], "little") == 1
    back = load_checkpoint(path)
    assert set(back) == set(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_config_file(tmp_path):
    p = tmp_path / "model.cfg"
    p.write_text("# desk model\nn_layers = 3\nattention_mode = dense, topk, local\nretrieval_budget = 48  # tokens\nscore_scale = true\n")
    c = load_config(p)
    assert c.n_layers == 3
    assert c.attention_mode == ["dense", "topk", "local"]
    assert c.retrieval_budget == 48 and c.score_scale


def test_config_file_rejects_unknown_key():
    with pytest.raises(ConfigError):
        parse_config_text("colour = blue\n")


def test_config_single_mode_broadcasts():
    assert parse_config_text("attention_mode = topk\n")["attention_mode"] == ["topk", "topk"]
