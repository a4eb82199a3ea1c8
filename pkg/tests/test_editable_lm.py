import numpy as np
import pytest

from conftest import central_diff, random_batch, rel_err
from massedit import lm
from massedit.errors import ShapeError


def _with(model, name, value):
    params = dict(model.parameters())
    params[name] = value
    return model.with_parameters(params)


# ----------------------------------------------------------- model structure

def test_editable_set_must_exist(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.with_editable(("blocks.7.fc2",))
    with pytest.raises(ValueError):
        tiny_model.with_editable(())


def test_select_editable_last_k():
    assert lm.select_editable(8, "second-fc-last-k", 6) == tuple(f"blocks.{b}.fc2" for b in range(2, 8))
    assert lm.select_editable(2, "first-fc-last-k", 6) == ("blocks.0.fc1", "blocks.1.fc1")
    with pytest.raises(ValueError):
        lm.select_editable(2, "middle", 1)


def test_nonfinite_weight_rejected():
    with pytest.raises(ValueError):
        lm.LinearLayer("x", np.array([[np.nan]]), np.zeros(1))


def test_checkpoint_roundtrip(tmp_path, small_model):
    path = tmp_path / "m.bin"
    small_model.save(path)
    back = lm.EditableModel.load(path)
    assert back.editable_set == small_model.editable_set
    for k, v in small_model.parameters().items():
        assert np.array_equal(back.parameters()[k], v)
    small_model.save(tmp_path / "m2.bin")
    assert path.read_bytes() == (tmp_path / "m2.bin").read_bytes()


def test_batch_positions_checked():
    with pytest.raises(ValueError):
        lm.Batch(((1, 2),), ((3,),), ((5,),))
    with pytest.raises(ValueError):
        lm.Batch(((),), ((3,),))


# --------------------------------------------------------- forward_with_cache

def test_perfect_head_gives_zero_loss_and_gradients():
    model = lm.init_model(4, width=4, hidden=6, n_blocks=1, max_len=6, seed=0)
    bias = np.array([0.0, 0.0, 1000.0, 0.0])
    model = _with(_with(model, "head.weight", np.zeros((4, 4))), "head.bias", bias)
    batch = lm.Batch(((0, 1, 3), (1, 1, 1)), ((2,), (2, 2)))
    loss, cache = lm.forward_with_cache(model, batch)
    assert loss == 0.0
    for g in cache.value_grads.values():
        assert np.all(g == 0.0)


def test_token_policy_cache_sizes(small_model):
    batch = lm.Batch(((1, 2, 3, 4, 5),), ((6,),))
    _, ans = lm.forward_with_cache(small_model, batch, "answer")
    _, every = lm.forward_with_cache(small_model, batch, "all")
    for l in small_model.editable_set:
        assert ans.keys[l].shape[0] == 1
        assert every.keys[l].shape[0] == 5


def test_answer_policy_counts_answer_positions(small_model, rng):
    batch = lm.Batch(((1, 2), (3, 4, 5)), ((6, 7, 8), (9,)))
    _, cache = lm.forward_with_cache(small_model, batch)
    assert cache.n == batch.n_answer_tokens() == 4


def test_value_gradients_match_finite_differences(tiny_model, rng):
    # one-token sequences: the value at a position is shifted exactly by the layer bias
    batch = random_batch(rng, 2, 8, 1, 1)
    _, cache = lm.forward_with_cache(tiny_model, batch)
    layer = tiny_model.editable_set[0]
    bias = np.array(tiny_model.layer(layer).bias)
    for i in range(2):
        one = batch.select([i])
        fd = central_diff(lambda b: lm.nll(_with(tiny_model, f"{layer}.bias", b), one), bias)
        assert rel_err(cache.value_grads[layer][i], fd) <= 1e-5


def test_outer_product_identity(small_model, rng):
    batch = random_batch(rng, 3, 16, 4, 2)
    _, cache = lm.forward_with_cache(small_model, batch, "all", weight_grads=True)
    for l in small_model.editable_set:
        recon = cache.value_grads[l].T @ cache.keys[l]
        assert np.max(np.abs(recon - cache.weight_grads[l])) <= 1e-10


def test_weight_gradient_matches_finite_differences(tiny_model, rng):
    batch = random_batch(rng, 2, 8, 3, 2)
    _, cache = lm.forward_with_cache(tiny_model, batch, "all", weight_grads=True)
    layer = tiny_model.editable_set[0]
    W = np.array(tiny_model.layer(layer).weight)
    fd = central_diff(lambda w: lm.nll(_with(tiny_model, f"{layer}.weight", w), batch), W)
    assert rel_err(cache.weight_grads[layer], fd) <= 1e-5


def test_cached_keys_replay_layer_inputs(tiny_model, rng):
    batch = random_batch(rng, 2, 8, 1, 1)
    _, cache = lm.forward_with_cache(tiny_model, batch)
    # one-token sequences, first layer: key = embedding + position 0 (mixing a single token is the identity)
    expected = tiny_model.embedding[[p[0] for p in batch.prompts]] + tiny_model.positional[0]
    assert np.array_equal(cache.keys[tiny_model.editable_set[0]], expected)


def test_forward_with_cache_deterministic_and_subbatch_invariant(small_model, rng):
    batch = random_batch(rng, 5, 16, 3, 2)
    l1, c1 = lm.forward_with_cache(small_model, batch)
    l2, c2 = lm.forward_with_cache(small_model, batch)
    l3, c3 = lm.forward_with_cache(small_model, batch, sub_batch_size=2)
    assert l1 == l2
    for l in small_model.editable_set:
        assert np.array_equal(c1.keys[l], c2.keys[l])
        assert np.allclose(c1.value_grads[l], c3.value_grads[l], rtol=1e-12, atol=1e-14)
    assert abs(l1 - l3) <= 1e-10 * abs(l1)


def test_forward_with_cache_errors(small_model):
    with pytest.raises(ValueError):
        lm.forward_with_cache(small_model, lm.Batch((), ()))
    with pytest.raises(ShapeError):
        lm.forward_with_cache(small_model, lm.Batch(((99,),), ((1,),)))
    with pytest.raises(ShapeError):
        lm.forward_with_cache(small_model, lm.Batch(((1,) * 9,), ((1,),)))


def test_forward_does_not_mutate_model(small_model, rng):
    before = {k: v.copy() for k, v in small_model.parameters().items()}
    lm.forward_with_cache(small_model, random_batch(rng, 2, 16, 3, 1))
    for k, v in small_model.parameters().items():
        assert np.array_equal(before[k], v)


# ---------------------------------------------------------------- apply_shifts

def test_zero_shifts_are_identity(small_model, rng):
    batch = random_batch(rng, 4, 16, 3, 2)
    post = lm.apply_shifts(small_model, {l: np.zeros_like(small_model.layer(l).weight)
                                         for l in small_model.editable_set})
    assert np.array_equal(lm.sequence_log_probs(post, batch), lm.sequence_log_probs(small_model, batch))


def test_annihilating_shift_leaves_bias():
    model = lm.init_model(4, width=3, hidden=5, n_blocks=1, max_len=4, seed=2, residual=False, mix=False,
                          editable_policy="second-fc-last-k", last_k=1)
    layer = "blocks.0.fc2"
    model = _with(model, f"{layer}.bias", np.array([0.5, -1.0, 2.0]))
    post = lm.apply_shifts(model, {layer: -model.layer(layer).weight})
    assert np.all(post.layer(layer).weight == 0.0)
    # without residual the head only sees the bias, so every prompt gets the same distribution
    a = lm.sequence_log_probs(post, lm.Batch(((0,), (3,)), ((1,), (1,))))
    assert a[0] == a[1]


def test_random_shift_equals_substituted_weights(small_model, rng):
    layer = small_model.editable_set[-1]
    S = rng.normal(size=small_model.layer(layer).weight.shape)
    post = lm.apply_shifts(small_model, {layer: S})
    ref = _with(small_model, f"{layer}.weight", small_model.layer(layer).weight + S)
    batch = random_batch(rng, 3, 16, 4, 1)
    assert np.array_equal(lm.sequence_log_probs(post, batch), lm.sequence_log_probs(ref, batch))
    others = [k for k in small_model.parameters() if k != f"{layer}.weight"]
    for k in others:
        assert np.array_equal(post.parameters()[k], small_model.parameters()[k])


def test_apply_shifts_errors(small_model):
    with pytest.raises(ShapeError):
        lm.apply_shifts(small_model, {small_model.editable_set[0]: np.zeros((2, 2))})
    with pytest.raises(ValueError):
        lm.apply_shifts(small_model, {"blocks.0.fc1": np.zeros((12, 8))})


# ------------------------------------------------------ meta_backward_on_weights

def test_identical_models_have_zero_locality(small_model, rng):
    eq, un = random_batch(rng, 3, 16, 3, 1), random_batch(rng, 3, 16, 3, 1)
    _, _, parts = lm.meta_backward_on_weights(small_model, small_model, eq, un, 1.0)
    assert parts["loc"] == 0.0


def test_perfect_generalization_zero_gen_loss():
    model = lm.init_model(4, width=4, hidden=6, n_blocks=1, max_len=6, seed=0)
    model = _with(_with(model, "head.weight", np.zeros((4, 4))), "head.bias", np.array([0, 0, 1000.0, 0]))
    eq = lm.Batch(((1, 2),), ((2,),))
    _, _, parts = lm.meta_backward_on_weights(model, model, eq, eq, 1.0)
    assert parts["gen"] == 0.0


def test_meta_gradient_matches_finite_differences(tiny_model, rng):
    layer = tiny_model.editable_set[0]
    post = lm.apply_shifts(tiny_model, {layer: 0.3 * rng.normal(size=(6, 4))})
    eq, un = random_batch(rng, 2, 8, 3, 2), random_batch(rng, 2, 8, 2, 1)
    _, grads, _ = lm.meta_backward_on_weights(tiny_model, post, eq, un, 0.7)

    def f(w):
        return lm.meta_backward_on_weights(tiny_model, _with(post, f"{layer}.weight", w), eq, un, 0.7)[0]

    assert rel_err(grads[layer], central_diff(f, post.layer(layer).weight)) <= 1e-5


def test_meta_backward_subbatch_accumulation(small_model, rng):
    post = lm.apply_shifts(small_model, {l: 0.1 * rng.normal(size=small_model.layer(l).weight.shape)
                                         for l in small_model.editable_set})
    eq, un = random_batch(rng, 7, 16, 3, 2), random_batch(rng, 5, 16, 3, 1)
    full, g_full, _ = lm.meta_backward_on_weights(small_model, post, eq, un, 0.5)
    part, g_part, _ = lm.meta_backward_on_weights(small_model, post, eq, un, 0.5, sub_batch_size=2)
    assert abs(full - part) <= 1e-8 * abs(full)
    for l in g_full:
        assert rel_err(g_part[l], g_full[l]) <= 1e-8


def test_meta_backward_rejects_negative_coefficient(small_model, rng):
    b = random_batch(rng, 2, 16, 2, 1)
    with pytest.raises(ValueError):
        lm.meta_backward_on_weights(small_model, small_model, b, b, -1.0)
