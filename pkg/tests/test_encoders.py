import numpy as np
import pytest

from dcp import numerics as nx
from dcp.encoders import (EncoderParams, encode_image, encode_text, image_forward, init_encoder, param_count,
                          text_config, text_forward, text_states, vision_config)
from dcp.numerics import ContractError, Tensor

from oracles import central_difference, image_encoder_loop, rel_error, text_encoder_loop


def toy_vision(n_layers=2, **kw):
    cfg = vision_config(n_layers=n_layers, model_dim=8, n_heads=2, ffn_dim=12, max_seq=12, embed_dim=5,
                        patch_dim=3, **kw)
    return cfg, _jitter(init_encoder(cfg, 3))


def toy_text(n_layers=1, **kw):
    cfg = text_config(n_layers=n_layers, model_dim=8, n_heads=2, ffn_dim=12, max_seq=12, embed_dim=5,
                      vocab_size=9, **kw)
    return cfg, _jitter(init_encoder(cfg, 4))


def _jitter(params):
    # hand-set weights: every array nonzero and O(1) so the oracle comparison is not trivial
    rng = np.random.default_rng(11)
    arrays = {k: v + rng.normal(0, 0.3, size=v.shape) for k, v in params.arrays.items()}
    return EncoderParams(params.config, arrays)


# --- init ---------------------------------------------------------------------

def test_same_seed_same_checksum():
    cfg = vision_config()
    assert init_encoder(cfg, 5).checksum() == init_encoder(cfg, 5).checksum()


def test_different_seed_different_checksum():
    cfg = text_config()
    assert init_encoder(cfg, 5).checksum() != init_encoder(cfg, 6).checksum()


@pytest.mark.parametrize("cfg", [vision_config(), text_config(), toy_vision()[0], toy_text(3)[0],
                                 vision_config(n_layers=1, model_dim=16, ffn_dim=7, patch_dim=5)])
def test_param_count_closed_form_matches_enumeration(cfg):
    assert init_encoder(cfg, 0).n_params() == param_count(cfg)


def test_init_scheme():
    p = init_encoder(vision_config(), 0).arrays
    assert np.all(p["layer0.ln1.g"] == 1) and np.all(p["layer0.attn.bq"] == 0)
    assert abs(p["layer0.attn.wq"].std() - 0.02) < 0.002


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        vision_config(model_dim=10, n_heads=4)


# --- vision -----------------------------------------------------------------------

def test_prompt_free_identity_layer_passes_class_token_through():
    cfg, params = toy_vision(n_layers=1)
    a = dict(params.arrays)
    a["layer0.attn.wo"][:] = 0
    a["layer0.attn.bo"][:] = 0
    a["layer0.ffn.w2"][:] = 0
    a["layer0.ffn.b2"][:] = 0
    patches = np.random.default_rng(0).normal(size=(4, 3))
    out = encode_image(EncoderParams(cfg, a), patches).data
    cls = a["cls"] + a["pos"][0]
    mu, var = cls.mean(), cls.var()
    head = (cls - mu) / np.sqrt(var + cfg.ln_eps) * a["ln_final.g"] + a["ln_final.b"]
    np.testing.assert_allclose(out, head @ a["proj"], atol=1e-13)


def test_patch_permutation_symmetry_without_positions():
    cfg, params = toy_vision()
    params.arrays["pos"][:] = 0
    rng = np.random.default_rng(1)
    patches = rng.normal(size=(5, 3))
    prompts = [Tensor(rng.normal(size=(2, 8))) for _ in range(2)]
    a = encode_image(params, patches, prompts).data
    b = encode_image(params, patches[rng.permutation(5)], prompts).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("n_prompt_layers", [0, 1, 2])
def test_two_layer_vision_matches_loop_oracle(n_prompt_layers):
    cfg, params = toy_vision()
    rng = np.random.default_rng(2)
    patches = rng.normal(size=(4, 3))
    prompts = [rng.normal(size=(2, 8)) for _ in range(n_prompt_layers)]
    fast = encode_image(params, patches, [Tensor(p) for p in prompts]).data
    slow = image_encoder_loop(params.arrays, cfg, patches, prompts)
    assert np.abs(fast - slow).max() <= 1e-10


def test_batched_image_matches_single():
    cfg, params = toy_vision()
    rng = np.random.default_rng(3)
    patches = rng.normal(size=(3, 4, 3))
    prompts = [Tensor(rng.normal(size=(2, 8)))]
    batch = encode_image(params, patches, prompts).data
    for i in range(3):
        np.testing.assert_allclose(batch[i], encode_image(params, patches[i], prompts).data, atol=1e-13)


def test_vision_contract_errors():
    cfg, params = toy_vision()
    patches = np.zeros((4, 3))
    with pytest.raises(ContractError):
        encode_image(params, patches, [Tensor(np.zeros((2, 7)))])
    with pytest.raises(ContractError):
        encode_image(params, patches, [Tensor(np.zeros((2, 8)))] * 3)
    with pytest.raises(ContractError):
        encode_image(params, np.zeros((4, 2)))
    with pytest.raises(ContractError):
        encode_image(params, np.zeros((9, 3)), [Tensor(np.zeros((3, 8)))])  # 1+3+9 > max_seq


def _corrupt_slots(layer, m):
    def hook(i, seq):
        if i == layer:
            noise = np.random.default_rng(99).normal(0, 5.0, size=seq.shape)
            noise[:, 0] = 0
            noise[:, 1 + m:] = 0
            return nx.add(seq, Tensor(noise))
        return seq
    return hook


def test_previous_prompt_outputs_are_discarded_within_depth():
    cfg, params = toy_vision(n_layers=3)
    rng = np.random.default_rng(4)
    patches = rng.normal(size=(1, 4, 3))
    prompts = [Tensor(rng.normal(size=(2, 8))) for _ in range(3)]
    w = params.tensors()
    clean = image_forward(w, cfg, patches, prompts).data
    # outputs of layers 0 and 1 at the slots are replaced by prompts 1 and 2
    for layer in (0, 1):
        hit = image_forward(w, cfg, patches, prompts, after_layer=_corrupt_slots(layer, 2)).data
        assert np.array_equal(clean, hit)
    # past depth N=2 the slot outputs do flow on
    hit = image_forward(w, cfg, patches, prompts[:2], after_layer=_corrupt_slots(1, 2)).data
    assert not np.allclose(image_forward(w, cfg, patches, prompts[:2]).data, hit)


def test_image_gradient_wrt_prompts_finite_differences():
    cfg, params = toy_vision()
    rng = np.random.default_rng(5)
    patches = rng.normal(size=(2, 4, 3))
    p0, p1 = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    wvec = rng.normal(size=(2, 5))
    w = params.tensors()

    def f(a, b):
        return float(np.sum(image_forward(w, cfg, patches, [Tensor(a), Tensor(b)]).data * wvec))

    t0, t1 = Tensor(p0, requires_grad=True), Tensor(p1, requires_grad=True)
    with nx.Tape():
        loss = nx.sum_all(nx.mul(image_forward(w, cfg, patches, [t0, t1]), Tensor(wvec)))
    g = nx.backward(loss)
    assert rel_error(g[t0], central_difference(lambda x: f(x, p1), p0)) <= 1e-4
    assert rel_error(g[t1], central_difference(lambda x: f(p0, x), p1)) <= 1e-4


# --- text -------------------------------------------------------------------------

def test_identical_sequences_identical_embeddings():
    cfg, params = toy_text(2)
    prompts = [Tensor(np.random.default_rng(6).normal(size=(3, 8)))]
    out = encode_text(params, [[5, 6], [7, 8], [5, 6]], prompts).data
    assert np.array_equal(out[0], out[2])


def test_no_prompts_means_plain_frozen_encoder():
    cfg, params = toy_text(2)
    a = encode_text(params, [5, 6, 7]).data
    b = encode_text(params, [5, 6, 7], []).data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("n_layers,n_prompt_layers", [(1, 0), (1, 1), (2, 2)])
def test_text_matches_loop_oracle(n_layers, n_prompt_layers):
    cfg, params = toy_text(n_layers)
    rng = np.random.default_rng(7)
    prompts = [rng.normal(size=(3, 8)) for _ in range(n_prompt_layers)]
    ids = [5, 8, 6]
    fast = encode_text(params, ids, [Tensor(p) for p in prompts]).data
    slow = text_encoder_loop(params.arrays, cfg, ids, prompts)
    assert np.abs(fast - slow).max() <= 1e-10


def test_ragged_sequences_match_individual_encoding():
    cfg, params = toy_text(2)
    prompts = [Tensor(np.random.default_rng(8).normal(size=(2, 8)))]
    batch = encode_text(params, [[5], [6, 7, 8]], prompts).data
    np.testing.assert_allclose(batch[0], encode_text(params, [5], prompts).data, atol=1e-13)
    np.testing.assert_allclose(batch[1], encode_text(params, [6, 7, 8], prompts).data, atol=1e-13)


def test_causality():
    cfg, params = toy_text(2)
    w = params.tensors()
    prompts = [Tensor(np.random.default_rng(9).normal(size=(2, 8)))]
    a, _ = text_states(w, cfg, [[5, 6, 7, 8]], prompts)
    b, _ = text_states(w, cfg, [[5, 6, 2, 3]], prompts)
    j = 1 + 2 + 2 - 1  # last position holding an unchanged token
    assert np.array_equal(a.data[:, :j + 1], b.data[:, :j + 1])
    assert not np.allclose(a.data[:, j + 1:], b.data[:, j + 1:])


def test_text_overflow_and_bad_ids():
    cfg, params = toy_text()
    with pytest.raises(ContractError):
        encode_text(params, [5] * 8, [Tensor(np.zeros((3, 8)))])
    with pytest.raises(ContractError):
        encode_text(params, [5, 9])


def test_text_gradient_wrt_prompts_finite_differences():
    cfg, params = toy_text(2)
    rng = np.random.default_rng(10)
    p0, p1 = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    seqs = [[5, 6], [7]]
    wvec = rng.normal(size=(2, 5))
    w = params.tensors()

    def f(a, b):
        return float(np.sum(text_forward(w, cfg, seqs, [Tensor(a), Tensor(b)]).data * wvec))

    t0, t1 = Tensor(p0, requires_grad=True), Tensor(p1, requires_grad=True)
    with nx.Tape():
        loss = nx.sum_all(nx.mul(text_forward(w, cfg, seqs, [t0, t1]), Tensor(wvec)))
    g = nx.backward(loss)
    assert rel_error(g[t0], central_difference(lambda x: f(x, p1), p0)) <= 1e-4
    assert rel_error(g[t1], central_difference(lambda x: f(p0, x), p1)) <= 1e-4
