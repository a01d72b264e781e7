import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpgc import autodiff as ad
from cpgc.autodiff import Tensor, finite_diff_check
from cpgc.errors import ContractError, DegenerateNormError, ShapeError
from cpgc.generator import (EPSILON_V, NoiseSeed, PerturbationGenerator, UapArtifact, cross_attention,
                            generate_image_uap, generate_text_uap, load_generators, project_to_vocab,
                            save_generators)

SMALL = (9, 12, 10, 3072)


def attn_params(rng, d_alpha=6, d=4, d_attn=3):
    def p(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)
    return p(d_alpha, d_attn), p(d, d_attn), p(d, d_attn), p(d_attn, d_alpha)


def test_cross_attention_against_numpy_oracle():
    rng = np.random.default_rng(0)
    wq, wk, wv, wo = attn_params(rng)
    h, cond = rng.normal(size=(1, 6)), rng.normal(size=(5, 4))
    out = cross_attention(h, cond, wq, wk, wv, wo).data
    s = (h @ wq.data) @ (cond @ wk.data).T / np.sqrt(3)
    a = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    np.testing.assert_allclose(out, h + a @ (cond @ wv.data) @ wo.data, atol=1e-12)


def test_cross_attention_zero_query_is_uniform():
    rng = np.random.default_rng(1)
    wq, wk, wv, wo = attn_params(rng)
    wq.data[...] = 0.0
    h, cond = rng.normal(size=(1, 6)), rng.normal(size=(4, 4))
    out = cross_attention(h, cond, wq, wk, wv, wo).data
    np.testing.assert_allclose(out, h + (cond @ wv.data).mean(axis=0) @ wo.data, atol=1e-12)


def test_cross_attention_single_key_ignores_query():
    rng = np.random.default_rng(2)
    wq, wk, wv, wo = attn_params(rng)
    h, cond = rng.normal(size=(1, 6)), rng.normal(size=(1, 4))
    expected = h + cond @ wv.data @ wo.data
    np.testing.assert_allclose(cross_attention(h, cond, wq, wk, wv, wo).data, expected, atol=1e-12)
    wq.data *= 50.0
    np.testing.assert_allclose(cross_attention(h, cond, wq, wk, wv, wo).data, expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_cross_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    wq, wk, wv, wo = attn_params(rng)
    h = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    cond = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = rng.normal(size=(2, 6))
    f = lambda: (cross_attention(h, cond, wq, wk, wv, wo) * w).sum()  # noqa: E731
    assert finite_diff_check(f, [h, cond, wq, wk, wv, wo]) < 1e-4


def test_cross_attention_shape_errors():
    rng = np.random.default_rng(3)
    wq, wk, wv, wo = attn_params(rng)
    with pytest.raises(ShapeError):
        cross_attention(np.ones((1, 5)), np.ones((2, 4)), wq, wk, wv, wo)
    with pytest.raises(ShapeError):
        cross_attention(np.ones((1, 6)), np.ones((2, 7)), wq, wk, wv, wo)
    with pytest.raises(ShapeError):
        cross_attention(np.ones((2, 6)), np.ones((3, 2, 4)), wq, wk, wv, wo)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(-50, 50))
def test_image_uap_is_bounded_for_any_parameters(seed, scale):
    gen = PerturbationGenerator.create("image", seed, cond_dim=4, dims=SMALL)
    for p in gen.parameters():
        p.data *= scale
    cond = np.random.default_rng(seed).normal(size=(3, 4))
    delta = generate_image_uap(NoiseSeed.draw(seed), cond, gen).data
    assert delta.shape == (1, 32, 32, 3)
    assert np.max(np.abs(delta)) <= EPSILON_V


def test_zero_output_layer_gives_zero_perturbation():
    noise = NoiseSeed.draw(0)
    img = PerturbationGenerator.create("image", 0, cond_dim=4, dims=SMALL)
    img.zero_output_layer()
    assert not generate_image_uap(noise, np.ones((2, 4)), img).data.any()
    txt = PerturbationGenerator.create("text", 0, cond_dim=4)
    txt.zero_output_layer()
    out = generate_text_uap(noise, np.ones(4) / 2, txt).data
    assert out.shape == (1, 64) and not out.any()


def test_conditioning_is_live():
    noise = NoiseSeed.draw(1)
    rng = np.random.default_rng(1)
    img = PerturbationGenerator.create("image", 1, cond_dim=4, dims=SMALL)
    a = generate_image_uap(noise, rng.normal(size=(3, 4)), img).data
    b = generate_image_uap(noise, rng.normal(size=(3, 4)), img).data
    assert np.max(np.abs(a - b)) > 0
    txt = PerturbationGenerator.create("text", 1, cond_dim=4)
    c = generate_text_uap(noise, rng.normal(size=4), txt).data
    d = generate_text_uap(noise, rng.normal(size=4), txt).data
    assert c.shape == (1, 64) and np.max(np.abs(c - d)) > 0


def test_generator_without_attention_ignores_condition():
    noise = NoiseSeed.draw(2)
    gen = PerturbationGenerator.create("image", 2, cond_dim=4, dims=SMALL, use_attention=False)
    assert not any(k.startswith("attn") for k in gen.params)
    a = generate_image_uap(noise, None, gen).data
    np.testing.assert_array_equal(a, generate_image_uap(noise, np.ones((1, 4)), gen).data)
    with pytest.raises(ContractError):
        generate_image_uap(noise, None, PerturbationGenerator.create("image", 2, cond_dim=4, dims=SMALL))


def test_image_generator_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    gen = PerturbationGenerator.create("image", 4, cond_dim=4, dims=(9, 6, 5, 3072))
    cond = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(2, 32, 32, 3))
    f = lambda: (generate_image_uap(NoiseSeed.draw(4), cond, gen) * w).sum()  # noqa: E731
    assert finite_diff_check(f, gen.parameters()) < 1e-4


def test_noise_seed_is_reproducible():
    a, b = NoiseSeed.draw(5), NoiseSeed.draw(5)
    np.testing.assert_array_equal(a.z_v, b.z_v)
    assert a.z_v.shape == (3, 3) and a.z_t.shape == (1, 3)


def brute_project(e, table):
    best, best_cos = 0, -np.inf
    for i, row in enumerate(table):
        c = row @ e / (np.linalg.norm(row) * np.linalg.norm(e))
        if c > best_cos:
            best, best_cos = i, c
    return best


def test_project_to_vocab_matches_brute_force():
    rng = np.random.default_rng(6)
    for _ in range(100):
        table = rng.normal(size=(64, 8))
        e = rng.normal(size=8)
        assert project_to_vocab(e, table) == brute_project(e, table)
        assert project_to_vocab(e * rng.uniform(0.1, 10), table) == project_to_vocab(e, table)
    table = rng.normal(size=(64, 8))
    assert project_to_vocab(table[17], table) == 17
    assert project_to_vocab(-table[17], table) == brute_project(-table[17], table)
    dup = table.copy()
    dup[40] = dup[9]
    assert project_to_vocab(dup[9], dup) == 9
    with pytest.raises(DegenerateNormError):
        project_to_vocab(np.zeros(8), table)


def test_artifact_budget_and_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    art = UapArtifact(EPSILON_V * np.tanh(rng.normal(size=(32, 32, 3)) * 10), 21, config={"seed": 3})
    art.save(tmp_path / "a")
    back = UapArtifact.load(tmp_path / "a")
    np.testing.assert_array_equal(back.delta_v, art.delta_v)
    assert back.adversarial_word == 21 and back.config == {"seed": 3}
    with pytest.raises(ContractError):
        UapArtifact(np.full((32, 32, 3), EPSILON_V * 1.0001), None).check_budget()
    with pytest.raises(ContractError):
        UapArtifact(np.zeros((32, 32, 3)), 64).check_budget()
    with pytest.raises(ShapeError):
        UapArtifact(np.zeros((32, 32)), None).check_budget()
    UapArtifact.null().check_budget()


def test_generators_round_trip(tmp_path):
    noise = NoiseSeed.draw(8)
    gens = {"image": PerturbationGenerator.create("image", 8, cond_dim=4, dims=SMALL),
            "text": PerturbationGenerator.create("text", 8, cond_dim=4, use_attention=False)}
    save_generators(tmp_path / "g", noise, gens)
    noise2, back = load_generators(tmp_path / "g")
    np.testing.assert_array_equal(noise2.z_v, noise.z_v)
    cond = np.ones((1, 4))
    for name, gen in gens.items():
        assert back[name].digest() == gen.digest() and back[name].use_attention == gen.use_attention
    np.testing.assert_array_equal(generate_image_uap(noise2, cond, back["image"]).data,
                                  generate_image_uap(noise, cond, gens["image"]).data)


def test_ad_tanh_bound_is_structural():
    # the bound comes from tanh itself, so even huge raw outputs stay inside it
    x = ad.tanh(Tensor(np.array([1e6, -1e6]))).data * EPSILON_V
    assert np.max(np.abs(x)) <= EPSILON_V
