from dataclasses import replace
from statistics import NormalDist

import numpy as np
import pytest
import scipy.ndimage as ndi
from hypothesis import given, settings
from hypothesis import strategies as st

from cpgc import attack as atk
from cpgc.attack import (AttackConfig, apply_uap, augment_batch, augment_image_set, bilinear_matrix, combined_loss,
                         contrastive_loss, distance_loss, image_step_loss, rescale_operator, select_farthest,
                         select_farthest_texts, substitute_word, word_importance)
from cpgc.autodiff import Tape, Tensor, finite_diff_check
from cpgc.corpus import MASK_ID, generate_corpus
from cpgc.encoders import encode_image, encode_text, init_model
from cpgc.errors import ContractError, TrainingFailure
from cpgc.generator import EPSILON_V, NoiseSeed, PerturbationGenerator, UapArtifact, generate_image_uap

SMALL_IMG = (9, 8, 6, 3072)


@pytest.fixture(scope="module")
def model():
    return init_model("mean_pool", 0)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(48, 16, 3, "A", 3)


def unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# -- config ------------------------------------------------------------------

def test_config_defaults_and_validation():
    c = AttackConfig()
    assert (c.epsilon_v, c.epsilon_t, c.tau, c.lam, c.K, c.B, c.N) == (12 / 255, 1, 0.1, 0.1, 3, 8, 5)
    assert c.learning_rate == 2e-4 and c.noise_sigma == 0.5
    for bad in ({"B": 1}, {"tau": 0.0}, {"lam": -1.0}, {"K": 0}, {"epsilon_t": 2}, {"epsilon_v": 0.0},
                {"scales": (1.0,)}, {"variant": "nope"}, {"loss_mode": "l1"}):
        with pytest.raises(ContractError):
            AttackConfig(**bad)
    assert AttackConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ContractError):
        AttackConfig.from_dict({"lamda": 0.1})


# -- augmentation ------------------------------------------------------------

@pytest.mark.parametrize("n_out", [16, 24, 32, 40, 48])
def test_bilinear_matrix_matches_scipy_zoom(n_out):
    x = np.random.default_rng(n_out).uniform(size=(32, 32, 3))
    r = bilinear_matrix(32, n_out)
    ours = np.einsum("ij,jkc,lk->ilc", r, x, r)
    ref = ndi.zoom(x, (n_out / 32, n_out / 32, 1), order=1, grid_mode=True, mode="nearest")
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_augment_set_matches_resize_round_trip():
    x = np.random.default_rng(0).uniform(size=(2, 32, 32, 3))
    scales = (0.5, 0.75, 1.0, 1.25, 1.5)
    out = augment_batch(x, scales, None).data
    assert out.shape == (2, 5, 32, 32, 3)
    for i, s in enumerate(scales):
        mid = int(round(32 * s))
        down = ndi.zoom(x[0], (mid / 32, mid / 32, 1), order=1, grid_mode=True, mode="nearest")
        back = ndi.zoom(down, (32 / mid, 32 / mid, 1), order=1, grid_mode=True, mode="nearest")
        np.testing.assert_allclose(out[0, i], back, atol=1e-12)
    np.testing.assert_array_equal(rescale_operator(1.0), np.eye(32))


def test_identity_augmentation_and_cardinality():
    img = np.random.default_rng(1).uniform(size=(32, 32, 3))
    assert np.allclose(augment_image_set(img, (1.0,) * 5, 0.0, 0)[0], img, atol=1e-15)
    outs = augment_image_set(img, (0.5, 0.75, 1.0, 1.25, 1.5), 0.5, 0)
    assert len(outs) == 5 and all(0 <= o.min() and o.max() <= 1 for o in outs)
    np.testing.assert_array_equal(outs[2], augment_image_set(img, (0.5, 0.75, 1.0, 1.25, 1.5), 0.5, 0)[2])


def test_augmentation_noise_std_is_half():
    # on a mid-gray image the clamp hides the noise, but the clamped fraction
    # still pins its scale: P(x + n >= 1) = 1 - Phi(0.5 / sigma)
    img = np.full((32, 32, 3), 0.5)
    outs = np.concatenate([np.stack(augment_image_set(img, (1.0,) * 5, 0.5, s)) for s in range(4)])
    for frac in (np.mean(outs >= 1.0), np.mean(outs <= 0.0)):
        sigma = 0.5 / NormalDist().inv_cdf(1 - frac)
        assert abs(sigma - 0.5) < 0.025
    assert outs.size > 10_000


def test_augmentation_is_differentiable():
    x = Tensor(np.random.default_rng(2).uniform(0.2, 0.8, size=(1, 32, 32, 3)), requires_grad=True)
    w = np.random.default_rng(3).normal(size=(1, 2, 32, 32, 3))
    noise = np.random.default_rng(4).normal(0, 0.05, size=(1, 2, 32, 32, 3))
    assert finite_diff_check(lambda: (augment_batch(x, (0.75, 1.25), noise) * w).sum(), [x],
                             max_coords=200) < 1e-4


# -- farthest selection ------------------------------------------------------

def test_select_farthest_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(100):
        b, m = int(rng.integers(2, 10)), int(rng.integers(1, 4))
        anchor, cands = unit(rng, 6), unit(rng, b, m, 6)
        if rng.uniform() < 0.2:
            cands[-1] = cands[0]
        dists = [np.mean([np.linalg.norm(anchor - c) for c in cand]) for cand in cands]
        best = max(range(b), key=lambda i: (dists[i], -i))
        assert select_farthest(anchor, cands) == best


def test_select_farthest_texts(model, corpus):
    s = corpus.train
    own = [s.caption(0, j) for j in range(3)]
    other = next(i for i in range(1, len(s)) if s.class_ids[i] != s.class_ids[0])
    far = [s.caption(other, j) for j in range(3)]
    near = [own[0][::-1], own[1], own[2]]
    idx, pos = select_farthest_texts(s.images[0], [near, far], model, K=2)
    assert len(pos) == 2
    _, pos = select_farthest_texts(s.images[0], [near, far], model, K=5)
    assert len(pos) == 3
    with pytest.raises(ContractError):
        select_farthest_texts(s.images[0], [far, own], model, K=3, matched_set=own)
    with pytest.raises(ContractError):
        select_farthest_texts(s.images[0], [far], model, K=3)


def test_select_farthest_texts_brute_force(model, corpus):
    s = corpus.train
    rng = np.random.default_rng(6)
    for _ in range(20):
        i = int(rng.integers(len(s)))
        cand = [int(c) for c in rng.choice([j for j in range(len(s)) if j != i], size=4, replace=False)]
        sets = [[s.caption(c, j) for j in range(3)] for c in cand]
        anchor = encode_image(model, s.images[i]).data
        dists = [np.mean([np.linalg.norm(anchor - encode_text(model, t).data) for t in st_]) for st_ in sets]
        idx, _ = select_farthest_texts(s.images[i], sets, model, K=3)
        assert idx == int(np.argmax(dists))


def test_choose_positive_variants():
    d = np.array([[0.1, 0.9, 0.5], [0.7, 0.2, 0.3]])
    assert atk.choose_positive("full", d).tolist() == [1, 0]
    assert atk.choose_positive("random_positives", d).tolist() == [0, 0]
    # with a single candidate there is nothing to choose between
    one = d[:, :1]
    assert atk.choose_positive("full", one).tolist() == atk.choose_positive("random_positives", one).tolist()


def test_sample_candidates_excludes_self():
    rng = np.random.default_rng(7)
    exclude = rng.integers(0, 10, size=500)
    draws = atk.sample_candidates(rng, 10, exclude, 8)
    assert draws.shape == (500, 8)
    assert np.all(draws != exclude[:, None]) and draws.min() >= 0 and draws.max() < 10


# -- losses ------------------------------------------------------------------

def test_contrastive_loss_symmetric_case():
    e = np.array([[1.0, 0.0]])
    loss = contrastive_loss(e, np.repeat(e, 3, 0), np.repeat(e, 3, 0), 0.1).item()
    assert loss == pytest.approx(np.log(0.5), abs=1e-12)
    assert loss == pytest.approx(-0.6931, abs=1e-4)


def test_contrastive_loss_closed_form():
    a = np.array([[1.0, 0.0]])
    neg = np.array([[0.0, 1.0]])
    loss = contrastive_loss(a, neg, a, 0.1).item()
    assert loss == pytest.approx(-np.log1p(np.exp(10.0)), abs=1e-12)
    assert loss == pytest.approx(-10.0000454, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 4), st.integers(1, 4),
       st.floats(0.1, 2.0))
def test_contrastive_loss_is_negative_with_exact_gradients(seed, n, m, k, tau):
    rng = np.random.default_rng(seed)
    a = Tensor(unit(rng, n, 4), requires_grad=True)
    neg, pos = unit(rng, m, 4), unit(rng, k, 4)
    assert contrastive_loss(a, neg, pos, tau).item() < 0
    assert finite_diff_check(lambda: contrastive_loss(a, neg, pos, tau), [a]) < 1e-4


def test_contrastive_loss_batched_matches_loop():
    rng = np.random.default_rng(8)
    a, neg, pos = unit(rng, 3, 5, 4), unit(rng, 3, 2, 4), unit(rng, 3, 3, 4)
    batched = contrastive_loss(a, neg, pos, 0.1).data
    np.testing.assert_allclose(batched, [contrastive_loss(a[i], neg[i], pos[i], 0.1).item() for i in range(3)],
                               atol=1e-12)
    with pytest.raises(ContractError):
        contrastive_loss(a[0], neg[0][:0], pos[0], 0.1)
    with pytest.raises(ContractError):
        contrastive_loss(a[0], neg[0], pos[0], 0.0)


def test_distance_loss_examples():
    e = np.array([[1.0, 0.0]])
    assert distance_loss(e, e).item() == 0.0
    pair = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert distance_loss(pair, pair).item() == pytest.approx(-2 * np.sqrt(2), abs=1e-12)
    with pytest.raises(ContractError):
        distance_loss(pair, e)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_distance_loss_bounds_and_gradient(seed, n):
    rng = np.random.default_rng(seed)
    a = Tensor(unit(rng, n, 4), requires_grad=True)
    b = unit(rng, n, 4)
    val = distance_loss(a, b).item()
    assert -2 * n * n <= val <= 0
    brute = -sum(np.linalg.norm(a.data[i] - b[j]) for i in range(n) for j in range(n))
    assert val == pytest.approx(brute, abs=1e-12)
    assert finite_diff_check(lambda: distance_loss(a, b), [a]) < 1e-4


def test_alternative_losses():
    a = np.array([[[1.0, 0.0]]])
    t = np.array([[[0.6, 0.8], [1.0, 0.0]]])
    assert atk.alternative_loss("cos", a, t).item() == pytest.approx(0.8)
    # maximizing squared distance: -mean ||a - t||^2
    assert atk.alternative_loss("mse", a, t).item() == pytest.approx(-np.mean([0.8, 0.0]))
    with pytest.raises(ContractError):
        atk.alternative_loss("l1", a, t)


# -- word importance and application -----------------------------------------

def brute_importance(tokens, model):
    base = encode_text(model, tokens).data
    scores = []
    for i in range(len(tokens)):
        masked = list(tokens)
        masked[i] = MASK_ID
        scores.append(np.linalg.norm(base - encode_text(model, masked).data))
    return np.array(scores)


def test_word_importance_matches_brute_force(model):
    rng = np.random.default_rng(9)
    for _ in range(100):
        toks = rng.integers(2, 64, size=int(rng.integers(1, 9))).tolist()
        scores, pos = word_importance(toks, model)
        ref = brute_importance(toks, model)
        np.testing.assert_allclose(scores, ref, atol=1e-12)
        assert pos == int(np.argmax(scores))
        assert ref[pos] >= ref.max() - 1e-12


def test_word_importance_edge_cases(model):
    assert word_importance([30], model)[1] == 0
    toks = [5, 6, 40, 7, 8, 40, 9]
    scores, _ = word_importance(toks, model)
    assert scores[2] == pytest.approx(scores[5], abs=1e-12)
    # a sentence of one repeated word ties everywhere; the leftmost wins
    assert word_importance([12] * 6, model)[1] == 0


def test_apply_uap_identity_and_validity(model, corpus):
    toks = corpus.test.caption(0, 0)
    _, pos = word_importance(toks, model)
    art = UapArtifact(np.zeros((32, 32, 3)), toks[pos])
    adv = apply_uap(corpus.test.images[0], toks, art, model)
    np.testing.assert_array_equal(adv.image, corpus.test.images[0])
    assert adv.tokens == toks and adv.degenerate
    rng = np.random.default_rng(10)
    art = UapArtifact(EPSILON_V * np.sign(rng.normal(size=(32, 32, 3))), 33)
    adv = apply_uap(corpus.test.images[1], corpus.test.caption(1, 0), art, model)
    assert adv.image.min() >= 0.0 and adv.image.max() <= 1.0


def test_apply_uap_changes_at_most_one_token(model):
    big = generate_corpus(10, 200, 3, "A", 11)
    rng = np.random.default_rng(11)
    count = 0
    for i in range(len(big.test)):
        for j in range(3):
            if count == 500:
                break
            toks = big.test.caption(i, j)
            art = UapArtifact(np.zeros((32, 32, 3)), int(rng.integers(64)))
            adv = apply_uap(big.test.images[i], toks, art, model)
            assert sum(a != b for a, b in zip(toks, adv.tokens)) <= 1
            assert len(adv.tokens) == len(toks)
            count += 1
    assert count == 500


def test_substitute_word_vectorized(model, corpus):
    toks, lens, _ = corpus.test.flat_captions()
    pos = atk.importance_positions(toks, lens, model)
    out = substitute_word(toks, pos, 50)
    assert np.all((out != toks).sum(axis=1) <= 1)
    np.testing.assert_array_equal(substitute_word(toks, pos, None), toks)
    for r in range(5):
        assert pos[r] == word_importance(toks[r, : lens[r]].tolist(), model)[1]


# -- objectives and training -------------------------------------------------

def small_setup(seed, model, corpus, config):
    rng = np.random.default_rng(seed)
    gen = PerturbationGenerator.create("image", seed, cond_dim=model.d, dims=SMALL_IMG)
    idx = rng.choice(len(corpus.train), size=2, replace=False)
    imgs = corpus.train.images[idx]
    _, cap = model.embed_split(corpus.train)
    cap = cap.reshape(len(corpus.train), 3, -1)
    others = [int(j) for j in rng.choice(np.setdiff1d(np.arange(len(corpus.train)), idx), size=2, replace=False)]
    positives = cap[others][:, : config.K]
    noise = rng.normal(0, config.noise_sigma, size=(2, config.N, 32, 32, 3))
    cond = cap[idx].mean(axis=1, keepdims=True)
    return gen, imgs, cond, cap[idx], positives, noise


@pytest.mark.parametrize("seed", range(2))
def test_combined_loss_gradient_matches_finite_differences(model, corpus, seed):
    config = AttackConfig(seed=seed)
    gen, imgs, cond, neg, pos, noise = small_setup(seed, model, corpus, config)
    seed_noise = NoiseSeed.draw(seed)

    def f():
        l_cl, l_dis = image_step_loss(config, model, seed_noise, gen, imgs, cond, neg, pos, noise)
        return combined_loss(config, l_cl, l_dis)

    assert finite_diff_check(f, gen.parameters(), max_coords=30, rng=np.random.default_rng(seed)) < 1e-4


def test_lambda_zero_leaves_contrastive_loss_alone(model, corpus):
    config = AttackConfig(lam=0.0)
    gen, imgs, cond, neg, pos, noise = small_setup(0, model, corpus, config)
    l_cl, l_dis = image_step_loss(config, model, NoiseSeed.draw(0), gen, imgs, cond, neg, pos, noise)
    assert combined_loss(config, l_cl, l_dis).item() == pytest.approx(float(l_cl.data.mean()), abs=1e-15)
    assert float(l_dis.data.mean()) < 0
    no_cl = replace(config, lam=0.1, variant="no_CL")
    assert combined_loss(no_cl, l_cl, l_dis).item() == pytest.approx(0.1 * float(l_dis.data.mean()), abs=1e-15)


def test_single_step_pulls_positives_and_pushes_negatives(model, corpus):
    # one Adam step on the contrastive term should raise sum s(anchor, pos) - sum s(anchor, neg)
    config = AttackConfig(lam=0.0, noise_sigma=0.0)
    wins = 0
    for trial in range(100):
        gen, imgs, cond, neg, pos, _ = small_setup(1000 + trial, model, corpus, config)
        gen = PerturbationGenerator.create("image", trial, cond_dim=model.d)
        noise = NoiseSeed.draw(trial)
        img, c, ng, ps = imgs[:1], cond[:1], neg[:1], pos[:1]

        def margin():
            delta = generate_image_uap(noise, c, gen).data
            adv = atk.augment_batch(np.clip(img + delta, 0, 1), config.scales, None).data.reshape(-1, 32, 32, 3)
            e = model.encode_images(adv).data
            return np.exp(e @ ps[0].T / config.tau).sum() - np.exp(e @ ng[0].T / config.tau).sum()

        before = margin()
        opt = atk.ad.Adam(gen.parameters(), learning_rate=1e-4)
        with Tape() as tape:
            l_cl, l_dis = image_step_loss(config, model, noise, gen, img, c, ng, ps, None)
            total = combined_loss(config, l_cl, l_dis)
        tape.backward(total)
        opt.step()
        wins += margin() >= before
    assert wins >= 95


def test_nan_loss_raises_training_failure(model, corpus, monkeypatch):
    config = AttackConfig(epochs=1, batch_pairs=16, steps_per_epoch=1, train_text=False, reference_size=4)
    real = atk.image_objective

    def poisoned(*args, **kwargs):
        l_cl, l_dis = real(*args, **kwargs)
        return l_cl * np.nan, l_dis

    monkeypatch.setattr(atk, "image_objective", poisoned)
    with pytest.raises(TrainingFailure) as err:
        atk.train_uap(corpus, model, config)
    assert err.value.iteration == 0


@pytest.fixture(scope="module")
def quick_config():
    return AttackConfig(epochs=2, batch_pairs=16, steps_per_epoch=2, reference_size=4)


def test_training_is_deterministic_and_within_budget(model, corpus, quick_config):
    a = atk.train_uap(corpus, model, quick_config)
    b = atk.train_uap(corpus, model, quick_config)
    np.testing.assert_array_equal(a.artifact.delta_v, b.artifact.delta_v)
    assert a.artifact.adversarial_word == b.artifact.adversarial_word
    assert [r.total for r in a.trace] == [r.total for r in b.trace]
    assert np.max(np.abs(a.artifact.delta_v)) <= quick_config.epsilon_v
    assert 0 <= a.artifact.adversarial_word < 64
    assert {r.branch for r in a.trace} == {"image", "text"}
    assert a.artifact.method == "cpgc"


@pytest.mark.parametrize("variant", ["no_CL", "no_Dis", "random_positives", "no_cross_attention"])
def test_variants_train_and_name_themselves(model, corpus, quick_config, variant):
    r = atk.train_uap(corpus, model, replace(quick_config, variant=variant))
    assert r.artifact.method == f"cpgc_{variant}"
    if variant == "no_CL":
        assert all(row.l_cl == 0.0 and row.total == pytest.approx(row.l_dis, rel=1e-12) for row in r.trace)
    if variant == "no_Dis":
        assert all(row.l_dis == 0.0 for row in r.trace)
    if variant == "no_cross_attention":
        assert not any(k.startswith("attn") for g in r.generators.values() for k in g.params)


@pytest.mark.parametrize("mode", ["mse", "cos"])
def test_loss_modes_train(model, corpus, quick_config, mode):
    r = atk.train_uap(corpus, model, replace(quick_config, loss_mode=mode))
    assert r.artifact.method == f"cpgc_loss_{mode}"


def test_other_orders_and_emission_rules(model, corpus, quick_config):
    for cfg in (replace(quick_config, perturb_order="augment_then_add"),
                replace(quick_config, reference_rule="mean_condition")):
        art = atk.train_uap(corpus, model, cfg).artifact
        art.check_budget()


def test_write_trace(tmp_path, model, corpus, quick_config):
    r = atk.train_uap(corpus, model, replace(quick_config, train_text=False))
    path = atk.write_trace(r.trace, tmp_path / "t.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "branch,epoch,iteration,L_CL,L_Dis,total"
    assert len(lines) == 1 + len(r.trace)
    assert len(r.epoch_means("image")) == 2


def test_baselines(model, corpus, quick_config):
    gap = atk.baseline_gap_train(corpus, model, quick_config)
    assert gap.artifact.method == "gap" and gap.artifact.adversarial_word is None
    assert np.max(np.abs(gap.artifact.delta_v)) <= quick_config.epsilon_v
    noise = atk.random_noise_uap(quick_config, model)
    assert np.all(np.abs(noise.delta_v) == quick_config.epsilon_v)
    np.testing.assert_array_equal(noise.delta_v, atk.random_noise_uap(quick_config).delta_v)
