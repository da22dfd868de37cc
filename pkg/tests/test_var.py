import math

import numpy as np
import pytest

from hvar import tensor as T
from hvar.resample import interpolate
from hvar.quantizer import Codebook, PhiFilter, TokenSequence
from hvar.var import (CLASS_FREE, PairSet, Sampler, VarConfig, VarTrainConfig, VarTransformer,
                      attention_mask, classifier_free_guidance, generate, group_ids, loss_ce,
                      loss_dpo, sequence_log_prob, train_var, var_losses)


TINY = VarConfig(depth=1, heads=2, width=8, vocab_size=16, latent_dim=4,
                 resolutions=(1, 2, 4), scales=(0.25, 0.5, 1.0))
SMALL = VarConfig(depth=2, heads=2, width=16, vocab_size=16, latent_dim=4,
                  resolutions=(1, 2, 4), scales=(0.25, 0.5, 1.0))
PAPER = VarConfig(depth=1, heads=1, width=8, vocab_size=4096, latent_dim=32,
                  resolutions=(4, 6, 8, 10, 14, 16, 20, 24, 28, 32))


def _setup(cfg, seed=0, batch=2):
    rng = np.random.default_rng(seed)
    cb = Codebook(rng.normal(size=(cfg.vocab_size, cfg.latent_dim)))
    phi = PhiFilter(cfg.latent_dim)
    phi.weight.data[...] = rng.normal(0, 0.05, size=phi.weight.shape)
    top = cfg.resolutions[-1]
    feats = rng.normal(size=(batch, cfg.latent_dim, top, top))
    levels = [rng.integers(0, cfg.vocab_size, size=(batch, r, r)) for r in cfg.resolutions]
    return cb, phi, feats, levels


# configuration and layout ---------------------------------------------------------
def test_config_validation():
    with pytest.raises(ValueError):
        VarConfig(width=10, heads=3)
    with pytest.raises(ValueError):
        VarConfig(num_classes=2)


def test_sequence_lengths():
    assert PAPER.prefix_length == 1 + 1024
    assert PAPER.sequence_length == 1 + 1024 + 3452
    assert TINY.sequence_length == 1 + 16 + 21


def test_mask_is_block_lower_triangular_by_group():
    g = group_ids(TINY)
    assert g.tolist() == [0] * 17 + [1] + [2] * 4 + [3] * 16
    m = attention_mask(TINY)
    for q in range(len(g)):
        for k in range(len(g)):
            assert m[q, k] == (g[k] <= g[q])


def test_positional_views():
    model = VarTransformer(TINY)
    assert model.pos.view(2).shape == (8, 2, 2)
    assert model.pos.tokens(4).shape == (16, 8)
    np.testing.assert_allclose(model.pos.view(1).data[:, 0, 0], model.pos.grid.data.mean(axis=(1, 2)))


def test_forward_shape_and_input_checks():
    model = VarTransformer(TINY)
    cb, phi, feats, levels = _setup(TINY)
    logits = model(levels, feats, [0, 1], cb, phi)
    assert logits.shape == (2, 21, 16)
    assert model.level_logits(logits, 3).shape == (2, 16, 16)
    with pytest.raises(T.ShapeError):
        model(levels[:2], feats, [0, 1], cb, phi)
    with pytest.raises(T.ShapeError):
        model(levels, feats[:, :, :2, :2], [0, 1], cb, phi)


# causality and caching ------------------------------------------------------------
def test_changing_a_level_never_moves_earlier_or_same_level_logits():
    model = VarTransformer(SMALL, seed=1)
    cb, phi, feats, levels = _setup(SMALL, seed=2)
    with T.no_grad():
        base = model(levels, feats, [0, 1], cb, phi).data
    rng = np.random.default_rng(3)
    for j in range(1, len(SMALL.resolutions) + 1):
        changed = [g.copy() for g in levels]
        changed[j - 1] = (changed[j - 1] + rng.integers(1, 16, size=changed[j - 1].shape)) % 16
        with T.no_grad():
            out = model(changed, feats, [0, 1], cb, phi).data
        for i in range(1, j + 1):
            diff = np.abs(model.level_logits(out, i) - model.level_logits(base, i)).max()
            assert diff <= 1e-12, (i, j, diff)
        if j < len(SMALL.resolutions):
            assert np.abs(model.level_logits(out, j + 1) - model.level_logits(base, j + 1)).max() > 1e-6


def test_lr_features_reach_every_level():
    model = VarTransformer(SMALL, seed=1)
    cb, phi, feats, levels = _setup(SMALL, seed=2)
    with T.no_grad():
        a = model(levels, feats, [0, 0], cb, phi).data
        b = model(levels, feats + 0.1, [0, 0], cb, phi).data
    for i in (1, 2, 3):
        assert np.abs(model.level_logits(a, i) - model.level_logits(b, i)).max() > 1e-6


def test_cached_decoding_matches_teacher_forcing():
    model = VarTransformer(SMALL, seed=4)
    worst = 0.0
    for trial in range(10):
        cb, phi, feats, _ = _setup(SMALL, seed=10 + trial, batch=1)
        cls = [trial % 3]
        gen = generate(model, feats, cls, cb, phi, sampler=Sampler(top_k=4, seed=trial))
        with T.no_grad():
            forced = model(gen.levels, feats, cls, cb, phi).data
        for level, step_logits in enumerate(gen.logits, start=1):
            worst = max(worst, np.abs(model.level_logits(forced, level) - step_logits).max())
    assert worst <= 1e-9


def test_generation_stops_at_requested_scale():
    model = VarTransformer(SMALL)
    cb, phi, feats, _ = _setup(SMALL)
    gen = generate(model, feats, [0, 1], cb, phi, upto_scale=2)
    assert [g.shape for g in gen.levels] == [(2, 1, 1), (2, 2, 2)]
    seqs = gen.sequences()
    assert len(seqs) == 2 and isinstance(seqs[0], TokenSequence)
    for bad in (0, 4):
        with pytest.raises(IndexError):
            generate(model, feats, [0, 1], cb, phi, upto_scale=bad)


def test_greedy_generation_is_deterministic():
    model = VarTransformer(SMALL, seed=5)
    cb, phi, feats, _ = _setup(SMALL, seed=6)
    a = generate(model, feats, [0, 1], cb, phi)
    b = generate(model, feats, [0, 1], cb, phi)
    for x, y in zip(a.levels, b.levels):
        np.testing.assert_array_equal(x, y)
    c = generate(model, feats, [0, 1], cb, phi, sampler=Sampler(top_k=3, seed=9))
    d = generate(model, feats, [0, 1], cb, phi, sampler=Sampler(top_k=3, seed=9))
    for x, y in zip(c.levels, d.levels):
        np.testing.assert_array_equal(x, y)


# guidance and sampling --------------------------------------------------------------
def test_guidance_identities(rng):
    cond, free = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    assert classifier_free_guidance(cond, free, 0.0) is cond
    np.testing.assert_array_equal(classifier_free_guidance(cond, cond, 3.0), cond)
    np.testing.assert_allclose(classifier_free_guidance(cond, free, 1.0), 2 * cond - free)


def test_guided_generation_combines_conditional_and_class_free_logits():
    model = VarTransformer(SMALL, seed=7)
    cb, phi, feats, _ = _setup(SMALL, seed=8, batch=1)
    guided = generate(model, feats, [0], cb, phi, upto_scale=1, cfg_weight=2.0)
    cond = model.step(model.start_cache(feats, [0]), 1, [0], feats, None, cb.vectors)
    free = model.step(model.start_cache(feats, [CLASS_FREE]), 1, [CLASS_FREE], feats, None, cb.vectors)
    np.testing.assert_allclose(guided.logits[0], cond + 2.0 * (cond - free), atol=1e-12)


def test_top_k_sampler_stays_in_top_k(rng):
    logits = rng.normal(size=(50, 16))
    picks = Sampler(top_k=3, seed=1)(logits)
    top3 = np.argsort(-logits, axis=-1)[:, :3]
    assert all(p in row for p, row in zip(picks, top3))
    np.testing.assert_array_equal(Sampler()(logits), logits.argmax(-1))
    assert (Sampler(top_k=1, seed=2)(logits) == logits.argmax(-1)).all()


# losses -------------------------------------------------------------------------------
def test_cross_entropy_of_uniform_logits_is_log_vocab(rng):
    tokens = rng.integers(0, 16, size=(3, 7))
    assert loss_ce(np.zeros((3, 7, 16)), tokens).item() == pytest.approx(math.log(16), abs=1e-12)


def test_cross_entropy_hand_value():
    logits = np.array([[[2.0, 0.0], [0.0, 0.0]]])
    expect = 0.5 * (math.log(1 + math.exp(-2.0)) + math.log(2.0))
    assert loss_ce(logits, np.array([[0, 1]])).item() == pytest.approx(expect, abs=1e-12)


def test_dpo_values():
    zeros = np.zeros((1, 2, 4))
    a, b = np.array([[0, 1]]), np.array([[2, 3]])
    assert loss_dpo(zeros, a, b).item() == pytest.approx(math.log(2), abs=1e-12)
    tilted = zeros.copy()
    tilted[0, 0, 0] = math.log(3.0)  # makes p(a) / p(b) exactly 3 at that position
    tilted[0, 0, 2] = 0.0
    assert loss_dpo(tilted, a, b).item() == pytest.approx(-math.log(0.75), abs=1e-12)
    assert -math.log(0.75) == pytest.approx(0.28768, abs=1e-5)
    # identical sequences give a zero log-ratio regardless of logits
    assert loss_dpo(np.random.default_rng(0).normal(size=(1, 2, 4)), a, a).item() == pytest.approx(math.log(2))


def test_dpo_decreases_as_preferred_sequence_gains_mass():
    a, b = np.array([[0]]), np.array([[1]])
    values = []
    for margin in np.linspace(-3, 3, 13):
        logits = np.array([[[margin, 0.0, 0.0]]])
        values.append(loss_dpo(logits, a, b, beta=0.5).item())
    assert all(x > y for x, y in zip(values, values[1:]))


def test_sequence_log_prob_matches_sum(rng):
    logits = rng.normal(size=(2, 5, 6))
    tokens = rng.integers(0, 6, size=(2, 5))
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    expect = np.take_along_axis(lp, tokens[..., None], -1).sum((1, 2))
    np.testing.assert_allclose(sequence_log_prob(logits, tokens).data, expect, atol=1e-12)


def test_loss_shape_errors():
    with pytest.raises(T.ShapeError):
        loss_ce(np.zeros((1, 3, 4)), np.zeros((1, 2), dtype=int))
    with pytest.raises(T.ShapeError):
        loss_dpo(np.zeros((1, 3, 4)), np.zeros((1, 3), dtype=int), np.zeros((1, 2), dtype=int))


def test_composite_loss_gradients_match_finite_differences():
    model = VarTransformer(TINY, seed=11)
    cb, phi, feats, hr = _setup(TINY, seed=12)
    lr = [np.roll(g, 1, axis=-1) for g in hr]
    batch = (hr, lr, feats, np.array([0, 2]))
    model.zero_grad()
    loss, _ = var_losses(model, batch, cb, phi, dpo_weight=1.0)
    loss.backward()
    rng = np.random.default_rng(13)
    names = dict(model.named_parameters())
    worst = 0.0
    for name in ("head.weight", "blocks.0.attn.qkv.weight", "pos.grid", "start", "class_embed.weight",
                 "word_proj.weight", "feature_proj.bias", "blocks.0.norm1.weight"):
        p = names[name]
        picks = [tuple(rng.integers(0, s) for s in p.data.shape) for _ in range(6)]

        def value():
            with T.no_grad():
                return var_losses(model, batch, cb, phi, dpo_weight=1.0)[0].item()

        for idx in picks:
            old = p.data[idx]
            p.data[idx] = old + 1e-5
            up = value()
            p.data[idx] = old - 1e-5
            down = value()
            p.data[idx] = old
            num = (up - down) / 2e-5
            worst = max(worst, abs(num - p.grad[idx]) / max(abs(num), abs(p.grad[idx]), 1e-6))
    assert worst < 1e-5


# training ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def trained():
    cfg = SMALL
    rng = np.random.default_rng(20)
    # trained codebooks have entry norms around 0.5
    cb = Codebook(0.25 * rng.normal(size=(cfg.vocab_size, cfg.latent_dim)))
    phi = PhiFilter(cfg.latent_dim)
    n = 8
    feats = rng.normal(size=(n, cfg.latent_dim, 4, 4))
    hr = [rng.integers(0, cfg.vocab_size, size=(n, r, r)) for r in cfg.resolutions]
    lr = [rng.integers(0, cfg.vocab_size, size=(n, r, r)) for r in cfg.resolutions]
    pairs = PairSet(hr, lr, feats, np.zeros(n, dtype=np.int64))
    model = VarTransformer(cfg, seed=21)
    history = train_var(model, pairs, cb, phi, VarTrainConfig(steps=150, batch_size=8, lr=3e-3,
                                                              class_free_prob=0.0, lr_warmup=10,
                                                              log_every=0))
    return model, pairs, cb, phi, history


def test_training_lowers_cross_entropy_below_uniform(trained):
    model, pairs, cb, phi, history = trained
    assert history[-1].ce < min(history[0].ce, 0.5 * math.log(16))


def test_untrained_model_prefers_code_nearest_to_lr_residual():
    cfg = VarConfig(depth=0, heads=2, width=16, vocab_size=16, latent_dim=4, resolutions=(1, 2, 4))
    cb, phi, feats, _ = _setup(cfg, seed=3, batch=2)
    model = VarTransformer(cfg, seed=4)
    # with no blocks and no learned offsets, only the residual path is left
    for p in (model.head.weight, model.head.bias, model.pos.grid, model.level_embed.weight,
              model.class_embed.weight, model.start):
        p.data[...] = 0.0
    gen = generate(model, feats, [0, 1], cb, phi)
    cum = np.zeros_like(feats)
    for grid, rho in zip(gen.levels, cfg.resolutions):
        target = interpolate(feats - cum, rho, rho, "area").transpose(0, 2, 3, 1)
        dist = ((target[..., None, :] - cb.vectors) ** 2).sum(-1)
        np.testing.assert_array_equal(grid, dist.argmin(-1))
        cum = cum + phi(interpolate(cb.vectors[grid].transpose(0, 3, 1, 2), 4, 4, "bilinear"))


def test_greedy_samples_are_likelier_than_random_sequences(trained):
    model, pairs, cb, phi, _ = trained
    hr, _, feats, classes = pairs.take(np.arange(len(pairs)))
    gen = generate(model, feats, classes, cb, phi)
    rng = np.random.default_rng(0)
    noise = [rng.integers(0, 16, size=g.shape) for g in gen.levels]
    with T.no_grad():
        greedy = sequence_log_prob(model(gen.levels, feats, classes, cb, phi), gen.levels).data
        rand = sequence_log_prob(model(noise, feats, classes, cb, phi), noise).data
    assert np.all(greedy > rand)


def test_training_requires_pairs():
    model = VarTransformer(TINY)
    cb, phi, _, _ = _setup(TINY)
    empty = PairSet([np.zeros((0, r, r), int) for r in TINY.resolutions],
                    [np.zeros((0, r, r), int) for r in TINY.resolutions], np.zeros((0, 4, 4, 4)),
                    np.zeros(0, int))
    with pytest.raises(ValueError):
        train_var(model, empty, cb, phi, VarTrainConfig(steps=1))
