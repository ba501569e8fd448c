import csv

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from asl import gradcore
from asl.aaft import (ER, KL, FinetuneReport, LossConfig, combined_objective, default_regularizer, entropy,
                      entropy_ratio_loss, finetune, finetune_pixels, kl_uniform_loss, objective_graph,
                      uniform_entropy)
from asl.mgu import MguConfig, build_auxiliary_set
from asl.scenes import KNOWN, SYNTH_UNKNOWN, pixel_set
from asl.segmodel import PixelSet, cross_entropy_graph, init_model, predict_softmax, sgd_step


def _dist(rng, n):
    return rng.dirichlet(np.ones(n) * 0.7)


def test_kl_examples():
    assert kl_uniform_loss(np.full(7, 1 / 7)) == pytest.approx(0, abs=1e-12)
    # -(0.5 ln(0.9/0.5) + 0.5 ln(0.1/0.5)), evaluated by hand: 0.510825...
    assert kl_uniform_loss([0.9, 0.1]) == pytest.approx(0.5108256237659907, abs=1e-12)
    assert kl_uniform_loss([0.1, 0.9]) == pytest.approx(kl_uniform_loss([0.9, 0.1]), abs=0)


def test_er_examples():
    r = np.log(2) * 0.01
    h = -(0.9 * np.log(0.9) + 0.1 * np.log(0.1))
    assert h == pytest.approx(0.3250829733914482)
    expected = (np.log(2) + r) / (h + r) - 1
    assert entropy_ratio_loss([0.9, 0.1], r) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1.108, abs=1e-3)
    assert entropy_ratio_loss(np.full(5, 0.2), default_regularizer(5)) == pytest.approx(0, abs=1e-12)


def test_er_bounded_by_uniform_over_r():
    n, r = 12, default_regularizer(12)
    p = np.full(n, 1e-13)
    p[0] = 1 - p[1:].sum()
    val = entropy_ratio_loss(p, r)
    assert 50 < val <= uniform_entropy(n) / r


def test_default_regularizer():
    assert default_regularizer(12) == pytest.approx(np.log(12) * 0.01, abs=0)
    assert default_regularizer(2) == pytest.approx(np.log(2) * 0.01, abs=0)
    with pytest.raises(ValueError):
        default_regularizer(1)


def test_zero_entry_is_floored(caplog):
    caplog.set_level("DEBUG")
    val = kl_uniform_loss([1.0, 0.0])
    assert np.isfinite(val)
    assert val == pytest.approx(-(np.log(2.0) + np.log(2e-12)) / 2)
    assert "floored" in caplog.text


def test_invalid_rows_rejected():
    with pytest.raises(ValueError):
        kl_uniform_loss([0.5, 0.6])
    with pytest.raises(ValueError):
        entropy_ratio_loss([0.5, 0.5], 0.0)
    with pytest.raises(ValueError):
        kl_uniform_loss([1.0])


# properties over random distributions

@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 20))
def test_losses_positive_off_uniform(seed, n):
    p = _dist(np.random.default_rng(seed), n)
    assume(np.abs(p - 1 / n).max() > 1e-6)
    assert kl_uniform_loss(p) > 0
    assert entropy_ratio_loss(p, default_regularizer(n)) > 0


@settings(max_examples=200, deadline=None)
@given(n=st.integers(2, 30))
def test_losses_zero_at_uniform(n):
    u = np.full(n, 1 / n)
    assert abs(kl_uniform_loss(u)) <= 1e-9
    assert abs(entropy_ratio_loss(u, default_regularizer(n))) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 12))
def test_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    p = _dist(rng, n)
    q = rng.permutation(p)
    r = default_regularizer(n)
    assert entropy_ratio_loss(q, r) == pytest.approx(entropy_ratio_loss(p, r), rel=1e-12, abs=1e-14)
    assert kl_uniform_loss(q) == pytest.approx(kl_uniform_loss(p), rel=1e-12, abs=1e-14)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_er_monotone_in_entropy(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 12))
    p, q = _dist(rng, n), _dist(rng, n)
    hp, hq = entropy(p), entropy(q)
    assume(abs(hp - hq) > 1e-9)
    r = default_regularizer(n)
    lo, hi = (p, q) if hp < hq else (q, p)
    assert entropy_ratio_loss(lo, r) > entropy_ratio_loss(hi, r)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t1=st.floats(0.05, 20), t2=st.floats(0.05, 20))
def test_kl_monotone_in_entropy_along_temperature(seed, t1, t2):
    # KL(U || p) is not a function of H(p) alone; along a tempered family
    # p_t = softmax(z / t) both move monotonically, which is the property used.
    assume(abs(t1 - t2) > 1e-3)
    z = np.random.default_rng(seed).normal(size=6)
    assume(np.ptp(z) > 1e-3)

    def tempered(t):
        e = np.exp((z - z.max()) / t)
        return e / e.sum()

    a, b = tempered(min(t1, t2)), tempered(max(t1, t2))
    assert entropy(a) < entropy(b)
    assert kl_uniform_loss(a) > kl_uniform_loss(b)


def test_kl_is_not_a_function_of_entropy():
    # q has lower entropy than p yet a smaller KL-to-uniform loss
    p, q = np.array([0.5, 0.49, 0.01]), np.array([0.8, 0.1, 0.1])
    assert entropy(q) < entropy(p)
    assert kl_uniform_loss(q) < kl_uniform_loss(p)


# combined objective

def _batch(seed, n_pix=40, n_classes=4):
    rng = np.random.default_rng(seed)
    model = init_model(2, n_classes, 1, (6,), seed=seed)
    patches = rng.uniform(-1, 1, (n_pix, model.input_width))
    labels = rng.integers(0, n_classes, n_pix)
    roles = np.where(rng.random(n_pix) < 0.3, SYNTH_UNKNOWN, KNOWN).astype(np.uint8)
    return model, patches, labels, roles


def test_alpha_zero_equals_cross_entropy():
    model, patches, labels, roles = _batch(0)
    val, grad = combined_objective(model, patches, labels, roles, LossConfig(alpha=0.0))
    mg, loss = cross_entropy_graph(model, labels, roles == KNOWN)
    ce, grads = gradcore.value_and_grad(mg.graph, mg.bindings(model, patches), loss)
    assert val == ce
    assert np.array_equal(grad, mg.flat_grad(grads))


def test_only_unknown_uniform_outputs_zero():
    model, patches, labels, _ = _batch(1)
    model.params[:] = 0.0
    roles = np.full(len(labels), SYNTH_UNKNOWN, np.uint8)
    for kind in (KL, ER):
        val, _ = combined_objective(model, patches, labels, roles, LossConfig(alpha=1.0, unknown_loss=kind))
        assert abs(val) <= 1e-12


@pytest.mark.parametrize("kind", [KL, ER])
def test_gradient_is_weighted_sum_of_terms(kind):
    model, patches, labels, roles = _batch(2)
    cfg = LossConfig(alpha=0.3, unknown_loss=kind)
    mg, total, known_term, unknown_term = objective_graph(model, labels, roles == KNOWN, roles == SYNTH_UNKNOWN, cfg)
    binds = mg.bindings(model, patches)
    values = gradcore.forward(mg.graph, binds)
    g_total = mg.flat_grad(gradcore.backward(mg.graph, values, total))
    g_known = mg.flat_grad(gradcore.backward(mg.graph, values, known_term))
    g_unknown = mg.flat_grad(gradcore.backward(mg.graph, values, unknown_term))
    np.testing.assert_allclose(g_total, g_known + 0.3 * g_unknown, rtol=0, atol=1e-12)
    rows = predict_rows(model, patches)[roles == SYNTH_UNKNOWN]
    direct = kl_uniform_loss(rows) if kind == KL else entropy_ratio_loss(rows, cfg.r(4))
    assert float(values[unknown_term]) == pytest.approx(direct.mean(), abs=1e-12)


def predict_rows(model, patches):
    from asl.segmodel import patch_logits
    z = patch_logits(model, patches)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@pytest.mark.parametrize("kind", [KL, ER])
def test_objective_gradients_match_finite_differences(kind):
    model, patches, labels, roles = _batch(3, n_pix=12)
    cfg = LossConfig(alpha=0.7, unknown_loss=kind)
    mg, total, _, _ = objective_graph(model, labels, roles == KNOWN, roles == SYNTH_UNKNOWN, cfg)
    assert gradcore.grad_check(mg.graph, mg.bindings(model, patches), 1e-6, loss=total) <= 1e-4


def test_batch_without_roles_rejected():
    model, patches, labels, _ = _batch(4)
    with pytest.raises(ValueError):
        combined_objective(model, patches, labels, np.full(len(labels), 1, np.uint8), LossConfig())


def test_loss_config_validation():
    for bad in (LossConfig(alpha=-1), LossConfig(unknown_loss="L2"), LossConfig(regularizer=0.0)):
        with pytest.raises(ValueError):
            bad.validate(12)
    assert LossConfig().r(12) == default_regularizer(12)
    assert LossConfig(regularizer=0.5).r(12) == 0.5


# fine-tuning loop

def _pixels(seed=5, n=300):
    model, patches, labels, roles = _batch(seed, n_pix=n)
    return model, PixelSet(patches, labels, roles)


def test_alpha_zero_finetune_matches_supervised_steps():
    model, pixels = _pixels()
    tuned, _ = finetune_pixels(model, pixels, LossConfig(alpha=0.0), epochs=2, lr=0.2, batch=64, seed=3,
                               check=False)
    ref = model.copy()
    rng = np.random.default_rng(3)
    from asl.segmodel import batch_order
    for _ in range(2):
        for idx in batch_order(len(pixels), 64, rng):
            known = pixels.roles[idx] == KNOWN
            mg, loss = cross_entropy_graph(ref, pixels.labels[idx], known)
            _, grads = gradcore.value_and_grad(mg.graph, mg.bindings(ref, pixels.patches[idx]), loss)
            sgd_step(ref, mg.flat_grad(grads), 0.2)
    assert np.array_equal(tuned.params, ref.params)


def test_finetune_deterministic_and_report_lengths(tmp_path):
    model, pixels = _pixels()
    a, rep = finetune_pixels(model, pixels, LossConfig(), epochs=3, lr=0.1, batch=64, seed=1)
    b, _ = finetune_pixels(model, pixels, LossConfig(), epochs=3, lr=0.1, batch=64, seed=1)
    assert np.array_equal(a.params, b.params)
    assert rep.epochs == 3 == len(rep.mean_unknown_loss)
    assert rep.mean_unknown_loss[-1] < rep.initial_unknown_loss
    rep.write_csv(tmp_path / "ft.csv")
    with open(tmp_path / "ft.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "mean_Lk", "mean_unknown_loss"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]


def test_finetune_raises_when_unknown_loss_does_not_drop():
    # uniform outputs already minimise the unknown loss; cross-entropy steps can only raise it
    model, pixels = _pixels()
    model.params[:] = 0.0
    with pytest.raises(RuntimeError, match="did not reduce"):
        finetune_pixels(model, pixels, LossConfig(alpha=0.05), epochs=1, lr=0.5, batch=300, seed=0)


def test_empty_auxiliary_set_rejected(default_corpus, pretrained):
    with pytest.raises(ValueError, match="empty"):
        finetune(pretrained, default_corpus.train[:2], [], LossConfig())


def test_default_finetune_lowers_synthetic_msp(default_corpus, pretrained):
    train = default_corpus.train[:60]
    aux = build_auxiliary_set(pretrained, train, MguConfig(per_class_budget=3))
    aux_scenes = [a.scene for a in aux]

    def mean_msp(model):
        vals = [predict_softmax(model, s.features).max(axis=0)[s.role == SYNTH_UNKNOWN] for s in aux_scenes]
        return float(np.concatenate(vals).mean())

    tuned, report = finetune(pretrained, train, aux, LossConfig(alpha=0.05), epochs=3, lr=0.1, batch=256, seed=0)
    assert isinstance(report, FinetuneReport)
    assert mean_msp(tuned) < mean_msp(pretrained)
    assert report.mean_unknown_loss[-1] < report.initial_unknown_loss
    assert len(pixel_set(train, pretrained)) == 60 * 32 * 32
