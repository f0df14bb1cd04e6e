import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fddbench import attacks as atk
from fddbench import autodiff as ad
from fddbench import data as dt
from fddbench import models as md
from fddbench.autodiff import Tensor

EPS_GRID = [round(0.015 * i, 6) for i in range(1, 21)]


def make_linear_model(weights: np.ndarray, bias: np.ndarray, window: int, sensors: int):
    """Classifier whose logits are exactly weights.T @ flat(x) + bias.

    The hidden ReLU layer is defeated with the split-sign trick:
    relu(x) - relu(-x) == x.
    """
    flat, classes = weights.shape
    assert flat == window * sensors
    cfg = md.ModelConfig("MLP", window=window, sensors=sensors, classes=classes,
                         hidden=(2 * flat,), seed=0)
    model = md.build_model(cfg)
    model.params["lin0_w"].data[...] = np.concatenate([np.eye(flat), -np.eye(flat)], axis=1)
    model.params["lin0_b"].data[...] = 0.0
    model.params["lin1_w"].data[...] = np.concatenate([weights, -weights], axis=0)
    model.params["lin1_b"].data[...] = bias
    return model


@pytest.fixture(scope="module")
def toy_linear():
    """2-class softmax over a fixed linear map: closed-form gradient oracle."""
    rng = np.random.default_rng(0)
    weights = rng.normal(size=(6, 2))
    return make_linear_model(weights, np.zeros(2), window=2, sensors=3), weights


def _window(rng, model):
    return rng.normal(size=(model.config.window, model.config.sensors))


# ---------------------------------------------------------------------------
# spec validation


def test_spec_validation():
    with pytest.raises(ValueError, match="kind"):
        atk.AttackSpec("Nope", 0.1)
    with pytest.raises(ValueError, match="epsilon"):
        atk.AttackSpec("FGSM", -0.1)
    with pytest.raises(ValueError, match="cw_iters"):
        atk.AttackSpec("CW", 0.1, cw_iters=0)


def test_spec_json_round_trip_field_names():
    spec = atk.AttackSpec("PGD", 0.12, pgd_steps=7, pgd_alpha=0.02, seed=9)
    blob = spec.to_json()
    assert set(blob) == {"kind", "epsilon", "pgd_steps", "pgd_alpha",
                         "deepfool_max_iters", "cw_iters", "cw_lr", "seed"}
    assert atk.AttackSpec.from_json(blob) == spec


# ---------------------------------------------------------------------------
# noise


def test_noise_zero_strength_is_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    out = atk.attack_noise(x, atk.AttackSpec("Noise", 0.0, seed=1))
    assert np.array_equal(out, x)


def test_noise_magnitude_forced():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4))
    out = atk.attack_noise(x, atk.AttackSpec("Noise", 0.1, seed=2))
    assert np.allclose(np.abs(out - x), 0.1, atol=1e-12)


def test_noise_deterministic():
    x = np.zeros((3, 3))
    spec = atk.AttackSpec("Noise", 0.25, seed=5)
    assert np.array_equal(atk.attack_noise(x, spec), atk.attack_noise(x, spec))


# ---------------------------------------------------------------------------
# fgsm


def test_fgsm_zero_gradient_is_identity():
    # zero map: constant output, zero input gradient, sign(0) == 0
    model = make_linear_model(np.zeros((6, 2)), np.zeros(2), window=2, sensors=3)
    rng = np.random.default_rng(2)
    x = _window(rng, model)
    out = atk.attack_fgsm(model, x, 0, atk.AttackSpec("FGSM", 0.2))
    assert np.array_equal(out, x)


def test_fgsm_saturates_bound_where_gradient_nonzero(desk_mlp):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(16, 8))
    out = atk.attack_fgsm(desk_mlp, x, 2, atk.AttackSpec("FGSM", 0.1))
    shift = np.abs(out - x)
    nonzero = shift > 0
    assert nonzero.any()
    assert np.allclose(shift[nonzero], 0.1, atol=1e-12)


def test_fgsm_linear_model_sign_oracle(toy_linear):
    """For softmax(Wx) the loss gradient is p_other * (w_other - w_true),
    so the perturbation sign per coordinate is sign(w_other - w_true)."""
    model, weights = toy_linear
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3))
    out = atk.attack_fgsm(model, x, 0, atk.AttackSpec("FGSM", 0.05))
    shift = (out - x).reshape(-1)
    expected = 0.05 * np.sign(weights[:, 1] - weights[:, 0])
    assert np.allclose(shift, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# pgd


def test_pgd_single_step_equals_fgsm(desk_mlp):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(16, 8))
    spec = atk.AttackSpec("PGD", 0.1, pgd_steps=1, pgd_alpha=0.1)
    a = atk.attack_pgd(desk_mlp, x, 1, spec)
    b = atk.attack_fgsm(desk_mlp, x, 1, atk.AttackSpec("FGSM", 0.1))
    assert np.array_equal(a, b)


def test_pgd_intermediate_iterates_stay_in_ball(desk_mlp, monkeypatch):
    seen = []
    orig = atk._input_gradients

    def spy(model, x, y):
        seen.append(x.copy())
        return orig(model, x, y)

    monkeypatch.setattr(atk, "_input_gradients", spy)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(16, 8))
    atk.attack_pgd(desk_mlp, x, 3, atk.AttackSpec("PGD", 0.12, pgd_steps=6))
    assert len(seen) == 6
    for snapshot in seen:
        assert np.abs(snapshot[0] - x).max() <= 0.12 + 1e-9


def test_pgd_loss_dominates_fgsm_paired(desk_data, desk_mlp):
    _, test = desk_data
    sub = test.subset(np.arange(0, 1000, 5))  # 200 samples across all classes
    fgsm = atk.attack_batch(desk_mlp, sub, atk.AttackSpec("FGSM", 0.1))
    pgd = atk.attack_batch(desk_mlp, sub, atk.AttackSpec("PGD", 0.1))  # steps=10, alpha=eps/4

    def ce(xs):
        probs = desk_mlp.probs_graph(Tensor(xs))
        return ad.cross_entropy(probs, sub.labels).data

    frac = np.mean(ce(pgd.perturbed) >= ce(fgsm.perturbed))
    assert frac >= 0.9


# ---------------------------------------------------------------------------
# deepfool


def test_deepfool_already_misclassified_returns_input(desk_mlp, desk_data):
    _, test = desk_data
    probs = desk_mlp.predict_proba(test.windows)
    wrong = np.flatnonzero(probs.argmax(1) != test.labels)[:5]
    assert len(wrong) > 0
    for i in wrong:
        out = atk.attack_deepfool(desk_mlp, test.windows[i], int(test.labels[i]),
                                  atk.AttackSpec("DeepFool", 0.3))
        assert np.array_equal(out, test.windows[i])


def test_deepfool_linear_hyperplane_crossing():
    """Binary linear model with one dominant weight: the L1-scaled step
    overshoots the boundary, so the loop flips the prediction and stops."""
    weights = np.array([[0.0, 2.0], [0.0, -0.3], [0.0, 0.1]])  # gap grad (2, -0.3, 0.1)
    model = make_linear_model(weights, np.array([0.0, 0.5]), window=1, sensors=3)

    x = np.array([[-1.0, 0.2, 0.3]])  # gap = -2 - 0.06 + 0.03 + 0.5 < 0: class 0
    assert model.predict(x).argmax() == 0
    grad = weights[:, 1] - weights[:, 0]
    # one linear step moves the gap by |gap| * ||g||^2_2 / ||g||_1 > |gap|
    assert (grad @ grad) / np.abs(grad).sum() > 1.0
    out = atk.attack_deepfool(model, x, 0, atk.AttackSpec("DeepFool", 10.0, deepfool_max_iters=50))
    assert model.predict(out).argmax() == 1
    assert not np.array_equal(out, x)


@pytest.mark.parametrize("eps", [0.015, 0.06, 0.3])
def test_deepfool_respects_ball_across_strengths(desk_mlp, desk_data, eps):
    _, test = desk_data
    sub = test.subset(np.arange(40))
    batch = atk.attack_batch(desk_mlp, sub, atk.AttackSpec("DeepFool", eps))
    assert batch.bound_ok.all()


# ---------------------------------------------------------------------------
# cw


def test_cw_misclassified_input_is_fixed_point(desk_mlp, desk_data):
    _, test = desk_data
    probs = desk_mlp.predict_proba(test.windows)
    wrong = np.flatnonzero(probs.argmax(1) != test.labels)[:3]
    for i in wrong:
        out = atk.attack_cw(desk_mlp, test.windows[i], int(test.labels[i]),
                            atk.AttackSpec("CW", 0.2, cw_iters=20))
        assert np.array_equal(out, test.windows[i])


def test_cw_margin_descends(desk_mlp, desk_data):
    _, test = desk_data
    probs = desk_mlp.predict_proba(test.windows)
    right = np.flatnonzero(probs.argmax(1) == test.labels)[:20]
    sub = test.subset(right)
    batch = atk.attack_batch(desk_mlp, sub, atk.AttackSpec("CW", 0.15))

    def margins(xs):
        z = desk_mlp.logits_graph(Tensor(xs)).data
        rows = np.arange(len(xs))
        true = z[rows, sub.labels]
        z2 = z.copy()
        z2[rows, sub.labels] = -np.inf
        return true - z2.max(axis=1)

    assert np.all(margins(batch.perturbed) <= margins(batch.originals) + 1e-9)
    assert batch.bound_ok.all()


# ---------------------------------------------------------------------------
# surrogate transfer


def test_fgsm_distill_runs_black_box(desk_data, desk_mlp):
    train, test = desk_data
    oracle = atk.PredictOracle(desk_mlp)
    assert not hasattr(oracle, "probs_graph")
    assert not hasattr(oracle, "params")
    with pytest.raises(AttributeError):
        atk._input_gradients(oracle, test.windows[:2], test.labels[:2])

    spec = atk.AttackSpec("FGSMDistill", 0.1, seed=3)
    out = atk.attack_fgsm_distill(oracle, train, test.windows[0], int(test.labels[0]), spec)
    assert np.abs(out - test.windows[0]).max() <= 0.1 + 1e-9


def test_surrogate_imitates_oracle(desk_data, desk_mlp):
    train, test = desk_data
    oracle = atk.PredictOracle(desk_mlp)
    surrogate = atk.fit_surrogate(oracle, train, atk.AttackSpec("FGSMDistill", 0.1, seed=3))
    oracle_labels = desk_mlp.predict_proba(test.windows).argmax(1)
    agree = np.mean(surrogate.predict_proba(test.windows).argmax(1) == oracle_labels)
    assert agree >= 0.85


def test_surrogate_cache_hit(desk_data, desk_mlp):
    train, _ = desk_data
    oracle = atk.PredictOracle(desk_mlp)
    spec = atk.AttackSpec("FGSMDistill", 0.1, seed=3)
    a = atk.fit_surrogate(oracle, train, spec)
    b = atk.fit_surrogate(oracle, train, spec)
    assert a is b


# ---------------------------------------------------------------------------
# batch contract


def test_batch_zero_eps_identity_all_kinds(desk_data, desk_mlp):
    train, test = desk_data
    sub = test.subset(np.arange(16))
    for kind in atk.ATTACK_KINDS:
        spec = atk.AttackSpec(kind, 0.0, seed=1)
        batch = atk.attack_batch(desk_mlp, sub, spec, train_data=train)
        assert np.array_equal(batch.perturbed, batch.originals), kind
        assert batch.bound_ok.all()


def test_batch_bound_flags_all_kinds_high_eps(desk_data, desk_mlp):
    train, test = desk_data
    sub = test.subset(np.arange(24))
    for kind in atk.ATTACK_KINDS:
        spec = atk.AttackSpec(kind, 0.3, seed=1, cw_iters=30, deepfool_max_iters=20)
        batch = atk.attack_batch(desk_mlp, sub, spec, train_data=train)
        assert batch.bound_ok.all(), kind
        assert batch.max_abs_shift().max() <= 0.3 + 1e-9


def test_batch_preserves_order_and_degrades_accuracy(desk_data, desk_mlp):
    _, test = desk_data
    sub = test.subset(np.arange(300))
    batch = atk.attack_batch(desk_mlp, sub, atk.AttackSpec("FGSM", 0.1))
    assert np.array_equal(batch.originals, sub.windows)
    before = md.accuracy(desk_mlp, sub)
    after = md.accuracy(desk_mlp, dt.WindowedDataset(batch.perturbed, sub.labels,
                                                     sub.run_ids, sub.k))
    assert after <= before


def test_batch_deterministic(desk_data, desk_mlp):
    _, test = desk_data
    sub = test.subset(np.arange(32))
    spec = atk.AttackSpec("Noise", 0.2, seed=77)
    a = atk.attack_batch(desk_mlp, sub, spec)
    b = atk.attack_batch(desk_mlp, sub, spec)
    assert np.array_equal(a.perturbed, b.perturbed)


def test_batch_distill_requires_train_data(desk_data, desk_mlp):
    _, test = desk_data
    with pytest.raises(ValueError, match="train_data"):
        atk.attack_batch(desk_mlp, test.subset([0]), atk.AttackSpec("FGSMDistill", 0.1))


@settings(deadline=None, max_examples=20)
@given(st.floats(0.0, 0.5), st.integers(0, 2**31 - 1))
def test_noise_bound_property(eps, seed):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 2, 2))
    out = atk._noise_batch(x, eps, np.random.default_rng(seed))
    assert np.abs(out - x).max() <= eps + 1e-9


@pytest.fixture(scope="module")
def tiny_gru(small_data):
    train, _ = small_data
    cfg = md.ModelConfig("GRU", window=8, sensors=4, classes=3, hidden=(12,),
                         epochs=6, learning_rate=5e-3, seed=2)
    model = md.build_model(cfg)
    md.train(model, train)
    return model


@settings(deadline=None, max_examples=15)
@given(st.sampled_from([0.0, 0.02, 0.1, 0.27]))
def test_gradient_attack_bound_property_on_recurrent_model(tiny_gru, small_data, eps):
    _, test = small_data
    sub = test.subset(np.arange(10))
    for kind in ("FGSM", "PGD"):
        batch = atk.attack_batch(tiny_gru, sub, atk.AttackSpec(kind, eps, seed=3))
        assert batch.bound_ok.all()
        if eps == 0.0:
            assert np.array_equal(batch.perturbed, batch.originals)


def test_all_attacks_run_against_gru_and_tcn(small_data):
    train, test = small_data
    sub = test.subset(np.arange(16))
    for arch, hidden in (("GRU", (12,)), ("TCN", (8, 8))):
        cfg = md.ModelConfig(arch, window=8, sensors=4, classes=3, hidden=hidden,
                             epochs=4, learning_rate=5e-3, seed=2)
        model = md.build_model(cfg)
        md.train(model, train)
        for kind in atk.ATTACK_KINDS:
            spec = atk.AttackSpec(kind, 0.15, seed=1, cw_iters=15, deepfool_max_iters=10)
            batch = atk.attack_batch(model, sub, spec, train_data=train)
            assert batch.bound_ok.all(), (arch, kind)


# ---------------------------------------------------------------------------
# artifact round trip


def test_batch_artifact_round_trip(tmp_path, desk_data, desk_mlp):
    _, test = desk_data
    sub = test.subset(np.arange(10))
    spec = atk.AttackSpec("FGSM", 0.15, seed=4)
    batch = atk.attack_batch(desk_mlp, sub, spec)
    path = tmp_path / "batch.npz"
    atk.save_batch(batch, path, model_path="model.json")
    loaded, meta = atk.load_batch(path)
    assert np.array_equal(loaded.perturbed, batch.perturbed)
    assert loaded.spec == spec
    assert meta["model_path"] == "model.json"
    assert loaded.model_fingerprint == desk_mlp.fingerprint()
