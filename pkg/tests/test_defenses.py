import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fddbench import attacks as atk
from fddbench import data as dt
from fddbench import defenses as dfs
from fddbench import models as md


def _acc_under(model, data, kind, eps, train_data=None, **kw):
    batch = atk.attack_batch(model, data, atk.AttackSpec(kind, eps, seed=1, **kw),
                             train_data=train_data)
    view = dt.WindowedDataset(batch.perturbed, data.labels, data.run_ids, data.k)
    return md.accuracy(model, view)


# ---------------------------------------------------------------------------
# spec


def test_defense_spec_validation():
    with pytest.raises(ValueError, match="kind"):
        dfs.DefenseSpec("Nope")
    with pytest.raises(ValueError, match="quant_bits"):
        dfs.DefenseSpec("Quantization", quant_bits=0)
    with pytest.raises(ValueError, match="distill_T"):
        dfs.DefenseSpec("Distillation", distill_T=0.0)
    with pytest.raises(ValueError, match="adv_eps_mode"):
        dfs.DefenseSpec("AdvTraining", adv_eps_mode="sometimes")
    with pytest.raises(ValueError, match="range"):
        dfs.DefenseSpec("AdvTraining", adv_eps_mode="range(0.3,0.1)")


def test_defense_spec_comparison_defaults():
    # the quantizer default used in cross-defense comparisons
    assert dfs.DefenseSpec("Quantization").quant_bits == 5
    assert dfs.DefenseSpec("Distillation").distill_T == 100.0
    assert dfs.DefenseSpec("Regularization").reg_h == 0.001
    assert dfs.DefenseSpec("Regularization").reg_lambda == 1.0


def test_defense_spec_json_round_trip():
    spec = dfs.DefenseSpec("Combination",
                           adv_attack=atk.AttackSpec("FGSM", 0.1, seed=2),
                           adv_eps_mode="range(0.015,0.3)",
                           combo=dfs.ComboSpec(atk.AttackSpec("FGSM", 0.1, seed=3), 5))
    blob = spec.to_json()
    assert set(blob) == {"kind", "adv_attack", "adv_lambda", "adv_eps_mode", "ae_noise",
                         "quant_bits", "reg_h", "reg_lambda", "distill_T", "combo"}
    assert dfs.DefenseSpec.from_json(blob) == spec
    assert spec.eps_range() == (0.015, 0.3)


# ---------------------------------------------------------------------------
# quantizer


def test_quantizer_one_bit_arithmetic():
    grid = dfs.QuantizerGrid(np.array([-1.0]), np.array([1.0]), bits=1)
    assert np.array_equal(grid.centers(0), [-0.5, 0.5])
    assert dfs.apply_quantizer(grid, np.array([0.3]))[0] == 0.5
    assert dfs.apply_quantizer(grid, np.array([-0.0001]))[0] == -0.5
    # outside the range clamps to edge centers
    assert dfs.apply_quantizer(grid, np.array([9.9]))[0] == 0.5
    assert dfs.apply_quantizer(grid, np.array([-9.9]))[0] == -0.5


def test_quantizer_centers_are_fixed_points():
    rng = np.random.default_rng(0)
    grid = dfs.QuantizerGrid(rng.normal(size=3) - 2.0, rng.normal(size=3) + 2.0, bits=3)
    for f in range(3):
        centers = grid.centers(f)
        x = np.zeros((len(centers), 3)) + grid.lo
        x[:, f] = centers
        out = dfs.apply_quantizer(grid, x)
        assert np.array_equal(out[:, f], centers)


@settings(deadline=None, max_examples=40)
@given(st.integers(1, 10), st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_quantizer_idempotent(bits, values):
    grid = dfs.QuantizerGrid(np.array([-3.0]), np.array([4.0]), bits=bits)
    x = np.array(values).reshape(-1, 1)
    once = dfs.apply_quantizer(grid, x)
    assert np.array_equal(dfs.apply_quantizer(grid, once), once)


def test_fit_quantizer_degenerate_feature_warns():
    windows = np.zeros((4, 2, 2))
    windows[..., 1] = np.arange(16).reshape(4, 2, 2)[..., 1]
    data = dt.WindowedDataset(windows, np.zeros(4, dtype=int), np.zeros(4, dtype=int), 2)
    with pytest.warns(UserWarning, match="single-level"):
        grid = dfs.fit_quantizer(data, 3)
    out = dfs.apply_quantizer(grid, windows)
    assert np.array_equal(out[..., 0], np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# lambda-zero reductions (bit-exact)


def test_adv_training_lambda_zero_reduces_to_plain(small_data):
    train, _ = small_data
    cfg = md.ModelConfig("MLP", window=8, sensors=4, classes=3, hidden=(16,), epochs=4, seed=9)
    plain = md.build_model(cfg)
    md.train(plain, train)
    spec = dfs.DefenseSpec("AdvTraining", adv_attack=atk.AttackSpec("FGSM", 0.1, seed=1),
                           adv_lambda=0.0)
    protected = dfs.defend_adv_training(cfg, train, spec)
    for name in plain.params:
        assert np.array_equal(plain.params[name].data, protected.inner.params[name].data)


def test_regularization_lambda_zero_reduces_to_plain(small_data):
    train, _ = small_data
    cfg = md.ModelConfig("MLP", window=8, sensors=4, classes=3, hidden=(16,), epochs=4, seed=9)
    plain = md.build_model(cfg)
    md.train(plain, train)
    protected = dfs.defend_regularization(cfg, train,
                                          dfs.DefenseSpec("Regularization", reg_lambda=0.0))
    for name in plain.params:
        assert np.array_equal(plain.params[name].data, protected.inner.params[name].data)


# ---------------------------------------------------------------------------
# adversarial training


def test_adv_training_range_mode_improves_robustness(desk_data):
    train, test = desk_data
    cfg = md.desk_config("MLP", seed=1, epochs=16, learning_rate=2e-3, batch_size=32)
    spec = dfs.DefenseSpec("AdvTraining", adv_attack=atk.AttackSpec("PGD", 0.1, seed=5),
                           adv_eps_mode="range(0.2,0.3)", adv_lambda=3.0)
    protected = dfs.defend_adv_training(cfg, train, spec)
    base = md.build_model(md.desk_config("MLP", seed=1))
    md.train(base, train)
    robust_protected = _acc_under(protected, test, "PGD", 0.3)
    robust_base = _acc_under(base, test, "PGD", 0.3)
    assert robust_protected >= robust_base + 0.20


def test_adv_training_requires_attack_spec(small_data):
    train, _ = small_data
    cfg = md.ModelConfig("MLP", window=8, sensors=4, classes=3, hidden=(8,), epochs=1, seed=0)
    with pytest.raises(ValueError, match="adv_attack"):
        dfs.defend_adv_training(cfg, train, dfs.DefenseSpec("AdvTraining"))


def test_adv_training_deterministic(small_data):
    train, _ = small_data
    cfg = md.ModelConfig("MLP", window=8, sensors=4, classes=3, hidden=(12,), epochs=3, seed=4)
    spec = dfs.DefenseSpec("AdvTraining", adv_attack=atk.AttackSpec("FGSM", 0.15, seed=8),
                           adv_eps_mode="range(0.05,0.2)")
    a = dfs.defend_adv_training(cfg, train, spec)
    b = dfs.defend_adv_training(cfg, train, spec)
    for name in a.inner.params:
        assert np.array_equal(a.inner.params[name].data, b.inner.params[name].data)


# ---------------------------------------------------------------------------
# autoencoder defense


def test_autoencoder_defense_contract(desk_data):
    train, test = desk_data
    cfg = md.desk_config("MLP", seed=1)
    protected = dfs.defend_autoencoder(cfg, train, dfs.DefenseSpec("Autoencoder", ae_noise=0.1))
    out = protected.predict(test.windows[0])
    assert out.shape == (5,)
    assert abs(out.sum() - 1.0) <= 1e-9

    base = md.build_model(cfg)
    md.train(base, train)
    clean_protected = md.accuracy(protected, test)
    clean_base = md.accuracy(base, test)
    # purification costs a little clean accuracy and must not collapse
    assert clean_protected >= clean_base - 0.05
    # under sign noise the purified model holds within noise of the baseline
    noise_p = _acc_under(protected, test, "Noise", 0.3)
    noise_b = _acc_under(base, test, "Noise", 0.3)
    assert noise_p >= noise_b - 0.02


def test_autoencoder_variant_on_original_data(small_data):
    train, test = small_data
    cfg = md.ModelConfig("MLP", window=8, sensors=4, classes=3, hidden=(16,),
                         epochs=8, learning_rate=5e-3, seed=2)
    protected = dfs.defend_autoencoder(cfg, train, dfs.DefenseSpec("Autoencoder"),
                                       train_on_reconstructions=False)
    assert md.accuracy(protected, test) >= 0.5


# ---------------------------------------------------------------------------
# quantization defense


def test_quantization_near_identity_at_16_bits(desk_data, desk_mlp):
    train, test = desk_data
    protected = dfs.defend_quantization(md.desk_config("MLP", seed=1), train,
                                        dfs.DefenseSpec("Quantization", quant_bits=16))
    assert abs(md.accuracy(protected, test) - md.accuracy(desk_mlp, test)) <= 0.01


def test_quantization_chain_applied_at_inference(desk_data):
    train, test = desk_data
    protected = dfs.defend_quantization(md.desk_config("MLP", seed=1), train,
                                        dfs.DefenseSpec("Quantization", quant_bits=4))
    grid = protected.transforms[0].grid
    w = test.windows[:3]
    direct = protected.inner.predict_proba(dfs.apply_quantizer(grid, w))
    chained = protected.predict_proba(w)
    assert np.array_equal(direct, chained)
    assert protected.verify_chain()


# ---------------------------------------------------------------------------
# regularization defense


def test_regularization_shrinks_input_gradients(desk_data):
    train, test = desk_data
    cfg = md.desk_config("MLP", seed=1, epochs=6)
    base = md.build_model(cfg)
    md.train(base, train)
    protected = dfs.defend_regularization(cfg, train,
                                          dfs.DefenseSpec("Regularization", reg_h=0.001,
                                                          reg_lambda=50.0))

    def grad_scale(model):
        g = atk._input_gradients(model, test.windows[:200], test.labels[:200])
        return np.abs(g).mean()

    assert grad_scale(protected) < grad_scale(base)
    assert md.accuracy(protected, test) >= 0.8


def test_regularization_defaults_do_not_hurt_noise_robustness(desk_data, desk_mlp):
    train, test = desk_data
    protected = dfs.defend_regularization(md.desk_config("MLP", seed=1), train,
                                          dfs.DefenseSpec("Regularization",
                                                          reg_h=0.001, reg_lambda=1.0))
    for eps in (0.05, 0.1):
        assert _acc_under(protected, test, "Noise", eps) >= \
            _acc_under(desk_mlp, test, "Noise", eps) - 0.01


# ---------------------------------------------------------------------------
# distillation defense


@pytest.fixture(scope="module")
def distilled(desk_data):
    train, _ = desk_data
    return dfs.defend_distillation(md.desk_config("MLP", seed=1), train,
                                   dfs.DefenseSpec("Distillation", distill_T=100.0))


def test_distillation_masks_fgsm(desk_data, distilled):
    _, test = desk_data
    clean = md.accuracy(distilled, test)
    attacked = _acc_under(distilled, test, "FGSM", 0.3)
    assert clean - attacked <= 0.10


def test_distillation_student_close_to_teacher(desk_data, distilled, desk_mlp):
    _, test = desk_data
    # teacher reference: a plain desk model; the hot-trained pipeline should
    # land within a few points of it on clean data
    assert md.accuracy(distilled, test) >= md.accuracy(desk_mlp, test) - 0.03


def test_distillation_serves_at_unit_temperature(distilled):
    assert distilled.inner.temperature == 1.0


@pytest.mark.parametrize("arch,hidden,seed", [("GRU", (12,), 5), ("TCN", (8, 8), 2)])
def test_distillation_stays_stable_on_other_architectures(small_data, arch, hidden, seed):
    train, test = small_data
    cfg = md.ModelConfig(arch, window=8, sensors=4, classes=3, hidden=hidden,
                         epochs=6, learning_rate=5e-3, seed=seed)
    protected = dfs.defend_distillation(cfg, train, dfs.DefenseSpec("Distillation"))
    assert protected.inner.temperature == 1.0
    assert md.accuracy(protected, test) >= 0.7


def test_distillation_zeroes_most_input_gradients(desk_data, distilled):
    _, test = desk_data
    g = atk._input_gradients(distilled, test.windows[:200], test.labels[:200])
    zero_frac = np.mean(np.abs(g).reshape(200, -1).max(axis=1) == 0.0)
    assert zero_frac >= 0.5


# ---------------------------------------------------------------------------
# combination defense


@pytest.fixture(scope="module")
def combo_pair(desk_data):
    train, _ = desk_data
    cfg = md.desk_config("MLP", seed=1)
    quant_only = dfs.defend_quantization(cfg, train, dfs.DefenseSpec("Quantization", quant_bits=5))
    combo = dfs.defend_combination(cfg, train, dfs.DefenseSpec(
        "Combination", combo=dfs.ComboSpec(atk.AttackSpec("FGSM", 0.1, seed=5), quant_bits=5)))
    return quant_only, combo


def test_combination_beats_quantization_alone_under_fgsm(desk_data, combo_pair):
    _, test = desk_data
    quant_only, combo = combo_pair
    for eps in (0.15, 0.21, 0.30):
        acc_combo = _acc_under(combo, test, "FGSM", eps)
        acc_quant = _acc_under(quant_only, test, "FGSM", eps)
        assert acc_combo > acc_quant, f"eps={eps}"


def test_combination_requires_combo_spec(small_data):
    train, _ = small_data
    cfg = md.ModelConfig("MLP", window=8, sensors=4, classes=3, hidden=(8,), epochs=1, seed=0)
    with pytest.raises(ValueError, match="combo"):
        dfs.defend_combination(cfg, train, dfs.DefenseSpec("Combination"))


# ---------------------------------------------------------------------------
# protected model plumbing


def test_defend_dispatch_unprotected(small_data):
    train, test = small_data
    cfg = md.ModelConfig("MLP", window=8, sensors=4, classes=3, hidden=(16,),
                         epochs=8, learning_rate=5e-3, seed=3)
    protected = dfs.defend(cfg, train, None)
    assert protected.transforms == []
    assert md.accuracy(protected, test) >= 0.8


def test_protected_checkpoint_round_trip(tmp_path, desk_data):
    train, test = desk_data
    cfg = md.desk_config("MLP", seed=1)
    protected = dfs.defend_quantization(cfg, train, dfs.DefenseSpec("Quantization", quant_bits=5))
    path = tmp_path / "protected.json"
    dfs.save_protected(protected, path)
    loaded = dfs.load_protected(path)
    assert loaded.verify_chain()
    assert loaded.spec == protected.spec
    w = test.windows[:4]
    assert np.array_equal(loaded.predict_proba(w), protected.predict_proba(w))


def test_protected_checkpoint_with_autoencoder(tmp_path, small_data):
    train, _ = small_data
    cfg = md.ModelConfig("MLP", window=8, sensors=4, classes=3, hidden=(16,),
                         epochs=2, seed=1)
    protected = dfs.defend_autoencoder(cfg, train, dfs.DefenseSpec("Autoencoder", ae_noise=0.05))
    path = tmp_path / "protected_ae.json"
    dfs.save_protected(protected, path)
    loaded = dfs.load_protected(path)
    w = train.windows[:3]
    assert np.array_equal(loaded.predict_proba(w), protected.predict_proba(w))


def test_white_box_attack_goes_through_chain(desk_data):
    train, test = desk_data
    protected = dfs.defend_quantization(md.desk_config("MLP", seed=1), train,
                                        dfs.DefenseSpec("Quantization", quant_bits=5))
    # straight-through gradients give the attacker a usable direction even
    # though the quantizer itself is piecewise constant
    acc_clean = md.accuracy(protected, test)
    acc_attacked = _acc_under(protected, test, "FGSM", 0.3)
    assert acc_attacked < acc_clean - 0.2
