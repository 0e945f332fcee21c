import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headstrain.errors import (
    ChecksumError,
    FileFormatError,
    IncompatibilityError,
    InsufficientDataError,
    InvalidDataError,
    InvalidParameterError,
    TruncatedFileError,
    VersionError,
)
from headstrain.features import extract_feature_matrix, fit_standardizer, standardize
from headstrain.nn import MlpModel, TrainConfig, forward, train
from headstrain.oracle import build_dataset, get_profile, sample_surrogate_config
from headstrain.strategies import (
    DEFAULT_NOISE_LEVELS,
    STRATEGY_NAMES,
    LabelTransform,
    PredictorBundle,
    StrategySpec,
    bundle_from_bytes,
    bundle_to_bytes,
    default_train_config,
    fine_tune,
    fit_label_transform,
    fusion_train,
    inverse_transform,
    load_bundle,
    noise_augment,
    partition_indices,
    predict,
    predict_features,
    pretrain,
    save_bundle,
    scratch_train,
    strategy_abbreviation,
    transform_labels,
)

N_ELEMENTS = 8


@pytest.fixture(scope="module")
def brain_cfg():
    return sample_surrogate_config(n_elements=N_ELEMENTS, seed=99)


@pytest.fixture(scope="module")
def hm_data(brain_cfg):
    ds = build_dataset(get_profile("hm_like"), 24, brain_cfg, seed=10)
    return ds, extract_feature_matrix(ds.recordings)


@pytest.fixture(scope="module")
def onfield_data(brain_cfg):
    ds = build_dataset(get_profile("mma_like"), 16, brain_cfg, seed=11)
    return ds, extract_feature_matrix(ds.recordings)


@pytest.fixture(scope="module")
def basis_bundle(hm_data):
    hm, X = hm_data
    return pretrain(hm, "mps", default_train_config("mps", epochs=4, seed=5), features=X)


# ---------------------------------------------------------------------------
# label transforms


def test_log_round_trip_identity():
    rng = np.random.default_rng(0)
    y = np.exp(rng.normal(-2.5, 1.0, size=(7, 5)))
    t = fit_label_transform("log", y)
    back = inverse_transform(t, transform_labels(t, y))
    np.testing.assert_allclose(back, y, rtol=1e-10)


def test_whiten_round_trip_identity():
    rng = np.random.default_rng(1)
    y = np.exp(rng.normal(-2.5, 1.0, size=(7, 5)))
    t = fit_label_transform("log_whiten", y)
    back = inverse_transform(t, transform_labels(t, y))
    np.testing.assert_allclose(back, y, rtol=1e-10)


def test_inverse_always_positive():
    t = fit_label_transform("log", np.full((3, 2), 0.1))
    rng = np.random.default_rng(2)
    v = rng.normal(0.0, 5.0, size=(10, 2))
    assert np.all(inverse_transform(t, v) > 0)


def test_whiten_fixture_hand_computed():
    # one element observed at e^1, e^2, e^3: log-labels (1, 2, 3)
    y = np.exp(np.array([[1.0], [2.0], [3.0]]))
    t = fit_label_transform("log_whiten", y)
    assert t.mean[0] == pytest.approx(2.0)
    assert t.std[0] == pytest.approx(np.sqrt(2.0 / 3.0))
    z = transform_labels(t, y)
    assert z[1, 0] == pytest.approx(0.0, abs=1e-12)


def test_whitened_labels_have_unit_moments():
    rng = np.random.default_rng(3)
    y = np.exp(rng.normal(-2.0, 0.7, size=(40, 6)))
    z = transform_labels(fit_label_transform("log_whiten", y), y)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-9)


def test_population_growth_changes_statistics():
    y2 = np.exp(np.array([[1.0, 0.0], [2.0, 1.0]]))
    y3 = np.vstack([y2, np.exp(np.array([[6.0, 2.0]]))])
    t2 = fit_label_transform("log_whiten", y2, population_descriptor="two")
    t3 = fit_label_transform("log_whiten", y3, population_descriptor="three")
    assert t2.mean[0] == pytest.approx(1.5)
    assert t3.mean[0] == pytest.approx(3.0)
    assert not np.allclose(t2.std, t3.std)


def test_degenerate_element_guarded():
    y = np.ones((5, 3))
    y[:, 1] = np.exp(np.arange(5.0))
    t = fit_label_transform("log_whiten", y)
    assert t.degenerate.tolist() == [True, False, True]
    assert t.std[0] == 1.0 and t.std[2] == 1.0
    assert t.n_degenerate == 2


def test_whiten_needs_two_impacts():
    with pytest.raises(InsufficientDataError):
        fit_label_transform("log_whiten", np.full((1, 4), 0.2))


def test_labels_below_floor_rejected():
    t = fit_label_transform("log", np.full((2, 2), 0.1))
    with pytest.raises(InvalidDataError):
        transform_labels(t, np.array([[0.1, 1e-9]]))
    with pytest.raises(InvalidDataError):
        fit_label_transform("log_whiten", np.array([[0.1, 0.0], [0.2, 0.1]]))


def test_element_count_mismatch_rejected():
    y = np.exp(np.random.default_rng(4).normal(size=(6, 4)))
    t = fit_label_transform("log_whiten", y)
    with pytest.raises(IncompatibilityError):
        transform_labels(t, y[:, :3])
    with pytest.raises(IncompatibilityError):
        inverse_transform(t, np.zeros((2, 3)))


def test_log_kind_stores_nothing():
    t = fit_label_transform("log", np.full((3, 2), 0.5))
    assert t.mean is None and t.std is None
    with pytest.raises(InvalidParameterError):
        LabelTransform(kind="log", mean=np.zeros(2), std=np.ones(2))


def test_inverse_in_float32_overflows_to_inf():
    # 32-bit predictions must invert in 32-bit: exp(120) overflows there
    t = fit_label_transform("log", np.full((2, 2), 0.5))
    out = inverse_transform(t, np.array([[120.0, -1.0]], dtype=np.float32))
    assert out.dtype == np.float32
    assert np.isinf(out[0, 0]) and np.isfinite(out[0, 1])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    y = np.exp(rng.normal(-2.0, 1.5, size=(4, 3)))
    for kind in ("log", "log_whiten"):
        t = fit_label_transform(kind, y)
        np.testing.assert_allclose(inverse_transform(t, transform_labels(t, y)), y, rtol=1e-10)


# ---------------------------------------------------------------------------
# noise augmentation


def test_augment_triples_rows():
    X = np.random.default_rng(5).normal(size=(10, 6))
    out = noise_augment(X, seed=1)
    assert out.shape == (30, 6)
    np.testing.assert_array_equal(out[:10], X)


def test_zero_level_copies_exactly():
    X = np.random.default_rng(6).normal(size=(4, 3))
    out = noise_augment(X, levels=(0.0,), seed=1)
    np.testing.assert_array_equal(out[4:], X)


def test_noise_scale_matches_levels():
    rng = np.random.default_rng(7)
    X = rng.normal(0.0, 3.0, size=(1000, 5)) * np.array([1.0, 2.0, 0.5, 4.0, 1.0])
    out = noise_augment(X, seed=2)
    sigma = X.std(axis=0)
    for bi, level in enumerate(DEFAULT_NOISE_LEVELS, start=1):
        delta = out[1000 * bi:1000 * (bi + 1)] - X
        np.testing.assert_allclose(delta.std(axis=0), level * sigma, rtol=0.10)


def test_augment_replicates_labels_bitwise():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(6, 4))
    y = rng.normal(size=(6, 3))
    Xa, ya = noise_augment(X, y, seed=3)
    assert Xa.shape == (18, 4) and ya.shape == (18, 3)
    for k in range(3):
        np.testing.assert_array_equal(ya[6 * k:6 * (k + 1)], y)


def test_augment_deterministic():
    X = np.random.default_rng(9).normal(size=(5, 4))
    np.testing.assert_array_equal(noise_augment(X, seed=7), noise_augment(X, seed=7))
    assert not np.array_equal(noise_augment(X, seed=7), noise_augment(X, seed=8))


def test_augment_input_validation():
    with pytest.raises(InsufficientDataError):
        noise_augment(np.ones((1, 4)))
    with pytest.raises(InvalidParameterError):
        noise_augment(np.ones((3, 4)), levels=(-0.01,))
    with pytest.raises(IncompatibilityError):
        noise_augment(np.ones((3, 4)), labels=np.ones((2, 1)))


# ---------------------------------------------------------------------------
# partitioning


def test_partition_sizes_by_rounding():
    for n, ratios, want in [
        (2000, (0.70, 0.15, 0.15), (1400, 300, 300)),
        (300, (0.70, 0.15, 0.15), (210, 45, 45)),
        (36, (0.50, 0.25, 0.25), (18, 9, 9)),
    ]:
        tr, va, te = partition_indices(n, ratios, np.random.default_rng(0))
        assert (len(tr), len(va), len(te)) == want


def test_partition_disjoint_and_covering():
    tr, va, te = partition_indices(57, (0.6, 0.2, 0.2), np.random.default_rng(1))
    merged = np.sort(np.concatenate([tr, va, te]))
    np.testing.assert_array_equal(merged, np.arange(57))


def test_partition_validation():
    with pytest.raises(InvalidParameterError):
        partition_indices(10, (0.5, 0.3, 0.3), np.random.default_rng(0))
    with pytest.raises(InsufficientDataError):
        partition_indices(5, (0.7, 0.15, 0.15), np.random.default_rng(0))


@given(st.integers(12, 200), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_partition_property(n, seed):
    tr, va, te = partition_indices(n, (0.5, 0.25, 0.25), np.random.default_rng(seed))
    merged = np.sort(np.concatenate([tr, va, te]))
    np.testing.assert_array_equal(merged, np.arange(n))


# ---------------------------------------------------------------------------
# strategy metadata


def test_default_train_configs_match_published_values():
    mps = default_train_config("mps")
    assert (mps.learning_rate, mps.epochs, mps.l2_lambda) == (0.0003, 3000, 0.01)
    mpsr = default_train_config("mpsr")
    assert (mpsr.learning_rate, mpsr.epochs, mpsr.l2_lambda) == (0.0005, 3000, 0.05)
    assert mps.batch_size == 128


def test_abbreviation_mapping_total_and_injective():
    published = {
        "Pre-train",
        "Transfer",
        "Fusion 1",
        "Fusion 2",
        "CF/MMA/NFL/NHTSA 1",
        "CF/MMA/NFL/NHTSA 2",
    }
    image = {strategy_abbreviation(name) for name in STRATEGY_NAMES}
    assert image == published
    assert len(image) == len(STRATEGY_NAMES)
    assert strategy_abbreviation("scratch_whiten", "NFL") == "NFL 1"
    assert strategy_abbreviation("scratch_log", "MMA") == "MMA 2"


def test_strategy_spec_validation():
    StrategySpec(name="transfer")
    with pytest.raises(InvalidParameterError):
        StrategySpec(name="mystery")
    with pytest.raises(InvalidParameterError):
        StrategySpec(name="transfer", freeze_grid=())
    with pytest.raises(InvalidParameterError):
        StrategySpec(name="transfer", freeze_grid=(0, -1))


# ---------------------------------------------------------------------------
# pretraining


def test_pretrain_bundle_basics(hm_data, basis_bundle):
    hm, X = hm_data
    split = basis_bundle.provenance["split"]
    merged = sorted(split["train"] + split["validation"] + split["test"])
    assert merged == list(range(hm.n_recordings))
    pred, flags = predict_features(basis_bundle, X[split["test"]])
    assert pred.shape == (len(split["test"]), N_ELEMENTS)
    assert not flags.any()
    assert np.all(pred > 0)


def test_pretrain_standardizer_population(hm_data, basis_bundle):
    hm, X = hm_data
    tr = basis_bundle.provenance["split"]["train"]
    np.testing.assert_allclose(basis_bundle.standardizer.mean, X[tr].mean(axis=0), atol=1e-12)
    assert "train" in basis_bundle.standardizer.population_descriptor
    assert basis_bundle.transform.kind == "log"


def test_pretrain_deterministic(hm_data):
    hm, X = hm_data
    cfg = default_train_config("mpsr", epochs=2, seed=9)
    a = pretrain(hm, "mpsr", cfg, features=X)
    b = pretrain(hm, "mpsr", cfg, features=X)
    for wa, wb in zip(a.model.weights, b.model.weights):
        np.testing.assert_array_equal(wa, wb)
    assert a.provenance == b.provenance


# ---------------------------------------------------------------------------
# scratch and fusion


def test_scratch_provenance_names_only_onfield(onfield_data):
    ds, X = onfield_data
    bundle = scratch_train((X[:8], ds.mps[:8]), True, "mps",
                           default_train_config("mps", epochs=2, seed=1), dataset_tag="mma")
    assert bundle.provenance["datasets"] == {"onfield": "mma"}
    assert bundle.provenance["strategy"] == "scratch_whiten"
    assert bundle.transform.kind == "log_whiten"
    assert bundle.provenance["n_train_impacts"] == 8


def test_scratch_small_split_sizes(onfield_data):
    # the published small-set protocol: 36 impacts at 50/25/25 -> 18 train
    tr, va, te = partition_indices(36, (0.5, 0.25, 0.25), np.random.default_rng(3))
    assert len(tr) == 18
    X = np.random.default_rng(4).normal(size=(36, 510))
    Xa = noise_augment(X[tr], seed=0)
    assert Xa.shape[0] == 54


def test_scratch_needs_two_impacts(onfield_data):
    ds, X = onfield_data
    with pytest.raises(InsufficientDataError):
        scratch_train((X[:1], ds.mps[:1]), False, "mps",
                      default_train_config("mps", epochs=1))


def test_fusion_row_count_and_whitening(hm_data, onfield_data):
    hm, Xhm = hm_data
    on, Xon = onfield_data
    cfg = default_train_config("mps", epochs=2, seed=2)
    bundle = fusion_train(hm, (Xon[:10], on.mps[:10]), True, "mps", cfg,
                          features=Xhm, split_seed=7, dataset_tag="mma")
    n_hm_train = round(0.7 * hm.n_recordings)
    assert bundle.provenance["n_train_impacts"] == n_hm_train + 10
    # whitening statistics must match direct recomputation on the pooled labels
    tr = bundle.provenance["split"]["train"]
    pooled = np.vstack([hm.mps[tr], on.mps[:10]])
    np.testing.assert_allclose(bundle.transform.mean, np.log(pooled).mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(bundle.transform.std, np.log(pooled).std(axis=0), atol=1e-12)
    assert bundle.provenance["strategy"] == "fusion_whiten"


def test_fusion_without_whitening_uses_plain_log(hm_data, onfield_data):
    hm, Xhm = hm_data
    on, Xon = onfield_data
    cfg = default_train_config("mpsr", epochs=1, seed=2)
    bundle = fusion_train(hm, (Xon[:6], on.mpsr[:6]), False, "mpsr", cfg, features=Xhm)
    assert bundle.transform.kind == "log"
    assert bundle.provenance["strategy"] == "fusion_log"


def test_fusion_population_switch_widens_whitening(hm_data, onfield_data):
    hm, Xhm = hm_data
    on, Xon = onfield_data
    cfg = default_train_config("mps", epochs=1, seed=3)
    plain = fusion_train(hm, (Xon[:6], on.mps[:6]), True, "mps", cfg, features=Xhm)
    widened = fusion_train(hm, (Xon[:6], on.mps[:6]), True, "mps", cfg, features=Xhm,
                           extra_population_labels=on.mps[6:10])
    assert not np.allclose(plain.transform.mean, widened.transform.mean)
    assert "validation" in widened.transform.population_descriptor


# ---------------------------------------------------------------------------
# fine-tuning


def test_fine_tune_freezes_layers_bitwise(basis_bundle, hm_data, onfield_data):
    hm, Xhm = hm_data
    on, Xon = onfield_data
    adapted = fine_tune(basis_bundle, (Xon[:10], on.mps[:10]), (Xon[10:13], on.mps[10:13]),
                        Xhm, freeze_grid=(2,), lr_grid=(3e-4,), epoch_grid=(2,), seed=1)
    for i in range(2):
        np.testing.assert_array_equal(adapted.model.weights[i], basis_bundle.model.weights[i])
        np.testing.assert_array_equal(adapted.model.biases[i], basis_bundle.model.biases[i])
    assert not np.array_equal(adapted.model.weights[2], basis_bundle.model.weights[2])
    assert adapted.provenance["selected"] == {"freeze": 2, "learning_rate": 3e-4, "epochs": 2}


def test_fine_tune_zero_epochs_keeps_basis_predictor(basis_bundle, hm_data, onfield_data):
    hm, Xhm = hm_data
    on, Xon = onfield_data
    adapted = fine_tune(basis_bundle, (Xon[:10], on.mps[:10]), (Xon[10:13], on.mps[10:13]),
                        Xhm, freeze_grid=(0, 1), lr_grid=None, epoch_grid=(0,), seed=1)
    # hidden layers are the basis weights bitwise; the output layer is only
    # re-expressed in the refit whitened target space
    for wa, wb in zip(adapted.model.weights[:-1], basis_bundle.model.weights[:-1]):
        np.testing.assert_array_equal(wa, wb)
    assert adapted.transform.kind == "log_whiten"
    # with 0 epochs the predictor differs from the basis only via the refit
    # standardizer: feeding the basis model the adapted standardization must
    # reproduce the adapted predictions up to float rounding
    Xs = standardize(adapted.standardizer, Xon[10:13])
    expected = inverse_transform(basis_bundle.transform, forward(basis_bundle.model, Xs))
    p_adapted, _ = predict_features(adapted, Xon[10:13])
    np.testing.assert_allclose(p_adapted, expected, rtol=2e-5)
    # while the standardizer refit itself does shift predictions
    p_basis, _ = predict_features(basis_bundle, Xon[10:13])
    assert not np.array_equal(p_basis, p_adapted)


def test_fine_tune_grid_selection_matches_exhaustive_oracle(basis_bundle, hm_data, onfield_data):
    hm, Xhm = hm_data
    on, Xon = onfield_data
    train_pair = (Xon[:10], on.mps[:10])
    val_pair = (Xon[10:14], on.mps[10:14])
    freeze_grid, epoch_grid, seed = (0, 1, 2), (0, 2), 6
    adapted = fine_tune(basis_bundle, train_pair, val_pair, Xhm,
                        freeze_grid=freeze_grid, lr_grid=None, epoch_grid=epoch_grid, seed=seed)

    # independent exhaustive re-evaluation of every grid point
    base = basis_bundle.provenance["hyperparameters"]
    lr_grid = tuple(base["learning_rate"] * f for f in (1.0, 1.0 / 3.0, 0.1))
    std_u = fit_standardizer(np.vstack([Xhm, train_pair[0]]), "oracle")
    refit = fit_label_transform("log_whiten", train_pair[1], "oracle")
    # rebase the output layer by hand: log targets -> whitened targets
    weights = list(basis_bundle.model.weights)
    biases = list(basis_bundle.model.biases)
    weights[-1] = (weights[-1] / refit.std[None, :]).astype(weights[-1].dtype)
    biases[-1] = ((biases[-1] - refit.mean) / refit.std).astype(biases[-1].dtype)
    start = MlpModel(layer_sizes=basis_bundle.model.layer_sizes, weights=weights,
                     biases=biases, dropout_rates=basis_bundle.model.dropout_rates)
    y_t = transform_labels(refit, train_pair[1])
    Xa, ya = noise_augment(train_pair[0], y_t, seed=[seed, 3])
    Xs = standardize(std_u, Xa)
    Xv = standardize(std_u, val_pair[0])
    best = None
    for k in freeze_grid:
        for lr in lr_grid:
            for ep in epoch_grid:
                cfg = TrainConfig(learning_rate=lr, epochs=ep, batch_size=base["batch_size"],
                                  l2_lambda=base["l2_lambda"], seed=seed)
                model, _ = train(start, Xs, ya, cfg, frozen_layers=k)
                pred = inverse_transform(refit, forward(model, Xv))
                mae = float(np.mean(np.abs(pred.astype(np.float64) - val_pair[1])))
                key = (mae, -k, lr, ep)
                if best is None or key < best[0]:
                    best = (key, {"freeze": k, "learning_rate": lr, "epochs": ep})
    assert adapted.provenance["selected"] == best[1]
    recorded = {(g["freeze"], g["learning_rate"], g["epochs"]): g["val_mae"]
                for g in adapted.provenance["grid_results"]}
    assert len(recorded) == len(freeze_grid) * len(lr_grid) * len(epoch_grid)


def test_fine_tune_empty_sets_rejected(basis_bundle, hm_data, onfield_data):
    hm, Xhm = hm_data
    on, Xon = onfield_data
    empty = (Xon[:0], on.mps[:0])
    good = (Xon[:4], on.mps[:4])
    with pytest.raises(InsufficientDataError):
        fine_tune(basis_bundle, empty, good, Xhm, epoch_grid=(1,))
    with pytest.raises(InsufficientDataError):
        fine_tune(basis_bundle, good, empty, Xhm, epoch_grid=(1,))


# ---------------------------------------------------------------------------
# prediction


def test_predict_deterministic(basis_bundle, onfield_data):
    on, Xon = onfield_data
    p1, f1 = predict_features(basis_bundle, Xon)
    p2, f2 = predict_features(basis_bundle, Xon)
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_array_equal(f1, f2)


def test_predict_from_recordings_matches_features(basis_bundle, onfield_data):
    on, Xon = onfield_data
    p_rec, _ = predict(basis_bundle, on.recordings[:3])
    p_feat, _ = predict_features(basis_bundle, Xon[:3])
    np.testing.assert_array_equal(p_rec, p_feat)


def test_predict_layout_mismatch_rejected(basis_bundle, onfield_data):
    class OtherLayout:
        version = "v1+ema-ffffffff"

    on, _ = onfield_data
    with pytest.raises(IncompatibilityError, match="v1"):
        predict(basis_bundle, on.recordings[:1], layout=OtherLayout())


def test_overfit_five_impacts_reproduces_labels(onfield_data):
    # a deliberately memorized model (no dropout) must round-trip its own
    # training labels through the full standardize/forward/invert path
    from headstrain.nn import init_model

    ds, X = onfield_data
    xs, ys = X[:5], ds.mps[:5]
    std = fit_standardizer(xs, "overfit-fixture")
    t = fit_label_transform("log", ys, "overfit-fixture")
    model = init_model((510, 500, 300, 100, N_ELEMENTS), seed=1, dropout_rates=(0.0, 0.0, 0.0))
    cfg = TrainConfig(learning_rate=1e-3, epochs=800, batch_size=8, l2_lambda=0.0, seed=0)
    trained, _ = train(model, standardize(std, xs), transform_labels(t, ys), cfg)
    bundle = PredictorBundle(quantity="mps", model=trained, standardizer=std, transform=t)
    pred, flags = predict_features(bundle, xs)
    assert not flags.any()
    per_impact_mae = np.mean(np.abs(pred.astype(np.float64) - ys), axis=1)
    assert np.all(per_impact_mae < 0.05 * ys.mean())


def test_nonfinite_predictions_flagged_not_masked(basis_bundle, onfield_data):
    on, Xon = onfield_data
    weights = [w.copy() for w in basis_bundle.model.weights]
    weights[-1] = weights[-1] * np.float32(1e30)
    biases = [b.copy() for b in basis_bundle.model.biases]
    # finite but un-exponentiable outputs: rows that survive the forward pass
    # still overflow at inversion, exercising both flag branches
    biases[-1][:] = np.float32(1e38)
    broken = PredictorBundle(
        quantity=basis_bundle.quantity,
        model=MlpModel(layer_sizes=basis_bundle.model.layer_sizes, weights=weights,
                       biases=biases,
                       dropout_rates=basis_bundle.model.dropout_rates),
        standardizer=basis_bundle.standardizer,
        transform=basis_bundle.transform,
        provenance=dict(basis_bundle.provenance),
    )
    pred, flags = predict_features(broken, Xon[:4])
    assert flags.all()
    assert pred.shape == (4, N_ELEMENTS)


# ---------------------------------------------------------------------------
# bundle files


def test_bundle_round_trip_bitwise(basis_bundle, onfield_data, tmp_path):
    on, Xon = onfield_data
    path = tmp_path / "basis.bundle"
    save_bundle(basis_bundle, path)
    loaded = load_bundle(path)
    p1, _ = predict_features(basis_bundle, Xon)
    p2, _ = predict_features(loaded, Xon)
    np.testing.assert_array_equal(p1, p2)
    assert loaded.provenance == basis_bundle.provenance
    assert loaded.quantity == basis_bundle.quantity


def test_whitened_bundle_round_trip(hm_data, onfield_data, tmp_path):
    hm, Xhm = hm_data
    on, Xon = onfield_data
    bundle = scratch_train((Xon[:8], on.mpsr[:8]), True, "mpsr",
                           default_train_config("mpsr", epochs=2, seed=4))
    path = tmp_path / "whiten.bundle"
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    np.testing.assert_array_equal(loaded.transform.mean, bundle.transform.mean)
    np.testing.assert_array_equal(loaded.transform.std, bundle.transform.std)
    p1, _ = predict_features(bundle, Xon)
    p2, _ = predict_features(loaded, Xon)
    np.testing.assert_array_equal(p1, p2)


def test_bundle_corruption_detected(basis_bundle, tmp_path):
    raw = bytearray(bundle_to_bytes(basis_bundle))
    raw[len(raw) // 2] ^= 0x40
    with pytest.raises(ChecksumError):
        bundle_from_bytes(bytes(raw))


def test_bundle_truncation_detected(basis_bundle):
    raw = bundle_to_bytes(basis_bundle)
    with pytest.raises(TruncatedFileError):
        bundle_from_bytes(raw[: len(raw) // 3])
    with pytest.raises(TruncatedFileError):
        bundle_from_bytes(raw[:10])


def test_bundle_bad_magic_rejected(basis_bundle):
    raw = bundle_to_bytes(basis_bundle)
    with pytest.raises(FileFormatError):
        bundle_from_bytes(b"\x00" * len(raw))


def test_bundle_version_gate(basis_bundle):
    import hashlib
    import struct

    raw = bundle_to_bytes(basis_bundle)
    body = bytearray(raw[:-32])
    struct.pack_into("<I", body, 13, 2)
    doctored = bytes(body) + hashlib.sha256(bytes(body)).digest()
    with pytest.raises(VersionError, match="2"):
        bundle_from_bytes(doctored)


def test_bundle_trailing_bytes_rejected(basis_bundle):
    import hashlib

    raw = bundle_to_bytes(basis_bundle)
    body = raw[:-32] + b"\x00\x00\x00\x00"
    doctored = body + hashlib.sha256(body).digest()
    with pytest.raises(FileFormatError, match="trailing"):
        bundle_from_bytes(doctored)
