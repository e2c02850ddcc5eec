import numpy as np
import pytest

import oracles
from incgan import diffcore as dc
from incgan.datagen import Block, Dataset, default_architectures, generate_dataset
from incgan.diffcore import ParameterSet
from incgan.errors import ConfigError, TrainingError
from incgan.learner import (
    TrainConfig,
    check_invariants,
    detect,
    evaluate,
    fit,
    increment,
    initialize,
    predict,
)
from incgan.losses import LossConfig
from incgan.model import NetworkConfig, extract_features, forward_all

COUNTS = {"train": 24, "val": 8, "test": 10}


def net(variant="mt_sc"):
    return NetworkConfig(input_size=8, feature_dim=6, base_channels=2, variant=variant)


def train(max_epochs=2, **kw):
    return TrainConfig(batch_size=16, max_epochs=max_epochs, **kw)


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(default_architectures(4), COUNTS, seed=0, size=8)


def start(data, archs=(0,), variant="mt_sc", budget=8, max_epochs=2, loss=None):
    loss = loss or LossConfig.for_variant(variant)
    return initialize(data, list(archs), net(variant), loss, train(max_epochs), budget)


# ------------------------------------------------------------------ generic trainer

def scalar_problem():
    params = ParameterSet({"w": np.array([2.0])})
    return params, lambda leaves, rows, rng: dc.sum(leaves["w"] * leaves["w"])


def test_constant_validation_stops_after_patience_plus_one():
    params, loss = scalar_problem()
    report = fit(params, 8, loss, lambda: 1.0, TrainConfig(batch_size=4, patience=5), np.random.default_rng(0))
    assert report.epochs_run == 6
    assert report.stop_reason == "patience"


def test_strictly_improving_validation_runs_to_max_epochs():
    params, loss = scalar_problem()
    values = iter(range(100, 0, -1))
    report = fit(params, 8, loss, lambda: next(values), TrainConfig(batch_size=4, max_epochs=9), np.random.default_rng(0))
    assert report.epochs_run == 9 and report.stop_reason == "max_epochs"


def test_improvement_needs_min_delta():
    params, loss = scalar_problem()
    values = iter([1.0 - 1e-7 * i for i in range(50)])
    report = fit(params, 8, loss, lambda: next(values), TrainConfig(batch_size=4, patience=3), np.random.default_rng(0))
    assert report.epochs_run == 4


def test_best_epoch_parameters_are_restored():
    params, loss = scalar_problem()
    seen = []
    val_sequence = iter([3.0, 1.0, 2.0, 2.5, 2.0, 2.0, 2.0, 2.0])

    def val():
        seen.append(params["w"].copy())
        return next(val_sequence)

    report = fit(params, 8, loss, val, TrainConfig(batch_size=4, patience=3), np.random.default_rng(0))
    assert report.best_epoch == 2
    np.testing.assert_array_equal(params["w"], seen[1])
    assert not np.array_equal(seen[1], seen[-1])


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_non_finite_loss_aborts_with_context():
    params = ParameterSet({"w": np.array([1.0])})

    def loss(leaves, rows, rng):
        return dc.sum(dc.log(leaves["w"] - 1.0))

    with pytest.raises(TrainingError, match="step 3"):
        fit(params, 4, loss, lambda: 0.0, TrainConfig(batch_size=4), np.random.default_rng(0), step=3)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=-1)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    assert (TrainConfig().lr, TrainConfig().batch_size, TrainConfig().patience, TrainConfig().max_epochs) == (1e-3, 64, 5, 100)


# ------------------------------------------------------------------ protocol

def test_initialize_registry(tiny):
    state = start(tiny, archs=(0, 1))
    assert len(state.registry) == 4
    assert state.registry.gan_mask().tolist() == [True, False, True, False]
    assert state.model.n_classes == 4
    assert state.store.counts() == {1: 2, 2: 2, 3: 2, 4: 2}  # floor(8 / 4)
    assert state.snapshot is None and state.step == 1
    check_invariants(state)


def test_initialize_without_architectures_is_config_error(tiny):
    with pytest.raises(ConfigError):
        start(tiny, archs=())


def test_initial_training_loss_decreases():
    data = generate_dataset(default_architectures(1, amplitude=0.5), {"train": 128, "val": 32, "test": 8}, seed=0)
    config = NetworkConfig(variant="mt_sc")
    state = initialize(data, [0], config, LossConfig.for_variant("mt_sc"), TrainConfig(max_epochs=3), 32)
    losses = state.reports[0].train_losses
    assert len(losses) == 3
    assert all(b <= a + 1e-3 for a, b in zip(losses, losses[1:])), losses
    assert losses[-1] < losses[0]


def test_zero_budget_falls_back_to_head_argmax(tiny):
    state = start(tiny, budget=0)
    assert state.store.total == 0 and not state.store.templates
    images = tiny.block(0, "G", "test").images
    expected = np.argmax(forward_all(state.model, images)["logits"], axis=1) + 1
    np.testing.assert_array_equal(predict(state, images), expected)
    assert evaluate(state, tiny).rule == "head_argmax"
    increment(state, tiny, 1)
    check_invariants(state)
    assert evaluate(state, tiny).rule == "head_argmax"


def test_increment_bookkeeping(tiny):
    state = start(tiny, budget=12)
    for k, arch in enumerate((1, 2, 3), start=1):
        report = increment(state, tiny, arch)
        t = 2 * (1 + k)
        assert len(state.registry) == t == state.model.n_classes
        assert state.store.total <= 12
        assert set(state.store.counts().values()) == {12 // t}
        assert report.epochs_run <= 2 and state.step == k + 1
        check_invariants(state)


def test_increment_with_budget_512_keeps_85_per_class():
    data = generate_dataset(default_architectures(3), {"train": 90, "val": 4, "test": 4}, seed=0, size=8)
    state = start(data, budget=512, max_epochs=0)
    increment(state, data, 1)
    increment(state, data, 2)
    assert state.store.counts() == {c: 85 for c in range(1, 7)}
    check_invariants(state)


def test_unlimited_budget_keeps_everything(tiny):
    state = start(tiny, budget=float("inf"), max_epochs=1)
    increment(state, tiny, 1)
    assert set(state.store.counts().values()) == {COUNTS["train"]}
    check_invariants(state)


def test_zero_epoch_increment_leaves_model_at_snapshot(tiny):
    state = start(tiny, loss=LossConfig(gamma=1.0, temperature=2.0, lam=0.0))
    images = tiny.block(0, "R", "test").images
    before = forward_all(state.model, images)["logits"].copy()
    state.train_config = train(max_epochs=0)
    increment(state, tiny, 1)
    for name, value in state.snapshot.params.items():
        if name.startswith("head."):
            np.testing.assert_array_equal(state.model.params[name][: len(value)], value)
            assert not state.model.params[name][len(value):].any()
        else:
            np.testing.assert_array_equal(state.model.params[name], value)
    np.testing.assert_array_equal(forward_all(state.model, images)["logits"][:, :2], before)


def test_detect_follows_template_origin(tiny):
    state = start(tiny, archs=(0, 1))
    images = np.concatenate([tiny.block(a, o, "test").images[:1] for a in (0, 1) for o in ("G", "R")])
    feats = extract_features(state.model, images)
    # place class k's template exactly at the feature of image k
    state.store.templates = {k + 1: feats[k].astype(np.float64) for k in range(4)}
    assert detect(state, images).tolist() == [True, False, True, False]


def test_detect_matches_exhaustive_oracle(tiny):
    state = start(tiny, archs=(0, 1, 2))
    rng = np.random.default_rng(0)
    images = rng.uniform(-1, 1, size=(200, 8, 8, 3)).astype(np.float32)
    feats = extract_features(state.model, images)
    ids = sorted(state.store.templates)
    templates = [state.store.templates[i] for i in ids]
    gan = state.registry.gan_mask()
    expected = [bool(gan[oracles.classify(f, templates, ids) - 1]) for f in feats]
    assert detect(state, images).tolist() == expected


def constant_dataset(archs=(0, 1), n=5):
    """Every test image of a class is the same constant image."""
    blocks = {}
    for a in archs:
        for o, shade in (("G", 0.8), ("R", -0.8)):
            img = np.full((8, 8, 3), shade * (a + 1) / len(archs), np.float32)
            img[a, :, :] = -img[a, :, :]
            blocks[(a, o, "test")] = Block(np.stack([img] * n), [f"{a}{o}{i}" for i in range(n)])
    return Dataset(blocks)


def test_evaluate_with_hand_placed_templates_is_perfect(tiny):
    state = start(tiny, archs=(0, 1))
    data = constant_dataset()
    state.store.templates = {
        state.registry.class_id(a, o): extract_features(state.model, data.block(a, o, "test").images[:1])[0]
        for a in (0, 1) for o in ("G", "R")
    }
    metrics = evaluate(state, data)
    assert metrics.detection_acc == 1.0 and metrics.classification_acc == 1.0
    assert metrics.confusion.tolist() == [[5, 0], [0, 5]]
    assert metrics.per_arch_detection == {0: 1.0, 1: 1.0}


def test_evaluate_with_random_templates_is_near_chance(tiny):
    state = start(tiny, archs=(0, 1, 2, 3), max_epochs=0)
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        state.store.templates = {k: rng.normal(size=6) for k in range(1, 9)}
        accs.append(evaluate(state, tiny).detection_acc)
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_confusion_rows_sum_to_gan_test_counts(tiny):
    state = start(tiny, budget=8)
    increment(state, tiny, 1)
    increment(state, tiny, 2)
    metrics = evaluate(state, tiny)
    assert metrics.confusion.shape == (3, 3)
    assert metrics.confusion.sum(axis=1).tolist() == [COUNTS["test"]] * 3
    assert 0 <= metrics.detection_acc <= 1 and 0 <= metrics.classification_acc <= 1
    assert metrics.aux_detector_acc is None


def test_mt_mc_reports_auxiliary_detector(tiny):
    state = start(tiny, variant="mt_mc")
    increment(state, tiny, 1)
    metrics = evaluate(state, tiny)
    assert metrics.rule == "nme"
    assert 0 <= metrics.aux_detector_acc <= 1


@pytest.mark.parametrize("variant", ["base_icarl", "mt_mc", "mt_sc", "finetune"])
def test_runs_are_bitwise_deterministic(tiny, variant):
    def run():
        state = start(tiny, variant=variant)
        increment(state, tiny, 1)
        m = evaluate(state, tiny)
        return m.detection_acc, m.confusion.tobytes(), {k: v.tobytes() for k, v in state.model.params.items()}

    assert run() == run()
