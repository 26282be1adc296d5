import numpy as np
import pytest

from owpt.data import DatasetSpec, generate
from owpt.model import PromptVector, Temperature
from owpt.tuning import (
    PROMPT_INIT_SCALE,
    TrainConfig,
    cosine_lr,
    load_classifier,
    pt_predict,
    save_classifier,
    tune_prompt,
)

from conftest import rand_unit


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(margin=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")
    assert TrainConfig.for_detector(seed=3).epochs == 50
    assert TrainConfig.for_classifier(seed=3).epochs == 100


def test_cosine_schedule_closed_form():
    lr, epochs = 0.002, 50
    for t in range(epochs):
        expected = lr * 0.5 * (1.0 + np.cos(np.pi * t / epochs))
        assert cosine_lr(lr, t, epochs) == pytest.approx(expected, abs=1e-12)
    assert cosine_lr(lr, 0, epochs) == lr
    assert cosine_lr(lr, epochs - 1, epochs) < lr * (1 - np.cos(np.pi * (epochs - 1) / epochs)) / 2 + 1e-12


@pytest.fixture(scope="module")
def world():
    ds = generate(DatasetSpec(n_classes=6, feature_dim=5, shots_per_class=6, test_per_class=4, seed=5))
    from owpt.data import sample_prototypes
    from owpt.model import FrozenEncoder

    enc = FrozenEncoder.aligned(
        sample_prototypes(ds.spec), token_dim=8, embed_dim=12, seed=50, prompt_len=4
    )
    return enc, ds


def test_zero_lr_returns_initialization(world):
    enc, ds = world
    cfg = TrainConfig(epochs=1, lr=0.0, seed=17, prompt_len=4)
    clf = tune_prompt(enc, ds.train, ds.class_space.base, cfg)
    init = np.random.default_rng(17).normal(0.0, PROMPT_INIT_SCALE, size=(4, enc.token_dim))
    assert np.array_equal(clf.prompt.tokens, init)
    assert len(clf.loss_history) == 1


def test_single_class_support_never_moves(world):
    enc, ds = world
    c = ds.class_space.base[0]
    subset = tuple(ex for ex in ds.train if ex.label == c)
    cfg = TrainConfig(epochs=3, lr=0.01, seed=23, prompt_len=4)
    clf = tune_prompt(enc, subset, (c,), cfg)
    init = np.random.default_rng(23).normal(0.0, PROMPT_INIT_SCALE, size=(4, enc.token_dim))
    assert np.array_equal(clf.prompt.tokens, init)  # CE over a singleton is identically 0
    assert all(h == 0.0 for h in clf.loss_history)


def test_reproducibility_bitwise(world):
    enc, ds = world
    cfg = TrainConfig(epochs=4, seed=29, prompt_len=4)
    a = tune_prompt(enc, ds.train, ds.class_space.base, cfg)
    b = tune_prompt(enc, ds.train, ds.class_space.base, cfg)
    assert np.array_equal(a.prompt.tokens, b.prompt.tokens)
    assert a.loss_history == b.loss_history
    c = tune_prompt(enc, ds.train, ds.class_space.base, TrainConfig(epochs=4, seed=30, prompt_len=4))
    assert not np.array_equal(a.prompt.tokens, c.prompt.tokens)


def test_training_reduces_loss_majority_of_seeds(world):
    enc, ds = world
    wins = 0
    for seed in (1, 2, 3, 4, 5):
        cfg = TrainConfig(epochs=15, seed=seed, prompt_len=4)
        clf = tune_prompt(enc, ds.train, ds.class_space.base, cfg)
        wins += clf.loss_history[-1] < clf.loss_history[0]
    assert wins >= 3


def test_labels_must_be_in_support(world):
    enc, ds = world
    with pytest.raises(ValueError):
        tune_prompt(enc, ds.train, ds.class_space.base[:2], TrainConfig(epochs=1, prompt_len=4))
    with pytest.raises(ValueError):
        tune_prompt(enc, (), ds.class_space.base, TrainConfig(epochs=1, prompt_len=4))


def test_divergence_aborts_with_epoch(world):
    enc, ds = world
    cfg = TrainConfig(epochs=2, lr=1e300, seed=3, prompt_len=4)
    with pytest.raises(RuntimeError, match="diverged at epoch 0"):
        tune_prompt(enc, ds.train, ds.class_space.base, cfg)


def test_predict_contract(world):
    enc, ds = world
    cfg = TrainConfig(epochs=2, seed=31, prompt_len=4)
    clf = tune_prompt(enc, ds.train, ds.class_space.base, cfg)
    z = rand_unit(np.random.default_rng(0), enc.embed_dim)
    # support may exceed the training support at prediction time
    full = pt_predict(clf, ds.class_space.all_classes, z)
    assert abs(full.probs.sum() - 1.0) < 1e-9
    single = pt_predict(clf, (ds.class_space.base[0],), z)
    assert single.probs.tolist() == [1.0]
    with pytest.raises(ValueError):
        pt_predict(clf, (), z)


def test_checkpoint_round_trip(world, tmp_path):
    enc, ds = world
    cfg = TrainConfig(epochs=3, seed=37, prompt_len=4)
    clf = tune_prompt(enc, ds.train, ds.class_space.base, cfg)
    path = tmp_path / "clf.json"
    save_classifier(clf, path, cfg)
    loaded = load_classifier(path, enc)
    assert np.array_equal(loaded.prompt.tokens, clf.prompt.tokens)  # exact bits
    assert loaded.support == clf.support
    assert loaded.loss_history == clf.loss_history
    assert loaded.temp == clf.temp
    z = rand_unit(np.random.default_rng(1), enc.embed_dim)
    assert np.array_equal(
        pt_predict(loaded, clf.support, z).probs, pt_predict(clf, clf.support, z).probs
    )


def test_checkpoint_rejects_other_files(world, tmp_path):
    enc, _ = world
    path = tmp_path / "bad.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        load_classifier(path, enc)
