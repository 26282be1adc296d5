import numpy as np
import pytest

from owpt.losses import (
    CrossEntropyLoss,
    DetectorLoss,
    EntropyLoss,
    SubclassifierLoss,
    TrainBatch,
    loss_and_gradient,
)
from owpt.model import (
    FrozenEncoder,
    PromptVector,
    Temperature,
    classify,
    stable_log_softmax,
)

from conftest import rand_unit


def finite_difference_gradient(enc, tokens, batch, spec, step=1e-5):
    """Independent oracle: central differences on the scalar loss."""
    grad = np.zeros_like(tokens)
    for i in range(tokens.shape[0]):
        for j in range(tokens.shape[1]):
            up, down = tokens.copy(), tokens.copy()
            up[i, j] += step
            down[i, j] -= step
            l_up, _ = loss_and_gradient(enc, PromptVector(up), batch, spec)
            l_down, _ = loss_and_gradient(enc, PromptVector(down), batch, spec)
            grad[i, j] = (l_up - l_down) / (2.0 * step)
    return grad


def max_relative_error(a, b, floor=1e-4):
    scale = np.maximum.reduce([np.abs(a), np.abs(b), np.full_like(a, floor)])
    return float((np.abs(a - b) / scale).max())


def random_case(enc, rng, with_refs=True):
    m = int(rng.integers(2, 5))
    tokens = rng.normal(0.0, 0.4, size=(m, enc.token_dim))
    n = int(rng.integers(4, 9))
    z = np.stack([rand_unit(rng, enc.embed_dim) for _ in range(n)])
    support = tuple(range(enc.n_classes))
    labels = rng.integers(0, len(support), size=n)
    new_mask = np.zeros(n, dtype=bool)
    new_mask[n // 2 :] = True
    refs = None
    if with_refs:
        raw = rng.normal(size=(n, len(support)))
        refs = stable_log_softmax(raw, axis=1)
    batch = TrainBatch(z, labels, support, Temperature(0.05), new_mask=new_mask, ref_log_probs=refs)
    return tokens, batch


@pytest.mark.parametrize(
    "spec",
    [
        CrossEntropyLoss(),
        EntropyLoss(),
        DetectorLoss(margin=0.4),
        SubclassifierLoss(),
        SubclassifierLoss(ce_weight=1 / 3, kl_weight=1 / 5),
    ],
    ids=lambda s: type(s).__name__ + getattr(s, "ce_weight", "") .__repr__(),
)
def test_gradient_matches_finite_differences(enc, spec):
    rng = np.random.default_rng(123)
    for _ in range(3):
        tokens, batch = random_case(enc, rng)
        _, analytic = loss_and_gradient(enc, PromptVector(tokens), batch, spec)
        numeric = finite_difference_gradient(enc, tokens, batch, spec)
        assert max_relative_error(analytic, numeric) < 1e-5


def test_gradient_rows_identical(enc):
    rng = np.random.default_rng(5)
    tokens, batch = random_case(enc, rng)
    _, grad = loss_and_gradient(enc, PromptVector(tokens), batch, CrossEntropyLoss())
    assert np.array_equal(grad, np.tile(grad[0], (grad.shape[0], 1)))


def test_singleton_support_ce_is_exactly_zero(enc, temp):
    z = rand_unit(np.random.default_rng(1), enc.embed_dim)[None, :]
    batch = TrainBatch(z, np.array([0]), (2,), temp)
    loss, grad = loss_and_gradient(enc, PromptVector.seeded(3, enc.token_dim, 0), batch, CrossEntropyLoss())
    assert loss == 0.0
    assert np.abs(grad).max() <= 1e-9


def test_mean_reduction_duplication_invariance(enc, temp):
    rng = np.random.default_rng(7)
    tokens, batch = random_case(enc, rng)
    doubled = TrainBatch(
        np.concatenate([batch.z, batch.z]),
        np.concatenate([batch.labels, batch.labels]),
        batch.support,
        temp,
        new_mask=np.concatenate([batch.new_mask, batch.new_mask]),
        ref_log_probs=np.concatenate([batch.ref_log_probs, batch.ref_log_probs]),
    )
    for spec in (CrossEntropyLoss(), EntropyLoss(), DetectorLoss(0.4)):
        l1, g1 = loss_and_gradient(enc, PromptVector(tokens), batch, spec)
        l2, g2 = loss_and_gradient(enc, PromptVector(tokens), doubled, spec)
        assert l2 == pytest.approx(l1, abs=1e-12)
        assert np.allclose(g1, g2, atol=1e-12)


def test_detector_loss_value_against_recomputation(enc, temp):
    """The composite must equal mean CE + hinge of independently computed entropies."""
    rng = np.random.default_rng(11)
    tokens, batch = random_case(enc, rng, with_refs=False)
    margin = 0.4
    loss, _ = loss_and_gradient(enc, PromptVector(tokens), batch, DetectorLoss(margin))

    prompt = PromptVector(tokens)
    support = batch.support
    ces, ents = [], []
    for z, label in zip(batch.z, batch.labels):
        dist = classify(enc, prompt, support, temp, z)
        ces.append(-np.log(dist.probs[label]))
        ents.append(dist.entropy())
    base = ~batch.new_mask
    expected = np.mean(np.array(ces)[base]) + max(
        0.0, margin + np.mean(np.array(ents)[base]) - np.mean(np.array(ents)[batch.new_mask])
    )
    assert loss == pytest.approx(expected, rel=1e-10)


def test_hinge_arithmetic():
    assert max(0.0, 0.4 + 0.2 - 0.9) == 0.0
    assert max(0.0, 0.4 + 0.5 - 0.6) == pytest.approx(0.3)


def test_entropy_endpoints(temp):
    # identical class tokens make every class equally likely: entropy = ln(n)
    enc = FrozenEncoder(
        token_dim=3,
        embed_dim=4,
        feature_dim=3,
        text_map=np.random.default_rng(0).normal(size=(4, 3)),
        image_map=np.eye(4, 3),
        class_tokens=np.tile(np.array([0.3, -1.0, 0.7]), (4, 1)),
        seed=0,
    )
    z = rand_unit(np.random.default_rng(1), 4)
    batch = TrainBatch(z[None, :], np.array([0]), (0, 1, 2, 3), temp)
    loss, _ = loss_and_gradient(enc, PromptVector.seeded(2, 3, 1), batch, EntropyLoss())
    assert loss == pytest.approx(np.log(4), abs=1e-12)
    # a singleton support is a one-hot distribution: entropy = 0
    batch1 = TrainBatch(z[None, :], np.array([0]), (0,), temp)
    loss1, _ = loss_and_gradient(enc, PromptVector.seeded(2, 3, 1), batch1, EntropyLoss())
    assert loss1 == 0.0


def test_kl_zero_when_model_matches_reference(enc, temp):
    rng = np.random.default_rng(13)
    tokens, batch = random_case(enc, rng, with_refs=False)
    prompt = PromptVector(tokens)
    support = batch.support
    # reference = the model's own distribution
    from owpt.model import class_embedding_matrix

    weights = class_embedding_matrix(enc, prompt, support)
    refs = stable_log_softmax(batch.z @ weights.T / temp.value, axis=1)
    all_new = TrainBatch(
        batch.z, batch.labels, support, temp,
        new_mask=np.ones(batch.size, dtype=bool), ref_log_probs=refs,
    )
    loss, grad = loss_and_gradient(enc, prompt, all_new, SubclassifierLoss())
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.abs(grad).max() < 1e-12


def test_subclassifier_without_rejected_is_pure_ce(enc, temp):
    rng = np.random.default_rng(17)
    tokens, batch = random_case(enc, rng, with_refs=False)
    all_base = TrainBatch(
        batch.z, batch.labels, batch.support, temp,
        new_mask=np.zeros(batch.size, dtype=bool),
    )
    loss, _ = loss_and_gradient(enc, PromptVector(tokens), all_base, SubclassifierLoss())
    ce_mean, _ = loss_and_gradient(
        enc, PromptVector(tokens),
        TrainBatch(batch.z, batch.labels, batch.support, temp),
        CrossEntropyLoss(),
    )
    assert loss == pytest.approx(ce_mean * batch.size, rel=1e-12)


def test_extreme_temperature_stays_finite(enc):
    # max-subtracted log-softmax keeps the loss finite even when the
    # true-class probability underflows to zero
    rng = np.random.default_rng(19)
    z = rand_unit(rng, enc.embed_dim)[None, :]
    support = tuple(range(enc.n_classes))
    prompt = PromptVector.seeded(3, enc.token_dim, 2)
    probs = classify(enc, prompt, support, Temperature(1e-9), z[0]).probs
    weakest = int(np.argmin(probs))
    batch = TrainBatch(z, np.array([weakest]), support, Temperature(1e-9))
    loss, grad = loss_and_gradient(enc, prompt, batch, CrossEntropyLoss())
    assert np.isfinite(loss) and np.isfinite(grad).all()


def test_overflow_raises(enc, temp):
    # a zero-probability reference blows the KL term up to +inf
    rng = np.random.default_rng(19)
    z = rand_unit(rng, enc.embed_dim)[None, :]
    support = tuple(range(enc.n_classes))
    prompt = PromptVector.seeded(3, enc.token_dim, 2)
    refs = np.full((1, len(support)), -np.inf)
    refs[0, 0] = 0.0  # all reference mass on class 0
    batch = TrainBatch(
        z, np.array([0]), support, temp,
        new_mask=np.array([True]), ref_log_probs=refs,
    )
    with pytest.raises(FloatingPointError, match="numerical overflow"):
        loss_and_gradient(enc, prompt, batch, SubclassifierLoss())


def test_batch_validation(enc, temp):
    z = np.zeros((2, enc.embed_dim))
    with pytest.raises(ValueError):
        TrainBatch(np.zeros((0, 4)), None, (0,), temp)
    with pytest.raises(ValueError):
        TrainBatch(z, np.array([0]), (0, 1), temp)  # label length mismatch
    with pytest.raises(ValueError):
        TrainBatch(z, np.array([0, 5]), (0, 1), temp)  # label out of range
    with pytest.raises(ValueError):
        TrainBatch(z, np.array([0, 1]), (0, 1), temp, new_mask=np.array([True]))
    batch = TrainBatch(z, None, (0, 1), temp)
    with pytest.raises(ValueError):
        loss_and_gradient(enc, PromptVector.seeded(2, enc.token_dim, 0), batch, CrossEntropyLoss())
