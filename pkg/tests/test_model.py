import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owpt.model import (
    ClassSpace,
    FrozenEncoder,
    ProbabilityDistribution,
    PromptVector,
    Temperature,
    classify,
    image_embedding,
    stable_softmax,
    text_embedding,
)

from conftest import rand_unit


def test_temperature_positive():
    assert Temperature().value == 0.05
    with pytest.raises(ValueError):
        Temperature(0.0)
    with pytest.raises(ValueError):
        Temperature(-1.0)


def test_prompt_validation():
    with pytest.raises(ValueError):
        PromptVector(np.zeros((0, 4)))
    with pytest.raises(ValueError):
        PromptVector(np.array([[1.0, np.inf]]))
    p = PromptVector.seeded(3, 4, seed=0)
    assert p.length == 3 and p.token_dim == 4
    with pytest.raises(ValueError):
        p.tokens[0, 0] = 1.0  # read-only


def test_class_space_invariants():
    with pytest.raises(ValueError):
        ClassSpace((0, 1, 2), (0, 1), (1, 2))  # overlap
    with pytest.raises(ValueError):
        ClassSpace((0, 1, 2), (0,), (1,))  # not a cover
    with pytest.raises(ValueError):
        ClassSpace((0, 1), (0, 1), ())  # empty new
    space = ClassSpace((0, 1, 2, 3), (0, 2), (1, 3))
    assert space.is_base(2) and not space.is_base(3)


def test_distribution_invariants():
    with pytest.raises(ValueError):
        ProbabilityDistribution((0, 1), np.array([0.6, 0.6]))
    with pytest.raises(ValueError):
        ProbabilityDistribution((0, 0), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        ProbabilityDistribution((0, 1), np.array([-0.1, 1.1]))
    d = ProbabilityDistribution((3, 5), np.array([0.25, 0.75]))
    assert d.argmax() == 5
    assert d.prob_of(3) == 0.25
    with pytest.raises(KeyError, match="unknown class"):
        d.prob_of(4)


def test_text_embedding_unit_norm_and_determinism(enc):
    prompt = PromptVector.seeded(4, enc.token_dim, seed=5)
    w1 = text_embedding(enc, prompt, 2)
    w2 = text_embedding(enc, prompt, 2)
    assert np.linalg.norm(w1) == pytest.approx(1.0, abs=1e-9)
    assert np.array_equal(w1, w2)


def test_text_embedding_unknown_class(enc):
    prompt = PromptVector.seeded(4, enc.token_dim, seed=5)
    with pytest.raises(KeyError, match="unknown class"):
        text_embedding(enc, prompt, enc.n_classes + 3)


def test_text_embedding_zero_norm_error():
    # zero prompt and a zero class token force a zero pre-normalization vector
    enc = FrozenEncoder(
        token_dim=3,
        embed_dim=4,
        feature_dim=3,
        text_map=np.ones((4, 3)),
        image_map=np.ones((4, 3)),
        class_tokens=np.zeros((2, 3)),
        seed=0,
    )
    prompt = PromptVector(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="zero-norm embedding"):
        text_embedding(enc, prompt, 0)


def test_image_embedding_contract(enc):
    rng = np.random.default_rng(0)
    f = rng.normal(size=enc.feature_dim)
    z = image_embedding(enc, f)
    assert np.linalg.norm(z) == pytest.approx(1.0, abs=1e-9)
    # positive scaling cancels for a linear map under normalization
    assert np.allclose(z, image_embedding(enc, 2.0 * f), atol=1e-12)
    with pytest.raises(ValueError, match="zero-norm embedding"):
        image_embedding(enc, np.zeros(enc.feature_dim))
    with pytest.raises(ValueError):
        image_embedding(enc, np.zeros(enc.feature_dim + 1))


def test_classify_singleton_and_empty(enc, temp):
    prompt = PromptVector.seeded(4, enc.token_dim, seed=5)
    z = rand_unit(np.random.default_rng(1), enc.embed_dim)
    d = classify(enc, prompt, (3,), temp, z)
    assert d.probs.tolist() == [1.0]
    with pytest.raises(ValueError):
        classify(enc, prompt, (), temp, z)


def test_classify_equal_similarity_symmetry(temp):
    # identical class tokens give identical embeddings, hence equal probabilities
    enc = FrozenEncoder(
        token_dim=3,
        embed_dim=4,
        feature_dim=3,
        text_map=np.random.default_rng(2).normal(size=(4, 3)),
        image_map=np.eye(4, 3),
        class_tokens=np.tile(np.array([1.0, -0.5, 0.25]), (2, 1)),
        seed=0,
    )
    prompt = PromptVector.seeded(2, 3, seed=9)
    z = rand_unit(np.random.default_rng(3), 4)
    d = classify(enc, prompt, (0, 1), temp, z)
    assert d.probs == pytest.approx([0.5, 0.5], abs=1e-12)


def test_softmax_arithmetic():
    probs = stable_softmax(np.array([1.0, 0.0]))
    assert probs == pytest.approx([0.7310585786300049, 0.2689414213699951], abs=1e-15)
    # max-subtraction keeps extreme logits finite
    extreme = stable_softmax(np.array([1e5, 0.0]))
    assert np.isfinite(extreme).all() and extreme.sum() == pytest.approx(1.0)


def test_classify_matches_direct_softmax(enc, temp):
    from owpt.model import class_embedding_matrix

    prompt = PromptVector.seeded(4, enc.token_dim, seed=5)
    z = rand_unit(np.random.default_rng(4), enc.embed_dim)
    support = (0, 2, 5, 7)
    d = classify(enc, prompt, support, temp, z)
    sims = class_embedding_matrix(enc, prompt, support) @ z
    assert d.probs == pytest.approx(stable_softmax(sims / temp.value), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), perm_seed=st.integers(0, 10_000))
def test_classify_permutation_equivariance(enc, temp, seed, perm_seed):
    rng = np.random.default_rng(seed)
    prompt = PromptVector.seeded(3, enc.token_dim, seed=seed)
    z = rand_unit(rng, enc.embed_dim)
    support = list(range(enc.n_classes))
    np.random.default_rng(perm_seed).shuffle(support)
    base = classify(enc, prompt, tuple(range(enc.n_classes)), temp, z)
    shuffled = classify(enc, prompt, tuple(support), temp, z)
    by_id = dict(zip(shuffled.support, shuffled.probs))
    assert base.probs == pytest.approx([by_id[c] for c in base.support], abs=1e-12)
    assert abs(shuffled.probs.sum() - 1.0) < 1e-9
    assert (shuffled.probs >= 0).all()


def test_encoder_seed_reproducibility():
    a = FrozenEncoder.random(5, 4, 6, 3, seed=42)
    b = FrozenEncoder.random(5, 4, 6, 3, seed=42)
    assert np.array_equal(a.text_map, b.text_map)
    assert np.array_equal(a.image_map, b.image_map)
    assert np.array_equal(a.class_tokens, b.class_tokens)
    c = FrozenEncoder.random(5, 4, 6, 3, seed=43)
    assert not np.array_equal(a.text_map, c.text_map)


def test_aligned_encoder_reproducible_and_aligned():
    rng = np.random.default_rng(0)
    protos = rng.normal(size=(6, 5))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    a = FrozenEncoder.aligned(protos, token_dim=8, embed_dim=12, seed=1)
    b = FrozenEncoder.aligned(protos, token_dim=8, embed_dim=12, seed=1)
    assert np.array_equal(a.class_tokens, b.class_tokens)
    assert np.array_equal(a.image_map, b.image_map)
    # a fixed near-zero prompt classifies the prototypes far above chance
    prompt = PromptVector(np.zeros((16, 8)))
    hits = 0
    for c in range(6):
        z = image_embedding(a, protos[c])
        hits += classify(a, prompt, tuple(range(6)), Temperature(), z).argmax() == c
    assert hits >= 4


def test_encoder_immutable(enc):
    with pytest.raises(ValueError):
        enc.text_map[0, 0] = 3.0
