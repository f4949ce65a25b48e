import warnings

import numpy as np
import pytest

from llmimage.algebra import clr, clr_from_logprobs, lstsq_residual
from llmimage.api import InProcessSession
from llmimage.errors import (DomainError, NoPlateau, OutOfImage, ShapeMismatch, ValidationError,
                             VocabExhausted)
from llmimage.extraction import extract_stable_logprobs
from llmimage.image import (ChangeKind, Classification, ImageChange, ModelImage, attribute,
                            audit_update, classify_update, collect_image, collect_until_plateau,
                            compare_images, discover_embedding_size, estimate_embedding_size,
                            fast_extract, gap_guard, logit_change)
from llmimage.mock import MockModel, MockModelSpec, make_checkpoint_family


@pytest.fixture(scope="module")
def d16():
    model = MockModel(MockModelSpec(v=1000, d=16, seed=21))
    session = InProcessSession(model)
    image = collect_image(session, margin=16, batch=16, created_at="2024-01-01T00:00:00Z")
    return model, image


def test_collect_image_rank_and_shape(d16):
    _, image = d16
    assert image.d_estimate == 16 and image.m == 32 and image.v == 1000
    assert np.allclose(image.matrix.sum(axis=0), 0, atol=1e-9)
    assert image.source_id == "mock" and image.created_at == "2024-01-01T00:00:00Z"
    assert image.basis.shape == (1000, 16)


def test_rank_one_model_plateaus_after_margin():
    model = MockModel(MockModelSpec(v=50, d=1, seed=2))
    image = collect_image(InProcessSession(model), margin=5, batch=1)
    assert image.d_estimate == 1 and image.m == 6


def test_vocab_exhausted():
    model = MockModel(MockModelSpec(v=30, d=20, seed=2))
    with pytest.raises(VocabExhausted):
        collect_until_plateau(InProcessSession(model), margin=15, batch=8)


def test_model_image_validation():
    with pytest.raises(DomainError):
        ModelImage(np.ones((4, 2)), ["a", "b"])
    with pytest.raises(ShapeMismatch):
        ModelImage(np.zeros((4, 2)), ["a"])
    M = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValidationError):
        ModelImage(M, ["a", "b"], d_estimate=2)


def test_corruption_inflates_estimate(d16):
    _, image = d16
    rng = np.random.default_rng(0)
    noise = rng.normal(size=(1000, 5))
    noise -= noise.mean(axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoPlateau)
        assert estimate_embedding_size(np.hstack([image.matrix, noise])).d == 21


def test_embedding_size_on_image(d16):
    _, image = d16
    est = estimate_embedding_size(image)
    assert est.d == 16 and est.drop < 1e-4 and est.log_gap_index == 16
    assert est.to_dict()["d"] == 16


def test_undersampled_matrix_warns():
    model = MockModel(MockModelSpec(v=200, d=20, seed=3))
    s = InProcessSession(model)
    M = np.column_stack([clr_from_logprobs(extract_stable_logprobs(s, f"c{i}")) for i in range(8)])
    with pytest.warns(NoPlateau):
        est = estimate_embedding_size(M)
    assert est.d == 8


def test_discover_embedding_size_on_token_subset():
    model = MockModel(MockModelSpec(v=512, d=64, seed=64, k_max=64))
    s = InProcessSession(model)
    est, M = discover_embedding_size(s, range(192), margin=64, batch=64)
    assert est.d == 64 and M.shape[0] == 192


def test_fast_extract_matches_oracle_in_few_calls(d16):
    model, image = d16
    s = InProcessSession(model)
    p = fast_extract(image, s, "held out")
    assert np.max(np.abs(p - model.oracle_distribution("held out"))) <= 1e-6
    assert s.call_count <= 1 + int(np.ceil(16 / 4))


def test_fast_extract_reproduces_stored_column(d16):
    model, image = d16
    prompt = image.prompts[3]
    p = fast_extract(image, InProcessSession(model), prompt)
    np.testing.assert_allclose(clr(p), image.column(prompt), atol=1e-9)


def test_fast_extract_detects_changed_model(d16):
    model, image = d16
    changed = MockModel(model.spec.replace(finetune_noise=1e-2, variant_seed=2))
    with pytest.raises(OutOfImage) as exc:
        fast_extract(image, InProcessSession(changed), "held out")
    assert exc.value.discrepancy > 1e-4


def test_fast_extract_rejects_other_vocab(d16):
    _, image = d16
    other = InProcessSession(MockModel(MockModelSpec(v=999, d=16)))
    with pytest.raises(ShapeMismatch):
        fast_extract(image, other, "x")


@pytest.fixture(scope="module")
def checkpoints():
    base = MockModelSpec(v=128, d=8, seed=31, model_id="ckpt")
    models = [MockModel(base)] + make_checkpoint_family(base, ["full_finetune"] * 3)
    images = [collect_image(InProcessSession(m), margin=8, batch=8) for m in models]
    return models, images


def _output(model, context):
    return clr_from_logprobs(extract_stable_logprobs(InProcessSession(model), context))


def test_attribute_picks_generator(checkpoints):
    models, images = checkpoints
    r = attribute(images[:3], _output(models[1], "probe"))
    assert r.best_match == models[1].spec.model_id
    residuals = dict(r.residuals)
    assert residuals[models[1].spec.model_id] <= 1e-8
    assert all(v >= 1e-3 for k, v in residuals.items() if k != r.best_match)
    assert [row["residual"] for row in r.to_rows()] == sorted(residuals.values())


def test_attribute_unknown_model(checkpoints):
    models, images = checkpoints
    assert attribute(images[:3], _output(models[3], "probe")).best_match is None


def test_attribute_single_candidate(checkpoints):
    models, images = checkpoints
    r = attribute(images[2:3], _output(models[2], "probe"))
    assert r.best_match == models[2].spec.model_id and r.margin == float("inf")


def test_attribute_checks_vocab(checkpoints):
    _, images = checkpoints
    with pytest.raises(ShapeMismatch):
        attribute(images, np.zeros(5))


def test_perturbed_output_leaves_image(checkpoints):
    models, images = checkpoints
    assert lstsq_residual(images[1].basis, _output(models[0], "q")) > 1e-3


def test_classify_update_rows():
    none, low = ImageChange(ChangeKind.NONE), ImageChange(ChangeKind.LOW_RANK, 8, 24)
    assert classify_update(False, none) is Classification.NO_UPDATE
    assert classify_update(True, none) is Classification.HIDDEN_PROMPT_OR_PARTIAL_FINETUNE
    assert classify_update(True, low) is Classification.LORA_UPDATE
    assert classify_update(True, ImageChange(ChangeKind.FULL, 16, 32)) is Classification.FULL_FINETUNE
    assert str(low) == "low_rank(8)" and str(none) == "none"
    assert gap_guard(16) == 4 and gap_guard(1024) == 64


def test_logit_change_requires_matching_shapes():
    with pytest.raises(ShapeMismatch):
        logit_change(np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(ValidationError):
        logit_change(np.zeros((3, 0)), np.zeros((3, 0)))


@pytest.fixture(scope="module")
def update_family():
    base = MockModelSpec(v=160, d=16, seed=41)
    models = [MockModel(base)] + make_checkpoint_family(
        base, ["clone", "hidden_prompt", "partial_finetune", "lora(8)", "full_finetune"])
    return [collect_image(InProcessSession(m), margin=8, batch=8) for m in models]


@pytest.mark.parametrize("index, kind, classification", [
    (1, ChangeKind.NONE, Classification.NO_UPDATE),
    (2, ChangeKind.NONE, Classification.HIDDEN_PROMPT_OR_PARTIAL_FINETUNE),
    (3, ChangeKind.NONE, Classification.HIDDEN_PROMPT_OR_PARTIAL_FINETUNE),
    (4, ChangeKind.LOW_RANK, Classification.LORA_UPDATE),
    (5, ChangeKind.FULL, Classification.FULL_FINETUNE),
])
def test_audit_update(update_family, index, kind, classification):
    rep = audit_update(update_family[0], update_family[index])
    assert rep.image_change.kind is kind and rep.classification is classification
    if kind is ChangeKind.LOW_RANK:
        assert rep.image_change.rank_delta == 8
    assert rep.to_dict()["classification"] == classification.value


def test_independent_models_are_full_change():
    a = collect_image(InProcessSession(MockModel(MockModelSpec(v=160, d=16, seed=1))),
                      margin=8, batch=8)
    b = collect_image(InProcessSession(MockModel(MockModelSpec(v=160, d=16, seed=2))),
                      margin=8, batch=8)
    change = compare_images(a, b)
    assert change.kind is ChangeKind.FULL and change.union_rank == 32


def test_audit_with_missing_probe(update_family):
    with pytest.raises(ValidationError):
        audit_update(update_family[0], update_family[1], probes=["never used"])
