import json

import numpy as np
import pytest

from llmimage.algebra import clr, numerical_rank, softmax
from llmimage.errors import (BadRequest, BadTokenId, BiasTooLarge, KTooLarge, UnknownReplica,
                             ValidationError)
from llmimage.mock import MockModel, MockModelSpec, make_checkpoint_family, parse_kind, variant_spec

# Frozen reference vectors: any change to the PRNG layout breaks these.
W_REF = [[-0.621818143835831, -1.0440801771173518],
         [0.9470746397707248, -1.2548768189506694],
         [-0.4972522886322394, 0.6725580798997536],
         [-0.6522573333095809, -0.4684737652226444],
         [1.0988391235838533, -0.3083304178732772],
         [0.17274032204083506, -1.5072067753289182],
         [-0.555833672811564, 0.14541405962461793],
         [-0.18460765557434725, 0.24270061522528213]]
H_HELLO = [-3.840998273413085, -7.017601603371175]
TOP3_HELLO = ((5, -0.6126762354212298), (0, -0.8108164980365322), (3, -4.733276102846793))
DRAWS_S = [1, 3, 3, 1, 1, 1, 0, 0, 1, 3, 2, 3]


def tiny():
    return MockModel(MockModelSpec(v=8, d=2, seed=0))


def test_frozen_weights_and_embedding():
    m = tiny()
    assert m.W.tolist() == W_REF
    assert m.embedding("hello").tolist() == H_HELLO
    assert m.api_query("hello", {}, 3).pairs == TOP3_HELLO


def test_frozen_replica_draws():
    m = MockModel(MockModelSpec(v=8, d=2, seed=0, n_replicas=4))
    assert [m.draw_replica("s") for _ in range(12)] == DRAWS_S
    # other sessions have their own stream
    fresh = MockModel(MockModelSpec(v=8, d=2, seed=0, n_replicas=4))
    fresh.draw_replica("other")
    assert [fresh.draw_replica("s") for _ in range(12)] == DRAWS_S


def test_injected_arrays():
    W = [[1, 0], [0, 1], [1, 1]]
    m = MockModel.from_arrays(W, {"x": [2.0, 3.0]})
    assert m.full_logits("x").tolist() == [2.0, 3.0, 5.0]


def test_spec_validation():
    with pytest.raises(ValidationError):
        MockModelSpec(v=10, d=10)
    with pytest.raises(ValidationError):
        MockModelSpec.from_dict({"v": 10, "dd": 2})
    with pytest.raises(ValidationError):
        MockModelSpec(k_max=0)


def test_spec_json_roundtrip(tmp_path):
    spec = MockModelSpec(v=50, d=4, seed=9, n_replicas=2)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert MockModelSpec.from_json(path) == spec


def test_single_replica_has_no_delta():
    m = MockModel(MockModelSpec(v=30, d=4, seed=1))
    assert m.replica_deltas == [None]
    np.testing.assert_array_equal(m.full_logits("a"), m.W @ m.embedding("a"))
    with pytest.raises(UnknownReplica):
        m.full_logits("a", replica=1)


def test_output_rank_equals_d():
    m = MockModel(MockModelSpec(v=200, d=12, seed=2))
    M = np.column_stack([clr(m.oracle_distribution(f"c{i}")) for i in range(24)])
    assert numerical_rank(M)[0] == 12


def test_api_query_uniform_and_ties():
    m = MockModel.from_arrays(np.zeros((3, 1)), lambda c: [1.0], k_max=3)
    r = m.api_query("any", {}, 3)
    assert r.tokens == [0, 1, 2]
    np.testing.assert_allclose([lp for _, lp in r.pairs], np.log(1 / 3), atol=1e-15)


def test_api_query_bias_example():
    # logits (ln1, ln2, ln3), +ln10 on token 0: probs (10/15, 2/15, 3/15)
    m = MockModel.from_arrays(np.log([[1.0], [2.0], [3.0]]), lambda c: [1.0], k_max=3)
    r = m.api_query("x", {0: np.log(10)}, 2)
    assert r.tokens == [0, 2]
    np.testing.assert_allclose(np.exp([lp for _, lp in r.pairs]), [10 / 15, 3 / 15], atol=1e-15)


def test_bias_linearity_and_shift_invariance():
    spec = MockModelSpec(v=60, d=5, seed=4)
    m = MockModel(spec)
    shifted = MockModel(spec.replace(logit_offset=37.5))
    bias = {3: 4.0, 17: -2.5}
    logits = m.full_logits("q").copy()
    logits[3] += 4.0
    logits[17] -= 2.5
    want = np.log(softmax(logits))
    got = m.api_query("q", bias, 5)
    for t, lp in got.pairs:
        assert lp == pytest.approx(want[t], abs=1e-12)
    other = shifted.api_query("q", bias, 5)
    assert other.tokens == got.tokens
    np.testing.assert_allclose([lp for _, lp in other.pairs], [lp for _, lp in got.pairs],
                               atol=1e-12)


def test_validate_query_errors():
    m = tiny()
    with pytest.raises(KTooLarge):
        m.api_query("x", {}, 6)
    with pytest.raises(BiasTooLarge):
        m.api_query("x", {1: 101.0}, 1)
    with pytest.raises(BadTokenId):
        m.api_query("x", {8: 1.0}, 1)
    with pytest.raises(BadRequest):
        m.api_query("x", {i: 1.0 for i in range(6)}, 1)


def test_replica_frequencies_within_three_sigma():
    m = MockModel(MockModelSpec(v=20, d=3, seed=6, n_replicas=4))
    counts = np.bincount([m.api_query("c", {}, 1, echo_replica=True).replica_hint
                          for _ in range(10_000)], minlength=4)
    sigma = np.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) <= 3 * sigma)


def test_replicas_have_distinct_fingerprints():
    m = MockModel(MockModelSpec(v=100, d=8, seed=8, n_replicas=2, replica_noise=1e-2))
    gaps = []
    for r in range(2):
        lp = m.oracle_logprobs("ctx", r)
        top2 = np.argsort(-m.oracle_logprobs("ctx", 0))[:2]
        gaps.append(lp[top2[0]] - lp[top2[1]])
    assert abs(gaps[0] - gaps[1]) > 1e-6


def test_oracle_distribution_consistency():
    m = MockModel(MockModelSpec(v=90, d=6, seed=3))
    p = m.oracle_distribution("z")
    assert abs(p.sum() - 1) < 1e-12
    assert p.argmax() == m.api_query("z", {}, 1).tokens[0]


def test_parse_kind_and_variants():
    assert parse_kind("lora(8)") == ("lora", "8")
    assert parse_kind("clone") == ("clone", None)
    spec = MockModelSpec(v=50, d=4)
    assert variant_spec(spec, "clone") == spec
    assert variant_spec(spec, "lora(3)").lora_rank == 3
    assert variant_spec(spec, "hidden_prompt").hidden_prefix
    assert variant_spec(spec, "partial_finetune").embedding_noise == 1e-2
    with pytest.raises(ValidationError):
        variant_spec(spec, "quantize")
    with pytest.raises(ValidationError):
        parse_kind("lora(")


def test_checkpoint_family():
    spec = MockModelSpec(v=50, d=4, model_id="base")
    fam = make_checkpoint_family(spec, ["clone", "hidden_prompt", "full_finetune", "full_finetune"])
    assert [m.spec.model_id for m in fam] == ["base/1:clone", "base/2:hidden_prompt",
                                              "base/3:full_finetune", "base/4:full_finetune"]
    base = MockModel(spec)
    np.testing.assert_array_equal(fam[0].W, base.W)
    np.testing.assert_array_equal(fam[1].W, base.W)
    assert not np.array_equal(fam[1].embedding("a"), base.embedding("a"))
    assert not np.array_equal(fam[2].W, fam[3].W)


def test_lora_update_has_rank_r():
    spec = MockModelSpec(v=80, d=10, seed=2)
    lora = MockModel(variant_spec(spec, "lora(3)"))
    assert np.linalg.matrix_rank(lora.W - MockModel(spec).W) == 3
