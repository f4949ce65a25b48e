import json

import pytest

from llmimage.api import Capabilities, InProcessSession, TopKResponse, request_key
from llmimage.errors import CapabilityMismatch, ProtocolError
from llmimage.mock import MockModel, MockModelSpec


def test_capabilities_roundtrip():
    caps = Capabilities(1000, 5, 100, False)
    assert caps.to_dict() == {"v": 1000, "k_max": 5, "beta_max": 100.0, "stochastic": False}
    assert Capabilities.from_dict(caps.to_dict()) == caps


@pytest.mark.parametrize("pairs", [
    [(1, -0.1), (1, -0.2)],
    [(1, 0.1)],
    [(1, float("nan"))],
    [(1, -2.0), (2, -1.0)],
])
def test_topk_response_validation(pairs):
    with pytest.raises(ProtocolError):
        TopKResponse(pairs)


def test_topk_wire_roundtrip():
    r = TopKResponse([(3, -0.25), (1, -1.5)], replica_hint=2)
    body = r.to_wire("m")
    assert body["model_id"] == "m" and body["replica_hint"] == 2
    assert TopKResponse.from_wire(json.loads(json.dumps(body))) == r
    with pytest.raises(ProtocolError):
        TopKResponse.from_wire({"top_logprobs": [{"token": 1}]})


def test_request_key_is_canonical():
    a = request_key("ctx", {10: 1, 2: 3.5}, 4)
    b = request_key("ctx", {"2": 3.5, "10": 1.0}, 4)
    assert a == b == '{"context":"ctx","logit_bias":{"2":3.5,"10":1.0},"top_logprobs":4}'


def test_session_checks_and_cache():
    s = InProcessSession(MockModel(MockModelSpec(v=30, d=3)))
    assert s.query("a").tokens == s.query("a", {}, 5).tokens
    assert s.call_count == 1 and s.cache_hits == 1
    for bias, k in [({}, 0), ({}, 6), ({i: 1.0 for i in range(6)}, 1), ({0: 100.5}, 1),
                    ({30: 1.0}, 1)]:
        with pytest.raises(CapabilityMismatch):
            s.query("a", bias, k)
    assert s.telemetry()["call_count"] == 1


def test_query_many_preserves_order():
    model = MockModel(MockModelSpec(v=50, d=4))
    reqs = [(f"c{i}", {i: 2.0}, 3) for i in range(40)]
    parallel = InProcessSession(model, concurrency=4).query_many(reqs)
    serial = InProcessSession(model).query_many(reqs)
    assert parallel == serial
