from __future__ import annotations

import json

import numpy as np
import pytest
import requests
from requests.adapters import HTTPAdapter

from src.api_client import (
    BackendClient,
    Endpoint,
    GenerationRequest,
    cache_key,
    connect,
    make_session,
)
from src.conditioning import canny
from src.errors import (
    BackendError,
    BackendTimeout,
    ConfigError,
    DimensionMismatch,
    InvariantViolation,
    ShapeError,
)
from src.mock_backends import MockGenerator, MockModel, MockServiceAdapter, MockServices
from src.models import CaptionSource, TaskKind
from tests.conftest import _toy_image


def adapter_of(client: BackendClient) -> MockServiceAdapter:
    return client.session.get_adapter(client.endpoint.base_url + "/complete")


def test_mock_round_trip(mock_endpoints):
    backends = connect(mock_endpoints)
    image = _toy_image(3)

    caption = backends.captioner.caption_image(image)
    assert caption.source is CaptionSource.CAPTIONER
    assert "weather" in caption.text

    assert backends.llm.complete("Say something.", seed=1, temperature=0.7)

    edges = canny(image)
    generated = backends.generator.generate_image(GenerationRequest(caption.text, edges, seed=11))
    assert generated.shape == (24, 24, 3)
    assert generated.dtype == np.uint8

    label = backends.model.predict(image, TaskKind.CLASSIFICATION)
    assert 0 <= label < 1000


def test_segmentation_predict_returns_a_mask(mock_endpoints):
    backends = connect(mock_endpoints, mock_services=MockServices.default(class_count=4))
    mask = backends.model.predict(_toy_image(1, size=16), TaskKind.SEGMENTATION)
    assert mask.shape == (16, 16)
    assert mask.max() < 4


def test_connect_needs_every_role(mock_endpoints):
    del mock_endpoints["generator"]
    with pytest.raises(ConfigError):
        connect(mock_endpoints)


def test_injected_fault_surfaces_status():
    session = requests.Session()
    session.mount(
        "mock://",
        MockServiceAdapter(MockServices.default(), fault=lambda route, body: 503 if route == "/complete" else None),
    )
    client = BackendClient(Endpoint("llm", "mock://llm"), session)
    with pytest.raises(BackendError) as info:
        client.complete("prompt", seed=0, temperature=0.5)
    assert info.value.status == 503
    assert "injected 503" in str(info.value)


def test_unknown_route_is_a_404(mock_endpoints):
    endpoints = dict(mock_endpoints, llm=Endpoint("llm", "mock://llm/v2"))
    backends = connect(endpoints)
    with pytest.raises(BackendError) as info:
        backends.llm.complete("prompt", seed=0, temperature=0.5)
    assert info.value.status == 404


def test_timeout_is_reported_as_backend_timeout():
    class Silent(HTTPAdapter):
        def send(self, request, **kwargs):
            raise requests.ConnectTimeout("too slow")

    session = requests.Session()
    session.mount("mock://", Silent())
    client = BackendClient(Endpoint("captioner", "mock://captioner", timeout=0.5), session)
    with pytest.raises(BackendTimeout):
        client.caption_image(_toy_image(0))


def test_generator_returning_the_wrong_size(mock_endpoints):
    services = MockServices(generator=MockGenerator(size_override=(8, 8)))
    backends = connect(mock_endpoints, mock_services=services)
    request = GenerationRequest("A red object.", canny(_toy_image(2)), seed=4)
    with pytest.raises(DimensionMismatch):
        backends.generator.generate_image(request)


def test_segmenter_returning_the_wrong_shape(mock_endpoints):
    services = MockServices(model=MockModel(class_count=4, shape_override=(5, 5)))
    backends = connect(mock_endpoints, mock_services=services)
    with pytest.raises(ShapeError):
        backends.model.predict(_toy_image(2, size=16), TaskKind.SEGMENTATION)


def test_generation_request_checks_its_size():
    edges = canny(_toy_image(0))
    with pytest.raises(InvariantViolation):
        GenerationRequest("A red object.", edges, seed=1, size=(32, 32))
    with pytest.raises(InvariantViolation):
        GenerationRequest("  ", edges, seed=1)


def test_empty_prompt_is_refused_before_sending(mock_endpoints):
    backends = connect(mock_endpoints)
    with pytest.raises(InvariantViolation):
        backends.llm.complete(" ", seed=0, temperature=0.7)
    assert adapter_of(backends.llm).calls == 0


def test_cache_key_ignores_key_order_but_not_seed():
    def prepared(body: dict) -> requests.PreparedRequest:
        return requests.Request("POST", "mock://llm/complete", data=json.dumps(body)).prepare()

    a = prepared({"prompt": "p", "seed": 1})
    b = prepared({"seed": 1, "prompt": "p"})
    c = prepared({"prompt": "p", "seed": 2})
    assert cache_key(a) == cache_key(b)
    assert cache_key(a) != cache_key(c)


def test_warm_cache_replays_without_calls(mock_endpoints, tmp_path):
    cache_dir = tmp_path / "cache"
    first = connect(mock_endpoints, cache_dir=cache_dir)
    text = first.llm.complete("Describe the sky.", seed=5, temperature=0.7)
    assert first.llm.complete("Describe the sky.", seed=5, temperature=0.7) == text
    assert adapter_of(first.llm).calls == 1

    replay = connect(mock_endpoints, cache_dir=cache_dir, offline=True)
    assert replay.llm.complete("Describe the sky.", seed=5, temperature=0.7) == text
    assert adapter_of(replay.llm).calls == 0


def test_offline_miss_is_an_error(mock_endpoints, tmp_path):
    backends = connect(mock_endpoints, cache_dir=tmp_path / "cache", offline=True)
    with pytest.raises(BackendError) as info:
        backends.llm.complete("Never asked before.", seed=9, temperature=0.7)
    assert info.value.status == 504


def test_offline_needs_a_cache_dir():
    with pytest.raises(ConfigError):
        make_session(cache_dir=None, offline=True)


def test_endpoint_from_env(monkeypatch):
    monkeypatch.setenv("DILLEMA_LLM_URL", "https://llm.example.org")
    monkeypatch.setenv("DILLEMA_LLM_TOKEN", "secret")
    monkeypatch.setenv("DILLEMA_LLM_TIMEOUT", "12.5")
    endpoint = Endpoint.from_env("llm")
    assert endpoint == Endpoint("llm", "https://llm.example.org", 12.5, "secret")
    assert not endpoint.is_mock


def test_endpoint_from_env_falls_back_to_default():
    assert Endpoint.from_env("model", default_url="mock://model").is_mock


@pytest.mark.parametrize(
    "env, role",
    [
        ({}, "llm"),
        ({"DILLEMA_LLM_URL": "http://x", "DILLEMA_LLM_TIMEOUT": "soon"}, "llm"),
        ({"DILLEMA_PAINTER_URL": "http://x"}, "painter"),
    ],
)
def test_endpoint_misconfiguration(monkeypatch, env, role):
    for key, value in env.items():
        monkeypatch.setenv(key, value)
    with pytest.raises(ConfigError):
        Endpoint.from_env(role)
