import base64
import json
import threading
import time

import httpx
import joblib
import pytest

from overlaydetect.errors import (
    ContractError,
    ProtocolError,
    RateLimitError,
    ScriptError,
    TransportError,
)
from overlaydetect.vlm_client import (
    WIRE_SCHEMA_VERSION,
    EndpointConfig,
    HttpVlmClient,
    ScriptedBehavior,
    ScriptedVlmClient,
    VlmClient,
    VlmRequest,
    VlmResponse,
    build_client,
    load_script,
)


def _request(prompt='Is there an overlay?', image_id='img-1', image=b'\x89PNG-bytes'):
    return VlmRequest(image=image, image_id=image_id, prompt=prompt)


def _http_client(handler, **overrides):
    config = EndpointConfig(base_url='http://vlm.test', model='tiny-vlm', backoff=0.0, **overrides)
    return HttpVlmClient(config, transport=httpx.MockTransport(handler))


def test_request_id_is_stable():
    assert _request().request_id == _request().request_id
    assert _request().request_id.startswith('img-1:')
    assert _request().request_id != _request(prompt='other').request_id
    explicit = VlmRequest(image=b'', image_id='a', prompt='p', request_id='mine')
    assert explicit.request_id == 'mine'


def test_scripted_first_matching_rule_wins(scripted_client):
    client = scripted_client(
        rules=[
            {'image_id': 'img-2', 'response': 'ANSWER: no'},
            {'prompt_contains': 'overlay', 'response': 'ANSWER: yes'},
            {'prompt_contains': 'overlay', 'response': 'never used'},
        ],
        default={'response': 'fallback'},
    )
    assert client.complete(_request()).text == 'ANSWER: yes'
    assert client.complete(_request(image_id='img-2')).text == 'ANSWER: no'
    assert client.complete(_request(prompt='hello')).text == 'fallback'
    assert len(client.attempts) == 3
    assert [r.prompt for r in client.requests_for('img-2')] == ['Is there an overlay?']


def test_scripted_default_is_a_protocol_error(scripted_client):
    client = scripted_client()
    with pytest.raises(ProtocolError):
        client.complete(_request())


def test_timeouts_exhaust_retries(scripted_client):
    client = scripted_client(default={'error': {'kind': 'timeout'}}, retries=2)
    with pytest.raises(TransportError, match='scripted timeout'):
        client.complete(_request())
    assert len(client.attempts) == 3


@pytest.mark.parametrize('kind', ['timeout', 'rate_limit'])
def test_transient_errors_are_retried(scripted_client, kind):
    client = scripted_client(
        rules=[
            {'prompt_contains': 'overlay', 'error': {'kind': kind, 'times': 2}, 'response': 'ok'}
        ],
        retries=2,
    )
    assert client.complete(_request()).text == 'ok'
    assert len(client.attempts) == 3


def test_limited_error_fails_without_retries(scripted_client):
    client = scripted_client(
        default={'error': {'kind': 'rate_limit', 'times': 1}, 'response': 'ok'}, retries=0
    )
    with pytest.raises(RateLimitError):
        client.complete(_request())
    # the scripted failure is used up, so the next call goes through
    assert client.complete(_request()).text == 'ok'


def test_protocol_errors_are_not_retried(scripted_client):
    client = scripted_client(default={'error': {'kind': 'protocol'}}, retries=5)
    with pytest.raises(ProtocolError):
        client.complete(_request())
    assert len(client.attempts) == 1


def test_failure_budget_is_per_request(scripted_client):
    client = scripted_client(default={'error': {'kind': 'timeout', 'times': 1}, 'response': 'ok'})
    with pytest.raises(TransportError):
        client.complete(_request(image_id='a'))
    with pytest.raises(TransportError):
        client.complete(_request(image_id='b'))
    assert client.complete(_request(image_id='a')).text == 'ok'


def test_client_rejects_bad_limits():
    with pytest.raises(ContractError):
        ScriptedVlmClient(ScriptedBehavior(), max_in_flight=0)


def test_empty_prompt_fails_before_any_attempt(scripted_client):
    client = scripted_client(default={'response': 'ANSWER: no'})
    with pytest.raises(ContractError, match='prompt must be non-empty'):
        client.complete(_request(prompt=''))
    assert client.attempts == []


def test_http_empty_prompt_sends_nothing():
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json={'text': 'ANSWER: no'})

    client = _http_client(handler)
    with pytest.raises(ContractError):
        client.complete(_request(prompt=''))
    assert seen == []


class _GatedClient(VlmClient):
    """Pairs up concurrent sends on a barrier and records the peak in-flight count."""

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.barrier = threading.Barrier(2, timeout=10)
        self.lock = threading.Lock()
        self.active = 0
        self.peak = 0

    def _send(self, request):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        try:
            self.barrier.wait()
            time.sleep(0.01)
        finally:
            with self.lock:
                self.active -= 1
        return VlmResponse(text=f'ANSWER: no ({request.image_id})')


def test_max_in_flight_caps_concurrent_sends():
    client = _GatedClient(max_in_flight=2, retries=0)
    requests = [_request(image_id=f'img-{i}') for i in range(6)]
    responses = joblib.Parallel(n_jobs=6, backend='threading')(
        joblib.delayed(client.complete)(request) for request in requests
    )
    assert [r.text for r in responses] == [f'ANSWER: no (img-{i})' for i in range(6)]
    assert client.peak == 2


def test_load_script(tmp_path):
    path = tmp_path / 'script.yaml'
    path.write_text(
        'rules:\n'
        '  - prompt_contains: "Identify all text"\n'
        '    response: "OBJECTS:\\n(none)"\n'
        '  - image_id: broken\n'
        '    error: {kind: timeout}\n'
        'default:\n'
        '  response: "ANSWER: no"\n'
    )
    behavior = load_script(str(path))
    assert len(behavior.rules) == 2
    assert behavior.rules[1].error.kind == 'timeout'
    assert behavior.default.response == 'ANSWER: no'
    index, rule = behavior.lookup(_request(image_id='broken'))
    assert index == 1
    assert rule.error.times is None


@pytest.mark.parametrize(
    'text, rule_index, message',
    [
        ('rules:\n  - response: ok\n  - prompt_contains: x\n', 1, 'one of response or error'),
        ('rules:\n  - error: {kind: explode}\n', 0, None),
        ('rules:\n  - response: ok\n    error: {kind: timeout}\n', 0, 'times limit'),
        ('rules:\n  - response: ok\n    colour: red\n', 0, None),
        ('rules: 5\n', None, 'rules must be a list'),
        ('steps: []\n', None, 'unknown keys'),
        ('- a\n- b\n', None, 'mapping'),
        ('default: {}\n', None, 'default'),
    ],
)
def test_load_script_errors(tmp_path, text, rule_index, message):
    path = tmp_path / 'script.yaml'
    path.write_text(text)
    with pytest.raises(ScriptError, match=message) as excinfo:
        load_script(str(path))
    assert excinfo.value.rule_index == rule_index
    if rule_index is not None:
        assert str(excinfo.value).startswith(f'rule {rule_index}: ')


def test_http_payload_and_reply():
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json={'text': 'ANSWER: yes', 'truncated': True})

    client = _http_client(handler)
    response = client.complete(_request(image=b'\x00\x01pixels'))
    client.close()

    assert response.text == 'ANSWER: yes'
    assert response.truncated
    assert response.latency >= 0.0
    assert len(seen) == 1
    assert seen[0].url.path == '/v1/complete'
    body = json.loads(seen[0].content)
    assert body['schema_version'] == WIRE_SCHEMA_VERSION
    assert body['model'] == 'tiny-vlm'
    assert body['prompt'] == 'Is there an overlay?'
    assert body['image'] == {'format': 'png', 'data': base64.b64encode(b'\x00\x01pixels').decode()}
    assert body['request_id'] == _request().request_id
    assert body['temperature'] == 0.0


def test_http_retries_server_errors():
    statuses = iter([503, 500, 200])

    def handler(request):
        status = next(statuses)
        if status == 200:
            return httpx.Response(200, json={'text': 'ANSWER: no'})
        return httpx.Response(status, text='busy')

    client = _http_client(handler, retries=2)
    assert client.complete(_request()).text == 'ANSWER: no'


@pytest.mark.parametrize(
    'response, error',
    [
        (httpx.Response(429, text='slow down'), RateLimitError),
        (httpx.Response(502, text='bad gateway'), TransportError),
        (httpx.Response(400, text='bad request'), ProtocolError),
        (httpx.Response(200, text='<html>not json</html>'), ProtocolError),
        (httpx.Response(200, json={'answer': 'yes'}), ProtocolError),
        (httpx.Response(200, json=['yes']), ProtocolError),
    ],
)
def test_http_error_mapping(response, error):
    calls = []

    def handler(request):
        calls.append(request)
        return response

    client = _http_client(handler, retries=0)
    with pytest.raises(error):
        client.complete(_request())
    assert len(calls) == 1


def test_http_timeout_is_a_transport_error():
    calls = []

    def handler(request):
        calls.append(request)
        raise httpx.ReadTimeout('took too long', request=request)

    client = _http_client(handler, retries=1, timeout=0.5)
    with pytest.raises(TransportError, match='timed out'):
        client.complete(_request())
    assert len(calls) == 2


def test_http_bearer_token(monkeypatch):
    monkeypatch.setenv('OVERLAYDETECT_TEST_TOKEN', 'secret')
    seen = []

    def handler(request):
        seen.append(request.headers.get('Authorization'))
        return httpx.Response(200, json={'text': 'ANSWER: no'})

    _http_client(handler, token_env='OVERLAYDETECT_TEST_TOKEN').complete(_request())
    assert seen == ['Bearer secret']


def test_http_missing_token(monkeypatch):
    monkeypatch.delenv('OVERLAYDETECT_TEST_TOKEN', raising=False)
    with pytest.raises(ContractError, match='OVERLAYDETECT_TEST_TOKEN'):
        _http_client(lambda request: None, token_env='OVERLAYDETECT_TEST_TOKEN')


def test_build_client(tmp_path):
    script = tmp_path / 'script.yaml'
    script.write_text('default:\n  response: "ANSWER: no"\n')
    endpoint = tmp_path / 'endpoint.yaml'
    endpoint.write_text('base_url: http://vlm.test\nmodel: tiny-vlm\n')

    assert isinstance(build_client(mock_script=str(script)), ScriptedVlmClient)
    assert isinstance(
        build_client(endpoint_config=str(endpoint), mock_script=str(script)), ScriptedVlmClient
    )
    http = build_client(endpoint_config=str(endpoint))
    assert isinstance(http, HttpVlmClient)
    assert http.config.model == 'tiny-vlm'
    http.close()
    with pytest.raises(ContractError):
        build_client()
