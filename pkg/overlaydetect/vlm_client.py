"""Clients for vision-language model endpoints.

Every client sends one image and one prompt and gets back free text. Retrying,
in-flight limiting and request validation live in :class:`VlmClient`; concrete
clients only implement ``_send``.
"""

import abc
import base64
import collections
import hashlib
import logging
import os
import threading
import time
import typing

import fsspec
import httpx
import pydantic
import tenacity
import yaml

from .config import load_model
from .errors import ContractError, ProtocolError, RateLimitError, ScriptError, TransportError

logger = logging.getLogger(__name__)

WIRE_SCHEMA_VERSION = '1'
DEFAULT_MAX_OUTPUT_TOKENS = 512


class VlmRequest(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    image: bytes = pydantic.Field(repr=False)
    image_format: str = 'png'
    image_id: str
    prompt: str
    max_output_tokens: int = pydantic.Field(DEFAULT_MAX_OUTPUT_TOKENS, ge=1)
    temperature: float = pydantic.Field(0.0, ge=0.0)
    request_id: str = ''

    @pydantic.model_validator(mode='before')
    @classmethod
    def _default_request_id(cls, data):
        if isinstance(data, dict) and not data.get('request_id'):
            image_id = str(data.get('image_id', ''))
            prompt = str(data.get('prompt', ''))
            digest = hashlib.sha256(f'{image_id}\0{prompt}'.encode()).hexdigest()[:16]
            data = {**data, 'request_id': f'{image_id}:{digest}'}
        return data


class VlmResponse(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    text: str
    latency: float = 0.0
    truncated: bool = False


class VlmClient(abc.ABC):
    """Base client.

    Parameters
    ----------
    retries : int, optional
        Extra attempts after a transport failure. Total attempts never exceed
        ``1 + retries``.
    backoff : float, optional
        Multiplier of the exponential backoff in seconds.
    max_backoff : float, optional
        Upper bound of a single backoff sleep in seconds.
    max_in_flight : int, optional
        Maximum number of concurrent ``_send`` calls.
    """

    def __init__(
        self,
        *,
        retries: int = 2,
        backoff: float = 0.5,
        max_backoff: float = 30.0,
        max_in_flight: int = 4,
    ):
        if retries < 0 or max_in_flight < 1:
            raise ContractError('retries must be >= 0 and max_in_flight >= 1')
        self.retries = retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)

    @abc.abstractmethod
    def _send(self, request: VlmRequest) -> VlmResponse:
        """Perform exactly one attempt."""

    def _log_retry(self, retry_state: tenacity.RetryCallState):
        exc = retry_state.outcome.exception()
        logger.warning(
            'Attempt %d failed with %s: %s; retrying',
            retry_state.attempt_number,
            type(exc).__name__,
            exc,
        )

    def complete(self, request: VlmRequest) -> VlmResponse:
        """Send ``request``, retrying transport failures with exponential backoff.

        Raises
        ------
        ContractError
            The request has an empty prompt.
        TransportError, RateLimitError
            The endpoint kept failing after all attempts.
        ProtocolError
            The endpoint replied with a malformed payload (never retried).
        """
        if not request.prompt:
            raise ContractError('prompt must be non-empty')
        retrying = tenacity.Retrying(
            stop=tenacity.stop_after_attempt(1 + self.retries),
            wait=tenacity.wait_exponential(multiplier=self.backoff, max=self.max_backoff),
            retry=tenacity.retry_if_exception_type(TransportError),
            before_sleep=self._log_retry,
            reraise=True,
        )
        for attempt in retrying:
            with attempt:
                with self._slots:
                    response = self._send(request)
        return response


class EndpointConfig(pydantic.BaseModel):
    """Connection settings of a remote endpoint, read from ``--endpoint-config``."""

    model_config = pydantic.ConfigDict(extra='forbid')

    base_url: str
    path: str = '/v1/complete'
    model: str = ''
    token_env: typing.Optional[str] = None
    timeout: float = pydantic.Field(60.0, gt=0)
    retries: int = pydantic.Field(2, ge=0)
    backoff: float = pydantic.Field(0.5, ge=0)
    max_backoff: float = pydantic.Field(30.0, ge=0)
    max_in_flight: int = pydantic.Field(4, ge=1)


class HttpVlmClient(VlmClient):
    """JSON-over-HTTP adapter; see the wire protocol reference for the schema."""

    def __init__(
        self, config: EndpointConfig, transport: typing.Optional[httpx.BaseTransport] = None
    ):
        super().__init__(
            retries=config.retries,
            backoff=config.backoff,
            max_backoff=config.max_backoff,
            max_in_flight=config.max_in_flight,
        )
        self.config = config
        headers = {'Content-Type': 'application/json'}
        if config.token_env:
            token = os.environ.get(config.token_env)
            if not token:
                raise ContractError(f'environment variable {config.token_env} is not set')
            headers['Authorization'] = f'Bearer {token}'
        self._http = httpx.Client(
            base_url=config.base_url, headers=headers, timeout=config.timeout, transport=transport
        )

    def payload(self, request: VlmRequest) -> typing.Dict[str, typing.Any]:
        return {
            'schema_version': WIRE_SCHEMA_VERSION,
            'model': self.config.model,
            'request_id': request.request_id,
            'image': {
                'format': request.image_format,
                'data': base64.b64encode(request.image).decode('ascii'),
            },
            'prompt': request.prompt,
            'max_output_tokens': request.max_output_tokens,
            'temperature': request.temperature,
        }

    def _send(self, request: VlmRequest) -> VlmResponse:
        started = time.perf_counter()
        try:
            reply = self._http.post(self.config.path, json=self.payload(request))
        except httpx.TimeoutException as exc:
            raise TransportError(f'timed out after {self.config.timeout}s') from exc
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        latency = time.perf_counter() - started

        if reply.status_code == 429:
            raise RateLimitError(f'rate limited by {self.config.base_url}')
        if reply.status_code >= 500:
            raise TransportError(f'server error {reply.status_code}')
        if reply.status_code >= 400:
            raise ProtocolError(f'request rejected with {reply.status_code}', payload=reply.text)
        try:
            body = reply.json()
        except ValueError as exc:
            raise ProtocolError('reply is not JSON', payload=reply.text) from exc
        if not isinstance(body, dict) or not isinstance(body.get('text'), str):
            raise ProtocolError('reply has no text field', payload=reply.text)
        truncated = bool(body.get('truncated'))
        return VlmResponse(text=body['text'], latency=latency, truncated=truncated)

    def close(self):
        self._http.close()


class ErrorDirective(pydantic.BaseModel):
    """Scripted failure: ``kind`` raised on the first ``times`` attempts (always if unset)."""

    model_config = pydantic.ConfigDict(extra='forbid')

    kind: typing.Literal['timeout', 'rate_limit', 'protocol']
    times: typing.Optional[int] = pydantic.Field(None, ge=1)


class ScriptDefault(pydantic.BaseModel):
    """What to answer: a canned ``response``, an ``error``, or both.

    Both are allowed only when the error is limited by ``times``; the response is
    returned once the scripted failures are used up.
    """

    model_config = pydantic.ConfigDict(extra='forbid')

    response: typing.Optional[str] = None
    error: typing.Optional[ErrorDirective] = None

    @pydantic.model_validator(mode='after')
    def _check_outcome(self):
        if self.response is None and self.error is None:
            raise ValueError('one of response or error must be given')
        if self.response is not None and self.error is not None and self.error.times is None:
            raise ValueError('an error combined with a response needs a times limit')
        return self


class ScriptRule(ScriptDefault):
    prompt_contains: typing.Optional[str] = None
    image_id: typing.Optional[str] = None

    def matches(self, request: VlmRequest) -> bool:
        if self.prompt_contains is not None and self.prompt_contains not in request.prompt:
            return False
        if self.image_id is not None and self.image_id != request.image_id:
            return False
        return True


class ScriptedBehavior(pydantic.BaseModel):
    """Ordered matcher rules; the first matching rule wins, else ``default``."""

    rules: typing.List[ScriptRule] = pydantic.Field(default_factory=list)
    default: ScriptDefault = pydantic.Field(
        default_factory=lambda: ScriptDefault(error=ErrorDirective(kind='protocol'))
    )

    def lookup(
        self, request: VlmRequest
    ) -> typing.Tuple[int, typing.Union[ScriptRule, ScriptDefault]]:
        for index, rule in enumerate(self.rules):
            if rule.matches(request):
                return index, rule
        return -1, self.default


def load_script(path: str, **storage_options) -> ScriptedBehavior:
    """Read a YAML mock script with ``rules`` and ``default`` keys.

    Raises
    ------
    ScriptError
        The document or one of its rules violates the schema; the error names the
        zero-based rule index.
    """
    with fsspec.open(str(path), 'r', **storage_options) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ScriptError('script must be a mapping with rules and default')
    unknown = set(data) - {'rules', 'default'}
    if unknown:
        raise ScriptError(f'unknown keys {sorted(unknown)}')
    raw_rules = data.get('rules') or []
    if not isinstance(raw_rules, list):
        raise ScriptError('rules must be a list')
    rules = []
    for index, raw in enumerate(raw_rules):
        try:
            rules.append(ScriptRule.model_validate(raw))
        except pydantic.ValidationError as exc:
            raise ScriptError(str(exc.errors()[0]['msg']), rule_index=index) from exc
    if 'default' not in data:
        return ScriptedBehavior(rules=rules)
    try:
        default = ScriptDefault.model_validate(data['default'])
    except pydantic.ValidationError as exc:
        raise ScriptError(f'default: {exc.errors()[0]["msg"]}') from exc
    return ScriptedBehavior(rules=rules, default=default)


class ScriptedVlmClient(VlmClient):
    """Deterministic test double answering from a :class:`ScriptedBehavior`.

    Every attempt is recorded in ``attempts``. Error directives with ``times`` count
    failures per distinct request, so results do not depend on call interleaving.
    """

    def __init__(
        self,
        behavior: ScriptedBehavior,
        *,
        retries: int = 0,
        backoff: float = 0.0,
        max_in_flight: int = 8,
    ):
        super().__init__(
            retries=retries, backoff=backoff, max_backoff=0.0, max_in_flight=max_in_flight
        )
        self.behavior = behavior
        self.attempts: typing.List[VlmRequest] = []
        self._failures = collections.Counter()
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str, **kwargs) -> 'ScriptedVlmClient':
        return cls(load_script(path), **kwargs)

    def _send(self, request: VlmRequest) -> VlmResponse:
        index, outcome = self.behavior.lookup(request)
        with self._lock:
            self.attempts.append(request)
            if outcome.error is not None:
                key = (index, request.image_id, request.prompt)
                failing = outcome.error.times is None or self._failures[key] < outcome.error.times
                if failing:
                    self._failures[key] += 1
        if outcome.error is not None and failing:
            kind = outcome.error.kind
            if kind == 'timeout':
                raise TransportError(f'scripted timeout for {request.image_id}')
            if kind == 'rate_limit':
                raise RateLimitError(f'scripted rate limit for {request.image_id}')
            raise ProtocolError(f'scripted protocol error for {request.image_id}', payload='')
        return VlmResponse(text=outcome.response if outcome.response is not None else '')

    def requests_for(self, image_id: str) -> typing.List[VlmRequest]:
        return [r for r in self.attempts if r.image_id == image_id]


def build_client(
    endpoint_config: typing.Optional[str] = None,
    mock_script: typing.Optional[str] = None,
) -> VlmClient:
    """Create a client from an endpoint-config YAML or a mock script (mock wins)."""
    if mock_script:
        return ScriptedVlmClient.from_file(mock_script)
    if endpoint_config:
        return HttpVlmClient(load_model(endpoint_config, EndpointConfig))
    raise ContractError('either an endpoint config or a mock script is required')
