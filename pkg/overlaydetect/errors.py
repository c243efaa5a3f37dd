"""Exception hierarchy shared by every overlaydetect module."""

import typing

import pydantic


class OverlayDetectError(Exception):
    """Base class of all overlaydetect errors."""

    tag = 'error'


class ContractError(OverlayDetectError, ValueError):
    """A precondition of an operation was violated by the caller."""

    tag = 'contract'


class ManifestSchemaError(OverlayDetectError, ValueError):
    tag = 'schema'

    def __init__(self, message: str, *, line: typing.Optional[int] = None):
        self.line = line
        prefix = f'line {line}: ' if line is not None else ''
        super().__init__(f'{prefix}{message}')


class CapacityError(OverlayDetectError, ValueError):
    tag = 'capacity'

    def __init__(self, category: str, available: int, required: int):
        self.category = category
        self.available = available
        self.required = required
        super().__init__(
            f'category {category!r} is short: {available} samples available, {required} required'
        )


class TransportError(OverlayDetectError):
    """The model endpoint could not be reached or did not answer in time."""

    tag = 'transport'


class RateLimitError(TransportError):
    tag = 'rate_limit'


class ProtocolError(OverlayDetectError):
    """The endpoint answered with something that is not a valid reply."""

    tag = 'protocol'

    def __init__(self, message: str, *, payload: typing.Any = None):
        self.payload = payload
        super().__init__(message)


class ScriptError(OverlayDetectError, ValueError):
    tag = 'script'

    def __init__(self, message: str, *, rule_index: typing.Optional[int] = None):
        self.rule_index = rule_index
        prefix = f'rule {rule_index}: ' if rule_index is not None else ''
        super().__init__(f'{prefix}{message}')


class RenderError(OverlayDetectError, KeyError):
    tag = 'render'

    def __init__(self, placeholder: str, template: str = ''):
        self.placeholder = placeholder
        self.template = template
        super().__init__(placeholder)

    def __str__(self):
        where = f' in template {self.template!r}' if self.template else ''
        return f'missing required binding {self.placeholder!r}{where}'


class VerdictError(OverlayDetectError, ValueError):
    """A model response did not contain a usable yes/no answer."""

    tag = 'verdict'

    def __init__(self, message: str, *, raw: str):
        self.raw = raw
        super().__init__(message)


class CheckpointError(OverlayDetectError, ValueError):
    tag = 'checkpoint'


class FinetuneConfigError(OverlayDetectError, ValueError):
    tag = 'finetune_config'

    def __init__(self, violations: typing.List[str]):
        self.violations = list(violations)
        super().__init__('invalid fine-tuning configuration: ' + '; '.join(self.violations))


class FinetuneRunError(OverlayDetectError, RuntimeError):
    tag = 'finetune_run'

    def __init__(self, message: str, *, diagnostics: typing.Any = None):
        self.diagnostics = diagnostics
        super().__init__(message)


def error_tag(exc: BaseException) -> str:
    if isinstance(exc, OverlayDetectError):
        return exc.tag
    if isinstance(exc, OSError):
        return 'io'
    if isinstance(exc, (UnicodeError, pydantic.ValidationError)):
        return ManifestSchemaError.tag
    return type(exc).__name__
