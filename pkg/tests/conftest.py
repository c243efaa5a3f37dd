import io

import pytest
from PIL import Image

from overlaydetect.dataset import SyntheticSpec, generate_synthetic_corpus
from overlaydetect.prompting import default_templates
from overlaydetect.vlm_client import ScriptedBehavior, ScriptedVlmClient


@pytest.fixture(scope='session')
def small_corpus(tmp_path_factory):
    """Two train and two eval images per category, written once per session."""
    out = tmp_path_factory.mktemp('corpus')
    spec = SyntheticSpec(seed=7, count_per_category=2, eval_count_per_category=2)
    return generate_synthetic_corpus(spec, str(out))


@pytest.fixture
def templates():
    return default_templates()


@pytest.fixture
def png_bytes():
    buffer = io.BytesIO()
    Image.new('RGB', (16, 16), (200, 30, 30)).save(buffer, format='PNG')
    return buffer.getvalue()


@pytest.fixture
def scripted_client():
    """Factory for a :class:`ScriptedVlmClient` from plain rule dictionaries."""

    def make(rules=(), default=None, **kwargs):
        data = {'rules': list(rules)}
        if default is not None:
            data['default'] = default
        return ScriptedVlmClient(ScriptedBehavior.model_validate(data), **kwargs)

    return make
