import logging

import pytest

from overlaydetect.errors import ContractError, RenderError, TransportError, VerdictError
from overlaydetect.metrics import BinaryLabel
from overlaydetect.parsers import TextEntity
from overlaydetect.prompting import (
    INSTRUCTION,
    STAGE1,
    STAGE2,
    ZERO_SHOT,
    PromptTemplate,
    Strategy,
    Transcript,
    default_templates,
    detect_finetuned,
    detect_sequential,
    detect_zero_shot,
    extract_scene,
    load_templates,
    placeholders,
    render,
)

STAGE1_MARKER = 'Identify all text and all objects'
STAGE2_MARKER = 'description of its content'

NETFLIX_EXTRACTION = (
    'OBJECTS:\n1. television screen\n2. living room wall\n'
    'TEXTS:\n1. "NETFLIX" (on object 1)\n'
    'RELATIONS:\n1. text 1 -> object 1: displayed on television screen\n'
)


def test_placeholders():
    assert placeholders('{objects} and {texts} but not {{literal}}') == {'objects', 'texts'}
    assert placeholders('no fields') == frozenset()


def test_render():
    template = PromptTemplate(name='t', body='O: {objects}\nT: {texts}')
    assert template.required_placeholders == {'objects', 'texts'}
    rendered = render(template, {'objects': '1. car', 'texts': '(none)', 'unused': 'x'})
    assert rendered == 'O: 1. car\nT: (none)'


def test_render_missing_binding():
    template = PromptTemplate(name='stage2', body='{objects} {texts}')
    with pytest.raises(RenderError) as excinfo:
        render(template, {'objects': 'a'})
    assert excinfo.value.placeholder == 'texts'
    assert str(excinfo.value) == "missing required binding 'texts' in template 'stage2'"


def test_render_optional_placeholder():
    template = PromptTemplate(name='t', body='Decide.{hint}', required_placeholders=frozenset())
    assert render(template, {}) == 'Decide.'
    assert render(template, {'hint': ' Look closely.'}) == 'Decide. Look closely.'


def test_default_templates():
    templates = default_templates()
    assert {ZERO_SHOT, STAGE1, STAGE2, INSTRUCTION} <= set(templates)
    assert templates[STAGE2].placeholders == {'objects', 'texts', 'relations'}
    for name in (ZERO_SHOT, STAGE1, INSTRUCTION):
        assert templates[name].placeholders == frozenset()
    assert 'ANSWER: yes or no' in templates[ZERO_SHOT].body
    assert STAGE1_MARKER in templates[STAGE1].body
    assert STAGE2_MARKER in templates[STAGE2].body


def test_load_templates(tmp_path):
    (tmp_path / 'ask.txt').write_text('Is there an overlay? {hint}')
    (tmp_path / 'decide.txt').write_text('{objects}|{texts}|{relations}')
    (tmp_path / 'notes.md').write_text('ignored')
    (tmp_path / 'templates.yaml').write_text('ask:\n  optional: [hint]\n')
    templates = load_templates(str(tmp_path))
    assert sorted(templates) == ['ask', 'decide']
    assert templates['ask'].required_placeholders == frozenset()
    assert templates['decide'].required_placeholders == {'objects', 'texts', 'relations'}


def test_load_templates_empty_directory(tmp_path):
    with pytest.raises(ContractError, match='no \\*.txt templates'):
        load_templates(str(tmp_path))


@pytest.mark.parametrize(
    'response, label, overlay_texts',
    [
        ("ANSWER: yes\nOVERLAY: ['SALE', 'BUY NOW']", BinaryLabel.positive, ['SALE', 'BUY NOW']),
        ('ANSWER: no\nOVERLAY: []', BinaryLabel.negative, []),
    ],
)
def test_detect_zero_shot(scripted_client, templates, png_bytes, response, label, overlay_texts):
    client = scripted_client(default={'response': response})
    verdict = detect_zero_shot(png_bytes, 'img-1', client, templates[ZERO_SHOT])
    assert verdict.label == label
    assert verdict.overlay_texts == overlay_texts
    assert verdict.strategy == Strategy.zero_shot
    assert verdict.confidence == 1.0
    assert verdict.evidence == response
    assert len(client.attempts) == 1
    assert client.attempts[0].image == png_bytes
    assert client.attempts[0].prompt == templates[ZERO_SHOT].body


def test_detect_zero_shot_unparseable(scripted_client, templates, png_bytes):
    client = scripted_client(default={'response': 'There might be a caption.'})
    with pytest.raises(VerdictError) as excinfo:
        detect_zero_shot(png_bytes, 'img-1', client, templates[ZERO_SHOT])
    assert excinfo.value.raw == 'There might be a caption.'


def test_detect_sequential_netflix(scripted_client, templates, png_bytes):
    client = scripted_client(
        rules=[
            {'prompt_contains': STAGE1_MARKER, 'response': NETFLIX_EXTRACTION},
            {'prompt_contains': STAGE2_MARKER, 'response': 'ANSWER: no\nOVERLAY: []'},
        ]
    )
    transcript = Transcript(image_id='tv', strategy=Strategy.sequential)
    verdict, extraction = detect_sequential(
        png_bytes, 'tv', client, templates[STAGE1], templates[STAGE2], transcript
    )
    assert verdict.label == BinaryLabel.negative
    assert verdict.strategy == Strategy.sequential
    assert extraction.texts == [TextEntity(text='NETFLIX', carrier=0)]
    assert extraction.objects[0] == 'television screen'

    assert len(client.attempts) == 2
    first, second = client.attempts
    assert first.image == second.image == png_bytes
    assert STAGE1_MARKER in first.prompt
    assert '1. "NETFLIX" (on object 1)' in second.prompt
    assert '1. television screen\n2. living room wall' in second.prompt
    assert '1. text 1 -> object 1: displayed on television screen' in second.prompt

    assert [step.stage for step in transcript.steps] == ['extract', 'decide']
    assert transcript.steps[0].response == NETFLIX_EXTRACTION
    assert transcript.extraction == extraction
    assert transcript.verdict == verdict


def test_zero_shot_sends_one_request_and_sequential_two(scripted_client, templates, png_bytes):
    client = scripted_client(
        rules=[{'prompt_contains': STAGE1_MARKER, 'response': NETFLIX_EXTRACTION}],
        default={'response': "ANSWER: yes\nOVERLAY: ['NETFLIX']"},
    )
    detect_zero_shot(png_bytes, 'a', client, templates[ZERO_SHOT])
    detect_sequential(png_bytes, 'b', client, templates[STAGE1], templates[STAGE2])
    assert len(client.requests_for('a')) == 1
    assert len(client.requests_for('b')) == 2


def test_stage1_failure_aborts_the_chain(scripted_client, templates, png_bytes):
    client = scripted_client(
        rules=[{'prompt_contains': STAGE1_MARKER, 'error': {'kind': 'timeout'}}],
        default={'response': 'ANSWER: no'},
        retries=2,
    )
    transcript = Transcript(image_id='x', strategy=Strategy.sequential)
    with pytest.raises(TransportError):
        detect_sequential(png_bytes, 'x', client, templates[STAGE1], templates[STAGE2], transcript)
    assert len(client.attempts) == 3
    assert all(STAGE1_MARKER in request.prompt for request in client.attempts)
    assert len(transcript.steps) == 1
    assert transcript.steps[0].error.startswith('TransportError')


def test_malformed_extraction_still_reaches_stage2(scripted_client, templates, png_bytes, caplog):
    client = scripted_client(
        rules=[{'prompt_contains': STAGE1_MARKER, 'response': 'I see a cat on a sofa.'}],
        default={'response': 'ANSWER: no'},
    )
    with caplog.at_level(logging.WARNING, logger='overlaydetect.prompting'):
        verdict, extraction = detect_sequential(
            png_bytes, 'cat', client, templates[STAGE1], templates[STAGE2]
        )
    assert extraction.malformed
    assert verdict.label == BinaryLabel.negative
    assert 'malformed' in caplog.text
    stage2_prompt = client.attempts[1].prompt
    assert 'Objects in the image:\n(none)' in stage2_prompt


def test_sequential_needs_stage2_placeholders(scripted_client, templates, png_bytes):
    client = scripted_client(default={'response': 'ANSWER: no'})
    stage2 = PromptTemplate(name='bad', body='Decide using {objects} only.')
    with pytest.raises(ContractError, match='relations'):
        detect_sequential(png_bytes, 'x', client, templates[STAGE1], stage2)
    assert client.attempts == []


def test_extract_scene(scripted_client, templates, png_bytes):
    client = scripted_client(default={'response': NETFLIX_EXTRACTION})
    extraction = extract_scene(png_bytes, 'tv', client, templates[STAGE1])
    assert extraction.image_id == 'tv'
    assert not extraction.malformed
    assert extraction.n_relations == 1


@pytest.mark.parametrize(
    'response, label',
    [
        ('yes', BinaryLabel.positive),
        ('No. The text is on a shop sign.', BinaryLabel.negative),
        ("ANSWER: yes\nOVERLAY: ['WIN']", BinaryLabel.positive),
    ],
)
def test_detect_finetuned(scripted_client, templates, png_bytes, response, label):
    client = scripted_client(default={'response': response})
    verdict = detect_finetuned(png_bytes, 'img', client, templates[INSTRUCTION])
    assert verdict.label == label
    assert verdict.strategy == Strategy.finetuned
    assert client.attempts[0].prompt.startswith('Does this image contain')
