"""The stage-1 scene block: objects, text entities and text-object relations.

Wire format, items numbered from 1 and relations referring to those numbers::

    OBJECTS:
    1. television screen
    TEXTS:
    1. "NETFLIX" (on object 1)
    RELATIONS:
    1. text 1 -> object 1: displayed on television screen
"""

import re
import typing

import pydantic

from .utilities import split_numbered_item

SECTIONS = ('objects', 'texts', 'relations')
EMPTY_SECTION = '(none)'

HEADER = re.compile(r'^\s*[*#]*\s*(objects|texts|relations)\s*[*]*\s*:\s*(.*)$', re.IGNORECASE)
TEXT_ITEM = re.compile(
    r'^(?:"(?P<quoted>.*)"|(?P<bare>.*?))(?:\s*\(on object\s+(?P<carrier>\d+)\))?$',
    re.IGNORECASE,
)
RELATION_ITEM = re.compile(
    r'^text\s+(\d+)\s*(?:->|→)\s*object\s+(\d+)\s*:\s*(.+)$', re.IGNORECASE
)


class TextEntity(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    text: str
    # index into ``objects`` of the object the text is written on
    carrier: typing.Optional[int] = None


class Relation(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True)

    text_index: int
    object_index: int
    phrase: str


class ExtractionResult(pydantic.BaseModel):
    """Scene description of one image: objects O, texts T and relations R.

    The cardinalities n, m and n_r are the lengths of the three lists.
    """

    image_id: str
    objects: typing.List[str] = pydantic.Field(default_factory=list)
    texts: typing.List[TextEntity] = pydantic.Field(default_factory=list)
    relations: typing.List[Relation] = pydantic.Field(default_factory=list)
    malformed: bool = False

    @pydantic.model_validator(mode='after')
    def _check_indices(self):
        for entity in self.texts:
            if entity.carrier is not None and not 0 <= entity.carrier < len(self.objects):
                raise ValueError(f'carrier {entity.carrier} out of range')
        for relation in self.relations:
            if not 0 <= relation.text_index < len(self.texts):
                raise ValueError(f'relation text index {relation.text_index} out of range')
            if not 0 <= relation.object_index < len(self.objects):
                raise ValueError(f'relation object index {relation.object_index} out of range')
        return self

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_texts(self) -> int:
        return len(self.texts)

    @property
    def n_relations(self) -> int:
        return len(self.relations)


def _one_line(value: str) -> str:
    return ' '.join(value.split())


def serialize_sections(extraction: ExtractionResult) -> typing.Dict[str, str]:
    """Render each section body, numbered from 1; empty sections read ``(none)``."""
    objects = [f'{i}. {_one_line(o)}' for i, o in enumerate(extraction.objects, start=1)]
    texts = []
    for i, entity in enumerate(extraction.texts, start=1):
        carrier = f' (on object {entity.carrier + 1})' if entity.carrier is not None else ''
        texts.append(f'{i}. "{_one_line(entity.text)}"{carrier}')
    relations = [
        f'{i}. text {r.text_index + 1} -> object {r.object_index + 1}: {_one_line(r.phrase)}'
        for i, r in enumerate(extraction.relations, start=1)
    ]
    return {
        name: '\n'.join(lines) if lines else EMPTY_SECTION
        for name, lines in zip(SECTIONS, (objects, texts, relations))
    }


def serialize_extraction(extraction: ExtractionResult) -> str:
    sections = serialize_sections(extraction)
    return '\n'.join(f'{name.upper()}:\n{sections[name]}' for name in SECTIONS) + '\n'


def _split_sections(text: str) -> typing.Dict[str, typing.List[str]]:
    sections: typing.Dict[str, typing.List[str]] = {}
    current = None
    for line in text.splitlines():
        header = HEADER.match(line)
        if header:
            current = header.group(1).lower()
            sections.setdefault(current, [])
            if header.group(2).strip():
                sections[current].append(header.group(2))
            continue
        if current is not None:
            sections[current].append(line)
    return sections


def _numbered(lines: typing.List[str]) -> typing.Iterator[typing.Tuple[int, str]]:
    for line in lines:
        item = split_numbered_item(line)
        if item is not None:
            yield item


def parse_extraction(text: str, image_id: str) -> ExtractionResult:
    """Parse a stage-1 response. Never raises.

    Prose around and between the sections is ignored. A missing block, a missing
    section, an item that does not fit its section's shape, a duplicate item number
    or a reference to an unknown item sets ``malformed``; only the offending item is
    dropped.
    """
    if not isinstance(text, str):
        return ExtractionResult(image_id=image_id, malformed=True)
    sections = _split_sections(text)
    if not sections:
        return ExtractionResult(image_id=image_id, malformed=True)
    malformed = any(name not in sections for name in SECTIONS)

    objects: typing.List[str] = []
    object_at: typing.Dict[int, int] = {}
    for label, body in _numbered(sections.get('objects', [])):
        if not body or label in object_at:
            malformed = True
            continue
        object_at[label] = len(objects)
        objects.append(body)

    texts: typing.List[TextEntity] = []
    text_at: typing.Dict[int, int] = {}
    for label, body in _numbered(sections.get('texts', [])):
        item = TEXT_ITEM.match(body)
        literal = item.group('quoted')
        literal = (literal if literal is not None else item.group('bare')).strip()
        if not literal or label in text_at:
            malformed = True
            continue
        carrier = None
        if item.group('carrier') is not None:
            carrier = object_at.get(int(item.group('carrier')))
            malformed = malformed or carrier is None
        text_at[label] = len(texts)
        texts.append(TextEntity(text=literal, carrier=carrier))

    relations: typing.List[Relation] = []
    for _, body in _numbered(sections.get('relations', [])):
        item = RELATION_ITEM.match(body)
        if not item:
            malformed = True
            continue
        text_index = text_at.get(int(item.group(1)))
        object_index = object_at.get(int(item.group(2)))
        if text_index is None or object_index is None:
            malformed = True
            continue
        relations.append(
            Relation(text_index=text_index, object_index=object_index, phrase=item.group(3).strip())
        )

    return ExtractionResult(
        image_id=image_id, objects=objects, texts=texts, relations=relations, malformed=malformed
    )
