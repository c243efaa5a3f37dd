import sys
import types

import pytest
from PIL import Image

from overlaydetect.dataset import Category, TokenBox, read_sidecar, sidecar_path
from overlaydetect.ocr import SidecarOcr, TesseractOcr


def test_sidecar_ocr_reads_ground_truth(small_corpus):
    overlay = small_corpus.select(categories=[Category.overlay]).samples[0]
    path = small_corpus.resolve(overlay)
    with Image.open(path) as image:
        tokens = SidecarOcr().read(path, image)
    assert tokens == read_sidecar(sidecar_path(path))
    assert tokens


def _fake_pytesseract(data):
    module = types.ModuleType('pytesseract')
    module.Output = types.SimpleNamespace(DICT='dict')
    calls = []

    def image_to_data(image, config='', output_type=None):
        calls.append((config, output_type))
        return data

    module.image_to_data = image_to_data
    module.calls = calls
    return module


def test_tesseract_ocr(monkeypatch):
    fake = _fake_pytesseract(
        {
            'text': ['', 'SALE', 'noise', '  OFF '],
            'conf': ['-1', '91.5', '12', 88],
            'left': [0, 4, 30, 50],
            'top': [0, 6, 30, 6],
            'width': [128, 40, 5, 20],
            'height': [128, 10, 5, 10],
        }
    )
    monkeypatch.setitem(sys.modules, 'pytesseract', fake)
    engine = TesseractOcr(min_confidence=50, config='--psm 11')
    tokens = engine.read('in-memory.png', Image.new('RGB', (128, 128)))
    assert tokens == [
        TokenBox(text='SALE', x=4, y=6, w=40, h=10),
        TokenBox(text='OFF', x=50, y=6, w=20, h=10),
    ]
    assert fake.calls == [('--psm 11', 'dict')]


def test_tesseract_ocr_without_pytesseract(monkeypatch):
    monkeypatch.setitem(sys.modules, 'pytesseract', None)
    with pytest.raises(ImportError, match='pip install pytesseract'):
        TesseractOcr().read('x.png', Image.new('RGB', (8, 8)))
