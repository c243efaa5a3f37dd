"""OCR engines producing :class:`~overlaydetect.dataset.TokenBox` lists for the fusion model."""

import abc
import logging
import typing

from PIL import Image

from .dataset import TokenBox, read_sidecar, sidecar_path

logger = logging.getLogger(__name__)


class OcrEngine(abc.ABC):
    @abc.abstractmethod
    def read(self, image_path: str, image: Image.Image) -> typing.List[TokenBox]:
        """Return the text fragments found in ``image`` (loaded from ``image_path``)."""


class SidecarOcr(OcrEngine):
    """Ground-truth tokens from the ``.tokens`` file written next to a synthetic image."""

    def __init__(self, **storage_options):
        self.storage_options = storage_options

    def read(self, image_path: str, image: Image.Image) -> typing.List[TokenBox]:
        return read_sidecar(sidecar_path(image_path), **self.storage_options)


class TesseractOcr(OcrEngine):
    """Word-level boxes from a local Tesseract install through ``pytesseract``.

    Parameters
    ----------
    min_confidence : float, optional
        Words Tesseract scores at or below this confidence are dropped. Default is 0.
    config : str, optional
        Extra command-line flags passed to tesseract, e.g. ``'--psm 11'``.
    """

    def __init__(self, min_confidence: float = 0.0, config: str = ''):
        self.min_confidence = min_confidence
        self.config = config

    def read(self, image_path: str, image: Image.Image) -> typing.List[TokenBox]:
        try:
            import pytesseract
        except ImportError as exc:
            raise ImportError(
                'TesseractOcr requires pytesseract: `python -m pip install pytesseract`'
            ) from exc

        data = pytesseract.image_to_data(
            image, config=self.config, output_type=pytesseract.Output.DICT
        )
        tokens = []
        for text, conf, left, top, width, height in zip(
            data['text'], data['conf'], data['left'], data['top'], data['width'], data['height']
        ):
            if not str(text).strip() or float(conf) <= self.min_confidence:
                continue
            box = TokenBox(
                text=str(text).strip(), x=int(left), y=int(top), w=int(width), h=int(height)
            )
            tokens.append(box)
        logger.debug('tesseract found %d words in %s', len(tokens), image_path)
        return tokens
