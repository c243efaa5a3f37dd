"""Fused OCR-text / token-position / image classifier, trained from scratch in numpy.

Three encoders feed one logistic head:

* text: the characters of the OCR tokens, in reading order, embedded and folded by a GRU;
* position: one 8-vector of normalised box geometry per token, folded by a second GRU;
* image: three stride-2 3x3 convolutions, global average pooling and a projection.

The final hidden states and the image feature are concatenated and passed through
an affine layer and the logistic function. Everything is float64 and the gradients
are written out by hand, so they can be checked against finite differences.
"""

import io
import json
import logging
import math
import typing

import fsspec
import numpy as np
import pandas as pd
import pydantic
import toolz
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .dataset import ImageSample, Manifest
from .errors import CheckpointError, ContractError
from .metrics import BinaryLabel, category_to_binary
from .ocr import OcrEngine, SidecarOcr
from .prompting import OverlayVerdict, Strategy

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
META_KEY = '__meta__'

# printable ASCII 32..126, a token separator, and an unknown symbol
FIRST_PRINTABLE = 32
LAST_PRINTABLE = 126
SEPARATOR = LAST_PRINTABLE - FIRST_PRINTABLE + 1
UNKNOWN = SEPARATOR + 1
VOCAB_SIZE = UNKNOWN + 1

POSITION_FEATURES = 8
MIN_ASPECT = 0.05
MAX_ASPECT = 20.0
CLAMP = 1e-7
THRESHOLD = 0.5
IMAGE_CHANNELS = 3


class OcrToken(pydantic.BaseModel):
    """A detected text fragment; ``box`` is ``(x, y, w, h)`` inside ``image_size = (W, H)``.

    Geometry is checked by :func:`encode_positions`, not on construction.
    """

    model_config = pydantic.ConfigDict(frozen=True)

    text: str
    box: typing.Tuple[float, float, float, float]
    image_size: typing.Tuple[int, int]


class TrainRecord(pydantic.BaseModel):
    """Model input: tokens, a ``(3, H, W)`` float image in [0, 1] and, for training, a label."""

    model_config = pydantic.ConfigDict(frozen=True, arbitrary_types_allowed=True)

    tokens: typing.List[OcrToken] = pydantic.Field(default_factory=list)
    image: np.ndarray
    label: typing.Optional[BinaryLabel] = None
    sample_id: str = ''


class FusionTrainerConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra='forbid')

    epochs: int = pydantic.Field(100, ge=1)
    learning_rate: float = pydantic.Field(0.05, ge=0.0)
    batch_size: int = pydantic.Field(1, ge=1)
    seed: int = 0
    init_scale: float = pydantic.Field(1.0, ge=0.0)
    embedding_size: int = pydantic.Field(16, ge=1)
    text_hidden: int = pydantic.Field(32, ge=1)
    position_hidden: int = pydantic.Field(16, ge=1)
    image_feature: int = pydantic.Field(32, ge=1)
    conv_channels: typing.Tuple[int, int, int] = (8, 16, 16)
    # side of the square raster the image branch sees
    image_size: int = pydantic.Field(32, ge=8)
    max_tokens: int = pydantic.Field(32, ge=1)
    max_chars: int = pydantic.Field(64, ge=1)


def param_shapes(config: FusionTrainerConfig) -> typing.Dict[str, typing.Tuple[int, ...]]:
    text, position, feature = config.text_hidden, config.position_hidden, config.image_feature
    c1, c2, c3 = config.conv_channels
    return {
        'embedding': (VOCAB_SIZE, config.embedding_size),
        'text_W': (3 * text, config.embedding_size),
        'text_U': (3 * text, text),
        'text_b': (3 * text,),
        'position_W': (3 * position, POSITION_FEATURES),
        'position_U': (3 * position, position),
        'position_b': (3 * position,),
        'conv1_w': (c1, IMAGE_CHANNELS, 3, 3),
        'conv1_b': (c1,),
        'conv2_w': (c2, c1, 3, 3),
        'conv2_b': (c2,),
        'conv3_w': (c3, c2, 3, 3),
        'conv3_b': (c3,),
        'projection_W': (feature, c3),
        'projection_b': (feature,),
        'head_w': (text + position + feature,),
        'head_b': (1,),
    }


class FusionParams(pydantic.BaseModel):
    """All weights of the fused classifier, keyed by name, plus the config that shaped them."""

    model_config = pydantic.ConfigDict(arbitrary_types_allowed=True)

    config: FusionTrainerConfig
    arrays: typing.Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, config: FusionTrainerConfig) -> 'FusionParams':
        return cls(
            config=config,
            arrays={name: np.zeros(shape) for name, shape in param_shapes(config).items()},
        )

    @property
    def shapes(self) -> typing.Dict[str, typing.Tuple[int, ...]]:
        return {name: array.shape for name, array in self.arrays.items()}

    def check(self) -> None:
        expected = param_shapes(self.config)
        actual = self.shapes
        problems = [
            f'{name}: expected {shape}, got {actual.get(name)}'
            for name, shape in expected.items()
            if actual.get(name) != shape
        ]
        problems += [f'{name}: unexpected array' for name in self.arrays if name not in expected]
        if problems:
            raise ContractError('inconsistent fusion parameters: ' + '; '.join(problems))

    def clone(self) -> 'FusionParams':
        return FusionParams(
            config=self.config, arrays={name: array.copy() for name, array in self.arrays.items()}
        )


def init_params(config: FusionTrainerConfig) -> FusionParams:
    """Seeded initialisation: weights ~ N(0, init_scale^2 / fan_in), biases zero."""
    rng = np.random.default_rng([config.seed, 0])
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith('_b'):
            arrays[name] = np.zeros(shape)
            continue
        if name == 'embedding':
            fan_in = 1
        elif name == 'head_w':
            fan_in = shape[0]
        else:
            fan_in = int(np.prod(shape[1:]))
        arrays[name] = config.init_scale * rng.standard_normal(shape) / math.sqrt(fan_in)
    return FusionParams(config=config, arrays=arrays)


def _violation(token: OcrToken) -> typing.Optional[str]:
    x, y, w, h = token.box
    width, height = token.image_size
    if width <= 0 or height <= 0:
        return f'image size {token.image_size} is not positive'
    if w <= 0 or h <= 0:
        return 'box width and height must be positive'
    if x < 0 or y < 0 or x + w > width or y + h > height:
        return f'box lies outside the {width}x{height} image'
    return None


def encode_positions(tokens: typing.Sequence[OcrToken]) -> np.ndarray:
    """One row per token: ``x/W, y/H, w/W, h/H, cx/W, cy/H, clamp(w/h), w*h/(W*H)``.

    Returns an ``(n, 8)`` array; an empty token list gives shape ``(0, 8)``.
    """
    rows = []
    for index, token in enumerate(tokens):
        problem = _violation(token)
        if problem:
            raise ContractError(f'token {index} ({token.text!r}, box {token.box}): {problem}')
        x, y, w, h = token.box
        width, height = token.image_size
        rows.append(
            [
                x / width,
                y / height,
                w / width,
                h / height,
                (x + w / 2) / width,
                (y + h / 2) / height,
                min(max(w / h, MIN_ASPECT), MAX_ASPECT),
                (w * h) / (width * height),
            ]
        )
    return np.array(rows, dtype=np.float64).reshape(len(rows), POSITION_FEATURES)


def reading_order(tokens: typing.Sequence[OcrToken]) -> typing.List[OcrToken]:
    return sorted(tokens, key=lambda token: (token.box[1], token.box[0]))


def char_indices(tokens: typing.Sequence[OcrToken], max_chars: int) -> np.ndarray:
    indices = []
    for position, token in enumerate(tokens):
        if position:
            indices.append(SEPARATOR)
        for char in token.text:
            code = ord(char)
            indices.append(
                code - FIRST_PRINTABLE if FIRST_PRINTABLE <= code <= LAST_PRINTABLE else UNKNOWN
            )
    return np.array(indices[:max_chars], dtype=np.intp)


class _Encoded(typing.NamedTuple):
    chars: np.ndarray
    positions: np.ndarray
    image: np.ndarray


def _encode(record: TrainRecord, config: FusionTrainerConfig) -> _Encoded:
    ordered = reading_order(record.tokens)
    positions = encode_positions(ordered)[: config.max_tokens]
    image = np.asarray(record.image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != IMAGE_CHANNELS:
        raise ContractError(f'image must have shape (3, H, W), got {image.shape}')
    return _Encoded(char_indices(ordered[: config.max_tokens], config.max_chars), positions, image)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gru_forward(W, U, b, inputs):
    hidden = U.shape[1]
    h = np.zeros(hidden)
    cache = []
    for x in inputs:
        a = W @ x + b
        gates = _sigmoid(a[: 2 * hidden] + U[: 2 * hidden] @ h)
        z, r = gates[:hidden], gates[hidden:]
        n = np.tanh(a[2 * hidden :] + U[2 * hidden :] @ (r * h))
        cache.append((x, h, z, r, n))
        h = (1.0 - z) * h + z * n
    return h, cache


def _gru_backward(W, U, dh, cache):
    hidden = U.shape[1]
    dW, dU, db = np.zeros_like(W), np.zeros_like(U), np.zeros(W.shape[0])
    dxs = [None] * len(cache)
    for t in reversed(range(len(cache))):
        x, h_prev, z, r, n = cache[t]
        dz = dh * (n - h_prev)
        da_n = dh * z * (1.0 - n * n)
        drh = U[2 * hidden :].T @ da_n
        dr = drh * h_prev
        da_zr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)])
        da = np.concatenate([da_zr, da_n])
        dW += np.outer(da, x)
        db += da
        dU[: 2 * hidden] += np.outer(da_zr, h_prev)
        dU[2 * hidden :] += np.outer(da_n, r * h_prev)
        dxs[t] = W.T @ da
        dh = dh * (1.0 - z) + drh * r + U[: 2 * hidden].T @ da_zr
    return dW, dU, db, dxs


def _conv_forward(x, w, b):
    """Stride-2, pad-1, 3x3 convolution followed by tanh."""
    channels_out = w.shape[0]
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))[:, ::2, ::2]
    _, rows, cols_ = windows.shape[:3]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(rows * cols_, -1)
    out = np.tanh(cols @ w.reshape(channels_out, -1).T + b)
    return out.reshape(rows, cols_, channels_out).transpose(2, 0, 1), cols


def _conv_backward(x_shape, w, d_out, out, cols):
    channels_out = w.shape[0]
    channels_in, height, width = x_shape
    _, rows, cols_ = out.shape
    d_pre = (d_out * (1.0 - out * out)).transpose(1, 2, 0).reshape(rows * cols_, channels_out)
    dw = (d_pre.T @ cols).reshape(w.shape)
    db = d_pre.sum(axis=0)
    d_cols = (d_pre @ w.reshape(channels_out, -1)).reshape(rows, cols_, channels_in, 3, 3)
    d_padded = np.zeros((channels_in, height + 2, width + 2))
    for ki in range(3):
        for kj in range(3):
            d_padded[:, ki : ki + 2 * rows : 2, kj : kj + 2 * cols_ : 2] += d_cols[
                :, :, :, ki, kj
            ].transpose(2, 0, 1)
    return dw, db, d_padded[:, 1:-1, 1:-1]


class _Cache(typing.NamedTuple):
    text: list
    position: list
    convs: list
    pooled: np.ndarray
    feature: np.ndarray
    fused: np.ndarray


def _forward(params: FusionParams, encoded: _Encoded) -> typing.Tuple[float, _Cache]:
    a = params.arrays
    h_text, text_cache = _gru_forward(
        a['text_W'], a['text_U'], a['text_b'], a['embedding'][encoded.chars]
    )
    h_position, position_cache = _gru_forward(
        a['position_W'], a['position_U'], a['position_b'], encoded.positions
    )
    activation = encoded.image
    convs = []
    for layer in (1, 2, 3):
        out, cols = _conv_forward(activation, a[f'conv{layer}_w'], a[f'conv{layer}_b'])
        convs.append((activation.shape, out, cols))
        activation = out
    pooled = activation.mean(axis=(1, 2))
    feature = np.tanh(a['projection_W'] @ pooled + a['projection_b'])
    fused = np.concatenate([h_text, h_position, feature])
    probability = float(_sigmoid(a['head_w'] @ fused + a['head_b'][0]))
    return probability, _Cache(text_cache, position_cache, convs, pooled, feature, fused)


def _backward(
    params: FusionParams, encoded: _Encoded, cache: _Cache, d_logit: float
) -> typing.Dict[str, np.ndarray]:
    a = params.arrays
    config = params.config
    grads = {name: np.zeros_like(array) for name, array in a.items()}
    grads['head_w'] = d_logit * cache.fused
    grads['head_b'][0] = d_logit
    d_fused = d_logit * a['head_w']
    split = np.cumsum([config.text_hidden, config.position_hidden])
    d_text, d_position, d_feature = np.split(d_fused, split)

    d_projection = d_feature * (1.0 - cache.feature**2)
    grads['projection_W'] = np.outer(d_projection, cache.pooled)
    grads['projection_b'] = d_projection
    d_pooled = a['projection_W'].T @ d_projection
    last = cache.convs[-1][1]
    d_activation = np.broadcast_to(
        d_pooled[:, None, None] / (last.shape[1] * last.shape[2]), last.shape
    )
    for layer in (3, 2, 1):
        x_shape, out, cols = cache.convs[layer - 1]
        dw, db, d_activation = _conv_backward(x_shape, a[f'conv{layer}_w'], d_activation, out, cols)
        grads[f'conv{layer}_w'] = dw
        grads[f'conv{layer}_b'] = db

    dW, dU, db, dxs = _gru_backward(a['text_W'], a['text_U'], d_text, cache.text)
    grads['text_W'], grads['text_U'], grads['text_b'] = dW, dU, db
    if dxs:
        np.add.at(grads['embedding'], encoded.chars, np.array(dxs))
    dW, dU, db, _ = _gru_backward(a['position_W'], a['position_U'], d_position, cache.position)
    grads['position_W'], grads['position_U'], grads['position_b'] = dW, dU, db
    return grads


def forward(params: FusionParams, record: TrainRecord) -> float:
    """Probability that ``record`` carries an artificial overlay."""
    params.check()
    probability, _ = _forward(params, _encode(record, params.config))
    return probability


def _record_loss_and_grad(params, encoded, label):
    probability, cache = _forward(params, encoded)
    y = 1.0 if label == BinaryLabel.positive else 0.0
    clipped = min(max(probability, CLAMP), 1.0 - CLAMP)
    loss = -(y * math.log(clipped) + (1.0 - y) * math.log(1.0 - clipped))
    # the clamp is flat, so no gradient flows once it is active
    d_logit = probability - y if clipped == probability else 0.0
    return loss, probability, _backward(params, encoded, cache, d_logit)


def _require_labels(batch: typing.Sequence[TrainRecord]) -> None:
    unlabelled = [i for i, record in enumerate(batch) if record.label is None]
    if unlabelled:
        raise ContractError(f'records {unlabelled} have no label')


def loss_and_grad(
    params: FusionParams, batch: typing.Sequence[TrainRecord]
) -> typing.Tuple[float, typing.Dict[str, np.ndarray]]:
    """Mean binary cross-entropy over ``batch`` and its gradient w.r.t. every array.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before taking logs.
    """
    if not batch:
        raise ContractError('batch must not be empty')
    _require_labels(batch)
    params.check()
    total = 0.0
    grads = {name: np.zeros_like(array) for name, array in params.arrays.items()}
    for record in batch:
        loss, _, record_grads = _record_loss_and_grad(
            params, _encode(record, params.config), record.label
        )
        total += loss
        for name, grad in record_grads.items():
            grads[name] += grad
    return total / len(batch), {name: grad / len(batch) for name, grad in grads.items()}


def _accuracy(params: FusionParams, encoded: typing.Sequence[_Encoded], labels) -> float:
    correct = [
        (_forward(params, item)[0] >= THRESHOLD) == (label == BinaryLabel.positive)
        for item, label in zip(encoded, labels)
    ]
    return float(np.mean(correct))


TRACE_COLUMNS = ['epoch', 'loss', 'accuracy', 'eval_accuracy']


def train(
    records: typing.Sequence[TrainRecord],
    config: FusionTrainerConfig,
    eval_records: typing.Optional[typing.Sequence[TrainRecord]] = None,
) -> typing.Tuple[FusionParams, pd.DataFrame]:
    """Fit the classifier with plain SGD.

    Parameters
    ----------
    records : sequence of TrainRecord
        Labelled training records; both labels must be present.
    config : FusionTrainerConfig
        Sizes, learning rate, epochs, batch size and seed.
    eval_records : sequence of TrainRecord, optional
        Scored after every epoch into the ``eval_accuracy`` column.

    Returns
    -------
    params : FusionParams
    trace : pandas.DataFrame
        One row per epoch with columns ``epoch``, ``loss`` and ``accuracy`` (mean over
        the epoch, each record scored just before its update) and ``eval_accuracy``.
    """
    if len(records) < 2:
        raise ContractError(f'need at least 2 training records, got {len(records)}')
    _require_labels(records)
    labels = [record.label for record in records]
    if len(set(labels)) < 2:
        raise ContractError(f'all training records are labelled {labels[0].value}')

    params = init_params(config)
    encoded = [_encode(record, config) for record in records]
    eval_encoded = [_encode(record, config) for record in eval_records or []]
    eval_labels = [record.label for record in eval_records or []]
    rng = np.random.default_rng([config.seed, 1])
    losses = np.zeros(len(records))
    correct = np.zeros(len(records), dtype=bool)
    rows = []

    logger.info('Training fusion model on %d records for %d epochs', len(records), config.epochs)
    for epoch in range(1, config.epochs + 1):
        for batch in toolz.partition_all(config.batch_size, rng.permutation(len(records))):
            grads = None
            for index in batch:
                loss, probability, record_grads = _record_loss_and_grad(
                    params, encoded[index], labels[index]
                )
                losses[index] = loss
                positive = labels[index] == BinaryLabel.positive
                correct[index] = (probability >= THRESHOLD) == positive
                if grads is None:
                    grads = record_grads
                else:
                    grads = toolz.merge_with(sum, grads, record_grads)
            step = config.learning_rate / len(batch)
            for name, grad in grads.items():
                params.arrays[name] -= step * grad
        row = {
            'epoch': epoch,
            'loss': float(losses.mean()),
            'accuracy': float(correct.mean()),
            'eval_accuracy': (
                _accuracy(params, eval_encoded, eval_labels) if eval_encoded else np.nan
            ),
        }
        logger.debug('epoch %d: loss=%.6f accuracy=%.3f', epoch, row['loss'], row['accuracy'])
        rows.append(row)

    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    final = trace.iloc[-1]
    logger.info('Finished training: loss=%.6f accuracy=%.3f', final['loss'], final['accuracy'])
    return params, trace


def verdict_from_probability(probability: float) -> typing.Tuple[BinaryLabel, float]:
    """Threshold at 0.5, ties positive; confidence is the probability of the chosen label."""
    if probability >= THRESHOLD:
        return BinaryLabel.positive, probability
    return BinaryLabel.negative, 1.0 - probability


def detect_fusion(params: FusionParams, record: TrainRecord) -> OverlayVerdict:
    probability = forward(params, record)
    label, confidence = verdict_from_probability(probability)
    overlay_texts = (
        [token.text for token in reading_order(record.tokens)]
        if label == BinaryLabel.positive
        else []
    )
    return OverlayVerdict(
        label=label,
        confidence=confidence,
        overlay_texts=overlay_texts,
        evidence=f'p(overlay)={probability:.6f}',
        strategy=Strategy.fusion,
    )


def image_array(image: Image.Image, size: int) -> np.ndarray:
    """``(3, size, size)`` float64 array in [0, 1]."""
    resized = image.convert('RGB').resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float64).transpose(2, 0, 1) / 255.0


def _clip_box(box, width, height):
    x0, y0 = max(0, box.x), max(0, box.y)
    x1, y1 = min(width, box.x + box.w), min(height, box.y + box.h)
    return x0, y0, x1 - x0, y1 - y0


def record_from_sample(
    manifest: Manifest,
    sample: ImageSample,
    config: FusionTrainerConfig,
    ocr: typing.Optional[OcrEngine] = None,
    **storage_options,
) -> TrainRecord:
    """Load ``sample``'s image and OCR tokens into a :class:`TrainRecord`.

    Tokens default to the ``.tokens`` sidecar. Boxes are clipped to the image and
    empty boxes dropped.
    """
    path = manifest.resolve(sample)
    with fsspec.open(path, 'rb', **storage_options) as f:
        with Image.open(f) as opened:
            image = opened.convert('RGB')
    width, height = image.size
    tokens = []
    for box in (ocr or SidecarOcr(**storage_options)).read(path, image):
        x, y, w, h = _clip_box(box, width, height)
        if w > 0 and h > 0:
            tokens.append(OcrToken(text=box.text, box=(x, y, w, h), image_size=(width, height)))
    return TrainRecord(
        tokens=tokens,
        image=image_array(image, config.image_size),
        label=category_to_binary(sample.category),
        sample_id=sample.id,
    )


def records_from_manifest(
    manifest: Manifest,
    config: FusionTrainerConfig,
    ocr: typing.Optional[OcrEngine] = None,
    **storage_options,
) -> typing.List[TrainRecord]:
    return [
        record_from_sample(manifest, sample, config, ocr, **storage_options)
        for sample in manifest.samples
    ]


def save_checkpoint(params: FusionParams, path: str, **storage_options) -> str:
    """Write ``params`` as an ``.npz`` container with a JSON ``__meta__`` entry."""
    params.check()
    meta = {
        'format_version': CHECKPOINT_VERSION,
        'config': params.config.model_dump(mode='json'),
        'shapes': {name: list(shape) for name, shape in params.shapes.items()},
    }
    buffer = io.BytesIO()
    np.savez(buffer, **{META_KEY: np.array(json.dumps(meta, sort_keys=True))}, **params.arrays)
    with fsspec.open(str(path), 'wb', **storage_options) as f:
        f.write(buffer.getvalue())
    return str(path)


def load_checkpoint(path: str, **storage_options) -> FusionParams:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises
    ------
    CheckpointError
        Unknown format version, missing metadata or arrays whose shapes do not
        match the recorded config.
    """
    with fsspec.open(str(path), 'rb', **storage_options) as f:
        payload = f.read()
    try:
        with np.load(io.BytesIO(payload), allow_pickle=False) as data:
            arrays = {name: data[name] for name in data.files}
    except (ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f'{path} is not a checkpoint: {exc}') from exc
    if META_KEY not in arrays:
        raise CheckpointError(f'{path} has no {META_KEY} entry')
    meta = json.loads(arrays.pop(META_KEY).item())
    if meta.get('format_version') != CHECKPOINT_VERSION:
        raise CheckpointError(
            f'{path} has format version {meta.get("format_version")}, expected {CHECKPOINT_VERSION}'
        )
    try:
        config = FusionTrainerConfig.model_validate(meta['config'])
    except (KeyError, pydantic.ValidationError) as exc:
        raise CheckpointError(f'{path} carries an invalid trainer config: {exc}') from exc
    params = FusionParams(config=config, arrays=arrays)
    try:
        params.check()
    except ContractError as exc:
        raise CheckpointError(f'{path}: {exc}') from exc
    return params
