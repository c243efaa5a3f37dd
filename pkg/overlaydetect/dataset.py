import enum
import hashlib
import logging
import math
import os.path
import posixpath
import typing
import warnings

import fsspec
import joblib
import numpy as np
import pandas as pd
import pydantic
import toolz
from PIL import Image, ImageDraw, ImageFont

from .errors import CapacityError, ContractError, ManifestSchemaError

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.jsonl'
IMAGE_DIR = 'images'
SIDECAR_SUFFIX = '.tokens'

# Promotional captions are composited; signage words sit on objects in the scene.
OVERLAY_PHRASES = [
    'SALE',
    '50% OFF',
    'BUY NOW',
    'NEW',
    'TODAY ONLY',
    'FREE',
    'LIVE',
    'HOT DEAL',
    'WIN',
    'CLICK',
]
NATURAL_WORDS = ['EXIT', 'OPEN', 'CAFE', 'STOP', 'Hotel', 'Park', 'Menu', 'Books', 'BANK', 'TAXI']


class Category(str, enum.Enum):
    overlay = 'overlay'
    natural = 'natural'
    none = 'none'


class Split(str, enum.Enum):
    train = 'train'
    eval = 'eval'


class ImageSample(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra='forbid')

    id: str = pydantic.Field(min_length=1)
    image_path: str = pydantic.Field(min_length=1)
    category: Category
    split: Split


class TokenBox(pydantic.BaseModel):
    """One line of the ``.tokens`` sidecar: a text fragment and its pixel box."""

    model_config = pydantic.ConfigDict(frozen=True)

    text: str
    x: int
    y: int
    w: int
    h: int


class Manifest(pydantic.BaseModel):
    """An ordered, id-unique list of annotated images.

    ``root`` is the directory relative ``image_path`` values resolve against; it is
    not part of the serialized manifest and does not take part in equality.
    """

    samples: typing.List[ImageSample] = pydantic.Field(default_factory=list)
    root: typing.Optional[str] = pydantic.Field(default=None, exclude=True)

    @pydantic.model_validator(mode='after')
    def _check_unique_ids(self):
        duplicates = sorted(
            key for key, count in toolz.frequencies(s.id for s in self.samples).items() if count > 1
        )
        if duplicates:
            raise ValueError(f'duplicate sample ids: {duplicates}')
        return self

    def __eq__(self, other):
        if not isinstance(other, Manifest):
            return NotImplemented
        return self.samples == other.samples

    def __len__(self):
        return len(self.samples)

    @property
    def counts(self) -> typing.Dict[Split, typing.Dict[Category, int]]:
        """Per-category tallies for every split present in the manifest."""
        tallies = toolz.countby(lambda s: (s.split, s.category), self.samples)
        splits = [split for split in Split if any(s.split == split for s in self.samples)]
        return {
            split: {category: tallies.get((split, category), 0) for category in Category}
            for split in splits
        }

    def is_balanced(self) -> bool:
        return all(
            max(per_split.values()) - min(per_split.values()) <= 1
            for per_split in self.counts.values()
        )

    def select(
        self,
        *,
        split: typing.Optional[Split] = None,
        categories: typing.Optional[typing.Iterable[Category]] = None,
    ) -> 'Manifest':
        wanted = set(categories) if categories is not None else set(Category)
        samples = [
            s
            for s in self.samples
            if (split is None or s.split == split) and s.category in wanted
        ]
        return Manifest(samples=samples, root=self.root)

    def resolve(self, sample: ImageSample) -> str:
        """Return the readable location of ``sample``'s image."""
        path = sample.image_path
        if self.root is None or '://' in path or os.path.isabs(path):
            return path
        return posixpath.join(self.root, path)

    def to_jsonl(self) -> str:
        return ''.join(f'{sample.model_dump_json()}\n' for sample in self.samples)

    def fingerprint(self) -> str:
        """Content hash of the serialized records."""
        return hashlib.sha256(self.to_jsonl().encode('utf-8')).hexdigest()

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(
            [s.model_dump(mode='json') for s in self.samples],
            columns=list(ImageSample.model_fields),
        )

    def write(self, path: str, **storage_options) -> str:
        with fsspec.open(str(path), 'w', **storage_options) as f:
            f.write(self.to_jsonl())
        return str(path)


def _describe(exc: pydantic.ValidationError) -> str:
    error = exc.errors()[0]
    location = '.'.join(str(part) for part in error['loc'])
    return f'{location}: {error["msg"]}' if location else error['msg']


def _decoded_lines(f: typing.IO[bytes]) -> typing.Iterator[typing.Tuple[int, str]]:
    for lineno, raw in enumerate(f, start=1):
        try:
            yield lineno, raw.decode('utf-8')
        except UnicodeDecodeError as exc:
            raise ManifestSchemaError(f'not valid UTF-8: {exc.reason}', line=lineno) from exc


def load_manifest(path: str, check_images: bool = True, **storage_options) -> Manifest:
    """Read a line-delimited manifest.

    Parameters
    ----------
    path : str
        Location of the manifest file, one JSON record per line.
    check_images : bool, optional
        Verify that every ``image_path`` opens as a raster image. Default is True.
    storage_options : dict, optional
        Parameters passed to the backend file-system.

    Returns
    -------
    Manifest
        The records in file order, with ``root`` set to the manifest's directory.

    Raises
    ------
    ManifestSchemaError
        A record is malformed, has an unknown category, repeats an id or points to
        an unreadable image. The error carries the 1-based line number.
    OSError
        The manifest itself cannot be read.
    """
    path = str(path)
    samples = []
    first_seen = {}
    with fsspec.open(path, 'rb', **storage_options) as f:
        for lineno, line in _decoded_lines(f):
            if not line.strip():
                continue
            try:
                sample = ImageSample.model_validate_json(line)
            except pydantic.ValidationError as exc:
                raise ManifestSchemaError(_describe(exc), line=lineno) from exc
            if sample.id in first_seen:
                raise ManifestSchemaError(
                    f'duplicate id {sample.id!r} (first seen on line {first_seen[sample.id]})',
                    line=lineno,
                )
            first_seen[sample.id] = lineno
            samples.append(sample)

    manifest = Manifest(samples=samples, root=posixpath.dirname(path) or '.')
    if check_images:
        for sample in manifest.samples:
            try:
                with fsspec.open(manifest.resolve(sample), 'rb', **storage_options) as f:
                    with Image.open(f) as image:
                        image.verify()
            except (OSError, SyntaxError) as exc:
                raise ManifestSchemaError(
                    f'unreadable image {sample.image_path!r}: {exc}', line=first_seen[sample.id]
                ) from exc

    if not manifest.is_balanced():
        warnings.warn(
            f'Manifest {path} is not balanced across categories: {_format_counts(manifest)}',
            stacklevel=2,
        )
    return manifest


def _format_counts(manifest: Manifest) -> str:
    return ', '.join(
        f'{split.value}=' + '/'.join(f'{c.value}:{n}' for c, n in per_split.items())
        for split, per_split in manifest.counts.items()
    )


def category_quotas(total: int) -> typing.Dict[Category, int]:
    """Split ``total`` over the categories, remainder going out in enum order."""
    base, remainder = divmod(total, len(Category))
    return {category: base + (1 if i < remainder else 0) for i, category in enumerate(Category)}


def build_balanced_manifest(
    pools: typing.Mapping[Category, typing.Sequence[ImageSample]],
    total: int,
    split: Split,
    seed: int = 0,
) -> Manifest:
    """Draw a category-balanced manifest of ``total`` samples from per-category pools.

    The selection is a seeded draw without replacement; selected samples keep their
    pool order and are re-labelled with ``split``.
    """
    if total < 0:
        raise ContractError(f'total must be non-negative, got {total}')
    split = Split(split)
    by_category = {
        category: list(pools.get(category, pools.get(category.value, [])))
        for category in Category
    }
    for category, pool in by_category.items():
        strays = [s.id for s in pool if s.category != category]
        if strays:
            raise ContractError(
                f'pool {category.value!r} contains samples of other categories: {strays}'
            )
    ids = (s.id for pool in by_category.values() for s in pool)
    repeated = sorted(key for key, count in toolz.frequencies(ids).items() if count > 1)
    if repeated:
        raise ContractError(f'sample ids appear more than once across the pools: {repeated}')

    rng = np.random.default_rng(seed)
    samples = []
    for category, quota in category_quotas(total).items():
        pool = by_category[category]
        if len(pool) < quota:
            raise CapacityError(category.value, len(pool), quota)
        chosen = np.sort(rng.choice(len(pool), size=quota, replace=False))
        samples.extend(pool[int(i)].model_copy(update={'split': split}) for i in chosen)
    return Manifest(samples=samples)


class OverlayStyle(pydantic.BaseModel):
    font_scale: int = pydantic.Field(2, ge=1)
    # draw a solid caption box behind each line of text
    solid_fill: bool = False
    margin: int = pydantic.Field(8, ge=0)


class NaturalStyle(pydantic.BaseModel):
    warp: float = pydantic.Field(0.15, ge=0.0, le=0.45)
    alpha: float = pydantic.Field(0.75, gt=0.0, le=1.0)


class SyntheticSpec(pydantic.BaseModel):
    """Parameters of a procedurally generated corpus.

    ``count_per_category`` samples per category are generated for ``split``;
    ``eval_count_per_category`` extra samples per category are added to the eval
    split when ``split`` is train.
    """

    model_config = pydantic.ConfigDict(extra='forbid')

    seed: int = 0
    count_per_category: int = pydantic.Field(ge=1)
    eval_count_per_category: int = pydantic.Field(0, ge=0)
    split: Split = Split.train
    image_size: typing.Tuple[int, int] = (128, 128)
    overlay_style: OverlayStyle = pydantic.Field(default_factory=OverlayStyle)
    natural_style: NaturalStyle = pydantic.Field(default_factory=NaturalStyle)

    @pydantic.model_validator(mode='after')
    def _check(self):
        width, height = self.image_size
        if min(width, height) < 48:
            raise ValueError(f'image_size must be at least 48x48, got {self.image_size}')
        if 2 * self.overlay_style.margin >= min(width, height) // 2:
            raise ValueError('overlay margin leaves no room for text')
        if self.eval_count_per_category and self.split != Split.train:
            raise ValueError('eval_count_per_category requires split=train')
        return self

    def jobs(self) -> typing.List[typing.Tuple[Split, Category, int]]:
        blocks = [(self.split, self.count_per_category)]
        if self.eval_count_per_category:
            blocks.append((Split.eval, self.eval_count_per_category))
        return [
            (split, category, index)
            for split, count in blocks
            for category in Category
            for index in range(count)
        ]


def sample_id(split: Split, category: Category, index: int) -> str:
    return f'{category.value}-{split.value}-{index:04d}'


def sidecar_path(image_path: str) -> str:
    stem, _ = posixpath.splitext(image_path)
    return f'{stem}{SIDECAR_SUFFIX}'


def read_sidecar(path: str, **storage_options) -> typing.List[TokenBox]:
    """Read the token boxes of a ``.tokens`` sidecar.

    Malformed records and undecodable bytes raise :class:`ManifestSchemaError`
    with the 1-based line number.
    """
    tokens = []
    with fsspec.open(str(path), 'rb', **storage_options) as f:
        for lineno, line in _decoded_lines(f):
            if not line.strip():
                continue
            try:
                tokens.append(TokenBox.model_validate_json(line))
            except pydantic.ValidationError as exc:
                raise ManifestSchemaError(f'{path}: {_describe(exc)}', line=lineno) from exc
    return tokens


def _font():
    return ImageFont.load_default()


def _text_mask(text: str, scale: int) -> Image.Image:
    """Render ``text`` as an 8-bit mask cropped to its ink."""
    font = _font()
    left, top, right, bottom = ImageDraw.Draw(Image.new('L', (1, 1))).textbbox(
        (0, 0), text, font=font
    )
    mask = Image.new('L', (max(1, right - left), max(1, bottom - top)), 0)
    ImageDraw.Draw(mask).text((-left, -top), text, fill=255, font=font)
    if scale > 1:
        mask = mask.resize((mask.width * scale, mask.height * scale), Image.Resampling.NEAREST)
    bbox = mask.getbbox()
    return mask.crop(bbox) if bbox else mask


def _color(rng: np.random.Generator, low: int = 0, high: int = 256) -> typing.Tuple[int, int, int]:
    return tuple(int(c) for c in rng.integers(low, high, size=3))


def _background(rng: np.random.Generator, size: typing.Tuple[int, int]) -> Image.Image:
    """Seeded low-frequency noise with a few distractor shapes."""
    width, height = size
    coarse = rng.uniform(40, 215, size=(6, 6, 3)).astype(np.uint8)
    base = Image.fromarray(coarse, 'RGB').resize((width, height), Image.Resampling.BILINEAR)
    grain = rng.normal(0.0, 12.0, size=(height, width, 3))
    pixels = np.clip(np.asarray(base, dtype=np.float64) + grain, 0, 255).astype(np.uint8)
    image = Image.fromarray(pixels, 'RGB')
    draw = ImageDraw.Draw(image)
    for _ in range(int(rng.integers(1, 4))):
        x0, y0 = int(rng.integers(0, width - 8)), int(rng.integers(0, height - 8))
        x1 = min(width - 1, x0 + int(rng.integers(8, width // 3)))
        y1 = min(height - 1, y0 + int(rng.integers(8, height // 3)))
        shape = draw.ellipse if rng.random() < 0.5 else draw.rectangle
        shape([x0, y0, x1, y1], fill=_color(rng, 30, 226))
    return image


def _draw_overlay(
    image: Image.Image, rng: np.random.Generator, style: OverlayStyle
) -> typing.List[TokenBox]:
    width, height = image.size
    margin = style.margin
    scale = style.font_scale
    masks = {}
    while scale >= 1:
        masks = {p: _text_mask(p, scale) for p in OVERLAY_PHRASES}
        masks = {p: m for p, m in masks.items() if m.width <= width - 2 * margin}
        if masks:
            break
        scale -= 1
    if not masks:
        raise ContractError(f'image width {width} cannot hold any overlay phrase')

    phrases = list(masks)
    order = rng.permutation(len(phrases))[: int(rng.integers(1, 4))]
    color = _color(rng)
    draw = ImageDraw.Draw(image)
    tokens = []
    y = margin
    for index in order:
        phrase = phrases[int(index)]
        mask = masks[phrase]
        if y + mask.height > height - margin:
            break
        if style.solid_fill:
            box_color = tuple(255 - c for c in color)
            draw.rectangle(
                [margin, y, margin + mask.width - 1, y + mask.height - 1], fill=box_color
            )
        image.paste(Image.new('RGB', mask.size, color), (margin, y), mask)
        tokens.append(TokenBox(text=phrase, x=margin, y=y, w=mask.width, h=mask.height))
        y += mask.height + 2 * scale
    return tokens


def perspective_coefficients(target, source) -> typing.List[float]:
    """Coefficients for ``Image.transform`` mapping ``target`` corners onto ``source``."""
    rows = []
    for (tx, ty), (sx, sy) in zip(target, source):
        rows.append([tx, ty, 1, 0, 0, 0, -sx * tx, -sx * ty])
        rows.append([0, 0, 0, tx, ty, 1, -sy * tx, -sy * ty])
    a = np.asarray(rows, dtype=np.float64)
    b = np.asarray(source, dtype=np.float64).reshape(8)
    return np.linalg.solve(a, b).tolist()


def _warp(mask: Image.Image, rng: np.random.Generator, magnitude: float) -> Image.Image:
    mw, mh = mask.size
    pad = int(math.ceil(magnitude * max(mw, mh))) + 1
    canvas = Image.new('L', (mw + 2 * pad, mh + 2 * pad), 0)
    canvas.paste(mask, (pad, pad))
    source = np.array([[pad, pad], [pad + mw, pad], [pad + mw, pad + mh], [pad, pad + mh]], float)
    target = source + rng.uniform(-magnitude, magnitude, size=(4, 2)) * [mw, mh]
    warped = canvas.transform(
        canvas.size,
        Image.Transform.PERSPECTIVE,
        perspective_coefficients(target, source),
        Image.Resampling.BILINEAR,
    )
    bbox = warped.getbbox()
    return warped.crop(bbox) if bbox else mask


def _draw_natural(
    image: Image.Image, rng: np.random.Generator, style: NaturalStyle
) -> typing.List[TokenBox]:
    width, height = image.size
    rw = int(rng.integers(int(width * 0.35), int(width * 0.6)))
    rh = int(rng.integers(int(height * 0.25), int(height * 0.45)))
    x0 = int(rng.integers(width // 5, width - rw - width // 10 + 1))
    y0 = int(rng.integers(height // 4, height - rh - height // 10 + 1))
    surface = _color(rng, 60, 200)
    draw = ImageDraw.Draw(image)
    # a post under the object so it reads as a sign or a screen on a stand
    draw.rectangle([x0 + rw // 2 - 2, y0 + rh, x0 + rw // 2 + 2, height - 1], fill=(70, 60, 50))
    draw.rectangle([x0, y0, x0 + rw - 1, y0 + rh - 1], fill=surface, outline=(30, 30, 30), width=2)

    room = (rw - 6, rh - 6)
    warped = None
    word = None
    for index in rng.permutation(len(NATURAL_WORDS)):
        word = NATURAL_WORDS[int(index)]
        warped = _warp(_text_mask(word, 1), rng, style.warp)
        if warped.width <= room[0] and warped.height <= room[1]:
            break
    if warped.width > room[0] or warped.height > room[1]:
        warped.thumbnail(room, Image.Resampling.BILINEAR)

    alpha = warped.point(lambda v: int(v * style.alpha))
    px = x0 + 3 + int(rng.integers(0, room[0] - warped.width + 1))
    py = y0 + 3 + int(rng.integers(0, room[1] - warped.height + 1))
    ink = tuple(255 - c for c in surface)
    image.paste(Image.new('RGB', warped.size, ink), (px, py), alpha)
    return [TokenBox(text=word, x=px, y=py, w=warped.width, h=warped.height)]


def render_sample(
    spec: SyntheticSpec, split: Split, category: Category, index: int
) -> typing.Tuple[Image.Image, typing.List[TokenBox]]:
    """Render one synthetic image and its ground-truth tokens, independent of job order."""
    split_index = list(Split).index(split)
    category_index = list(Category).index(category)
    rng = np.random.default_rng([spec.seed, split_index, category_index, index])
    image = _background(rng, spec.image_size)
    if category == Category.overlay:
        tokens = _draw_overlay(image, rng, spec.overlay_style)
    elif category == Category.natural:
        tokens = _draw_natural(image, rng, spec.natural_style)
    else:
        tokens = []
    return image, tokens


def _generate_one(
    spec: SyntheticSpec, out_dir: str, split: Split, category: Category, index: int
) -> ImageSample:
    identifier = sample_id(split, category, index)
    relative = f'{IMAGE_DIR}/{identifier}.png'
    image, tokens = render_sample(spec, split, category, index)
    with fsspec.open(posixpath.join(out_dir, relative), 'wb') as f:
        image.save(f, format='PNG')
    with fsspec.open(posixpath.join(out_dir, sidecar_path(relative)), 'w') as f:
        f.write(''.join(f'{token.model_dump_json()}\n' for token in tokens))
    return ImageSample(id=identifier, image_path=relative, category=category, split=split)


def generate_synthetic_corpus(
    spec: SyntheticSpec,
    out_dir: str,
    joblib_parallel_kwargs: typing.Optional[typing.Dict[str, typing.Any]] = None,
) -> Manifest:
    """Write a synthetic corpus (images, ``.tokens`` sidecars and ``manifest.jsonl``).

    Parameters
    ----------
    spec : SyntheticSpec
        Generation parameters; the seed fully determines the output.
    out_dir : str
        Directory to write to. Images go to ``<out_dir>/images``.
    joblib_parallel_kwargs : dict, optional
        Parameters passed to joblib.Parallel. Default is {}.

    Returns
    -------
    Manifest
        Samples in (split, category, index) order, rooted at ``out_dir``.
    """
    out_dir = str(out_dir).rstrip('/')
    fs, raw_path = fsspec.core.url_to_fs(out_dir)
    fs.makedirs(posixpath.join(raw_path, IMAGE_DIR), exist_ok=True)

    jobs = spec.jobs()
    logger.info('Generating %d synthetic images into %s', len(jobs), out_dir)
    samples = joblib.Parallel(**(joblib_parallel_kwargs or {}))(
        joblib.delayed(_generate_one)(spec, out_dir, split, category, index)
        for split, category, index in jobs
    )
    manifest = Manifest(samples=samples, root=out_dir)
    manifest.write(posixpath.join(out_dir, MANIFEST_NAME))
    return manifest
