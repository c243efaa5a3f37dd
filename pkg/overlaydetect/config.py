"""YAML-backed loading and saving of pydantic configuration models."""

import typing

import fsspec
import pydantic
import yaml

ModelT = typing.TypeVar('ModelT', bound=pydantic.BaseModel)


def load_model(path: str, model_cls: typing.Type[ModelT], **storage_options) -> ModelT:
    """Read a YAML document and validate it as ``model_cls``.

    Parameters
    ----------
    path : str
        Local path or fsspec URL of the YAML file.
    model_cls : type
        The pydantic model describing the document.
    storage_options : dict, optional
        Parameters passed to the backend file-system.

    Returns
    -------
    pydantic.BaseModel
        The validated model instance.
    """
    with fsspec.open(str(path), 'r', **storage_options) as f:
        data = yaml.safe_load(f)
    return model_cls.model_validate(data or {})


def dump_yaml(model: pydantic.BaseModel) -> str:
    return yaml.safe_dump(model.model_dump(mode='json'), sort_keys=False)


def dump_model(model: pydantic.BaseModel, path: str, **storage_options) -> str:
    text = dump_yaml(model)
    with fsspec.open(str(path), 'w', **storage_options) as f:
        f.write(text)
    return str(path)
