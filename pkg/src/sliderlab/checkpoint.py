"""Model and adapter checkpoints on top of the SLED tensor archive."""
from __future__ import annotations

from .adapters import Adapter, ScaledAdapter
from .archive import ArchiveError, read_archive, write_archive
from .mmdit import EditorModel, ModelConfig


class CheckpointError(ArchiveError):
    pass


def save_checkpoint(obj, path, extra: dict | None = None, config: ModelConfig | None = None, force: bool = True):
    """Write an EditorModel or Adapter. Adapters need the model ``config`` they fit."""
    if isinstance(obj, ScaledAdapter):
        obj = obj.adapter
    if isinstance(obj, EditorModel):
        meta = {"kind": "model", "config": obj.config.to_dict()}
        tensors = obj.state_dict()
    elif isinstance(obj, Adapter):
        if config is None:
            raise ValueError("saving an adapter needs the model config")
        meta = {"kind": "adapter", "mode": obj.mode, "rank": obj.rank, "config": config.to_dict()}
        tensors = obj.state_dict()
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    if extra:
        meta["extra"] = extra
    write_archive(path, tensors, meta, force=force)


def load_checkpoint(path, expect: str | None = None):
    """Load whatever ``path`` holds; ``expect`` = "model" or "adapter" enforces the kind."""
    tensors, meta = read_archive(path)
    kind = meta.get("kind")
    if expect is not None and kind != expect:
        raise CheckpointError(f"{path}: expected a {expect} checkpoint, found {kind!r}")
    try:
        config = ModelConfig.from_dict(meta["config"])
        if kind == "model":
            return EditorModel(config, tensors)
        if kind == "adapter":
            return Adapter.from_state_dict(tensors, meta["mode"], config)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from e
    raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")


def checkpoint_meta(path) -> dict:
    return read_archive(path)[1]
