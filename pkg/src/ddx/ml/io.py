"""Model files: ``.npz`` tensors plus a JSON header (format, version, shapes, config, vocabulary)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ddx.errors import ParseError
from ddx.ml.convnet import ConvNetConfig, ConvNetModel
from ddx.ml.logreg import LRModel
from ddx.ml.vocab import Vocabulary

FORMAT = "ddx-model"
VERSION = 1


def _header(kind, tensors, vocab, disease_ids, extra) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "shapes": {k: list(v.shape) for k, v in tensors.items()},
        "dtypes": {k: str(v.dtype) for k, v in tensors.items()},
        "vocab": list(vocab.tokens),
        "disease_ids": list(disease_ids),
        **extra,
    }


def save_model(model, vocab: Vocabulary, path) -> None:
    if isinstance(model, LRModel):
        tensors = {"W": model.W, "b": model.b}
        header = _header("lr", tensors, vocab, model.disease_ids, {"lam": model.lam, "meta": model.meta})
    elif isinstance(model, ConvNetModel):
        tensors = dict(model.params)
        header = _header("convnet", tensors, vocab, model.disease_ids,
                         {"model_config": model.config.to_dict(), "vocab_size": model.vocab_size, "meta": model.meta})
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True, default=str)), **tensors)


def load_model(path):
    """Return ``(model, vocab)``."""
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            tensors = {k: z[k] for k in z.files if k != "__header__"}
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"{path}: not a model file ({exc})") from None
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise ParseError(f"{path}: unsupported model format {header.get('format')!r} v{header.get('version')!r}")
    for k, shape in header["shapes"].items():
        if list(tensors[k].shape) != shape:
            raise ParseError(f"{path}: tensor {k} has shape {tensors[k].shape}, header says {shape}")
    vocab = Vocabulary(tuple(header["vocab"]))
    ids = tuple(header["disease_ids"])
    if header["kind"] == "lr":
        return LRModel(tensors["W"], tensors["b"], header["lam"], ids, header.get("meta", {})), vocab
    cfg = dict(header["model_config"])
    cfg["filters"] = tuple(cfg["filters"])
    return ConvNetModel(ConvNetConfig(**cfg), tensors, header["vocab_size"], ids, header.get("meta", {})), vocab


def model_hash(model) -> str:
    h = hashlib.sha256()
    params = {"W": model.W, "b": model.b} if isinstance(model, LRModel) else model.params
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()
