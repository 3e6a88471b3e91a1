"""Temporal convolutional classifier over token sequences, with hand-written backprop.

Layout: embedding -> 3 x (conv k=3, stride 1, same zero padding, ReLU) -> flatten ->
dropout -> dense + ReLU -> dropout -> dense -> softmax.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ddx.errors import DivergedError, DomainError
from ddx.ml.optim import NesterovSGD, TrainConfig, log_softmax, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConvNetConfig:
    seq_len: int = 200
    embed_dim: int = 50
    filters: tuple[int, ...] = (256, 128, 64)
    kernel: int = 3
    hidden: int = 180
    dropout: float = 0.5
    embed_init: float = 1.0  # embeddings start U(-embed_init, embed_init)

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise DomainError("same padding needs an odd kernel")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError("dropout must lie in [0, 1)")
        if self.embed_init <= 0:
            raise DomainError("embed_init must be positive")

    @classmethod
    def full(cls) -> "ConvNetConfig":
        return cls()

    @classmethod
    def desk(cls) -> "ConvNetConfig":
        return cls(seq_len=64, embed_dim=32, filters=(64, 32, 16), hidden=64)

    @classmethod
    def tiny(cls) -> "ConvNetConfig":
        return cls(seq_len=8, embed_dim=4, filters=(6, 4, 3), hidden=10)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    def activation_shapes(self, n_classes: int) -> list[tuple[int, ...]]:
        L = self.seq_len
        return ([(L, self.embed_dim)] + [(L, f) for f in self.filters]
                + [(L * self.filters[-1],), (self.hidden,), (n_classes,)])


@dataclass(eq=False)
class ConvNetModel:
    config: ConvNetConfig
    params: dict[str, np.ndarray]
    vocab_size: int  # including the padding id
    disease_ids: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.params["fc2_W"].shape[1]


def init_convnet(config: ConvNetConfig, vocab_size: int, n_classes: int, seed: int = 0,
                 dtype="float32", disease_ids=None) -> ConvNetModel:
    """Glorot-uniform weights, zero biases, embeddings U(-s, s) with the padding row at zero."""
    rng = np.random.default_rng(seed)

    def glorot(shape, fan_in, fan_out):
        r = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-r, r, size=shape).astype(dtype)

    k = config.kernel
    p: dict[str, np.ndarray] = {}
    emb = rng.uniform(-config.embed_init, config.embed_init, size=(vocab_size, config.embed_dim)).astype(dtype)
    emb[0] = 0
    p["embed"] = emb
    c_in = config.embed_dim
    for i, c_out in enumerate(config.filters):
        p[f"conv{i}_W"] = glorot((k, c_in, c_out), k * c_in, k * c_out)
        p[f"conv{i}_b"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    flat = config.seq_len * c_in
    p["fc1_W"] = glorot((flat, config.hidden), flat, config.hidden)
    p["fc1_b"] = np.zeros(config.hidden, dtype=dtype)
    p["fc2_W"] = glorot((config.hidden, n_classes), config.hidden, n_classes)
    p["fc2_b"] = np.zeros(n_classes, dtype=dtype)
    ids = tuple(disease_ids) if disease_ids is not None else tuple(range(n_classes))
    init = {"weights": "glorot_uniform(fan_in=k*c_in, fan_out=k*c_out)", "embed": f"uniform(-{config.embed_init}, {config.embed_init})",
            "bias": "zeros", "seed": int(seed)}
    return ConvNetModel(config, p, vocab_size, ids, {"init": init})


def _im2col(h: np.ndarray, k: int) -> np.ndarray:
    """(B, L, C) -> (B, L, k*C) windows with zero padding; column j*C + c is tap j, channel c."""
    pad = k // 2
    B, L, C = h.shape
    hp = np.zeros((B, L + 2 * pad, C), dtype=h.dtype)
    hp[:, pad:pad + L] = h
    return np.concatenate([hp[:, j:j + L] for j in range(k)], axis=-1)


def _col2im(dcols: np.ndarray, k: int, C: int) -> np.ndarray:
    pad = k // 2
    B, L, _ = dcols.shape
    dhp = np.zeros((B, L + 2 * pad, C), dtype=dcols.dtype)
    for j in range(k):
        dhp[:, j:j + L] += dcols[..., j * C:(j + 1) * C]
    return dhp[:, pad:pad + L]


def convnet_forward(model: ConvNetModel, ids: np.ndarray, train_mode: bool = False,
                    rng: np.random.Generator | None = None):
    """Class probabilities for a (B, L) id batch (or one (L,) sequence) and the activation cache."""
    cfg, p = model.config, model.params
    ids = np.asarray(ids)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.shape[1] != cfg.seq_len:
        raise DomainError(f"sequence length {ids.shape[1]} != model seq_len {cfg.seq_len}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= model.vocab_size:
        raise DomainError("token id outside the model vocabulary")
    B = ids.shape[0]
    k = cfg.kernel
    cache: dict = {"ids": ids, "conv": [], "shapes": []}
    h = p["embed"][ids]
    cache["shapes"].append(h.shape[1:])
    for i, c_out in enumerate(cfg.filters):
        W = p[f"conv{i}_W"]
        cols = _im2col(h, k)
        z = cols @ W.reshape(-1, c_out) + p[f"conv{i}_b"]
        h = np.maximum(z, 0)
        cache["conv"].append((cols, z > 0, W.shape[1]))
        cache["shapes"].append(h.shape[1:])
    flat = h.reshape(B, -1)
    cache["shapes"].append(flat.shape[1:])
    drop = cfg.dropout if train_mode else 0.0
    if drop > 0:
        if rng is None:
            raise DomainError("train_mode with dropout needs an rng")
        m1 = (rng.random(flat.shape) >= drop).astype(flat.dtype) / (1.0 - drop)
        d1 = flat * m1
    else:
        m1, d1 = None, flat
    z4 = d1 @ p["fc1_W"] + p["fc1_b"]
    a4 = np.maximum(z4, 0)
    cache["shapes"].append(a4.shape[1:])
    if drop > 0:
        m2 = (rng.random(a4.shape) >= drop).astype(a4.dtype) / (1.0 - drop)
        d2 = a4 * m2
    else:
        m2, d2 = None, a4
    logits = d2 @ p["fc2_W"] + p["fc2_b"]
    cache["shapes"].append(logits.shape[1:])
    cache.update(flat_shape=h.shape, m1=m1, d1=d1, z4=z4, m2=m2, d2=d2, logits=logits)
    probs = softmax(logits)
    return (probs[0] if single else probs), cache


def convnet_backward(model: ConvNetModel, cache: dict, y: np.ndarray, reduction: str = "mean"):
    """Gradients of the NLL (mean or sum over the batch) for every parameter."""
    p, cfg = model.params, model.config
    logits = cache["logits"]
    B = logits.shape[0]
    y = np.asarray(y).reshape(-1)
    logp = log_softmax(logits)
    loss = -logp[np.arange(B), y].sum()
    delta = np.exp(logp)
    delta[np.arange(B), y] -= 1.0
    if reduction == "mean":
        delta /= B
        loss /= B
    g: dict[str, np.ndarray] = {}
    g["fc2_W"] = cache["d2"].T @ delta
    g["fc2_b"] = delta.sum(axis=0)
    da4 = delta @ p["fc2_W"].T
    if cache["m2"] is not None:
        da4 *= cache["m2"]
    dz4 = da4 * (cache["z4"] > 0)
    g["fc1_W"] = cache["d1"].T @ dz4
    g["fc1_b"] = dz4.sum(axis=0)
    dflat = dz4 @ p["fc1_W"].T
    if cache["m1"] is not None:
        dflat *= cache["m1"]
    dh = dflat.reshape(cache["flat_shape"])
    k = cfg.kernel
    for i in reversed(range(len(cfg.filters))):
        cols, mask, c_in = cache["conv"][i]
        W = p[f"conv{i}_W"]
        c_out = W.shape[2]
        dz = dh * mask
        g[f"conv{i}_W"] = (cols.reshape(-1, cols.shape[-1]).T @ dz.reshape(-1, c_out)).reshape(W.shape)
        g[f"conv{i}_b"] = dz.sum(axis=(0, 1))
        dcols = dz @ W.reshape(-1, c_out).T
        dh = _col2im(dcols, k, c_in)
    dE = np.zeros_like(p["embed"])
    np.add.at(dE, cache["ids"].ravel(), dh.reshape(-1, dh.shape[-1]))
    dE[0] = 0  # padding row stays fixed at zero
    g["embed"] = dE
    return float(loss), g


def convnet_logits(model: ConvNetModel, ids: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = []
    for s in range(0, len(ids), chunk):
        _, cache = convnet_forward(model, ids[s:s + chunk], train_mode=False)
        out.append(cache["logits"])
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def _top1(model, ids, y) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(np.argmax(convnet_logits(model, ids), axis=1) == y))


def shuffle_tokens(ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute the real (non-pad) prefix of every row; pads stay at the end."""
    out = ids.copy()
    lengths = (ids != 0).sum(axis=1)
    for i, n in enumerate(lengths.tolist()):
        if n > 1:
            out[i, :n] = out[i, rng.permutation(n)]
    return out


def convnet_train(train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray] | None,
                  config: TrainConfig, model_config: ConvNetConfig, vocab_size: int, n_classes: int,
                  disease_ids=None, epoch_inputs: Callable[[int], np.ndarray] | None = None) -> ConvNetModel:
    """Nesterov-momentum SGD over every parameter; returns the best-validation-top1 model.

    ``epoch_inputs(epoch)`` may supply fresh training id sequences each epoch (same row order as
    ``train``), which is how training-time noise augmentation enters.
    """
    ids0, y = train
    y = np.asarray(y, dtype=np.int64)
    model = init_convnet(model_config, vocab_size, n_classes, seed=config.seed, dtype=config.dtype,
                         disease_ids=disease_ids)
    rng = np.random.default_rng([config.seed, 1])
    opt = NesterovSGD(model.params, config.learning_rate, config.momentum, config.nesterov)
    T = len(y)
    best_acc, best_params, best_epoch = -1.0, None, -1
    history = []
    last_finite = None
    for epoch in range(config.epochs):
        ids = epoch_inputs(epoch) if epoch_inputs is not None else ids0
        if config.shuffle_tokens:
            ids = shuffle_tokens(ids, rng)
        perm = rng.permutation(T)
        total = 0.0
        for s in range(0, T, config.batch_size):
            idx = perm[s:s + config.batch_size]
            _, cache = convnet_forward(model, ids[idx], train_mode=True, rng=rng)
            loss, grads = convnet_backward(model, cache, y[idx])
            if not np.isfinite(loss):
                raise DivergedError(f"non-finite loss in epoch {epoch}; last finite {last_finite}", last_finite)
            last_finite = loss
            total += loss * len(idx)
            opt.step(model.params, grads)
        acc = _top1(model, *val) if val is not None else _top1(model, ids0, y)
        history.append({"epoch": epoch, "train_nll": total / T, "val_top1": acc})
        log.info("convnet epoch %d nll %.4f val top1 %.4f", epoch, total / T, acc)
        if acc > best_acc:
            best_acc, best_params, best_epoch = acc, copy.deepcopy(model.params), epoch
    meta = dict(model.meta)
    meta.update(history=history, best_epoch=best_epoch, train_config=config.to_dict(),
                model_config=model_config.to_dict())
    return ConvNetModel(model_config, best_params, vocab_size, model.disease_ids, meta)
