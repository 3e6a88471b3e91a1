"""Multiclass logistic regression on binary token bags, trained with minibatch SGD."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ddx.errors import DataError, DivergedError, DomainError
from ddx.ml.optim import NesterovSGD, TrainConfig, log_softmax, softmax

log = logging.getLogger(__name__)


@dataclass(eq=False)
class LRModel:
    W: np.ndarray  # (K, |Z|)
    b: np.ndarray  # (K,)
    lam: float
    disease_ids: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}


def lr_objective(W, b, X, y, lam):
    """Summed NLL plus lam * ||W||^2 (bias unregularized), with its gradient."""
    logits = X @ W.T + b
    logp = log_softmax(logits)
    n = X.shape[0]
    loss = -logp[np.arange(n), y].sum() + lam * np.sum(W * W)
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    dW = delta.T @ X + 2.0 * lam * W
    db = delta.sum(axis=0)
    return float(loss), dW, db


def lr_predict(model: LRModel, X: np.ndarray) -> np.ndarray:
    """Class probabilities; ``X`` is one bag or a (n, |Z|) batch."""
    X = np.asarray(X)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.shape[1] != model.W.shape[1]:
        raise DomainError(f"bag width {X2.shape[1]} does not match model vocabulary {model.W.shape[1]}")
    p = softmax(X2 @ model.W.T + model.b)
    return p[0] if single else p


def lr_logits(model: LRModel, X: np.ndarray) -> np.ndarray:
    return np.asarray(X) @ model.W.T + model.b


def _top1(model, X, y, chunk=4096) -> float:
    if len(y) == 0:
        return 0.0
    hits = 0
    for s in range(0, len(y), chunk):
        hits += int(np.sum(np.argmax(lr_logits(model, X[s:s + chunk]), axis=1) == y[s:s + chunk]))
    return hits / len(y)


def lr_train(train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray] | None,
             lam: float = 0.01, config: TrainConfig | None = None, n_classes: int | None = None,
             disease_ids=None) -> LRModel:
    """Minimize sum NLL + lam ||W||^2 by minibatch SGD; returns the best-validation-top1 parameters.

    Each step follows the batch estimate of the objective divided by the training size. The
    L2 term is applied as an exact (implicit) shrink so very large ``lam`` stays stable.
    """
    cfg = config or TrainConfig(batch_size=256, learning_rate=0.5, momentum=0.9, epochs=10)
    X, y = train
    X = np.asarray(X, dtype=cfg.dtype)
    y = np.asarray(y, dtype=np.int64)
    K = n_classes if n_classes is not None else int(y.max()) + 1
    if K < 2:
        raise DataError("logistic regression needs at least two classes")
    T, Z = X.shape
    rng = np.random.default_rng(cfg.seed)
    W = np.zeros((K, Z), dtype=cfg.dtype)
    b = np.zeros(K, dtype=cfg.dtype)
    model = LRModel(W, b, lam, tuple(disease_ids) if disease_ids is not None else tuple(range(K)))
    opt = NesterovSGD(model.params(), cfg.learning_rate, cfg.momentum, cfg.nesterov)
    shrink = 1.0 / (1.0 + 2.0 * cfg.learning_rate * lam / T)
    best = (-1.0, None, -1)
    history = []
    last_finite = None
    for epoch in range(cfg.epochs):
        perm = rng.permutation(T)
        total = 0.0
        for s in range(0, T, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            # NLL gradient only; the regularizer is handled by the shrink below
            loss, dW, db = lr_objective(model.W, model.b, X[idx], y[idx], 0.0)
            if not np.isfinite(loss):
                raise DivergedError(f"non-finite loss in epoch {epoch}", last_finite)
            last_finite = loss / len(idx)
            total += loss
            opt.step(model.params(), {"W": dW / len(idx), "b": db / len(idx)})
            model.W *= shrink
        val_acc = _top1(model, *val) if val is not None else _top1(model, X, y)
        history.append({"epoch": epoch, "train_nll": total / T, "val_top1": val_acc})
        log.debug("lr epoch %d nll %.4f val top1 %.4f", epoch, total / T, val_acc)
        if val_acc > best[0]:
            best = (val_acc, (model.W.copy(), model.b.copy()), epoch)
    W_best, b_best = best[1]
    return LRModel(W_best, b_best, lam, model.disease_ids,
                   {"history": history, "best_epoch": best[2], "config": cfg.to_dict(), "init": "zeros"})
