"""Central finite-difference verification of the hand-written gradients (float64, dropout off)."""

from __future__ import annotations

import numpy as np

from ddx.ml.convnet import ConvNetModel, convnet_backward, convnet_forward
from ddx.ml.logreg import LRModel, lr_objective

# Entries whose analytic and numeric magnitudes are both below this are compared absolutely.
DENOM_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), DENOM_FLOOR)


def _numeric_grad(f, params: dict[str, np.ndarray], epsilon: float) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = f()
            flat[i] = orig - epsilon
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * epsilon)
        out[name] = g
    return out


def lr_gradient_errors(model: LRModel, X, y, epsilon: float = 1e-5) -> dict[str, np.ndarray]:
    W = np.array(model.W, dtype=np.float64)
    b = np.array(model.b, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    _, dW, db = lr_objective(W, b, X, y, model.lam)
    params = {"W": W, "b": b}
    num = _numeric_grad(lambda: lr_objective(params["W"], params["b"], X, y, model.lam)[0], params, epsilon)
    return {"W": relative_error(dW, num["W"]), "b": relative_error(db, num["b"])}


def convnet_gradient_errors(model: ConvNetModel, ids, y, epsilon: float = 1e-5) -> dict[str, np.ndarray]:
    m64 = ConvNetModel(model.config, {k: np.array(v, dtype=np.float64) for k, v in model.params.items()},
                       model.vocab_size, model.disease_ids)
    ids = np.atleast_2d(np.asarray(ids))
    y = np.atleast_1d(np.asarray(y))

    def objective():
        _, cache = convnet_forward(m64, ids, train_mode=False)
        return convnet_backward(m64, cache, y, reduction="sum")[0]

    _, cache = convnet_forward(m64, ids, train_mode=False)
    _, analytic = convnet_backward(m64, cache, y, reduction="sum")
    numeric = _numeric_grad(objective, m64.params, epsilon)
    errs = {k: relative_error(analytic[k], numeric[k]) for k in analytic}
    # the padding row is frozen by design; its finite difference is not a gradient we apply
    errs["embed"] = errs["embed"][1:]
    return errs


def gradient_check(model, sample, epsilon: float | None = None) -> float:
    """Max relative error between backprop and central differences over all parameters."""
    X, y = sample
    if isinstance(model, LRModel):
        errs = lr_gradient_errors(model, X, y, epsilon or 1e-5)
    elif isinstance(model, ConvNetModel):
        errs = convnet_gradient_errors(model, X, y, epsilon or 1e-5)
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    return float(max(e.max(initial=0.0) for e in errs.values()))
