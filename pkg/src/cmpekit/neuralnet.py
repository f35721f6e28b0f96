"""Fully connected network with ReLU hidden layers, exact backprop, Adam and a plateau schedule."""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

HIDDEN = (128, 256, 512)
CHECKPOINT_FORMAT = "cmpekit-mlp"
CHECKPOINT_VERSION = 1


@dataclass
class MlpModel:
    layer_dims: tuple
    weights: list  # weights[l] has shape (layer_dims[l], layer_dims[l+1])
    biases: list
    output: str = "sigmoid"

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer transition")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != self.layer_dims[l:l + 2] or b.shape != (self.layer_dims[l + 1],):
                raise ValueError(f"layer {l} parameter shapes do not chain")
        if self.output not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output activation {self.output!r}")

    @property
    def params(self):
        return self.weights + self.biases

    def copy(self):
        return MlpModel(self.layer_dims, [W.copy() for W in self.weights], [b.copy() for b in self.biases],
                        self.output)


def init_mlp(layer_dims, rng: np.random.Generator, output="sigmoid") -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for a, b in zip(layer_dims[:-1], layer_dims[1:]):
        lim = np.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-lim, lim, size=(a, b)))
        biases.append(np.zeros(b))
    return MlpModel(tuple(layer_dims), weights, biases, output)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(model: MlpModel, x, return_cache=False):
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    A = X[None, :] if single else X
    if A.shape[1] != model.layer_dims[0]:
        raise ValueError(f"input width {A.shape[1]} != {model.layer_dims[0]}")
    acts = [A]
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        Z = A @ W + b
        if l < last:
            A = np.maximum(Z, 0.0)
        else:
            A = _sigmoid(Z) if model.output == "sigmoid" else Z
        acts.append(A)
    out = A[0] if single else A
    return (out, acts) if return_cache else out


def backward(model: MlpModel, x, upstream, cache=None):
    """Gradients of ``sum(upstream * forward(x))`` as ``(dW list, db list)``."""
    if cache is None:
        _, cache = forward(model, x, return_cache=True)
    G = np.asarray(upstream, dtype=float)
    if G.ndim == 1:
        G = G[None, :]
    out = cache[-1]
    if G.shape != out.shape:
        raise ValueError(f"upstream shape {G.shape} != output shape {out.shape}")
    dZ = G * out * (1.0 - out) if model.output == "sigmoid" else G
    dW = [None] * len(model.weights)
    db = [None] * len(model.weights)
    for l in reversed(range(len(model.weights))):
        dW[l] = cache[l].T @ dZ
        db[l] = dZ.sum(axis=0)
        if l:
            dZ = (dZ @ model.weights[l].T) * (cache[l] > 0)
    return dW, db


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.9
    patience: int = 10
    rel_tol: float = 1e-4


def init_adam(model: MlpModel, lr=1e-3, **kw) -> AdamState:
    return AdamState([np.zeros_like(p) for p in model.params], [np.zeros_like(p) for p in model.params],
                     lr=lr, base_lr=lr, **kw)


def adam_step(state: AdamState, model: MlpModel, grads):
    """Bias-corrected Adam update applied in place to ``model``."""
    dW, db = grads
    flat = list(dW) + list(db)
    params = model.params
    if len(flat) != len(params):
        raise ValueError("gradient list does not match parameters")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, gr, m, v in zip(params, flat, state.m, state.v):
        if gr.shape != p.shape:
            raise ValueError(f"gradient shape {gr.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * gr
        v *= state.beta2
        v += (1.0 - state.beta2) * gr * gr
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


def plateau_lr(epoch_losses, base_lr, factor=0.9, patience=10, rel_tol=1e-4):
    """Replay the plateau rule over a loss history; cooldown equals ``patience``."""
    lr = base_lr
    best = np.inf
    bad = cool = 0
    for loss in epoch_losses:
        if not np.isfinite(best) or loss < best - rel_tol * abs(best):
            best, bad = loss, 0
        else:
            bad += 1
        if cool > 0:
            cool -= 1
            bad = 0
        if bad >= patience:
            lr *= factor
            cool, bad = patience, 0
    return lr


def lr_plateau(state: AdamState, epoch_losses):
    state.lr = plateau_lr(epoch_losses, state.base_lr, state.decay, state.patience, state.rel_tol)
    return state.lr


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    seed: int = 0
    loss: str = "ss-cmpe"
    lr: float = 1e-3
    beta: Optional[float] = None
    rho: float = 1.0
    lam_init: float = 0.0
    mu_init: float = 0.0
    lam_max: float = 1e4
    patience: int = 10
    lr_decay: Optional[bool] = None
    hidden: tuple = HIDDEN
    pdl_growth: float = 2.0
    pdl_every: int = 10
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# checkpoints


def encode_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d):
    if d["dtype"] != "<f8":
        raise ValueError(f"unsupported dtype {d['dtype']}")
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def model_to_dict(model: MlpModel):
    return {"layer_dims": list(model.layer_dims), "output": model.output,
            "weights": [encode_array(W) for W in model.weights],
            "biases": [encode_array(b) for b in model.biases]}


def model_from_dict(d):
    return MlpModel(tuple(d["layer_dims"]), [decode_array(w) for w in d["weights"]],
                    [decode_array(b) for b in d["biases"]], d.get("output", "sigmoid"))


def adam_to_dict(state: AdamState):
    return {"m": [encode_array(a) for a in state.m], "v": [encode_array(a) for a in state.v],
            "t": state.t, "lr": state.lr, "base_lr": state.base_lr, "beta1": state.beta1, "beta2": state.beta2,
            "eps": state.eps, "decay": state.decay, "patience": state.patience, "rel_tol": state.rel_tol}


def adam_from_dict(d):
    d = dict(d)
    m = [decode_array(a) for a in d.pop("m")]
    v = [decode_array(a) for a in d.pop("v")]
    return AdamState(m, v, **d)


def save_checkpoint(path, model: MlpModel, state: Optional[AdamState] = None, rng=None, extra=None):
    blob = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "model": model_to_dict(model),
            "adam": None if state is None else adam_to_dict(state),
            "rng": None if rng is None else rng.bit_generator.state,
            "extra": extra or {}}
    with open(path, "w") as fh:
        json.dump(blob, fh, sort_keys=True, indent=1)


def load_checkpoint(path):
    """Returns ``(model, adam_state_or_None, rng_or_None, extra)``."""
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
    rng = None
    if blob["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = blob["rng"]
    state = None if blob["adam"] is None else adam_from_dict(blob["adam"])
    return model_from_dict(blob["model"]), state, rng, blob["extra"]
