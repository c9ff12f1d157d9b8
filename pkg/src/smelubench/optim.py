"""Online optimizers over Model parameters.

Three kinds:
  sgd            plain SGD everywhere
  adagrad        AdaGrad everywhere (per-element accumulators, G starts at 0)
  adagrad_embed  AdaGrad on embedding tables, SGD on dense and activation
                 parameters (the default: embedding rows are touched sparsely
                 and need per-coordinate step sizes; the dense stack does not)

AdaGrad update: G += g*g; p -= lr * g / sqrt(G + 1e-8).

Embedding updates are sparse and lazy: only rows named in the gradient are
read or written, which is bit-identical to a dense update because untouched
rows have zero gradient (G += 0 and p -= 0 change nothing).

Three learning rates: embeddings, dense stack, activation parameters.

Under weight normalization each step ends by renormalizing every weight
column to unit length; the scale lives in v.
"""

from __future__ import annotations

import numpy as np

from .net import Grads, Model, ModelError

OPT_KINDS = ("sgd", "adagrad", "adagrad_embed")
ADAGRAD_EPS = 1e-8


class Optimizer:
    def __init__(self, model: Model, kind: str = "adagrad_embed",
                 lr_embed: float = 0.05, lr_dense: float = 0.01,
                 lr_activation: float = 0.005):
        if kind not in OPT_KINDS:
            raise ModelError(f"optimizer kind must be one of {OPT_KINDS}, got {kind!r}")
        self.model = model
        self.kind = kind
        self.lr = {"embed": float(lr_embed), "dense": float(lr_dense),
                   "activation": float(lr_activation)}
        self.emb_adagrad = kind in ("adagrad", "adagrad_embed")
        self.dense_adagrad = kind == "adagrad"
        self.G_emb = ([np.zeros_like(t) for t in model.emb] if self.emb_adagrad else None)
        self.G_dense = ({name: np.zeros_like(arr) for name, arr, _ in model.dense_params()}
                        if self.dense_adagrad else None)

    def step(self, grads: Grads):
        model = self.model
        for name, arr, group in model.dense_params():
            g = grads.act_u if name == "act_u" else grads.dense.get(name)
            if g is None:
                continue
            lr = self.lr["activation" if group == "activation" else "dense"]
            if self.dense_adagrad:
                G = self.G_dense[name]
                G += g * g
                arr -= lr * g / np.sqrt(G + ADAGRAD_EPS)
            else:
                arr -= lr * g
        lr_e = self.lr["embed"]
        for t, entry in enumerate(grads.emb):
            if entry is None:
                continue
            uids, rows = entry
            table = model.emb[t]
            if self.emb_adagrad:
                G = self.G_emb[t]
                G[uids] += rows * rows
                table[uids] -= lr_e * rows / np.sqrt(G[uids] + ADAGRAD_EPS)
            else:
                table[uids] -= lr_e * rows
        if model.config.norm == "weight":
            for layer in model.layers:
                layer.W /= np.linalg.norm(layer.W, axis=0)

    # -- checkpoint support ---------------------------------------------------

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lr_embed": self.lr["embed"],
                "lr_dense": self.lr["dense"], "lr_activation": self.lr["activation"]}

    @staticmethod
    def from_dict(model: Model, d: dict) -> "Optimizer":
        return Optimizer(model, kind=d["kind"], lr_embed=d["lr_embed"],
                         lr_dense=d["lr_dense"], lr_activation=d["lr_activation"])

    def state_arrays(self):
        out = []
        if self.G_emb is not None:
            for t, arr in enumerate(self.G_emb):
                out.append((f"Gemb_{t}", arr))
        if self.G_dense is not None:
            for name in sorted(self.G_dense):
                out.append((f"Gdense_{name}", self.G_dense[name]))
        return out

    def set_state_array(self, key: str, arr: np.ndarray):
        if key.startswith("Gemb_"):
            self.G_emb[int(key[5:])] = arr
        elif key.startswith("Gdense_"):
            self.G_dense[key[7:]] = arr
        else:
            raise ModelError(f"unknown optimizer state key {key!r}")


def train_example(model: Model, optimizer: Optimizer, ids_row, label) -> float:
    """One online step on a packed example; returns the pre-update probability."""
    cache = model.forward_ids(np.asarray(ids_row, dtype=np.int64).reshape(1, -1))
    grads = model.backward(cache, np.array([label], dtype=np.float64))
    optimizer.step(grads)
    return float(cache.prob[0])
