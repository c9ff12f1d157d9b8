"""Sparse-input MLP: embedding tables feeding a dense stack.

Layer pipeline: each dense layer applies activation -> clip -> normalization
to its input, then a linear map. Layer 0 can run an identity activation so
raw embeddings reach the first linear map. Layer normalization acts on
activation outputs of layers >= 1; weight normalization reparameterizes every
linear layer's columns as v * w / ||w||. The final layer has one output unit
whose value is the logit, clamped to +-logit_clip before the sigmoid; the
clamp is pass-through in the backward pass.

Gradients are exact for everything trained: embeddings (returned sparsely as
unique-id row blocks), weights, biases, weight-norm scales, and the shared
reparameterized gsmelu activation vector u where
alpha = e^u0, beta = e^u1, g- = u2, g+ = g- + e^u3, t = -e^u4,
so every u keeps the parameters inside their valid region.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import activations as act
from .activations import ActivationSpec, GSmeLUParams, gsmelu_param_grads

NORM_KINDS = ("none", "layer", "weight")
LN_EPS = 1e-6
EMBED_INIT_STD = 0.1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    tables: int = 5
    vocab: int = 2000
    embed_dim: int = 8
    hidden: tuple = (64, 32, 16)
    activation: ActivationSpec = field(default_factory=act.relu)
    norm: str = "layer"
    act_clip: float = 50.0
    logit_clip: float = 30.0
    identity_input_activation: bool = True

    def __post_init__(self):
        if self.tables < 1 or self.vocab < 1 or self.embed_dim < 1:
            raise ModelError("tables, vocab, embed_dim must be >= 1")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ModelError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.norm not in NORM_KINDS:
            raise ModelError(f"norm must be one of {NORM_KINDS}, got {self.norm!r}")
        if self.act_clip <= 0.0 or self.logit_clip <= 0.0:
            raise ModelError("act_clip and logit_clip must be > 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def input_dim(self) -> int:
        return self.tables * self.embed_dim

    @property
    def dims(self) -> tuple:
        return (self.input_dim, *self.hidden, 1)

    def to_dict(self) -> dict:
        return {
            "tables": self.tables,
            "vocab": self.vocab,
            "embed_dim": self.embed_dim,
            "hidden": list(self.hidden),
            "activation": act.format_activation(self.activation),
            "norm": self.norm,
            "act_clip": self.act_clip,
            "logit_clip": self.logit_clip,
            "identity_input_activation": self.identity_input_activation,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        d["activation"] = act.parse_activation(d["activation"])
        return ModelConfig(**d)


class DenseLayer:
    """Linear map stored as W (n_in, n_out): out = q @ W + b.

    Under weight norm the effective weight is W * v / ||W|| per column and W
    holds the direction; the optimizer renormalizes columns after each step.
    """

    __slots__ = ("n_in", "n_out", "W", "b", "v")

    def __init__(self, rng, n_in: int, n_out: int, weight_norm: bool):
        self.n_in = n_in
        self.n_out = n_out
        self.W = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out))
        self.b = np.zeros(n_out)
        if weight_norm:
            norms = np.linalg.norm(self.W, axis=0)
            self.v = norms.copy()
            self.W = self.W / norms
        else:
            self.v = None

    def effective_W(self) -> np.ndarray:
        if self.v is None:
            return self.W
        return self.W * (self.v / np.linalg.norm(self.W, axis=0))


@dataclass
class LayerCache:
    a: np.ndarray          # layer input, pre-activation
    dz: np.ndarray         # activation derivative at a
    clip_mask: np.ndarray  # 1.0 where the clip passes gradient
    u: np.ndarray | None   # normalized activations (layer norm only)
    inv_s: np.ndarray | None
    q: np.ndarray          # what the linear map consumed


@dataclass
class ForwardCache:
    x: np.ndarray
    layers: list
    logit_raw: np.ndarray
    logit: np.ndarray
    prob: np.ndarray
    ids: np.ndarray | None = None        # (B, tables) packed path
    features: tuple | None = None        # single general example path


@dataclass
class Grads:
    dense: dict                 # name -> array, matching Model.dense_params()
    emb: list                   # per table: (unique_row_idx, grad_rows) or None
    act_u: np.ndarray | None    # (5,) shared activation gradient


def gsmelu_u_from_params(p: GSmeLUParams) -> np.ndarray:
    if p.t >= 0.0:
        raise ModelError("trainable gsmelu needs t < 0")
    return np.array([
        math.log(p.alpha),
        math.log(p.beta),
        p.g_minus,
        math.log(p.g_plus - p.g_minus),
        math.log(-p.t),
    ])


def gsmelu_params_from_u(u: np.ndarray) -> GSmeLUParams:
    return GSmeLUParams(
        alpha=math.exp(u[0]),
        beta=math.exp(u[1]),
        g_minus=float(u[2]),
        g_plus=float(u[2]) + math.exp(u[3]),
        t=-math.exp(u[4]),
    )


class Model:
    def __init__(self, config: ModelConfig, rng):
        """rng: np.random.Generator or an int seed."""
        if isinstance(rng, (int, np.integer)):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(rng))))
        self.config = config
        c = config
        # row index `vocab` is the out-of-vocabulary bucket
        self.emb = [rng.normal(0.0, EMBED_INIT_STD, size=(c.vocab + 1, c.embed_dim))
                    for _ in range(c.tables)]
        dims = c.dims
        weight_norm = c.norm == "weight"
        self.layers = [DenseLayer(rng, dims[i], dims[i + 1], weight_norm)
                       for i in range(len(dims) - 1)]
        if c.activation.trainable:
            self.act_u = gsmelu_u_from_params(c.activation.gsmelu)
        else:
            self.act_u = None

    # -- parameter access ---------------------------------------------------

    def dense_params(self):
        """(name, array, lr_group) for everything except embedding tables."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"W{i}", layer.W, "dense"))
            out.append((f"b{i}", layer.b, "dense"))
            if layer.v is not None:
                out.append((f"v{i}", layer.v, "dense"))
        if self.act_u is not None:
            out.append(("act_u", self.act_u, "activation"))
        return out

    def current_activation(self) -> ActivationSpec:
        spec = self.config.activation
        if self.act_u is None:
            return spec
        return replace(spec, gsmelu=gsmelu_params_from_u(self.act_u))

    def layer_activation(self, i: int) -> ActivationSpec:
        if i == 0 and self.config.identity_input_activation:
            return act.identity()
        return self.current_activation()

    # -- forward ------------------------------------------------------------

    def map_ids(self, ids: np.ndarray) -> np.ndarray:
        v = self.config.vocab
        return np.where((ids >= 0) & (ids < v), ids, v)

    def input_from_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if ids.shape[1] != self.config.tables:
            raise ModelError(f"expected {self.config.tables} ids per example, got {ids.shape[1]}")
        cols = [self.emb[t][self.map_ids(ids[:, t])] for t in range(self.config.tables)]
        return np.concatenate(cols, axis=1)

    def input_from_features(self, features) -> np.ndarray:
        c = self.config
        x = np.zeros((1, c.input_dim))
        for table, fid, value in features:
            if not 0 <= table < c.tables:
                raise ModelError(f"table {table} out of range 0..{c.tables - 1}")
            row = self.emb[table][fid if 0 <= fid < c.vocab else c.vocab]
            x[0, table * c.embed_dim : (table + 1) * c.embed_dim] += value * row
        return x

    def forward_input(self, x: np.ndarray, ids=None, features=None) -> ForwardCache:
        c = self.config
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        caches = []
        for i, layer in enumerate(self.layers):
            a = h
            z, dz = act.eval(self.layer_activation(i), a)
            clip_mask = ((z >= -c.act_clip) & (z <= c.act_clip)).astype(np.float64)
            z = np.clip(z, -c.act_clip, c.act_clip)
            if c.norm == "layer" and i >= 1:
                mu = z.mean(axis=1, keepdims=True)
                var = z.var(axis=1, keepdims=True)
                inv_s = 1.0 / np.sqrt(var + LN_EPS)
                u = (z - mu) * inv_s
                q = u
            else:
                u = None
                inv_s = None
                q = z
            h = q @ layer.effective_W() + layer.b
            caches.append(LayerCache(a=a, dz=dz, clip_mask=clip_mask, u=u, inv_s=inv_s, q=q))
        logit_raw = h[:, 0]
        logit = np.clip(logit_raw, -c.logit_clip, c.logit_clip)
        prob = 1.0 / (1.0 + np.exp(-logit))
        return ForwardCache(x=np.atleast_2d(x), layers=caches, logit_raw=logit_raw,
                            logit=logit, prob=prob, ids=ids, features=features)

    def forward_ids(self, ids: np.ndarray) -> ForwardCache:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        return self.forward_input(self.input_from_ids(ids), ids=ids)

    def forward_example(self, example) -> ForwardCache:
        return self.forward_input(self.input_from_features(example.features),
                                  features=tuple(example.features))

    def predict_ids(self, ids: np.ndarray) -> np.ndarray:
        return self.forward_ids(ids).prob

    # -- backward -----------------------------------------------------------

    def backward(self, cache: ForwardCache, y) -> Grads:
        """Gradient of the summed log loss over the batch.

        The logit clamp is pass-through: d loss / d logit = prob - y even when
        the raw logit sits outside the clamp window.
        """
        c = self.config
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        if y.shape[0] != cache.prob.shape[0]:
            raise ModelError("label batch does not match forward batch")
        dense = {}
        act_u_grad = np.zeros(5) if self.act_u is not None else None
        dout = (cache.prob - y)[:, None]
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            lc = cache.layers[i]
            w_eff = layer.effective_W()
            dw_eff = lc.q.T @ dout
            dense[f"b{i}"] = dout.sum(axis=0)
            dq = dout @ w_eff.T
            if layer.v is not None:
                norms = np.linalg.norm(layer.W, axis=0)
                w_hat = layer.W / norms
                dv = np.einsum("ij,ij->j", w_hat, dw_eff)
                dense[f"v{i}"] = dv
                dense[f"W{i}"] = (layer.v / norms) * (dw_eff - w_hat * dv)
            else:
                dense[f"W{i}"] = dw_eff
            if lc.u is not None:
                du = dq
                dz = lc.inv_s * (du - du.mean(axis=1, keepdims=True)
                                 - lc.u * (du * lc.u).mean(axis=1, keepdims=True))
            else:
                dz = dq
            dz = dz * lc.clip_mask
            spec_i = self.layer_activation(i)
            if act_u_grad is not None and spec_i.kind == "gsmelu":
                self._accumulate_act_grads(act_u_grad, spec_i.gsmelu, lc.a, dz)
            dout = dz * lc.dz
        dx = dout
        emb_grads = self._embedding_grads(cache, dx)
        return Grads(dense=dense, emb=emb_grads, act_u=act_u_grad)

    def _accumulate_act_grads(self, out, params, a, dz):
        d_al, d_be, d_gm, d_gp, d_t = gsmelu_param_grads(params, a)
        g_theta = np.array([
            float((dz * d_al).sum()),
            float((dz * d_be).sum()),
            float((dz * d_gm).sum()),
            float((dz * d_gp).sum()),
            float((dz * d_t).sum()),
        ])
        # chain through alpha=e^u0, beta=e^u1, g-=u2, g+=u2+e^u3, t=-e^u4
        gap = params.g_plus - params.g_minus
        out[0] += g_theta[0] * params.alpha
        out[1] += g_theta[1] * params.beta
        out[2] += g_theta[2] + g_theta[3]
        out[3] += g_theta[3] * gap
        out[4] += g_theta[4] * params.t

    def _embedding_grads(self, cache: ForwardCache, dx: np.ndarray):
        c = self.config
        d = c.embed_dim
        out = []
        if cache.ids is not None:
            mapped = self.map_ids(cache.ids)
            for t in range(c.tables):
                rows = mapped[:, t]
                block = dx[:, t * d : (t + 1) * d]
                uids, inverse = np.unique(rows, return_inverse=True)
                acc = np.zeros((uids.shape[0], d))
                np.add.at(acc, inverse, block)
                out.append((uids, acc))
        elif cache.features is not None:
            per_table = {}
            for table, fid, value in cache.features:
                row = fid if 0 <= fid < c.vocab else c.vocab
                g = value * dx[0, table * d : (table + 1) * d]
                per_table.setdefault(table, {}).setdefault(row, np.zeros(d))
                per_table[table][row] += g
            for t in range(c.tables):
                if t in per_table:
                    uids = np.array(sorted(per_table[t]), dtype=np.int64)
                    acc = np.stack([per_table[t][r] for r in uids])
                    out.append((uids, acc))
                else:
                    out.append(None)
        else:
            out = [None] * c.tables
        return out

    # -- losses ---------------------------------------------------------------

    def loss_ids(self, ids, labels) -> float:
        """Summed log loss over the batch (matches backward's convention)."""
        prob = self.forward_ids(ids).prob
        y = np.asarray(labels, dtype=np.float64)
        return float(np.sum(-y * np.log(prob) - (1.0 - y) * np.log1p(-prob)))


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Model, optimizer=None):
    arrays = {}
    meta = {"config": model.config.to_dict(), "has_act_u": model.act_u is not None}
    for t, table in enumerate(model.emb):
        arrays[f"emb_{t}"] = table
    for name, arr, _ in model.dense_params():
        arrays[name] = arr
    if optimizer is not None:
        meta["optimizer"] = optimizer.to_dict()
        for key, arr in optimizer.state_arrays():
            arrays[f"opt_{key}"] = arr
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (model, optimizer or None); arrays restored bit-exact."""
    from .optim import Optimizer

    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        config = ModelConfig.from_dict(meta["config"])
        model = Model(config, rng=0)
        for t in range(config.tables):
            model.emb[t] = z[f"emb_{t}"].copy()
        for i, layer in enumerate(model.layers):
            layer.W = z[f"W{i}"].copy()
            layer.b = z[f"b{i}"].copy()
            if layer.v is not None:
                layer.v = z[f"v{i}"].copy()
        model.act_u = z["act_u"].copy() if meta["has_act_u"] else None
        optimizer = None
        if "optimizer" in meta:
            optimizer = Optimizer.from_dict(model, meta["optimizer"])
            for key, _ in optimizer.state_arrays():
                optimizer.set_state_array(key, z[f"opt_{key}"].copy())
    return model, optimizer
