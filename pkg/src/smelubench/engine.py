"""Single-core fast path: the online training loop compiled with numba.

The reference implementation in net.py/optim.py stays the readable source of
truth; this module packs a Model plus Optimizer into flat arrays and runs the
identical per-example pipeline (gather -> activation -> clip -> norm -> linear
-> clamped logit -> backward -> update) as one jitted kernel. Equivalence with
the reference path is pinned by tests at ~1e-9 relative over hundreds of
steps; exact bitwise equality is not expected because libm call sites differ.

Dense weights use the (n_in, n_out) layout so the inner matvec loop runs over
contiguous output columns. fastmath stays off: results must be deterministic
and reproducible across runs, which is the whole point of the benchmark.

Not supported here: trainable gsmelu (reference path handles it) and general
multi-feature examples (packed streams only: one id per table, value 1.0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .activations import GELU_SWISH_FACTOR, ActivationSpec, gsmelu_coeffs
from .net import LN_EPS, Model
from .optim import ADAGRAD_EPS, Optimizer

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

ACT_CODES = {"identity": 0, "relu": 1, "smelu": 2, "softplus": 3, "swish": 4,
             "gelu": 5, "gelu_exact": 6, "gsmelu": 7, "rescu": 8}
NORM_CODES = {"none": 0, "layer": 1, "weight": 2}
OPT_CODES = {"sgd": 0, "adagrad": 1, "adagrad_embed": 2}


class EngineError(RuntimeError):
    pass


def supports(model: Model) -> bool:
    return not model.config.activation.trainable


# ---------------------------------------------------------------------------
# jitted pieces
# ---------------------------------------------------------------------------


@njit(cache=True)
def _act_layer(kind, ap, rxs, rseg, rextra, buf, dz, win, act_clip):
    """Apply activation `kind` in place over buf[:win], writing the derivative
    into dz[:win]; then the symmetric clip. One branch per layer, tight loops
    per kind so the compiler can vectorize."""
    if kind == 0:  # identity
        for d in range(win):
            dz[d] = 1.0
    elif kind == 1:  # relu
        for d in range(win):
            if buf[d] > 0.0:
                dz[d] = 1.0
            else:
                buf[d] = 0.0
                dz[d] = 0.0
    elif kind == 2:  # smelu, ap[0]=beta
        beta = ap[0]
        for d in range(win):
            x = buf[d]
            if x <= -beta:
                buf[d] = 0.0
                dz[d] = 0.0
            elif x >= beta:
                dz[d] = 1.0
            else:
                buf[d] = (x + beta) * (x + beta) / (4.0 * beta)
                dz[d] = (x + beta) / (2.0 * beta)
    elif kind == 3:  # softplus, ap[0]=beta
        beta = ap[0]
        for d in range(win):
            u = beta * buf[d]
            if u > 30.0:
                dz[d] = 1.0
            elif u < -30.0:
                buf[d] = 0.0
                dz[d] = 0.0
            else:
                buf[d] = math.log1p(math.exp(u)) / beta
                dz[d] = 1.0 / (1.0 + math.exp(-u))
    elif kind == 4 or kind == 5:  # swish / approximate gelu, ap[0]=beta
        scale = ap[0] if kind == 4 else GELU_SWISH_FACTOR * ap[0]
        for d in range(win):
            x = buf[d]
            u = scale * x
            if u > 30.0:
                dz[d] = 1.0
            elif u < -30.0:
                buf[d] = 0.0
                dz[d] = 0.0
            else:
                sig = 1.0 / (1.0 + math.exp(-u))
                buf[d] = x * sig
                dz[d] = sig * (1.0 + u * (1.0 - sig))
    elif kind == 6:  # exact gelu, ap[0]=beta
        beta = ap[0]
        for d in range(win):
            x = buf[d]
            u = beta * x
            cdf = 0.5 * (1.0 + math.erf(u * _SQRT1_2))
            q = u * u
            if q > 1500.0:
                q = 1500.0
            pdf = math.exp(-0.5 * q) * _INV_SQRT_2PI
            buf[d] = x * cdf
            dz[d] = cdf + x * beta * pdf
    elif kind == 7:  # gsmelu: [alpha, beta, qa, qb, qc, gm, gp, dleft, dright]
        for d in range(win):
            x = buf[d]
            if x < -ap[0]:
                buf[d] = ap[5] * x + ap[7]
                dz[d] = ap[5]
            elif x > ap[1]:
                buf[d] = ap[6] * x + ap[8]
                dz[d] = ap[6]
            else:
                buf[d] = (ap[2] * x + ap[3]) * x + ap[4]
                dz[d] = 2.0 * ap[2] * x + ap[3]
    else:  # rescu: rxs knot xs, rseg rows (xl, xr, a, b, c), rextra (s_first, s_last, end_val)
        k = rxs.shape[0]
        for d in range(win):
            x = buf[d]
            if x < rxs[0]:
                buf[d] = rseg[0, 4] + rextra[0] * (x - rxs[0])
                dz[d] = rextra[0]
            elif x > rxs[k - 1]:
                buf[d] = rextra[2] + rextra[1] * (x - rxs[k - 1])
                dz[d] = rextra[1]
            else:
                i = np.searchsorted(rxs, x, side="right") - 1
                if i < 0:
                    i = 0
                if i > rseg.shape[0] - 1:
                    i = rseg.shape[0] - 1
                h = x - rseg[i, 0]
                buf[d] = (rseg[i, 2] * h + rseg[i, 3]) * h + rseg[i, 4]
                dz[d] = 2.0 * rseg[i, 2] * h + rseg[i, 3]
    for d in range(win):
        if buf[d] > act_clip:
            buf[d] = act_clip
            dz[d] = 0.0
        elif buf[d] < -act_clip:
            buf[d] = -act_clip
            dz[d] = 0.0


@njit(cache=True)
def _run_stream(emb, G_emb, params, G_params,
                dims, off_w, off_b, off_v,
                kinds, ap, rxs, rseg, rextra,
                norm_code, act_clip, logit_clip,
                opt_code, lr_embed, lr_dense,
                ids, labels, probs_out, train_flag):
    """Online loop over a packed stream. Returns the step index at which the
    logit went non-finite, or -1 if the whole stream was processed."""
    T = emb.shape[0]
    V = emb.shape[1] - 1
    D = emb.shape[2]
    L = dims.shape[0] - 1
    maxw = 0
    for i in range(L + 1):
        if dims[i] > maxw:
            maxw = dims[i]
    dense_adagrad = opt_code == 1
    emb_adagrad = opt_code >= 1

    DZ = np.empty((L, maxw))       # activation derivative times clip mask
    Q = np.empty((L, maxw))        # what the linear map consumed
    U = np.empty((L, maxw))        # layer-norm normalized values
    INVS = np.empty(L)
    WQ = np.empty((L, maxw))       # weight norm: raw W^T q per column
    NRM = np.empty((L, maxw))      # weight norm: column norms at forward time
    cur = np.empty(maxw)
    nxt = np.empty(maxw)
    g = np.empty(maxw)             # gradient wrt current layer output
    dq = np.empty(maxw)            # gradient wrt linear input
    fg = np.empty(maxw)
    dvv = np.empty(maxw)

    n = ids.shape[0]
    for ex in range(n):
        # ---- gather embeddings into the input vector
        for t in range(T):
            fid = ids[ex, t]
            if fid < 0 or fid >= V:
                fid = V
            base = t * D
            for d in range(D):
                cur[base + d] = emb[t, fid, d]

        # ---- forward
        for i in range(L):
            win = dims[i]
            wout = dims[i + 1]
            _act_layer(kinds[i], ap, rxs, rseg, rextra, cur, DZ[i], win, act_clip)
            if norm_code == 1 and i >= 1:
                mu = 0.0
                for d in range(win):
                    mu += cur[d]
                mu /= win
                var = 0.0
                for d in range(win):
                    t0 = cur[d] - mu
                    var += t0 * t0
                var /= win
                inv_s = 1.0 / math.sqrt(var + LN_EPS)
                INVS[i] = inv_s
                for d in range(win):
                    u0 = (cur[d] - mu) * inv_s
                    U[i, d] = u0
                    cur[d] = u0
            for d in range(win):
                Q[i, d] = cur[d]
            ow = off_w[i]
            ob = off_b[i]
            for j in range(wout):
                nxt[j] = params[ob + j]
            if norm_code == 2:
                ov = off_v[i]
                for j in range(wout):
                    WQ[i, j] = 0.0
                    NRM[i, j] = 0.0
                for r in range(win):
                    base = ow + r * wout
                    qr = Q[i, r]
                    for j in range(wout):
                        w0 = params[base + j]
                        WQ[i, j] += qr * w0
                        NRM[i, j] += w0 * w0
                for j in range(wout):
                    NRM[i, j] = math.sqrt(NRM[i, j])
                    nxt[j] += params[ov + j] / NRM[i, j] * WQ[i, j]
            else:
                for r in range(win):
                    base = ow + r * wout
                    qr = Q[i, r]
                    for j in range(wout):
                        nxt[j] += qr * params[base + j]
            for j in range(wout):
                cur[j] = nxt[j]

        logit = cur[0]
        if not math.isfinite(logit):
            return ex
        if logit > logit_clip:
            logit = logit_clip
        elif logit < -logit_clip:
            logit = -logit_clip
        p = 1.0 / (1.0 + math.exp(-logit))
        probs_out[ex] = p
        if train_flag == 0:
            continue

        # ---- backward with fused updates (the logit clamp is pass-through)
        g[0] = p - labels[ex]
        for i in range(L - 1, -1, -1):
            win = dims[i]
            wout = dims[i + 1]
            ow = off_w[i]
            ob = off_b[i]
            if norm_code == 2:
                ov = off_v[i]
                # gradient wrt the linear input, using pre-update weights
                for j in range(wout):
                    fg[j] = g[j] * params[ov + j] / NRM[i, j]
                for r in range(win):
                    base = ow + r * wout
                    acc = 0.0
                    for j in range(wout):
                        acc += fg[j] * params[base + j]
                    dq[r] = acc
                # dv = g * (W^T q) / ||w||, then the projected direction update
                for j in range(wout):
                    dvv[j] = g[j] * WQ[i, j] / NRM[i, j]
                if dense_adagrad:
                    for r in range(win):
                        base = ow + r * wout
                        qr = Q[i, r]
                        for j in range(wout):
                            w0 = params[base + j]
                            gw = params[ov + j] / NRM[i, j] * (qr * g[j] - w0 / NRM[i, j] * dvv[j])
                            G_params[base + j] += gw * gw
                            params[base + j] = w0 - lr_dense * gw / math.sqrt(G_params[base + j] + ADAGRAD_EPS)
                    for j in range(wout):
                        gv = dvv[j]
                        G_params[ov + j] += gv * gv
                        params[ov + j] -= lr_dense * gv / math.sqrt(G_params[ov + j] + ADAGRAD_EPS)
                    for j in range(wout):
                        gb = g[j]
                        G_params[ob + j] += gb * gb
                        params[ob + j] -= lr_dense * gb / math.sqrt(G_params[ob + j] + ADAGRAD_EPS)
                else:
                    for r in range(win):
                        base = ow + r * wout
                        qr = Q[i, r]
                        for j in range(wout):
                            w0 = params[base + j]
                            gw = params[ov + j] / NRM[i, j] * (qr * g[j] - w0 / NRM[i, j] * dvv[j])
                            params[base + j] = w0 - lr_dense * gw
                    for j in range(wout):
                        params[ov + j] -= lr_dense * dvv[j]
                    for j in range(wout):
                        params[ob + j] -= lr_dense * g[j]
            else:
                # gradient wrt the linear input, using pre-update weights
                for r in range(win):
                    base = ow + r * wout
                    acc = 0.0
                    for j in range(wout):
                        acc += g[j] * params[base + j]
                    dq[r] = acc
                if dense_adagrad:
                    for r in range(win):
                        base = ow + r * wout
                        qr = Q[i, r]
                        for j in range(wout):
                            gw = qr * g[j]
                            G_params[base + j] += gw * gw
                            params[base + j] -= lr_dense * gw / math.sqrt(G_params[base + j] + ADAGRAD_EPS)
                    for j in range(wout):
                        gb = g[j]
                        G_params[ob + j] += gb * gb
                        params[ob + j] -= lr_dense * gb / math.sqrt(G_params[ob + j] + ADAGRAD_EPS)
                else:
                    for r in range(win):
                        base = ow + r * wout
                        qr = Q[i, r]
                        for j in range(wout):
                            params[base + j] -= lr_dense * (qr * g[j])
                    for j in range(wout):
                        params[ob + j] -= lr_dense * g[j]
            # back through norm, clip, activation
            if norm_code == 1 and i >= 1:
                mdu = 0.0
                mduu = 0.0
                for d in range(win):
                    mdu += dq[d]
                    mduu += dq[d] * U[i, d]
                mdu /= win
                mduu /= win
                inv_s = INVS[i]
                for d in range(win):
                    g[d] = inv_s * (dq[d] - mdu - U[i, d] * mduu) * DZ[i, d]
            else:
                for d in range(win):
                    g[d] = dq[d] * DZ[i, d]

        # ---- embedding updates (one row per table; rows are disjoint stores)
        if emb_adagrad:
            for t in range(T):
                fid = ids[ex, t]
                if fid < 0 or fid >= V:
                    fid = V
                base = t * D
                for d in range(D):
                    ge = g[base + d]
                    G_emb[t, fid, d] += ge * ge
                    emb[t, fid, d] -= lr_embed * ge / math.sqrt(G_emb[t, fid, d] + ADAGRAD_EPS)
        else:
            for t in range(T):
                fid = ids[ex, t]
                if fid < 0 or fid >= V:
                    fid = V
                base = t * D
                for d in range(D):
                    emb[t, fid, d] -= lr_embed * g[base + d]

        # ---- weight norm: renormalize every column to unit length
        if norm_code == 2:
            for i in range(L):
                win = dims[i]
                wout = dims[i + 1]
                ow = off_w[i]
                for j in range(wout):
                    acc = 0.0
                    for r in range(win):
                        w0 = params[ow + r * wout + j]
                        acc += w0 * w0
                    nrm = math.sqrt(acc)
                    for r in range(win):
                        params[ow + r * wout + j] /= nrm
    return -1


@njit(cache=True)
def _window_perm(u, window):
    n = u.shape[0]
    w = window if window < n else n
    out = np.empty(n, dtype=np.int64)
    buf = np.empty(w if w > 0 else 1, dtype=np.int64)
    fill = 0
    k = 0
    for item in range(n):
        buf[fill] = item
        fill += 1
        if fill >= w:
            j = int(u[k] * fill)
            out[k] = buf[j]
            buf[j] = buf[fill - 1]
            fill -= 1
            k += 1
    while fill > 0:
        j = int(u[k] * fill)
        out[k] = buf[j]
        buf[j] = buf[fill - 1]
        fill -= 1
        k += 1
    return out


def window_permutation(u: np.ndarray, window: int) -> np.ndarray:
    return _window_perm(np.ascontiguousarray(u, dtype=np.float64), int(window))


# ---------------------------------------------------------------------------
# packing / unpacking
# ---------------------------------------------------------------------------


@dataclass
class PackedModel:
    emb: np.ndarray
    G_emb: np.ndarray
    params: np.ndarray
    G_params: np.ndarray
    dims: np.ndarray
    off_w: np.ndarray
    off_b: np.ndarray
    off_v: np.ndarray
    kinds: np.ndarray
    ap: np.ndarray
    rxs: np.ndarray
    rseg: np.ndarray
    rextra: np.ndarray
    norm_code: int
    opt_code: int
    act_clip: float
    logit_clip: float
    lr_embed: float
    lr_dense: float


def _activation_tables(spec: ActivationSpec):
    ap = np.zeros(9)
    rxs = np.zeros(1)
    rseg = np.zeros((1, 5))
    rextra = np.zeros(3)
    kind = spec.kind
    if kind in ("smelu", "softplus", "swish"):
        ap[0] = spec.beta
    elif kind == "gelu":
        ap[0] = spec.beta
        if spec.gelu_exact:
            kind = "gelu_exact"
    elif kind == "gsmelu":
        p = spec.gsmelu
        co = gsmelu_coeffs(p)
        d_left = p.t + p.g_minus * p.alpha
        d_right = p.t + 0.5 * (p.alpha + p.beta) * p.g_minus + 0.5 * (p.alpha - p.beta) * p.g_plus
        ap[:9] = (p.alpha, p.beta, co.a, co.b, co.c, p.g_minus, p.g_plus, d_left, d_right)
    elif kind == "rescu":
        rs = spec.rescu
        rxs = np.array([k[0] for k in rs.knots])
        rseg = np.array([list(seg) for seg in rs.segments])
        xl, _, a, b, c = rs.segments[-1]
        h = rs.knots[-1][0] - xl
        end_val = (a * h + b) * h + c
        rextra = np.array([rs.knots[0][1], rs.knots[-1][1], end_val])
    return ACT_CODES[kind], ap, rxs, rseg, rextra


def pack(model: Model, optimizer: Optimizer) -> PackedModel:
    if not supports(model):
        raise EngineError("trainable gsmelu runs on the reference path only")
    c = model.config
    emb = np.stack(model.emb).astype(np.float64)
    G_emb = (np.stack(optimizer.G_emb).astype(np.float64)
             if optimizer.G_emb is not None else np.zeros_like(emb))
    dims = np.array(c.dims, dtype=np.int64)
    off_w = np.zeros(len(model.layers), dtype=np.int64)
    off_b = np.zeros(len(model.layers), dtype=np.int64)
    off_v = np.full(len(model.layers), -1, dtype=np.int64)
    chunks = []
    pos = 0
    for i, layer in enumerate(model.layers):
        off_w[i] = pos
        chunks.append(layer.W.reshape(-1))
        pos += layer.W.size
        off_b[i] = pos
        chunks.append(layer.b)
        pos += layer.b.size
        if layer.v is not None:
            off_v[i] = pos
            chunks.append(layer.v)
            pos += layer.v.size
    params = np.concatenate(chunks).astype(np.float64)
    G_params = np.zeros_like(params)
    if optimizer.G_dense is not None:
        for i, layer in enumerate(model.layers):
            G_params[off_w[i] : off_w[i] + layer.W.size] = optimizer.G_dense[f"W{i}"].reshape(-1)
            G_params[off_b[i] : off_b[i] + layer.b.size] = optimizer.G_dense[f"b{i}"]
            if layer.v is not None:
                G_params[off_v[i] : off_v[i] + layer.v.size] = optimizer.G_dense[f"v{i}"]
    code, ap, rxs, rseg, rextra = _activation_tables(c.activation)
    kinds = np.full(len(model.layers), code, dtype=np.int64)
    if c.identity_input_activation:
        kinds[0] = ACT_CODES["identity"]
    return PackedModel(
        emb=emb, G_emb=G_emb, params=params, G_params=G_params,
        dims=dims, off_w=off_w, off_b=off_b, off_v=off_v,
        kinds=kinds, ap=ap, rxs=rxs, rseg=rseg, rextra=rextra,
        norm_code=NORM_CODES[c.norm], opt_code=OPT_CODES[optimizer.kind],
        act_clip=c.act_clip, logit_clip=c.logit_clip,
        lr_embed=optimizer.lr["embed"], lr_dense=optimizer.lr["dense"],
    )


def unpack(packed: PackedModel, model: Model, optimizer: Optimizer):
    """Write trained parameters and optimizer state back into the reference
    objects (for checkpointing or reference-path evaluation)."""
    for t in range(len(model.emb)):
        model.emb[t][...] = packed.emb[t]
    if optimizer.G_emb is not None:
        for t in range(len(model.emb)):
            optimizer.G_emb[t][...] = packed.G_emb[t]
    for i, layer in enumerate(model.layers):
        layer.W[...] = packed.params[packed.off_w[i] : packed.off_w[i] + layer.W.size].reshape(layer.W.shape)
        layer.b[...] = packed.params[packed.off_b[i] : packed.off_b[i] + layer.b.size]
        if layer.v is not None:
            layer.v[...] = packed.params[packed.off_v[i] : packed.off_v[i] + layer.v.size]
        if optimizer.G_dense is not None:
            optimizer.G_dense[f"W{i}"][...] = packed.G_params[
                packed.off_w[i] : packed.off_w[i] + layer.W.size].reshape(layer.W.shape)
            optimizer.G_dense[f"b{i}"][...] = packed.G_params[packed.off_b[i] : packed.off_b[i] + layer.b.size]
            if layer.v is not None:
                optimizer.G_dense[f"v{i}"][...] = packed.G_params[
                    packed.off_v[i] : packed.off_v[i] + layer.v.size]


def _call_kernel(packed: PackedModel, ids, labels, probs_out, train: bool) -> int:
    return int(_run_stream(
        packed.emb, packed.G_emb, packed.params, packed.G_params,
        packed.dims, packed.off_w, packed.off_b, packed.off_v,
        packed.kinds, packed.ap, packed.rxs, packed.rseg, packed.rextra,
        packed.norm_code, packed.act_clip, packed.logit_clip,
        packed.opt_code, packed.lr_embed, packed.lr_dense,
        ids, labels, probs_out, 1 if train else 0,
    ))


def train_stream(packed: PackedModel, ids, labels):
    """Online pass over the stream; returns (pre-update probs, diverged_step).

    diverged_step is -1 for a clean pass; otherwise the 0-based step whose
    logit became non-finite (probs from that step on are nan)."""
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    probs = np.full(ids.shape[0], np.nan)
    step = _call_kernel(packed, ids, labels, probs, train=True)
    return probs, step


def predict_stream(packed: PackedModel, ids):
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    probs = np.full(ids.shape[0], np.nan)
    dummy = np.zeros(ids.shape[0])
    step = _call_kernel(packed, ids, dummy, probs, train=False)
    if step != -1:
        raise EngineError(f"non-finite logit during prediction at example {step}")
    return probs
