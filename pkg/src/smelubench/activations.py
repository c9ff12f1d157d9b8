"""Smooth rectifier family: closed forms, derivatives, parameter gradients.

Kinds:
  * relu      -- max(0, x), subgradient at 0 defined as 0
  * identity  -- pass-through
  * smelu     -- three-piece C1 rectifier: 0 | (x+beta)^2/(4 beta) | x
  * softplus  -- (1/beta) ln(1 + e^{beta x})
  * swish     -- x sigmoid(beta x)
  * gelu      -- x Phi(beta x); default path approximates via
                 x sigmoid(sqrt(8/pi) beta x), exact erf path is opt-in
  * gsmelu    -- asymmetric generalization {alpha, beta, g-, g+, t}
  * rescu     -- multi-knot piecewise-quadratic C1 generalization

All eval functions accept scalars or numpy arrays and return (y, dy/dx)
with the input's shape. Width semantics are reciprocal between the two
branches of the family: larger beta widens the smelu/gsmelu transition
but sharpens softplus/swish/gelu.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Beyond |beta*x| = 30 the exp-family forms are numerically indistinguishable
# from their asymptotes; snap to them instead of evaluating exp.
EXP_GUARD = 30.0

# Effective swish temperature that matches gelu: Phi(u) ~= sigmoid(sqrt(8/pi) u).
GELU_SWISH_FACTOR = math.sqrt(8.0 / math.pi)

KINDS = ("relu", "identity", "smelu", "softplus", "swish", "gelu", "gsmelu", "rescu")
_BETA_KINDS = ("smelu", "softplus", "swish", "gelu")


class ActivationError(ValueError):
    """Invalid activation parameters, inputs, or serialized form."""


def _require(cond, msg):
    if not cond:
        raise ActivationError(msg)


@dataclass(frozen=True)
class GSmeLUParams:
    """Parameters of the asymmetric smooth rectifier.

    The curve is linear with slope g_minus left of -alpha, linear with slope
    g_plus right of beta, and the unique quadratic bridge in between that
    matches both slopes and passes through (-alpha, t).
    """

    alpha: float
    beta: float
    g_minus: float
    g_plus: float
    t: float

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.g_minus, self.g_plus, self.t)
        _require(all(math.isfinite(v) for v in vals), "gsmelu params must be finite")
        _require(self.alpha > 0.0, f"alpha must be > 0, got {self.alpha}")
        _require(self.beta > 0.0, f"beta must be > 0, got {self.beta}")
        _require(self.t <= 0.0, f"t must be <= 0, got {self.t}")
        _require(
            self.g_plus > self.g_minus,
            f"g_plus must exceed g_minus, got g+={self.g_plus} g-={self.g_minus}",
        )


@dataclass(frozen=True)
class QuadCoeffs:
    """Middle-segment coefficients: y = a x^2 + b x + c on [-alpha, beta]."""

    a: float
    b: float
    c: float


def gsmelu_coeffs(p: GSmeLUParams) -> QuadCoeffs:
    """Solve the three-constraint system for the quadratic bridge.

    Constraints: y'(-alpha) = g-, y'(beta) = g+, y(-alpha) = t.
    """
    s = p.alpha + p.beta
    a = (p.g_plus - p.g_minus) / (2.0 * s)
    b = (p.alpha * p.g_plus + p.beta * p.g_minus) / s
    c = p.t + (p.alpha * p.alpha * (p.g_plus + p.g_minus) + 2.0 * p.alpha * p.beta * p.g_minus) / (2.0 * s)
    return QuadCoeffs(a, b, c)


@dataclass(frozen=True)
class RescuSpec:
    """Multi-knot C1 curve: linear rays outside, quadratic bridges between knots.

    knots:    ((x_i, slope_i), ...) with x strictly increasing, len >= 2
    anchor:   (x0, y0) pinning the level; x0 must be one of the knot xs
    segments: derived; per bridge (x_left, x_right, a, b, c) with the local
              polynomial a (x-x_left)^2 + b (x-x_left) + c
    """

    knots: tuple
    anchor: tuple
    segments: tuple


def build_rescu(knots, anchor) -> RescuSpec:
    """Construct the piecewise curve from (x, slope) knots and one anchor point.

    Each inter-knot bridge is the unique quadratic matching the left knot's
    value and both knots' slopes -- the same three-constraint system as the
    gsmelu bridge, which is the 2-knot special case.
    """
    knots = tuple((float(x), float(s)) for x, s in knots)
    _require(len(knots) >= 2, "rescu needs at least 2 knots")
    xs = [k[0] for k in knots]
    slopes = [k[1] for k in knots]
    _require(all(math.isfinite(v) for v in xs + slopes), "rescu knots must be finite")
    for left, right in zip(xs, xs[1:]):
        _require(left < right, f"knot xs must be strictly increasing, got {left} >= {right}")
    ax, ay = float(anchor[0]), float(anchor[1])
    _require(math.isfinite(ax) and math.isfinite(ay), "rescu anchor must be finite")
    try:
        k0 = xs.index(ax)
    except ValueError:
        raise ActivationError(f"anchor x={ax} is not a knot x (knots at {xs})") from None

    # Propagate knot values outward from the anchor; a bridge from knot i to
    # i+1 ends at val_i + s_i h + (s_{i+1} - s_i) h / 2 with h the knot gap.
    vals = [0.0] * len(knots)
    vals[k0] = ay
    for i in range(k0, len(knots) - 1):
        h = xs[i + 1] - xs[i]
        vals[i + 1] = vals[i] + slopes[i] * h + 0.5 * (slopes[i + 1] - slopes[i]) * h
    for i in range(k0 - 1, -1, -1):
        h = xs[i + 1] - xs[i]
        vals[i] = vals[i + 1] - slopes[i] * h - 0.5 * (slopes[i + 1] - slopes[i]) * h

    segments = []
    for i in range(len(knots) - 1):
        h = xs[i + 1] - xs[i]
        a = (slopes[i + 1] - slopes[i]) / (2.0 * h)
        segments.append((xs[i], xs[i + 1], a, slopes[i], vals[i]))
    return RescuSpec(knots=knots, anchor=(ax, ay), segments=tuple(segments))


@dataclass(frozen=True)
class ActivationSpec:
    """One activation configuration; immutable and serializable.

    beta is the scale knob of the single-parameter kinds. gsmelu/rescu carry
    their own parameter blocks. trainable marks a gsmelu whose parameters are
    updated during training (requires t < 0 strictly; see optim).
    """

    kind: str
    beta: float = 1.0
    gsmelu: GSmeLUParams | None = None
    rescu: RescuSpec | None = None
    gelu_exact: bool = False
    trainable: bool = False

    def __post_init__(self):
        _require(self.kind in KINDS, f"unknown activation kind {self.kind!r}")
        if self.kind in _BETA_KINDS:
            _require(
                math.isfinite(self.beta) and self.beta > 0.0,
                f"{self.kind} needs beta > 0, got {self.beta}",
            )
        if self.kind == "gsmelu":
            _require(self.gsmelu is not None, "gsmelu spec needs GSmeLUParams")
            if self.trainable:
                _require(
                    self.gsmelu.t < 0.0,
                    "trainable gsmelu needs t < 0 strictly (t = -e^w can never move "
                    "off 0); use a small negative t such as -1e-3",
                )
        else:
            _require(not self.trainable, f"{self.kind} is not trainable")
        if self.kind == "rescu":
            _require(self.rescu is not None, "rescu spec needs RescuSpec")


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------


def relu() -> ActivationSpec:
    return ActivationSpec(kind="relu")


def identity() -> ActivationSpec:
    return ActivationSpec(kind="identity")


def smelu(beta: float = 1.0) -> ActivationSpec:
    return ActivationSpec(kind="smelu", beta=float(beta))


def softplus(beta: float = 1.0) -> ActivationSpec:
    return ActivationSpec(kind="softplus", beta=float(beta))


def swish(beta: float = 1.0) -> ActivationSpec:
    return ActivationSpec(kind="swish", beta=float(beta))


def gelu(beta: float = 1.0, exact: bool = False) -> ActivationSpec:
    return ActivationSpec(kind="gelu", beta=float(beta), gelu_exact=bool(exact))


def gsmelu(alpha, beta, g_minus, g_plus, t, trainable: bool = False) -> ActivationSpec:
    params = GSmeLUParams(float(alpha), float(beta), float(g_minus), float(g_plus), float(t))
    return ActivationSpec(kind="gsmelu", gsmelu=params, trainable=trainable)


def rescu(knots, anchor) -> ActivationSpec:
    return ActivationSpec(kind="rescu", rescu=build_rescu(knots, anchor))


def smelu_as_gsmelu(beta: float) -> GSmeLUParams:
    """The reduction: smelu(beta) == gsmelu{alpha=beta, g-=0, g+=1, t=0}."""
    return GSmeLUParams(alpha=float(beta), beta=float(beta), g_minus=0.0, g_plus=1.0, t=0.0)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _check_input(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ActivationError("activation input must be finite")
    return x


def _sigmoid(u):
    # u is pre-clipped to [-EXP_GUARD, EXP_GUARD]; safe both directions.
    return 1.0 / (1.0 + np.exp(-u))


def _eval_relu(x):
    y = np.maximum(x, 0.0)
    dy = np.where(x > 0.0, 1.0, 0.0)
    return y, dy


def _eval_smelu(x, beta):
    # The outer branches are exact: 0 in the stop region, x (same bits) in
    # the identity region. The gradient is the hard sigmoid.
    quad = (x + beta) * (x + beta) / (4.0 * beta)
    y = np.where(x <= -beta, 0.0, np.where(x >= beta, x, quad))
    dy = np.where(x <= -beta, 0.0, np.where(x >= beta, 1.0, (x + beta) / (2.0 * beta)))
    return y, dy


def _eval_softplus(x, beta):
    u = beta * x
    uc = np.clip(u, -EXP_GUARD, EXP_GUARD)
    core = np.log1p(np.exp(uc)) / beta
    y = np.where(u > EXP_GUARD, x, np.where(u < -EXP_GUARD, 0.0, core))
    dy = np.where(u > EXP_GUARD, 1.0, np.where(u < -EXP_GUARD, 0.0, _sigmoid(uc)))
    return y, dy


def _swish_core(x, u):
    uc = np.clip(u, -EXP_GUARD, EXP_GUARD)
    sig = _sigmoid(uc)
    y = np.where(u > EXP_GUARD, x, np.where(u < -EXP_GUARD, 0.0, x * sig))
    dcore = sig * (1.0 + uc * (1.0 - sig))
    dy = np.where(u > EXP_GUARD, 1.0, np.where(u < -EXP_GUARD, 0.0, dcore))
    return y, dy


def _eval_swish(x, beta):
    return _swish_core(x, beta * x)


_erf = np.vectorize(math.erf, otypes=[np.float64])
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _eval_gelu(x, beta, exact):
    if not exact:
        return _swish_core(x, GELU_SWISH_FACTOR * beta * x)
    u = beta * x
    phi_cdf = 0.5 * (1.0 + _erf(u * _SQRT1_2))
    pdf = np.exp(-0.5 * np.clip(u * u, 0.0, 1500.0)) * _INV_SQRT_2PI
    y = x * phi_cdf
    dy = phi_cdf + x * beta * pdf
    return y, dy


def _eval_gsmelu(x, p: GSmeLUParams):
    co = gsmelu_coeffs(p)
    left = p.g_minus * x + (p.t + p.g_minus * p.alpha)
    right_const = p.t + 0.5 * (p.alpha + p.beta) * p.g_minus + 0.5 * (p.alpha - p.beta) * p.g_plus
    right = p.g_plus * x + right_const
    mid = (co.a * x + co.b) * x + co.c
    # Knots evaluate on the quadratic side.
    y = np.where(x < -p.alpha, left, np.where(x > p.beta, right, mid))
    dy = np.where(x < -p.alpha, p.g_minus, np.where(x > p.beta, p.g_plus, 2.0 * co.a * x + co.b))
    return y, dy


def _eval_rescu(x, spec: RescuSpec):
    xs = np.array([k[0] for k in spec.knots])
    s_first = spec.knots[0][1]
    s_last = spec.knots[-1][1]
    seg0 = spec.segments[0]
    seg_last = spec.segments[-1]
    scalar = np.ndim(x) == 0
    xv = np.atleast_1d(x)
    y = np.empty_like(xv)
    dy = np.empty_like(xv)
    # Segment index per point; knots land on a bridge, rays are strict.
    idx = np.clip(np.searchsorted(xs, xv, side="right") - 1, 0, len(spec.segments) - 1)
    for i, seg in enumerate(spec.segments):
        xl, _, a, b, c = seg
        m = idx == i
        d = xv[m] - xl
        y[m] = (a * d + b) * d + c
        dy[m] = 2.0 * a * d + b
    left = xv < xs[0]
    y[left] = seg0[4] + s_first * (xv[left] - xs[0])
    dy[left] = s_first
    right = xv > xs[-1]
    x_last, _, a, b, c = seg_last
    h = spec.knots[-1][0] - x_last
    end_val = (a * h + b) * h + c
    y[right] = end_val + s_last * (xv[right] - xs[-1])
    dy[right] = s_last
    if scalar:
        return y[0], dy[0]
    return y, dy


def eval(spec: ActivationSpec, x):
    """Evaluate (y, dy/dx) for scalar or array x. Non-finite x raises."""
    xv = _check_input(x)
    if spec.kind == "relu":
        y, dy = _eval_relu(xv)
    elif spec.kind == "identity":
        y, dy = xv.copy(), np.ones_like(xv)
    elif spec.kind == "smelu":
        y, dy = _eval_smelu(xv, spec.beta)
    elif spec.kind == "softplus":
        y, dy = _eval_softplus(xv, spec.beta)
    elif spec.kind == "swish":
        y, dy = _eval_swish(xv, spec.beta)
    elif spec.kind == "gelu":
        y, dy = _eval_gelu(xv, spec.beta, spec.gelu_exact)
    elif spec.kind == "gsmelu":
        y, dy = _eval_gsmelu(xv, spec.gsmelu)
    else:
        y, dy = _eval_rescu(xv, spec.rescu)
    if np.ndim(x) == 0:
        return float(np.asarray(y)), float(np.asarray(dy))
    return np.asarray(y, dtype=np.float64), np.asarray(dy, dtype=np.float64)


def eval_y(spec: ActivationSpec, x):
    """Value-only convenience wrapper."""
    return eval(spec, x)[0]


# ---------------------------------------------------------------------------
# Parameter gradients (gsmelu)
# ---------------------------------------------------------------------------


def gsmelu_param_grads(p: GSmeLUParams, x):
    """Partials (dy/dalpha, dy/dbeta, dy/dg_minus, dy/dg_plus, dy/dt) at fixed x.

    Obtained by differentiating the piecewise closed form; knots use the
    quadratic segment's formulas, matching eval's region policy.
    """
    xv = _check_input(x)
    al, be, gm, gp, t = p.alpha, p.beta, p.g_minus, p.g_plus, p.t
    s = al + be
    s2 = s * s

    # Middle segment: differentiate a, b, c wrt each parameter.
    da_dal = -(gp - gm) / (2.0 * s2)
    da_dbe = da_dal
    da_dgm = -1.0 / (2.0 * s)
    da_dgp = 1.0 / (2.0 * s)
    db_dal = be * (gp - gm) / s2
    db_dbe = -al * (gp - gm) / s2
    db_dgm = be / s
    db_dgp = al / s
    dc_dal = (al * al * (gp + gm) + 2.0 * al * be * (gp + gm) + 2.0 * be * be * gm) / (2.0 * s2)
    dc_dbe = -al * al * (gp - gm) / (2.0 * s2)
    dc_dgm = (al * al + 2.0 * al * be) / (2.0 * s)
    dc_dgp = al * al / (2.0 * s)

    x2 = xv * xv
    mid_dal = da_dal * x2 + db_dal * xv + dc_dal
    mid_dbe = da_dbe * x2 + db_dbe * xv + dc_dbe
    mid_dgm = da_dgm * x2 + db_dgm * xv + dc_dgm
    mid_dgp = da_dgp * x2 + db_dgp * xv + dc_dgp

    left = xv < -al
    right = xv > be

    d_al = np.where(left, gm, np.where(right, 0.5 * (gm + gp), mid_dal))
    d_be = np.where(left, 0.0, np.where(right, 0.5 * (gm - gp), mid_dbe))
    d_gm = np.where(left, xv + al, np.where(right, 0.5 * s, mid_dgm))
    d_gp = np.where(left, 0.0, np.where(right, xv + 0.5 * (al - be), mid_dgp))
    d_t = np.ones_like(xv)

    if np.ndim(x) == 0:
        return (float(d_al), float(d_be), float(d_gm), float(d_gp), float(d_t))
    return d_al, d_be, d_gm, d_gp, d_t


# ---------------------------------------------------------------------------
# Test oracle: the box-convolution identity
# ---------------------------------------------------------------------------


def smelu_convolution_oracle(x: float, beta: float, n_steps: int = 10_000) -> float:
    """Trapezoid quadrature of relu convolved with the box 1/(2 beta) on [-beta, beta].

    The closed form equals this integral; kept as an independent oracle for
    tests, not a production path.
    """
    u = np.linspace(-beta, beta, n_steps + 1)
    integrand = np.maximum(x - u, 0.0) / (2.0 * beta)
    return float(np.trapezoid(integrand, u))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def format_activation(spec: ActivationSpec) -> str:
    """Flat text form, the inverse of parse_activation."""
    if spec.kind in ("relu", "identity"):
        return spec.kind
    if spec.kind in ("softplus", "swish"):
        return f"{spec.kind}:beta={_fmt(spec.beta)}"
    if spec.kind == "smelu":
        return f"smelu:beta={_fmt(spec.beta)}"
    if spec.kind == "gelu":
        base = f"gelu:beta={_fmt(spec.beta)}"
        return base + ",exact=1" if spec.gelu_exact else base
    if spec.kind == "gsmelu":
        p = spec.gsmelu
        base = (
            f"gsmelu:alpha={_fmt(p.alpha)},beta={_fmt(p.beta)},gm={_fmt(p.g_minus)},"
            f"gp={_fmt(p.g_plus)},t={_fmt(p.t)}"
        )
        return base + ",train=1" if spec.trainable else base
    knots = ";".join(f"({_fmt(x)},{_fmt(s)})" for x, s in spec.rescu.knots)
    ax, ay = spec.rescu.anchor
    return f"rescu:knots={knots};anchor=({_fmt(ax)},{_fmt(ay)})"


def _parse_kv(body: str, what: str) -> dict:
    out = {}
    for item in body.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ActivationError(f"bad {what} field {item!r}, expected key=value")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise ActivationError(f"bad {what} value {v!r} for key {k.strip()!r}") from None
    return out


def _parse_pair(text: str, what: str):
    text = text.strip()
    if not (text.startswith("(") and text.endswith(")")):
        raise ActivationError(f"bad {what} tuple {text!r}")
    parts = text[1:-1].split(",")
    if len(parts) != 2:
        raise ActivationError(f"bad {what} tuple {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise ActivationError(f"bad {what} tuple {text!r}") from None


def parse_activation(text: str) -> ActivationSpec:
    """Parse forms like 'relu', 'smelu:beta=1.0',
    'gsmelu:alpha=1,beta=1,gm=0,gp=1,t=0',
    'rescu:knots=(-1,0);(1,1);anchor=(-1,0)'."""
    text = text.strip()
    kind, _, body = text.partition(":")
    kind = kind.strip().lower()
    if kind not in KINDS:
        raise ActivationError(f"unknown activation kind {kind!r} in {text!r}")
    if kind in ("relu", "identity"):
        if body:
            raise ActivationError(f"{kind} takes no parameters, got {body!r}")
        return ActivationSpec(kind=kind)
    if kind in ("smelu", "softplus", "swish"):
        kv = _parse_kv(body, kind)
        extra = set(kv) - {"beta"}
        if extra:
            raise ActivationError(f"unknown {kind} keys {sorted(extra)}")
        return ActivationSpec(kind=kind, beta=kv.get("beta", 1.0))
    if kind == "gelu":
        kv = _parse_kv(body, kind)
        extra = set(kv) - {"beta", "exact"}
        if extra:
            raise ActivationError(f"unknown gelu keys {sorted(extra)}")
        return ActivationSpec(kind="gelu", beta=kv.get("beta", 1.0), gelu_exact=bool(kv.get("exact", 0)))
    if kind == "gsmelu":
        kv = _parse_kv(body, kind)
        extra = set(kv) - {"alpha", "beta", "gm", "gp", "t", "train"}
        if extra:
            raise ActivationError(f"unknown gsmelu keys {sorted(extra)}")
        missing = {"alpha", "beta", "gm", "gp", "t"} - set(kv)
        if missing:
            raise ActivationError(f"gsmelu needs keys {sorted(missing)}")
        return gsmelu(kv["alpha"], kv["beta"], kv["gm"], kv["gp"], kv["t"], trainable=bool(kv.get("train", 0)))
    # rescu: knots=(x,s);(x,s);...;anchor=(x,y)
    if not body.startswith("knots="):
        raise ActivationError(f"rescu form must start with knots=, got {text!r}")
    items = body[len("knots="):].split(";")
    if len(items) < 3 or not items[-1].strip().startswith("anchor="):
        raise ActivationError(f"rescu needs >=2 knots and a trailing anchor=, got {text!r}")
    anchor = _parse_pair(items[-1].strip()[len("anchor="):], "anchor")
    knots = [_parse_pair(item, "knot") for item in items[:-1]]
    return rescu(knots, anchor)
