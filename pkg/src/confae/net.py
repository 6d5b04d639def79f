"""Fully connected networks with hand-rolled differentiation.

Three sweeps are supported over the same recorded evaluation:

* a primal forward pass (affine maps + pointwise activations),
* a tangent pass propagating a directional derivative ``Jv`` alongside the
  primal states (forward mode),
* an optional pullback pass mapping the tangent output back through the
  transposed layers, producing ``J^T (Jv)`` (reverse mode on top of the
  tangent).

All three are recorded as nodes of one tape (:class:`DualTrace`), so a single
standard reverse sweep (:func:`backward`) yields exact parameter gradients of
any scalar built from the primal output, the tangent output, or the pullback
output. That is enough to train objectives containing ``||Jv||^2`` and
``||J^T J v||^2`` without nested autodiff machinery.

States are batched row-wise: a (B, d) array holds B independent inputs.
Public entry points also accept single vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")

CHECKPOINT_FORMAT_VERSION = 1


def _act(name: str, a: np.ndarray, slope: float) -> np.ndarray:
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "leaky_relu":
        return np.where(a > 0.0, a, slope * a)
    if name == "tanh":
        return np.tanh(a)
    if name == "identity":
        return a
    raise ValueError(f"unknown activation {name!r}")


def _dact(name: str, a: np.ndarray, slope: float) -> np.ndarray:
    # Derivative w.r.t. the pre-activation. The ReLU kink at 0 uses the
    # zero-side subgradient.
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(a > 0.0, 1.0, slope)
    if name == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    if name == "identity":
        return np.ones_like(a)
    raise ValueError(f"unknown activation {name!r}")


def _ddact(name: str, a: np.ndarray, slope: float) -> np.ndarray | None:
    # Second derivative; None means identically zero (piecewise-linear).
    if name == "tanh":
        t = np.tanh(a)
        return -2.0 * t * (1.0 - t * t)
    if name in ("relu", "leaky_relu", "identity"):
        return None
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str
    slope: float = 0.01  # leaky_relu only

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("layer weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match weight rows {self.weight.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")


@dataclass
class Mlp:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValueError(
                    f"layer dimensions do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [l.weight.shape[0] for l in self.layers]

    def copy(self) -> "Mlp":
        return Mlp(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation, l.slope) for l in self.layers]
        )


@dataclass
class ParamGradient:
    """Gradient arrays shape-congruent with an Mlp's parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: Mlp) -> "ParamGradient":
        return cls(
            [np.zeros_like(l.weight) for l in net.layers],
            [np.zeros_like(l.bias) for l in net.layers],
        )

    def add_scaled(self, other: "ParamGradient", scale: float = 1.0) -> "ParamGradient":
        for gw, ow in zip(self.weights, other.weights):
            gw += scale * ow
        for gb, ob in zip(self.biases, other.biases):
            gb += scale * ob
        return self


@dataclass
class DualTrace:
    """Recorded states of one primal / tangent / pullback evaluation.

    ``pre[k]`` and ``out[k]`` are the pre-activation and activation output of
    layer k; tangent and pullback lists are present only when the
    corresponding sweep ran. All entries are (B, dim) arrays.
    """

    x0: np.ndarray
    pre: list[np.ndarray]
    out: list[np.ndarray]
    v0: np.ndarray | None = None
    tan_pre: list[np.ndarray] | None = None
    tan_out: list[np.ndarray] | None = None
    pull_states: list[np.ndarray] | None = None  # u_k, index k = 0..L (u_L = Jv, u_0 = J^T Jv)
    pull_pre: list[np.ndarray] | None = None  # p_k = phi'(a_k) * u_k, index k-1

    @property
    def batch(self) -> int:
        return self.x0.shape[0]


@dataclass
class ScalarRecord:
    """A scalar computed from recorded sweeps, with its output adjoints.

    ``out_grad``, ``tan_grad`` and ``pull_grad`` are the partial derivatives
    of the scalar w.r.t. the primal output, the tangent output ``Jv`` and the
    pullback output ``J^T(Jv)``; leave them ``None`` when the scalar does not
    touch that output.
    """

    value: float
    trace: DualTrace | None
    out_grad: np.ndarray | None = None
    tan_grad: np.ndarray | None = None
    pull_grad: np.ndarray | None = None


@dataclass
class JvpResult:
    y: np.ndarray
    jv: np.ndarray
    pullback: np.ndarray | None
    trace: DualTrace


def init(dims: list[int], activations: list[str], seed: int) -> Mlp:
    """He-initialized (ReLU-family) or Glorot-initialized (smooth) network.

    Biases start at zero; deterministic for a given seed.
    """
    if len(dims) < 2:
        raise ValueError("dims needs at least an input and an output size")
    if len(activations) != len(dims) - 1:
        raise ValueError(
            f"expected {len(dims) - 1} activations for {len(dims)} dims, got {len(activations)}"
        )
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        if act in ("relu", "leaky_relu"):
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(2.0 / (fan_in + fan_out))
        w = rng.normal(0.0, std, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return Mlp(layers)


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != dim:
        raise ValueError(f"{what} must have length {dim}, got shape {np.shape(x)}")
    return a, single


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Evaluate the network; accepts a vector or a (B, in_dim) batch."""
    a, single = _as_batch(x, net.in_dim, "input")
    for layer in net.layers:
        a = _act(layer.activation, a @ layer.weight.T + layer.bias, layer.slope)
    return a[0] if single else a


def forward_tape(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, DualTrace]:
    """Forward pass recording per-layer states for a later reverse sweep."""
    xb, _ = _as_batch(x, net.in_dim, "input")
    pre, out = [], []
    cur = xb
    for layer in net.layers:
        a = cur @ layer.weight.T + layer.bias
        cur = _act(layer.activation, a, layer.slope)
        pre.append(a)
        out.append(cur)
    return cur, DualTrace(x0=xb, pre=pre, out=out)


def jvp(
    net: Mlp, z: np.ndarray, v: np.ndarray, *, with_pullback: bool = False
) -> JvpResult:
    """Primal output and directional derivative ``Jv`` at ``z``.

    With ``with_pullback=True`` the tangent output is additionally pulled
    back through the transposed layers, yielding ``J^T (J v)`` and recording
    the extra states on the tape.
    """
    zb, single = _as_batch(z, net.in_dim, "input")
    vb, vsingle = _as_batch(v, net.in_dim, "tangent")
    if zb.shape[0] != vb.shape[0]:
        raise ValueError("input and tangent batches differ in size")
    pre, out, tan_pre, tan_out = [], [], [], []
    dacts = []
    cur, tan = zb, vb
    for layer in net.layers:
        a = cur @ layer.weight.T + layer.bias
        t = tan @ layer.weight.T
        d = _dact(layer.activation, a, layer.slope)
        cur = _act(layer.activation, a, layer.slope)
        tan = d * t
        pre.append(a)
        out.append(cur)
        tan_pre.append(t)
        tan_out.append(tan)
        dacts.append(d)
    pull_states = pull_pre = None
    pulled = None
    if with_pullback:
        u = tan
        pull_states = [None] * (len(net.layers) + 1)
        pull_pre = [None] * len(net.layers)
        pull_states[len(net.layers)] = u
        for k in range(len(net.layers) - 1, -1, -1):
            p = dacts[k] * pull_states[k + 1]
            pull_pre[k] = p
            pull_states[k] = p @ net.layers[k].weight
        pulled = pull_states[0]
    trace = DualTrace(
        x0=zb,
        pre=pre,
        out=out,
        v0=vb,
        tan_pre=tan_pre,
        tan_out=tan_out,
        pull_states=pull_states,
        pull_pre=pull_pre,
    )
    if single and vsingle:
        return JvpResult(
            cur[0], tan[0], None if pulled is None else pulled[0], trace
        )
    return JvpResult(cur, tan, pulled, trace)


def vjp(net: Mlp, z: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Primal output and adjoint product ``J^T u`` at ``z``."""
    zb, single = _as_batch(z, net.in_dim, "input")
    ub, usingle = _as_batch(u, net.out_dim, "cotangent")
    if zb.shape[0] != ub.shape[0]:
        raise ValueError("input and cotangent batches differ in size")
    pre = []
    cur = zb
    for layer in net.layers:
        a = cur @ layer.weight.T + layer.bias
        pre.append(a)
        cur = _act(layer.activation, a, layer.slope)
    adj = ub
    for layer, a in zip(reversed(net.layers), reversed(pre)):
        adj = (_dact(layer.activation, a, layer.slope) * adj) @ layer.weight
    if single and usingle:
        return cur[0], adj[0]
    return cur, adj


def jacobian(net: Mlp, z: np.ndarray) -> np.ndarray:
    """Full (out_dim, in_dim) Jacobian at a single point, column by column."""
    zv = np.asarray(z, dtype=np.float64)
    if zv.ndim != 1 or zv.shape[0] != net.in_dim:
        raise ValueError(f"expected a single input of length {net.in_dim}")
    m = net.in_dim
    zb = np.repeat(zv[None, :], m, axis=0)
    res = jvp(net, zb, np.eye(m))
    return res.jv.T.copy()


def backward(
    net: Mlp,
    trace: DualTrace,
    out_grad: np.ndarray | None = None,
    tan_grad: np.ndarray | None = None,
    pull_grad: np.ndarray | None = None,
) -> tuple[ParamGradient, np.ndarray, np.ndarray | None]:
    """One reverse sweep over a recorded tape.

    The adjoints seed the scalar's derivative w.r.t. the primal output,
    tangent output and pullback output respectively. Returns parameter
    gradients, the gradient w.r.t. the primal input and (if a tangent sweep
    was recorded) w.r.t. the tangent input.
    """
    n_layers = len(net.layers)
    grads = ParamGradient.zeros_like(net)
    has_tan = trace.tan_out is not None
    if tan_grad is not None and not has_tan:
        raise ValueError("tangent adjoint given but the trace has no tangent sweep")
    if pull_grad is not None and trace.pull_states is None:
        raise ValueError("pullback adjoint given but the trace has no pullback sweep")

    dacts = [
        _dact(l.activation, a, l.slope) for l, a in zip(net.layers, trace.pre)
    ]
    ddacts = [
        _ddact(l.activation, a, l.slope) for l, a in zip(net.layers, trace.pre)
    ]

    # Extra pre-activation adjoints collected while reversing the pullback
    # chain (which itself ran from the last layer down to the first).
    extra_pre = [None] * n_layers
    g_tan_out = None
    if pull_grad is not None:
        g_u = np.asarray(pull_grad, dtype=np.float64)
        if g_u.ndim == 1:
            g_u = g_u[None, :]
        for k in range(n_layers):
            layer = net.layers[k]
            # u_{k-1} = p_k @ W_k
            grads.weights[k] += trace.pull_pre[k].T @ g_u
            g_p = g_u @ layer.weight.T
            # p_k = dact(a_k) * u_k
            g_u = dacts[k] * g_p
            if ddacts[k] is not None:
                extra_pre[k] = ddacts[k] * trace.pull_states[k + 1] * g_p
        g_tan_out = g_u  # flows into the tangent output s_L

    if tan_grad is not None:
        t = np.asarray(tan_grad, dtype=np.float64)
        if t.ndim == 1:
            t = t[None, :]
        g_tan_out = t if g_tan_out is None else g_tan_out + t

    g_x = None
    if out_grad is not None:
        g_x = np.asarray(out_grad, dtype=np.float64)
        if g_x.ndim == 1:
            g_x = g_x[None, :]
    g_s = g_tan_out

    batch = trace.batch
    for k in range(n_layers - 1, -1, -1):
        layer = net.layers[k]
        x_in = trace.x0 if k == 0 else trace.out[k - 1]
        g_a = extra_pre[k]
        if g_a is None:
            g_a = np.zeros((batch, layer.weight.shape[0]))
        if g_s is not None:
            # s_k = dact(a_k) * t_k ; t_k = s_{k-1} @ W_k^T
            g_t = dacts[k] * g_s
            if ddacts[k] is not None:
                g_a += ddacts[k] * trace.tan_pre[k] * g_s
            s_in = trace.v0 if k == 0 else trace.tan_out[k - 1]
            grads.weights[k] += g_t.T @ s_in
            g_s = g_t @ layer.weight
        if g_x is not None:
            g_a += dacts[k] * g_x
        grads.weights[k] += g_a.T @ x_in
        grads.biases[k] += g_a.sum(axis=0)
        g_x = g_a @ layer.weight
    return grads, g_x, g_s


def grad_scalar(net: Mlp, record: ScalarRecord) -> ParamGradient:
    """Parameter gradient of a recorded scalar (one reverse sweep)."""
    if record.trace is None:
        raise ValueError("scalar record has no recorded tape")
    grads, _, _ = backward(
        net,
        record.trace,
        out_grad=record.out_grad,
        tan_grad=record.tan_grad,
        pull_grad=record.pull_grad,
    )
    return grads


def to_dict(net: Mlp) -> dict:
    """JSON-ready description: dims, activation tags, row-major parameters."""
    return {
        "dims": net.dims,
        "activations": [l.activation for l in net.layers],
        "slopes": [l.slope for l in net.layers],
        "weights": [l.weight.tolist() for l in net.layers],
        "biases": [l.bias.tolist() for l in net.layers],
    }


def from_dict(obj: dict) -> Mlp:
    layers = [
        Layer(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64), act, slope)
        for w, b, act, slope in zip(
            obj["weights"], obj["biases"], obj["activations"], obj["slopes"]
        )
    ]
    net = Mlp(layers)
    if net.dims != list(obj["dims"]):
        raise ValueError(f"checkpoint dims {obj['dims']} do not match parameter shapes {net.dims}")
    return net


def save(net: Mlp, path: str | Path) -> None:
    payload = {"format_version": CHECKPOINT_FORMAT_VERSION, **to_dict(net)}
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load(path: str | Path) -> Mlp:
    obj = json.loads(Path(path).read_text())
    version = obj.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    return from_dict(obj)
