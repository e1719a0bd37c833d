"""Dense feed-forward networks with hand-written forward and reverse mode.

Everything is float64 and operates on a flat :class:`ParamVector`, so the
optimizers, curvature probes and finite-difference checks all see the same
parameter layout. Layer ``l`` computes ``a = h @ W.T + b`` with ``W`` of shape
``(out, in)``; hidden layers apply tanh or relu, the last layer is linear and
produces the logits.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, NumericalFailure, SpecError

log = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu")
INIT_SCHEMES = ("uniform-fan-in", "gaussian-scaled")
CHECKPOINT_MAGIC = b"CALC1"


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_layers: tuple[tuple[int, str], ...]
    num_classes: int
    init_seed: int = 0
    init_scheme: str = "uniform-fan-in"

    def __post_init__(self):
        # normalise lists coming from JSON into hashable tuples
        hidden = tuple((int(w), str(a)) for w, a in self.hidden_layers)
        object.__setattr__(self, "hidden_layers", hidden)
        if int(self.input_dim) < 1:
            raise SpecError(f"input_dim must be >= 1, got {self.input_dim}")
        if int(self.num_classes) < 2:
            raise SpecError(f"num_classes must be >= 2, got {self.num_classes}")
        for width, act in hidden:
            if width < 1:
                raise SpecError(f"hidden width must be >= 1, got {width}")
            if act not in ACTIVATIONS:
                raise SpecError(f"unknown activation {act!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise SpecError(f"unknown init_scheme {self.init_scheme!r}")
        if not 0 <= int(self.init_seed) < 2**64:
            raise SpecError("init_seed must be a 64-bit unsigned integer")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [w for w, _ in self.hidden_layers] + [self.num_classes]

    @property
    def activations(self) -> list[str]:
        return [a for _, a in self.hidden_layers]

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered ``(layer id, shape)`` descriptors: W0, b0, W1, b1, ..."""
        out = []
        w = self.widths
        for l in range(len(w) - 1):
            out.append((f"W{l}", (w[l + 1], w[l])))
            out.append((f"b{l}", (w[l + 1],)))
        return out

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout)

    def to_dict(self) -> dict:
        return {
            "input_dim": int(self.input_dim),
            "hidden_layers": [[w, a] for w, a in self.hidden_layers],
            "num_classes": int(self.num_classes),
            "init_seed": int(self.init_seed),
            "init_scheme": self.init_scheme,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=d["input_dim"],
            hidden_layers=tuple(tuple(x) for x in d.get("hidden_layers", ())),
            num_classes=d["num_classes"],
            init_seed=d.get("init_seed", 0),
            init_scheme=d.get("init_scheme", "uniform-fan-in"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class ParamVector:
    """Flat float64 parameter vector tied to the NetworkSpec that defines its layout."""

    values: np.ndarray
    spec: NetworkSpec

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.spec.num_params:
            raise DimensionError(
                f"parameter vector has length {self.values.size}, layout needs {self.spec.num_params}"
            )

    @property
    def layout(self):
        return self.spec.layout

    def __len__(self) -> int:
        return self.values.size

    def views(self) -> list[np.ndarray]:
        """Reshaped views into ``values``, one per layout entry (writes go through)."""
        out, offset = [], 0
        for _, shape in self.layout:
            size = int(np.prod(shape))
            out.append(self.values[offset:offset + size].reshape(shape))
            offset += size
        return out

    def blocks(self) -> list[tuple[np.ndarray, np.ndarray]]:
        v = self.views()
        return [(v[i], v[i + 1]) for i in range(0, len(v), 2)]

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.spec)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.spec)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass
class LogitBatch:
    logits: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.logits = np.atleast_2d(np.asarray(self.logits, dtype=np.float64))
        if not np.all(np.isfinite(self.logits)):
            raise NumericalFailure("logits contain non-finite values")
        self.labels = _check_labels(self.labels, self.logits.shape)


@dataclass
class ProbBatch:
    probs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-9):
            raise SpecError("probability rows must be nonnegative and sum to 1")
        self.labels = _check_labels(self.labels, self.probs.shape)

    @property
    def n(self) -> int:
        return self.probs.shape[0]


def _check_labels(labels, shape):
    if labels is None:
        return None
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != shape[0]:
        raise DimensionError(f"{labels.size} labels for {shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= shape[1]):
        raise SpecError(f"labels must lie in 0..{shape[1] - 1}")
    return labels


# ---------------------------------------------------------------------------
# initialisation and activations


def init_network(spec: NetworkSpec) -> ParamVector:
    rng = np.random.default_rng(int(spec.init_seed))
    params = ParamVector(np.zeros(spec.num_params), spec)
    w = spec.widths
    for l, (W, b) in enumerate(params.blocks()):
        fan_in = w[l]
        if spec.init_scheme == "uniform-fan-in":
            bound = 1.0 / np.sqrt(fan_in)
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        else:
            W[...] = rng.standard_normal(W.shape) / np.sqrt(fan_in)
            b[...] = 0.0
    return params


def _act(kind, a):
    return np.tanh(a) if kind == "tanh" else np.maximum(a, 0.0)


def _act_d1(kind, a, h):
    # relu'(0) := 0
    return 1.0 - h * h if kind == "tanh" else (a > 0).astype(np.float64)


def _act_d2(kind, a, h):
    return -2.0 * h * (1.0 - h * h) if kind == "tanh" else np.zeros_like(a)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class Trace:
    """Intermediate values kept by :func:`trace_forward` for the backward passes."""

    hs: list[np.ndarray]  # hs[l] is the input to layer l (hs[0] = X)
    pre: list[np.ndarray]  # pre-activations of the hidden layers
    logits: np.ndarray
    d1: list[np.ndarray] = field(default_factory=list)  # activation slopes at pre


def _as_inputs(params: ParamVector, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise DimensionError(f"inputs of shape {X.shape}, network expects (n, {params.spec.input_dim})")
    if not np.all(np.isfinite(X)):
        raise NumericalFailure("inputs contain non-finite values")
    return X


def trace_forward(params: ParamVector, X) -> Trace:
    X = _as_inputs(params, X)
    acts = params.spec.activations
    blocks = params.blocks()
    hs, pre, d1 = [X], [], []
    h = X
    for l, (W, b) in enumerate(blocks):
        a = h @ W.T + b
        if l == len(blocks) - 1:
            return Trace(hs, pre, a, d1)
        h = _act(acts[l], a)
        pre.append(a)
        d1.append(_act_d1(acts[l], a, h))
        hs.append(h)
    raise AssertionError("unreachable")


def logits(params: ParamVector, X) -> np.ndarray:
    return trace_forward(params, X).logits


def forward(params: ParamVector, inputs, labels=None) -> LogitBatch:
    return LogitBatch(logits(params, inputs), labels)


def softmax(z):
    """Row-wise softmax with max-subtraction.

    Accepts a :class:`LogitBatch` (returns a :class:`ProbBatch`) or a plain
    array (returns an array).
    """
    if isinstance(z, LogitBatch):
        return ProbBatch(softmax(z.logits), z.labels)
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericalFailure("softmax of non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def runner_up(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Index of the largest logit other than ``y`` (smallest index wins ties)."""
    z = np.atleast_2d(z)
    masked = z.copy()
    masked[np.arange(z.shape[0]), y] = -np.inf
    return np.argmax(masked, axis=1)  # argmax returns the first maximiser


def predicted_labels(z: np.ndarray) -> np.ndarray:
    return np.argmax(np.atleast_2d(z), axis=1)


def onehot(y: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((len(y), K))
    out[np.arange(len(y)), y] = 1.0
    return out


# ---------------------------------------------------------------------------
# reverse and forward mode


def backward(params: ParamVector, trace: Trace, G: np.ndarray, need_input: bool = False):
    """Pull ``G`` (n x K, adjoint of the logits) back through the network.

    Returns the parameter gradient summed over rows and, when requested, the
    per-row input adjoints (n x d).
    """
    blocks = params.blocks()
    grad = params.zeros_like()
    gviews = grad.views()
    delta = np.asarray(G, dtype=np.float64)
    dx = None
    for l in reversed(range(len(blocks))):
        W, _ = blocks[l]
        gviews[2 * l][...] = delta.T @ trace.hs[l]
        gviews[2 * l + 1][...] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ W) * trace.d1[l - 1]
        elif need_input:
            dx = delta @ W
    return grad, dx


def _jvp_trace(params: ParamVector, trace: Trace, v_params: ParamVector | None, v_input) -> np.ndarray:
    blocks = params.blocks()
    vblocks = v_params.blocks() if v_params is not None else None
    n = trace.logits.shape[0]
    dh = None if v_input is None else np.broadcast_to(np.asarray(v_input, dtype=np.float64), trace.hs[0].shape)
    da = None
    for l, (W, _) in enumerate(blocks):
        da = np.zeros((n, W.shape[0])) if dh is None else dh @ W.T
        if vblocks is not None:
            dW, db = vblocks[l]
            da = da + trace.hs[l] @ dW.T + db
        if l < len(blocks) - 1:
            dh = da * trace.d1[l]
    return da


def jvp(params: ParamVector, x, v_params: ParamVector | None = None, v_input=None) -> np.ndarray:
    """Directional derivative of the logits, ``J v``.

    ``v_params`` is a parameter-space direction, ``v_input`` an input-space
    direction; either or both may be given. Returns an (n x K) array for a
    batch, or a K-vector when ``x`` is a single example.
    """
    single = np.ndim(x) == 1
    trace = trace_forward(params, x)
    if v_input is not None and np.shape(v_input)[-1] != params.spec.input_dim:
        raise DimensionError("input direction has the wrong dimension")
    out = _jvp_trace(params, trace, v_params, v_input)
    return out[0] if single else out


def vjp(params: ParamVector, x, u) -> tuple[ParamVector, np.ndarray]:
    """Transposed Jacobian products ``J_theta^T u`` and ``J_x^T u``.

    The parameter pullback is summed over the batch; the input pullback is
    returned per row (a d-vector for a single example).
    """
    single = np.ndim(x) == 1
    trace = trace_forward(params, x)
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if u.shape != trace.logits.shape:
        raise DimensionError(f"cotangent of shape {u.shape}, logits are {trace.logits.shape}")
    grad, dx = backward(params, trace, u, need_input=True)
    return grad, (dx[0] if single else dx)


# ---------------------------------------------------------------------------
# gradients of losses and scalar heads


def logit_loss_grad(z: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    """Per-example gradient of CE or MSE with respect to the logits."""
    K = z.shape[1]
    if kind == "ce":
        return softmax(z) - onehot(y, K)
    if kind == "mse":
        return (2.0 / K) * (z - onehot(y, K))
    raise SpecError(f"unknown loss kind {kind!r}")


def grad_params(params: ParamVector, X, y, loss_kind="ce", bounded: bool = False) -> ParamVector:
    """Exact gradient of the mean batch loss.

    ``loss_kind`` is ``"ce"``, ``"mse"`` or a :class:`calcurve.lossfns.CalMOConfig`.
    """
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise DimensionError("empty batch")
    if not isinstance(loss_kind, str):
        from .lossfns import calmo_loss_and_grad

        _, g = calmo_loss_and_grad(params, X, y, loss_kind, bounded=bounded)
        return g
    trace = trace_forward(params, X)
    if trace.logits.shape[0] != y.size:
        raise DimensionError("labels and inputs disagree on batch size")
    G = logit_loss_grad(trace.logits, y, loss_kind) / y.size
    g, _ = backward(params, trace, G)
    if not g.is_finite():
        raise NumericalFailure("non-finite gradient")
    return g


def head_cotangent(z: np.ndarray, target: np.ndarray, head: str) -> np.ndarray:
    """d(head)/d(logits) per row for the scalar heads used on the input side."""
    n, K = z.shape
    rows = np.arange(n)
    c = np.zeros((n, K))
    if head == "margin":
        c[rows, target] = 1.0
        c[rows, runner_up(z, target)] -= 1.0
    elif head == "logit":
        c[rows, target] = 1.0
    elif head == "loss":
        c = softmax(z) - onehot(target, K)
    else:
        raise SpecError(f"unknown head {head!r}")
    return c


def input_gradients(params: ParamVector, X, target, head: str = "margin") -> np.ndarray:
    """Per-example gradient of a scalar head with respect to the input (n x d)."""
    trace = trace_forward(params, X)
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), (trace.logits.shape[0],))
    c = head_cotangent(trace.logits, target, head)
    _, dx = backward(params, trace, c, need_input=True)
    return dx


def grad_input(params: ParamVector, x, target: int, head: str = "margin") -> np.ndarray:
    """Gradient of ``margin(y)``, ``logit(k)`` or ``loss(y)`` at a single input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("grad_input expects a single d-vector")
    return input_gradients(params, x[None, :], [target], head)[0]


def smoothness_value_and_grad(params: ParamVector, X, y) -> tuple[np.ndarray, ParamVector]:
    """Per-example ``||grad_x m(x, y)||^2`` and the theta-gradient of their mean.

    The margin head is piecewise linear in the logits; its runner-up class is
    frozen at the evaluation point (a.e. exact). The theta-gradient is a
    reverse pass through the input-gradient computation itself.
    """
    spec = params.spec
    trace = trace_forward(params, X)
    n = trace.logits.shape[0]
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    blocks = params.blocks()
    L = len(blocks)
    acts = spec.activations
    if "relu" in acts and any(np.any(a == 0.0) for a in trace.pre):
        log.warning("relu pre-activation exactly at the kink; using subgradient 0")

    # input-gradient pass, keeping every intermediate
    u = [None] * L  # u[l]: adjoint of layer l pre-activation
    r = [None] * (L - 1)  # r[l]: adjoint of hidden output hs[l + 1]
    u[L - 1] = head_cotangent(trace.logits, y, "margin")
    for l in range(L - 1, 0, -1):
        r[l - 1] = u[l] @ blocks[l][0]
        u[l - 1] = trace.d1[l - 1] * r[l - 1]
    g = u[0] @ blocks[0][0]
    penalty = np.einsum("ij,ij->i", g, g)

    grad = params.zeros_like()
    gv = grad.views()
    g_bar = 2.0 * g / n
    gv[0][...] += u[0].T @ g_bar
    u_bar = g_bar @ blocks[0][0].T
    direct = [None] * (L - 1)  # pre-activation adjoints from the slope terms
    for l in range(L - 1):
        d2 = _act_d2(acts[l], trace.pre[l], trace.hs[l + 1])
        direct[l] = r[l] * u_bar * d2
        r_bar = trace.d1[l] * u_bar
        gv[2 * (l + 1)][...] += u[l + 1].T @ r_bar
        if l + 1 < L - 1:
            u_bar = r_bar @ blocks[l + 1][0].T
    # back through the primal forward pass; the logits themselves do not feed the penalty
    carry = None
    for l in range(L - 2, -1, -1):
        a_bar = direct[l] if carry is None else direct[l] + carry * trace.d1[l]
        gv[2 * l][...] += a_bar.T @ trace.hs[l]
        gv[2 * l + 1][...] += a_bar.sum(axis=0)
        carry = a_bar @ blocks[l][0]
    return penalty, grad


def second_order_smoothness_grad(params: ParamVector, x, y: int) -> ParamVector:
    """theta-gradient of ``||grad_x m_theta(x, y)||^2`` at a single example."""
    x = np.asarray(x, dtype=np.float64)
    _, g = smoothness_value_and_grad(params, x.reshape(1, -1), [y])
    return g


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParamVector) -> None:
    header = params.spec.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> ParamVector:
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a calcurve checkpoint")
    (hlen,) = struct.unpack("<I", data[5:9])
    spec = NetworkSpec.from_json(data[9:9 + hlen].decode("utf-8"))
    body = data[9 + hlen:]
    if len(body) != 8 * spec.num_params:
        raise FormatError(f"{path}: expected {spec.num_params} parameters, found {len(body) / 8}")
    return ParamVector(np.frombuffer(body, dtype="<f8").astype(np.float64), spec)
