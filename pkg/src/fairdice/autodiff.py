"""Reverse-mode differentiation for fixed-topology MLPs, plus Adam.

The tape is static: a forward pass records pre-activations and hidden
outputs, and the backward pass walks them in reverse.  Two extra passes
support the critic's gradient penalty: ``input_gradient`` computes the
gradient of a scalar head with respect to the network input, and
``penalty_backward`` differentiates a function of that input gradient
with respect to the parameters (double backprop, written out by hand).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


class Head(str, Enum):
    CATEGORICAL = "categorical"
    SCALAR = "scalar"


class NonFiniteError(FloatingPointError):
    """Raised when a forward/backward pass produces NaN or inf."""

    def __init__(self, message: str, layer: int | None = None):
        where = "" if layer is None else f" at layer {layer}"
        super().__init__(f"{message}{where}")
        self.layer = layer


@dataclass
class Tensor:
    """A parameter array and its (optional) gradient."""

    values: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.grad is not None and np.shape(self.grad) != self.values.shape:
            raise ValueError(f"gradient shape {np.shape(self.grad)} != value shape {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including input and output, e.g. (35, 64, 64, 7)."""

    widths: tuple[int, ...]
    activation: Activation = Activation.RELU
    head: Head = Head.CATEGORICAL
    gain: float = math.sqrt(2.0)
    out_gain: float | None = None

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer (input and output widths)")
        if any(int(w) < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.head is Head.SCALAR and self.widths[-1] != 1:
            raise ValueError("a scalar head needs output width 1")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "head", Head(self.head))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def orthogonal_init(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal (rows, cols) matrix scaled by ``gain``.

    QR of a Gaussian matrix with the sign of R's diagonal folded into Q, so
    the result is Haar-distributed.
    """
    if rows < 1 or cols < 1:
        raise ValueError("orthogonal_init needs rows, cols >= 1")
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    if rows < cols:
        q = q.T
    return gain * q


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> list[Tensor]:
    """[W1, b1, W2, b2, ...] with orthogonal weights and zero biases."""
    params = []
    for layer, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        last = layer == spec.n_layers - 1
        gain = spec.out_gain if (last and spec.out_gain is not None) else spec.gain
        params.append(Tensor(orthogonal_init(fan_in, fan_out, gain, rng)))
        params.append(Tensor(np.zeros(fan_out)))
    return params


def _act(kind: Activation, z):
    return np.maximum(z, 0.0) if kind is Activation.RELU else np.tanh(z)


def _act_prime(kind: Activation, z, h):
    # ReLU'(0) = 0 by convention
    return (z > 0.0).astype(float) if kind is Activation.RELU else 1.0 - h * h


def _act_second(kind: Activation, z, h):
    return np.zeros_like(z) if kind is Activation.RELU else -2.0 * h * (1.0 - h * h)


@dataclass
class Tape:
    x: np.ndarray
    zs: list = field(default_factory=list)
    hs: list = field(default_factory=list)

    @property
    def out(self) -> np.ndarray:
        return self.zs[-1]


def forward(spec: MlpSpec, params: list[Tensor], x: np.ndarray) -> Tape:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise ValueError(f"input shape {x.shape} does not match input width {spec.widths[0]}")
    if len(params) != 2 * spec.n_layers:
        raise ValueError("parameter list does not match the spec")
    tape = Tape(x)
    h = x
    for layer in range(spec.n_layers):
        W, b = params[2 * layer].values, params[2 * layer + 1].values
        if W.shape != (spec.widths[layer], spec.widths[layer + 1]):
            raise ValueError(f"layer {layer} weight shape {W.shape} does not match the spec")
        z = h @ W + b
        tape.zs.append(z)
        if layer < spec.n_layers - 1:
            h = _act(spec.activation, z)
            tape.hs.append(h)
    return tape


def _first_nonfinite_layer(tape: Tape) -> int:
    for layer, z in enumerate(tape.zs):
        if not np.all(np.isfinite(z)):
            return layer
    return len(tape.zs) - 1


def backward(spec: MlpSpec, params: list[Tensor], tape: Tape, d_out: np.ndarray,
             d_z_extra: list | None = None, accumulate: bool = False) -> np.ndarray:
    """Backprop ``d_out`` (gradient w.r.t. the head output) into ``params[i].grad``.

    ``d_z_extra[l]`` optionally injects additional gradient at pre-activation
    ``l`` (used by the penalty's double backprop).  Returns the gradient with
    respect to the input.
    """
    if not accumulate:
        for p in params:
            p.zero_grad()
    dz = np.asarray(d_out, dtype=float)
    for layer in range(spec.n_layers - 1, -1, -1):
        if d_z_extra is not None and d_z_extra[layer] is not None:
            dz = dz + d_z_extra[layer]
        h_in = tape.x if layer == 0 else tape.hs[layer - 1]
        W = params[2 * layer].values
        params[2 * layer].grad += h_in.T @ dz
        params[2 * layer + 1].grad += dz.sum(axis=0)
        dh = dz @ W.T
        if layer > 0:
            dz = dh * _act_prime(spec.activation, tape.zs[layer - 1], tape.hs[layer - 1])
    return dh


def forward_backward(spec: MlpSpec, params: list[Tensor], x: np.ndarray, loss_head):
    """Run the net, apply ``loss_head(out) -> (loss, d_out)``, backprop.

    Gradients land in each parameter's ``grad``.  A non-finite loss raises
    ``NonFiniteError`` naming the first layer whose output went bad.
    """
    tape = forward(spec, params, x)
    loss, d_out = loss_head(tape.out)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss", _first_nonfinite_layer(tape))
    backward(spec, params, tape, d_out)
    return float(loss), params


def input_gradient(spec: MlpSpec, params: list[Tensor], tape: Tape):
    """Gradient of a scalar head w.r.t. each input row.

    Returns (grad_x, deltas) where ``deltas[l]`` is d out / d z_l per row,
    kept for ``penalty_backward``.
    """
    if spec.widths[-1] != 1:
        raise ValueError("input gradients need a scalar head")
    B = tape.x.shape[0]
    deltas = [None] * spec.n_layers
    delta = np.ones((B, 1))
    for layer in range(spec.n_layers - 1, -1, -1):
        deltas[layer] = delta
        u = delta @ params[2 * layer].values.T
        if layer > 0:
            delta = u * _act_prime(spec.activation, tape.zs[layer - 1], tape.hs[layer - 1])
    return u, deltas


def penalty_backward(spec: MlpSpec, params: list[Tensor], tape: Tape, deltas, d_grad_x: np.ndarray) -> None:
    """Accumulate into ``params[i].grad`` the gradient of P(grad_x) given dP/d grad_x.

    The input gradient is u_1 = delta_1 W_1^T with delta_l = (delta_{l+1} W_{l+1}^T)
    * act'(z_l).  Walking that chain forward gives the weight terms
    directly and, through act'', extra gradient at every pre-activation,
    which a regular backward pass then pushes into all earlier layers.
    """
    L = spec.n_layers
    dz_extra = [None] * L
    u_bar = np.asarray(d_grad_x, dtype=float)
    for layer in range(L):
        W = params[2 * layer]
        delta = deltas[layer]
        W.grad += u_bar.T @ delta
        delta_bar = u_bar @ W.values
        if layer == L - 1:
            break
        z, h = tape.zs[layer], tape.hs[layer]
        u_next = deltas[layer + 1] @ params[2 * (layer + 1)].values.T
        dz_extra[layer] = delta_bar * u_next * _act_second(spec.activation, z, h)
        u_bar = delta_bar * _act_prime(spec.activation, z, h)
    if any(d is not None and np.any(d != 0.0) for d in dz_extra):
        zero_out = np.zeros_like(tape.out)
        backward(spec, params, tape, zero_out, d_z_extra=dz_extra, accumulate=True)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def categorical_log_prob(logits: np.ndarray, actions: np.ndarray):
    """log pi(a|s) per row and its Jacobian-vector helper.

    Returns (logp, backprop) where ``backprop(d_logp)`` gives the gradient
    with respect to the logits.
    """
    lp = log_softmax(logits)
    rows = np.arange(len(actions))
    logp = lp[rows, actions]
    probs = np.exp(lp)

    def backprop(d_logp):
        d = -probs * d_logp[:, None]
        d[rows, actions] += d_logp
        return d

    return logp, backprop


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Schedule(str, Enum):
    CONSTANT = "constant"
    COSINE_TO_ZERO = "cosine"


@dataclass
class AdamState:
    lr: float
    shapes: list
    schedule: Schedule = Schedule.CONSTANT
    total_steps: int | None = None
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.schedule = Schedule(self.schedule)
        if self.schedule is Schedule.COSINE_TO_ZERO and not self.total_steps:
            raise ValueError("a cosine schedule needs total_steps")
        if not self.m:
            self.m = [np.zeros(s) for s in self.shapes]
            self.v = [np.zeros(s) for s in self.shapes]

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float, **kw) -> "AdamState":
        return cls(lr=lr, shapes=[p.shape for p in params], **kw)

    def lr_at(self, step: int) -> float:
        if self.schedule is Schedule.CONSTANT:
            return self.lr
        frac = min(step, self.total_steps) / self.total_steps
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * frac))


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray] | None = None) -> list[Tensor]:
    """One in-place Adam update; ``grads`` defaults to each parameter's ``grad``."""
    grads = [p.grad for p in params] if grads is None else grads
    if len(grads) != len(state.m):
        raise ValueError("parameter count does not match optimizer state")
    for g, m in zip(grads, state.m):
        if np.shape(g) != m.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to Adam")
    lr = state.lr_at(state.step)
    state.step += 1
    c1 = 1.0 - state.b1 ** state.step
    c2 = 1.0 - state.b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.b1
        m += (1.0 - state.b1) * g
        v *= state.b2
        v += (1.0 - state.b2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def flatten(params: list[Tensor]) -> np.ndarray:
    return np.concatenate([p.values.ravel() for p in params])


def flat_grad(params: list[Tensor]) -> np.ndarray:
    return np.concatenate([p.grad.ravel() for p in params])
