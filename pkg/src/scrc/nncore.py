"""Dense numeric core: activations, an LSTM cell with exact analytic
gradients, and a momentum SGD optimizer with global-norm gradient clipping.

Tensors are plain numpy arrays (row-major). float32 is the training
precision; gradient verification runs everything in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError, TrainingError

DEFAULT_INIT_RADIUS = 0.08

GATE_NAMES = ("i", "f", "o", "g")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator: one seed, one reproducible draw sequence."""
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec shapes incompatible: {m.shape} @ {v.shape}")
    return m @ v


def sigmoid(x):
    # tanh-based form saturates cleanly instead of overflowing exp for |x| ~ 1e3
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def tanh_act(x):
    return np.tanh(x)


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeError(f"softmax expects a non-empty vector, got shape {logits.shape}")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeError(f"log_softmax expects a non-empty vector, got shape {logits.shape}")
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def init_uniform(rng: np.random.Generator, shape, radius: float = DEFAULT_INIT_RADIUS,
                 dtype=np.float32) -> np.ndarray:
    if radius <= 0:
        raise ConfigError(f"init radius must be positive, got {radius}")
    return rng.uniform(-radius, radius, size=shape).astype(dtype)


@dataclass
class ParamTensor:
    """A learnable array paired with its accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.grad.shape:
            raise ShapeError(
                f"{self.name}: value {self.value.shape} and grad {self.grad.shape} differ")

    @classmethod
    def zeros(cls, name: str, shape, dtype=np.float32) -> "ParamTensor":
        return cls(name, np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))

    @classmethod
    def uniform(cls, name: str, shape, rng: np.random.Generator,
                radius: float = DEFAULT_INIT_RADIUS, dtype=np.float32) -> "ParamTensor":
        return cls(name, init_uniform(rng, shape, radius, dtype), np.zeros(shape, dtype=dtype))

    def zero_grad(self):
        self.grad[...] = 0.0


class LstmParams:
    """Parameters of one LSTM unit.

    Gate pre-activations are W_x. x_t + W_h. h_{t-1} + b_. for the input,
    forget, output and candidate (g) gates; the cell update is
    c_t = f * c_{t-1} + i * g and the output h_t = o * tanh(c_t).
    """

    def __init__(self, W_xi, W_xf, W_xo, W_xg, W_hi, W_hf, W_ho, W_hg,
                 b_i, b_f, b_o, b_g):
        self.W_xi, self.W_xf, self.W_xo, self.W_xg = W_xi, W_xf, W_xo, W_xg
        self.W_hi, self.W_hf, self.W_ho, self.W_hg = W_hi, W_hf, W_ho, W_hg
        self.b_i, self.b_f, self.b_o, self.b_g = b_i, b_f, b_o, b_g
        hidden, input_dim = W_xi.value.shape
        for t in self.tensors():
            leaf = t.name.rsplit(".", 1)[-1]
            if leaf.startswith("W_x"):
                expect = (hidden, input_dim)
            elif leaf.startswith("W_h"):
                expect = (hidden, hidden)
            else:
                expect = (hidden,)
            if t.value.shape != expect:
                raise ShapeError(f"{t.name}: expected shape {expect}, got {t.value.shape}")

    @classmethod
    def init(cls, prefix: str, hidden_dim: int, input_dim: int, rng: np.random.Generator,
             radius: float = DEFAULT_INIT_RADIUS, dtype=np.float32) -> "LstmParams":
        """Uniform(-radius, radius) weights, zero biases. Draw order is fixed:
        W_xi, W_xf, W_xo, W_xg, then W_hi, W_hf, W_ho, W_hg."""
        def w(name, shape):
            return ParamTensor.uniform(f"{prefix}.{name}", shape, rng, radius, dtype)

        def b(name):
            return ParamTensor.zeros(f"{prefix}.{name}", (hidden_dim,), dtype)

        ws_x = [w(f"W_x{g}", (hidden_dim, input_dim)) for g in GATE_NAMES]
        ws_h = [w(f"W_h{g}", (hidden_dim, hidden_dim)) for g in GATE_NAMES]
        bs = [b(f"b_{g}") for g in GATE_NAMES]
        return cls(*ws_x, *ws_h, *bs)

    @classmethod
    def zeros(cls, prefix: str, hidden_dim: int, input_dim: int, dtype=np.float32) -> "LstmParams":
        def z(name, shape):
            return ParamTensor.zeros(f"{prefix}.{name}", shape, dtype)

        ws_x = [z(f"W_x{g}", (hidden_dim, input_dim)) for g in GATE_NAMES]
        ws_h = [z(f"W_h{g}", (hidden_dim, hidden_dim)) for g in GATE_NAMES]
        bs = [z(f"b_{g}", (hidden_dim,)) for g in GATE_NAMES]
        return cls(*ws_x, *ws_h, *bs)

    @property
    def hidden_dim(self) -> int:
        return self.W_xi.value.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_xi.value.shape[1]

    def tensors(self) -> list[ParamTensor]:
        return [self.W_xi, self.W_xf, self.W_xo, self.W_xg,
                self.W_hi, self.W_hf, self.W_ho, self.W_hg,
                self.b_i, self.b_f, self.b_o, self.b_g]


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int, dtype=np.float32) -> "LstmState":
        return cls(np.zeros(hidden_dim, dtype=dtype), np.zeros(hidden_dim, dtype=dtype))


@dataclass
class LstmStepCache:
    """Forward intermediates needed to backpropagate one step."""

    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray


def lstm_step(params: LstmParams, x: np.ndarray, prev: LstmState):
    """One forward step; returns the new state and the backprop cache."""
    if x.shape != (params.input_dim,):
        raise ShapeError(f"lstm input: expected ({params.input_dim},), got {x.shape}")
    if prev.h.shape != (params.hidden_dim,) or prev.c.shape != (params.hidden_dim,):
        raise ShapeError(
            f"lstm state: expected ({params.hidden_dim},), got h {prev.h.shape} c {prev.c.shape}")
    i = sigmoid(params.W_xi.value @ x + params.W_hi.value @ prev.h + params.b_i.value)
    f = sigmoid(params.W_xf.value @ x + params.W_hf.value @ prev.h + params.b_f.value)
    o = sigmoid(params.W_xo.value @ x + params.W_ho.value @ prev.h + params.b_o.value)
    g = np.tanh(params.W_xg.value @ x + params.W_hg.value @ prev.h + params.b_g.value)
    c = f * prev.c + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = LstmStepCache(x.copy(), prev.h.copy(), prev.c.copy(), i, f, o, g, c, tanh_c, h)
    return LstmState(h, c), cache


def lstm_step_backward(params: LstmParams, cache: LstmStepCache,
                       dh: np.ndarray, dc: np.ndarray):
    """Backpropagate one step.

    dh and dc are the loss gradients flowing into h_t and c_t. Parameter
    gradients accumulate into params; returns (dx, dh_prev, dc_prev).
    """
    hidden, input_dim = params.W_xi.value.shape
    if cache.x.shape != (input_dim,) or cache.h_prev.shape != (hidden,):
        raise ContractError(
            f"cache (input {cache.x.shape}, hidden {cache.h_prev.shape}) does not match "
            f"parameters (input ({input_dim},), hidden ({hidden},))")
    if dh.shape != (hidden,) or dc.shape != (hidden,):
        raise ShapeError(f"upstream grads must have shape ({hidden},)")

    o_pre = dh * cache.tanh_c * cache.o * (1.0 - cache.o)
    dc_total = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    i_pre = dc_total * cache.g * cache.i * (1.0 - cache.i)
    f_pre = dc_total * cache.c_prev * cache.f * (1.0 - cache.f)
    g_pre = dc_total * cache.i * (1.0 - cache.g ** 2)
    dc_prev = dc_total * cache.f

    for pre, W_x, W_h, b in ((i_pre, params.W_xi, params.W_hi, params.b_i),
                             (f_pre, params.W_xf, params.W_hf, params.b_f),
                             (o_pre, params.W_xo, params.W_ho, params.b_o),
                             (g_pre, params.W_xg, params.W_hg, params.b_g)):
        W_x.grad += np.outer(pre, cache.x)
        W_h.grad += np.outer(pre, cache.h_prev)
        b.grad += pre

    dx = (params.W_xi.value.T @ i_pre + params.W_xf.value.T @ f_pre
          + params.W_xo.value.T @ o_pre + params.W_xg.value.T @ g_pre)
    dh_prev = (params.W_hi.value.T @ i_pre + params.W_hf.value.T @ f_pre
               + params.W_ho.value.T @ o_pre + params.W_hg.value.T @ g_pre)
    return dx, dh_prev, dc_prev


def global_grad_norm(params: list[ParamTensor]) -> float:
    total = 0.0
    for p in params:
        total += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


class SgdOptimizer:
    """SGD with momentum and global-norm gradient clipping.

    step(): rescale all gradients if their global norm exceeds clip_norm,
    then per parameter v = momentum*v - lr*g; value += v; gradients are
    zeroed afterwards. clip_norm=inf disables clipping.
    """

    def __init__(self, params: list[ParamTensor], lr: float,
                 momentum: float = 0.9, clip_norm: float = 10.0):
        # lr = 0 is allowed as a degenerate no-op (useful for invariance tests)
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        if momentum < 0 or momentum >= 1:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        if clip_norm <= 0:
            raise ConfigError(f"clip norm must be positive, got {clip_norm}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in {p.name}")
        scale = 1.0
        if np.isfinite(self.clip_norm):
            norm = global_grad_norm(self.params)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, v in zip(self.params, self._velocity):
            v *= self.momentum
            v -= (self.lr * scale) * p.grad
            p.value += v
            p.grad[...] = 0.0
