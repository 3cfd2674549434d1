"""Small reverse-mode autodiff over numpy arrays.

Only what the skill-step model needs: dense layers, tanh, elementwise
arithmetic with broadcasting, reductions, concatenation, diagonal Gaussian
heads and Adam. Tensors carry their own dtype so the same graph code runs in
float32 for training and float64 inside finite-difference checks.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float32
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class ConfigurationError(ValueError):
    """Raised when shapes or parameter structures do not line up."""


class UsageError(ValueError):
    """Raised when an operation is called with arguments it cannot accept."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, cut from the graph."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- graph construction ----------------------------------------------
    def _make(self, data, parents, backward) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, True, parents, backward)

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        out_shape_self, out_shape_other = self.shape, other.shape

        def backward(g):
            return (_unbroadcast(g, out_shape_self), _unbroadcast(g, out_shape_other))

        return self._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))

        return self._make(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape))

        return self._make(a / b, (self, other), backward)

    def __matmul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ConfigurationError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ConfigurationError(f"matmul shape mismatch {a.shape} @ {b.shape}")

        def backward(g):
            return (g @ b.T, a.T @ g)

        return self._make(a @ b, (self, other), backward)

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        basic = _is_basic_index(idx)

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return self._make(self.data[idx], (self,), backward)

    def square(self) -> "Tensor":
        a = self.data
        return self._make(a * a, (self,), lambda g: (2.0 * a * g,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return self._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return self._make(out, (self,), lambda g: (g * out,))

    def clip(self, lo: float, hi: float) -> "Tensor":
        a = self.data
        mask = ((a >= lo) & (a <= hi)).astype(a.dtype)
        return self._make(np.clip(a, lo, hi), (self,), lambda g: (g * mask,))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return self._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    # -- reverse pass -----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(x, dtype=DTYPE) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    needs = any(t.requires_grad for t in tensors)
    if not needs:
        return Tensor(out)
    return Tensor(out, True, tuple(tensors), backward)


# -- parameters --------------------------------------------------------------


class ParamSet:
    """Named parameter tensors in a fixed order, plus their Adam moments."""

    def __init__(self, tensors: "OrderedDict[str, np.ndarray] | None" = None):
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, arr in (tensors or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr: np.ndarray) -> None:
        t = Tensor(np.array(arr), requires_grad=True)
        self.tensors[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def detached(self) -> "ParamSet":
        """View whose tensors share data but never receive gradient."""
        out = ParamSet.__new__(ParamSet)
        out.tensors = OrderedDict((k, Tensor(t.data)) for k, t in self.tensors.items())
        out.m, out.v, out.step = self.m, self.v, self.step
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet(OrderedDict((k, t.data.astype(dtype)) for k, t in self.tensors.items()))
        out.m = {k: a.astype(dtype) for k, a in self.m.items()}
        out.v = {k: a.astype(dtype) for k, a in self.v.items()}
        out.step = self.step
        return out

    def copy(self) -> "ParamSet":
        return self.astype(self.dtype)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per tensor; tensors the loss never reached get zeros."""
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.tensors.items()
        }

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def same_structure(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(self[k].shape == other[k].shape for k in self.tensors)


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False,
             dtype=DTYPE) -> ParamSet:
    """Glorot-uniform dense stack ``sizes[0] -> ... -> sizes[-1]``."""
    if len(sizes) < 2:
        raise ConfigurationError("an MLP needs at least input and output widths")
    params = ParamSet()
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero_last and i == n_layers - 1:
            w = np.zeros((fan_in, fan_out), dtype=dtype)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
        params.add(f"l{i}.w", w)
        params.add(f"l{i}.b", np.zeros(fan_out, dtype=dtype))
    return params


def mlp_forward(params: ParamSet, x) -> Tensor:
    """tanh hidden layers, linear output. Accepts a vector or a batch of rows."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=params.dtype))
    squeeze = x.data.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    n_layers = len(params) // 2
    if x.shape[-1] != params["l0.w"].shape[0]:
        raise ConfigurationError(
            f"input width {x.shape[-1]} does not match first layer {params['l0.w'].shape[0]}"
        )
    h = x
    for i in range(n_layers):
        h = h @ params[f"l{i}.w"] + params[f"l{i}.b"]
        if i < n_layers - 1:
            h = h.tanh()
    if squeeze:
        h = h.reshape(-1)
    return h


# -- Gaussians ---------------------------------------------------------------


@dataclass
class DiagGaussian:
    mean: Tensor
    log_std: Tensor

    @classmethod
    def from_head(cls, out: Tensor) -> "DiagGaussian":
        """Split a ``2*d`` head into mean and clamped log-std."""
        d = out.shape[-1] // 2
        return cls(out[..., :d], out[..., d:].clip(LOG_STD_MIN, LOG_STD_MAX))

    @classmethod
    def standard(cls, shape, dtype=DTYPE) -> "DiagGaussian":
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))

    @property
    def std(self) -> Tensor:
        return self.log_std.exp()

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_std.detach())


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise UsageError(f"KL dimension mismatch: {q.mean.shape[-1]} vs {p.mean.shape[-1]}")
    var_q = (q.log_std * 2.0).exp()
    inv_var_p = (p.log_std * -2.0).exp()
    diff = q.mean - p.mean
    per_dim = p.log_std - q.log_std + (var_q + diff.square()) * inv_var_p * 0.5 - 0.5
    return per_dim.sum(axis=-1)


def reparameterize(d: DiagGaussian, noise) -> Tensor:
    noise = np.asarray(noise, dtype=d.mean.dtype)
    if noise.shape[-1] != d.dim:
        raise UsageError(f"noise width {noise.shape[-1]} does not match Gaussian dim {d.dim}")
    return d.mean + d.std * noise


# -- optimisation ------------------------------------------------------------


def clip_grad_norm(grad_sets: Iterable[dict[str, np.ndarray]], max_norm: float) -> float:
    """Scale every gradient in place so the global L2 norm is at most ``max_norm``."""
    grad_sets = list(grad_sets)
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for gs in grad_sets for g in gs.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for gs in grad_sets:
            for k in gs:
                gs[k] = (gs[k] * scale).astype(gs[k].dtype)
    return total


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update; increments ``params.step``."""
    b1, b2 = betas
    params.step += 1
    t = params.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, tns in params.tensors.items():
        g = grads[name]
        if g.shape != tns.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {tns.shape} for {name}")
        dt = tns.data.dtype
        m = params.m[name]
        v = params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        tns.data = (tns.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(dt)


def ema_update(target: ParamSet, source: ParamSet, rate: float) -> None:
    """target <- (1 - rate) * target + rate * source, elementwise."""
    if not target.same_structure(source):
        raise ConfigurationError("EMA target and source differ in structure")
    for name, t in target.tensors.items():
        s = source[name].data
        t.data = ((1.0 - rate) * t.data + rate * s).astype(t.data.dtype)
