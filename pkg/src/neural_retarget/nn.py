"""Small coordinate-network substrate.

A fixed-topology MLP (positional encoding, LeakyReLU stack with one residual
connection, configurable head), hand-written reverse-mode gradients for both
parameters and inputs, and an Adam optimiser. Everything is plain numpy.
"""

from __future__ import annotations

import ctypes
import io
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numba
import numpy as np

ACTIVATIONS = ("sigmoid", "leaky-relu", "identity")


def _keep_heap_pages():
    # glibc returns every large temporary to the OS by default; refaulting those
    # pages costs more than the matmuls at our batch sizes
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


_keep_heap_pages()


class ConfigError(ValueError):
    """Parameters or inputs do not match the network configuration."""


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, term: str, message: str | None = None):
        self.term = term
        super().__init__(message or f"non-finite value in {term}")


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    hidden_channels: int = 64
    hidden_layers: int = 4
    encoding_bands: int = 8
    output_dim: int = 1
    output_activation: str = "identity"
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError("input_dim and output_dim must be >= 1")
        if self.hidden_channels < 1:
            raise ConfigError("hidden_channels must be >= 1")
        if self.hidden_layers < 2:
            raise ConfigError("hidden_layers must be >= 2 for the residual skip")
        if self.encoding_bands < 0:
            raise ConfigError("encoding_bands must be >= 0")
        if self.output_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    @property
    def encoded_dim(self) -> int:
        return self.input_dim * (1 + 2 * self.encoding_bands)

    @property
    def residual_target(self) -> int:
        # index of the hidden layer whose output receives the first layer's output
        return max(1, self.hidden_layers - 2)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hidden_channels
        out = {"W0": (self.encoded_dim, h), "b0": (h,)}
        for i in range(1, self.hidden_layers):
            out[f"W{i}"] = (h, h)
            out[f"b{i}"] = (h,)
        out["Wout"] = (h, self.output_dim)
        out["bout"] = (self.output_dim,)
        return out


def positional_encode(p, bands: int) -> np.ndarray:
    """Lift coordinates to ``[p, sin(2^k pi p), cos(2^k pi p)]`` features.

    ``p`` has shape ``(..., d)``; the result has shape ``(..., d * (1 + 2 * bands))``
    and is ordered ``p`` first, then for each band k the sines of all coordinates
    followed by the cosines of all coordinates.
    """
    p = np.asarray(p)
    if not np.issubdtype(p.dtype, np.floating):
        p = p.astype(np.float64)
    feats = [p]
    for k in range(bands):
        arg = p * ((2.0**k) * np.pi)
        feats.append(np.sin(arg))
        feats.append(np.cos(arg))
    return np.concatenate(feats, axis=-1)


def _encode_backward(p: np.ndarray, bands: int, g: np.ndarray) -> np.ndarray:
    d = p.shape[-1]
    gp = g[..., :d].copy()
    for k in range(bands):
        f = (2.0**k) * np.pi
        arg = p * f
        gs = g[..., d * (1 + 2 * k): d * (2 + 2 * k)]
        gc = g[..., d * (2 + 2 * k): d * (3 + 2 * k)]
        gp += f * (gs * np.cos(arg) - gc * np.sin(arg))
    return gp


@numba.njit(cache=True)
def _bias_leaky_(z, b, s):
    # in place: z <- leaky(z + b)
    n, m = z.shape
    for i in range(n):
        for j in range(m):
            v = z[i, j] + b[j]
            z[i, j] = v if v > 0 else s * v


@numba.njit(cache=True)
def _leaky_grad(a, dh, s):
    # a is the activation output; sign(a) == sign(pre-activation) for s > 0
    n, m = a.shape
    out = np.empty_like(dh)
    for i in range(n):
        for j in range(m):
            out[i, j] = dh[i, j] if a[i, j] > 0 else s * dh[i, j]
    return out


def _sigmoid(z):
    # split on sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class MLP:
    """Coordinate MLP with a residual connection.

    Topology for ``hidden_layers = L``::

        a  = encode(x)
        h0 = leaky(a W0 + b0)
        hi = leaky(h(i-1) Wi + bi)            i = 1 .. L-1
        h(r) += h0                            r = max(1, L-2)
        y  = head(h(L-1) Wout + bout)

    ``params`` is a dict of arrays; the dtype of ``W0`` decides the compute dtype.
    """

    def __init__(self, config: NetworkConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self._check()

    @classmethod
    def init(cls, config: NetworkConfig, seed=0, dtype=np.float32) -> "MLP":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params = {}
        for name, shape in config.shapes().items():
            fan_in = shape[0] if name.startswith("W") else config.shapes()["W" + name[1:]][0]
            bound = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: NetworkConfig, dtype=np.float32) -> "MLP":
        return cls(config, {k: np.zeros(s, dtype) for k, s in config.shapes().items()})

    def _check(self):
        shapes = self.config.shapes()
        if set(shapes) != set(self.params):
            raise ConfigError(f"parameter names {sorted(self.params)} do not match config")
        for k, s in shapes.items():
            if self.params[k].shape != s:
                raise ConfigError(f"{k} has shape {self.params[k].shape}, expected {s}")

    @property
    def dtype(self):
        return self.params["W0"].dtype

    def copy(self) -> "MLP":
        return MLP(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def _act(self, z):
        s = self.config.leaky_slope
        return np.maximum(z, s * z)

    def _head(self, z):
        a = self.config.output_activation
        if a == "sigmoid":
            return _sigmoid(z)
        if a == "leaky-relu":
            return self._act(z)
        return z

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)

    def forward(self, x) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_cached(self, x):
        cfg, P = self.config, self.params
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ConfigError(f"expected input of shape (n, {cfg.input_dim}), got {x.shape}")
        s = self.dtype.type(cfg.leaky_slope)
        enc = positional_encode(x, cfg.encoding_bands).astype(self.dtype, copy=False)
        # ins[i] feeds layer i; acts[i] is leaky output of layer i before any residual add
        ins, acts = [enc], []
        h = enc
        for i in range(cfg.hidden_layers):
            a = h @ P[f"W{i}"]
            _bias_leaky_(a, P[f"b{i}"], s)
            acts.append(a)
            h = a + acts[0] if i == cfg.residual_target else a
            ins.append(h)
        zo = h @ P["Wout"]
        zo += P["bout"]
        y = self._head(zo)
        return y, (x, ins, acts, zo, y)

    def backward(self, cache, dy, param_grads: bool = True, input_grad: bool = True):
        """Propagate ``dy = dL/dy`` back through the network.

        Returns ``(grads, dx)``; either may be None when not requested.
        """
        cfg, P = self.config, self.params
        x, ins, acts, zo, y = cache
        s = self.dtype.type(cfg.leaky_slope)
        dy = np.asarray(dy, dtype=self.dtype)
        if dy.shape != y.shape:
            raise ConfigError(f"dy has shape {dy.shape}, expected {y.shape}")
        head = cfg.output_activation
        if head == "sigmoid":
            dz = dy * y * (1.0 - y)
        elif head == "leaky-relu":
            dz = np.where(zo > 0, dy, s * dy)
        else:
            dz = dy
        grads = {} if param_grads else None
        if param_grads:
            grads["Wout"] = ins[-1].T @ dz
            grads["bout"] = dz.sum(axis=0)
        dh = dz @ P["Wout"].T
        r = cfg.residual_target
        dres = None
        for i in range(cfg.hidden_layers - 1, -1, -1):
            if i == r:
                dres = dh
            if i == 0 and dres is not None:
                dh = dh + dres
            dz = _leaky_grad(acts[i], dh, s)
            if param_grads:
                grads[f"W{i}"] = ins[i].T @ dz
                grads[f"b{i}"] = dz.sum(axis=0)
            if i > 0 or input_grad:
                dh = dz @ P[f"W{i}"].T
        dx = _encode_backward(x, cfg.encoding_bands, dh) if input_grad else None
        return grads, dx

    def input_gradient(self, x, dy=None) -> np.ndarray:
        """Vector-Jacobian product w.r.t. inputs (default ``dy`` = ones)."""
        y, cache = self.forward_cached(x)
        if dy is None:
            dy = np.ones_like(y)
        return self.backward(cache, dy, param_grads=False)[1]


def gradient(net: MLP, x, loss_tail: Callable[[np.ndarray], tuple[float, np.ndarray]]):
    """Loss value, parameter gradients and input gradients of ``loss_tail(net(x))``.

    ``loss_tail`` maps the network output to ``(loss, dloss/doutput)``.
    """
    y, cache = net.forward_cached(x)
    loss, dy = loss_tail(y)
    if not np.isfinite(loss):
        raise NumericError("loss")
    grads, dx = net.backward(cache, dy)
    return float(loss), grads, dx


def mse_tail(target: np.ndarray):
    target = np.asarray(target)

    def tail(y):
        diff = y - target
        return float(np.mean(diff.astype(np.float64) ** 2)), (2.0 / diff.size) * diff

    return tail


class Adam:
    """Adam with bias correction; no weight decay and no schedule."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"gradient[{k}]")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def fit(net: MLP, x, target, iterations: int, lr: float = 0.001, batch: int | None = None,
        seed=0, opt: Adam | None = None, log_every: int = 0, name: str = "fit") -> list[float]:
    """Minimise MSE between ``net(x)`` and ``target`` with Adam.

    Full batch unless ``batch`` is given, in which case each iteration draws
    ``batch`` rows without replacement from a seeded generator.
    """
    x = np.asarray(x, dtype=net.dtype)
    target = np.asarray(target, dtype=net.dtype).reshape(len(x), -1)
    opt = opt or Adam(lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for it in range(iterations):
        if batch is not None and batch < len(x):
            idx = rng.choice(len(x), size=batch, replace=False)
            xb, tb = x[idx], target[idx]
        else:
            xb, tb = x, target
        loss, grads, _ = _gradient_no_input(net, xb, mse_tail(tb))
        if not np.isfinite(loss):
            raise NumericError(name, f"{name} diverged at iteration {it}")
        opt.step(net.params, grads)
        losses.append(loss)
    return losses


def _gradient_no_input(net, x, tail):
    y, cache = net.forward_cached(x)
    loss, dy = tail(y)
    if not np.isfinite(loss):
        return loss, None, None
    grads, _ = net.backward(cache, dy, input_grad=False)
    return loss, grads, None


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(net: MLP, path, meta: dict | None = None) -> None:
    """Write a JSON header line followed by little-endian float32 parameters."""
    names = list(net.config.shapes())
    header = {
        "format": "mlp-f32le",
        "config": asdict(net.config),
        "shapes": [[k, list(net.params[k].shape)] for k in names],
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for k in names:
        buf.write(np.ascontiguousarray(net.params[k], dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[MLP, dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    if header.get("format") != "mlp-f32le":
        raise ConfigError(f"{path}: not an MLP checkpoint")
    config = NetworkConfig(**header["config"])
    data = np.frombuffer(raw[nl + 1:], dtype="<f4")
    params, off = {}, 0
    for name, shape in header["shapes"]:
        n = int(np.prod(shape))
        params[name] = data[off:off + n].reshape(shape).astype(np.float32)
        off += n
    if off != data.size:
        raise ConfigError(f"{path}: {data.size - off} trailing values")
    return MLP(config, params), header["meta"]


def fit_sampled(net: MLP, sampler: Callable, iterations: int, opt: Adam | None = None, seed=0,
                name: str = "fit") -> list[float]:
    """Like :func:`fit` but draws a fresh ``(x, target)`` batch per iteration
    from ``sampler(rng)`` with a seeded generator."""
    opt = opt or Adam()
    rng = np.random.default_rng(seed)
    losses = []
    for it in range(iterations):
        x, target = sampler(rng)
        x = np.asarray(x, dtype=net.dtype)
        loss, grads, _ = _gradient_no_input(net, x, mse_tail(np.asarray(target, net.dtype).reshape(len(x), -1)))
        if not np.isfinite(loss):
            raise NumericError(name, f"{name} diverged at iteration {it}")
        opt.step(net.params, grads)
        losses.append(loss)
    return losses
