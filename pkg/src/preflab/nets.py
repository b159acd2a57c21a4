"""Dense network substrate: MLPs with hand-rolled reverse-mode gradients.

Everything runs in float64. The supported family is fixed: stacks of dense
layers with optional batch normalization (applied between the affine map and
the activation) and one of five activations. That family covers every network
in this project, so no general autodiff graph is needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 1e-2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
COSINE_EPS = 1e-8

ACTIVATIONS = ("identity", "relu", "leaky_relu", "tanh", "sigmoid")


class ShapeError(ValueError):
    """Raised when array shapes do not match the network definition."""


class StateError(RuntimeError):
    """Raised when an operation needs state that was never recorded."""


def _apply_activation(name: str, h: np.ndarray) -> np.ndarray:
    if name == "identity":
        return h
    if name == "relu":
        return np.maximum(h, 0.0)
    if name == "leaky_relu":
        return np.where(h > 0.0, h, LEAKY_SLOPE * h)
    if name == "tanh":
        return np.tanh(h)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-h))
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, h: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Derivative of the activation w.r.t. its pre-activation input."""
    if name == "identity":
        return np.ones_like(h)
    if name == "relu":
        return (h > 0.0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(h > 0.0, 1.0, LEAKY_SLOPE)
    if name == "tanh":
        return 1.0 - out * out
    if name == "sigmoid":
        return out * (1.0 - out)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"
    bias: bool = True
    batch_norm: bool = False

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("layer dimensions must be positive")


class _Layer:
    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        self.spec = spec
        bound = 1.0 / np.sqrt(spec.in_dim)  # fan-in scaled uniform init
        self.w = rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim))
        self.b = rng.uniform(-bound, bound, size=spec.out_dim) if spec.bias else None
        if spec.batch_norm:
            self.gamma = np.ones(spec.out_dim)
            self.beta = np.zeros(spec.out_dim)
            self.running_mean = np.zeros(spec.out_dim)
            self.running_var = np.ones(spec.out_dim)
        else:
            self.gamma = self.beta = None
            self.running_mean = self.running_var = None

    def parameters(self) -> list[np.ndarray]:
        params = [self.w]
        if self.b is not None:
            params.append(self.b)
        if self.gamma is not None:
            params.extend([self.gamma, self.beta])
        return params


@dataclass
class GradientTape:
    """Per-parameter gradients aligned one-to-one with DenseNet.parameters()."""

    grads: list[np.ndarray] = field(default_factory=list)
    input_grad: np.ndarray | None = None

    def scaled(self, c: float) -> "GradientTape":
        return GradientTape(
            grads=[g * c for g in self.grads],
            input_grad=None if self.input_grad is None else self.input_grad * c,
        )

    def add_(self, other: "GradientTape") -> None:
        if len(self.grads) != len(other.grads):
            raise ShapeError("tape length mismatch")
        for g, o in zip(self.grads, other.grads):
            g += o


class DenseNet:
    """A stack of dense layers with cached forward state for backprop.

    forward(..., record=True) stores one in-flight activation trace; backward
    consumes it. Branches that must not contribute gradients (stop-gradient
    targets) are run with record=False.
    """

    def __init__(self, specs: list[LayerSpec], rng: np.random.Generator):
        for i in range(1, len(specs)):
            if specs[i].in_dim != specs[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} input width {specs[i].in_dim} does not chain with "
                    f"layer {i - 1} output width {specs[i - 1].out_dim}"
                )
        self.layers = [_Layer(s, rng) for s in specs]
        self._cache: list[dict] | None = None

    @property
    def in_dim(self) -> int:
        return self.layers[0].spec.in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].spec.out_dim

    def forward(self, x: np.ndarray, training: bool = False, record: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"layer 0 expects input width {self.in_dim}, got {x.shape[1]}")
        cache: list[dict] | None = [] if record else None
        out = x
        for i, layer in enumerate(self.layers):
            spec = layer.spec
            if out.shape[1] != spec.in_dim:
                raise ShapeError(f"layer {i} expects input width {spec.in_dim}, got {out.shape[1]}")
            entry: dict = {"x": out}
            h = out @ layer.w.T
            if layer.b is not None:
                h = h + layer.b
            if spec.batch_norm:
                if training:
                    if h.shape[0] < 2:
                        raise ShapeError(f"layer {i}: batch norm in training mode needs batch >= 2")
                    mean = h.mean(axis=0)
                    var = h.var(axis=0)
                    inv_std = 1.0 / np.sqrt(var + BN_EPS)
                    x_hat = (h - mean) * inv_std
                    n = h.shape[0]
                    layer.running_mean *= 1.0 - BN_MOMENTUM
                    layer.running_mean += BN_MOMENTUM * mean
                    layer.running_var *= 1.0 - BN_MOMENTUM
                    layer.running_var += BN_MOMENTUM * var * n / (n - 1)
                else:
                    inv_std = 1.0 / np.sqrt(layer.running_var + BN_EPS)
                    x_hat = (h - layer.running_mean) * inv_std
                entry.update(h_pre_bn=h, x_hat=x_hat, inv_std=inv_std, bn_training=training)
                h = layer.gamma * x_hat + layer.beta
            a = _apply_activation(spec.activation, h)
            entry.update(h=h, out=a)
            if cache is not None:
                cache.append(entry)
            out = a
        if record:
            self._cache = cache
        return out[0] if squeeze else out

    def backward(self, upstream: np.ndarray) -> GradientTape:
        """Backprop `upstream` (dL/d output) through the last recorded forward."""
        if self._cache is None:
            raise StateError("backward called without a recorded forward pass")
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.ndim == 1:
            upstream = upstream[None, :]
        cache = self._cache
        if upstream.shape != cache[-1]["out"].shape:
            raise ShapeError(
                f"upstream shape {upstream.shape} does not match recorded output "
                f"shape {cache[-1]['out'].shape}"
            )
        grads_rev: list[np.ndarray] = []
        da = upstream
        for i in range(len(self.layers) - 1, -1, -1):
            layer, entry = self.layers[i], cache[i]
            dh = da * _activation_grad(layer.spec.activation, entry["h"], entry["out"])
            layer_grads: list[np.ndarray] = []
            if layer.spec.batch_norm:
                dgamma = (dh * entry["x_hat"]).sum(axis=0)
                dbeta = dh.sum(axis=0)
                dx_hat = dh * layer.gamma
                if entry["bn_training"]:
                    n = dh.shape[0]
                    inv_std = entry["inv_std"]
                    x_hat = entry["x_hat"]
                    dh = (
                        inv_std
                        / n
                        * (n * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0))
                    )
                else:
                    dh = dx_hat * entry["inv_std"]
                layer_grads = [dgamma, dbeta]
            dw = dh.T @ entry["x"]
            if layer.b is not None:
                grads_rev.extend(reversed(layer_grads))
                grads_rev.append(dh.sum(axis=0))
            else:
                grads_rev.extend(reversed(layer_grads))
            grads_rev.append(dw)
            da = dh @ layer.w
        self._cache = None
        return GradientTape(grads=list(reversed(grads_rev)), input_grad=da)

    def parameters(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def zero_tape(self) -> GradientTape:
        return GradientTape(grads=[np.zeros_like(p) for p in self.parameters()])

    def copy_params_from(self, other: "DenseNet") -> None:
        mine, theirs = self.parameters(), other.parameters()
        if len(mine) != len(theirs):
            raise ShapeError("architecture mismatch: parameter count differs")
        for p, q in zip(mine, theirs):
            if p.shape != q.shape:
                raise ShapeError(f"architecture mismatch: {p.shape} vs {q.shape}")
            p[...] = q
        for la, lb in zip(self.layers, other.layers):
            if la.running_mean is not None:
                la.running_mean[...] = lb.running_mean
                la.running_var[...] = lb.running_var

    # -- checkpointing ------------------------------------------------------

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            s = layer.spec
            d = {
                "in_dim": s.in_dim,
                "out_dim": s.out_dim,
                "activation": s.activation,
                "bias": s.bias,
                "batch_norm": s.batch_norm,
                "w": layer.w.tolist(),
            }
            if layer.b is not None:
                d["b"] = layer.b.tolist()
            if s.batch_norm:
                d["gamma"] = layer.gamma.tolist()
                d["beta"] = layer.beta.tolist()
                d["running_mean"] = layer.running_mean.tolist()
                d["running_var"] = layer.running_var.tolist()
            layers.append(d)
        return {"format": "dense-net", "version": 1, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        if d.get("format") != "dense-net" or d.get("version") != 1:
            raise ValueError("unsupported checkpoint format/version")
        specs = [
            LayerSpec(x["in_dim"], x["out_dim"], x["activation"], x["bias"], x["batch_norm"])
            for x in d["layers"]
        ]
        net = cls(specs, np.random.default_rng(0))
        for layer, x in zip(net.layers, d["layers"]):
            layer.w = np.asarray(x["w"], dtype=np.float64)
            if layer.b is not None:
                layer.b = np.asarray(x["b"], dtype=np.float64)
            if layer.spec.batch_norm:
                layer.gamma = np.asarray(x["gamma"], dtype=np.float64)
                layer.beta = np.asarray(x["beta"], dtype=np.float64)
                layer.running_mean = np.asarray(x["running_mean"], dtype=np.float64)
                layer.running_var = np.asarray(x["running_var"], dtype=np.float64)
        return net

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: str) -> "DenseNet":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def mlp(dims: list[int], activation: str, rng: np.random.Generator,
        final_activation: str = "identity") -> DenseNet:
    """Build an MLP with `activation` on hidden layers and `final_activation` on the last."""
    specs = []
    for i in range(len(dims) - 1):
        act = activation if i < len(dims) - 2 else final_activation
        specs.append(LayerSpec(dims[i], dims[i + 1], act))
    return DenseNet(specs, rng)


# -- optimizers ---------------------------------------------------------------


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr
        self.steps = 0
        self._state: list | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        _check_aligned(params, grads)
        for p, g in zip(params, grads):
            p -= self.lr * g
            if not np.isfinite(p).all():
                raise FloatingPointError("non-finite parameter after sgd step")
        self.steps += 1


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        _check_aligned(params, grads)
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        elif len(self._m) != len(params):
            raise ShapeError("optimizer state does not match parameter list")
        self.steps += 1
        t = self.steps
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if not np.isfinite(p).all():
                raise FloatingPointError("non-finite parameter after adam step")


Optimizer = Sgd | Adam


def make_optimizer(kind: str, lr: float) -> Optimizer:
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return Sgd(lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")


def optimizer_step(opt: Optimizer, net: DenseNet, tape: GradientTape) -> None:
    """Apply one optimizer update of `net` from `tape` (in place)."""
    opt.step(net.parameters(), tape.grads)


def _check_aligned(params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {i} shape {g.shape} != parameter shape {p.shape}")


# -- vector math --------------------------------------------------------------


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Cosine of the angle between a and b, in [-1, 1].

    Near-zero-norm inputs yield (0.0, True); the boolean is the
    collapse-warning flag consumed by the consistency trainer.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < COSINE_EPS or nb < COSINE_EPS:
        return 0.0, True
    return float(np.dot(a, b) / (na * nb)), False


def cosine_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine similarity of two [n, d] arrays.

    Degenerate rows (either side below the norm floor) get similarity 0 and are
    flagged in the returned boolean mask.
    """
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    degenerate = (na < COSINE_EPS) | (nb < COSINE_EPS)
    denom = np.where(degenerate, 1.0, na * nb)
    sims = np.einsum("ij,ij->i", a, b) / denom
    sims = np.where(degenerate, 0.0, sims)
    return sims, degenerate
