"""Fully connected policy network with hand-written reverse mode and RMSprop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_LIDAR = 100
DEFAULT_WIDTHS = (104, 128, 256, 64, 16, 2)


class ShapeError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    """Parameters changed between the forward pass and ``backward``."""


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda a: (a > 0).astype(float)),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
}


@dataclass(frozen=True)
class MLPSpec:
    layer_widths: tuple[int, ...] = DEFAULT_WIDTHS
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))


@dataclass
class MLPParams:
    weights: list[np.ndarray]  # weights[i] has shape (out, in)
    biases: list[np.ndarray]
    version: int = 0

    @classmethod
    def init(cls, spec: MLPSpec, rng: np.random.Generator) -> "MLPParams":
        ws, bs = [], []
        w = spec.layer_widths
        for i in range(len(w) - 1):
            lim = np.sqrt(6.0 / (w[i] + w[i + 1]))
            ws.append(rng.uniform(-lim, lim, size=(w[i + 1], w[i])))
            bs.append(np.zeros(w[i + 1]))
        return cls(ws, bs)

    @classmethod
    def zeros(cls, spec: MLPSpec) -> "MLPParams":
        w = spec.layer_widths
        return cls(
            [np.zeros((w[i + 1], w[i])) for i in range(len(w) - 1)],
            [np.zeros(w[i + 1]) for i in range(len(w) - 1)],
        )

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in layer order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def to_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, spec: MLPSpec, flat) -> "MLPParams":
        flat = np.asarray(flat, dtype=float)
        if flat.size != spec.n_params:
            raise ShapeError(f"expected {spec.n_params} parameters, got {flat.size}")
        w = spec.layer_widths
        ws, bs, k = [], [], 0
        for i in range(len(w) - 1):
            n = w[i] * w[i + 1]
            ws.append(flat[k:k + n].reshape(w[i + 1], w[i]).copy())
            k += n
            bs.append(flat[k:k + w[i + 1]].copy())
            k += w[i + 1]
        return cls(ws, bs)

    def copy(self) -> "MLPParams":
        return MLPParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])


@dataclass
class Tape:
    params: MLPParams
    version: int
    activation: str
    acts: list[np.ndarray]  # layer inputs, then the output
    squeeze: bool


def forward(x, params: MLPParams, spec: MLPSpec | None = None, tape: bool = False):
    """Evaluate the network on one input (1-D) or a batch (2-D, rows)."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(f"input width {h.shape[1]} != {params.weights[0].shape[1]}")
    act_name = spec.activation if spec is not None else "tanh"
    act, _ = _ACTIVATIONS[act_name]
    acts = [h]
    n = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W.T + b
        if i < n - 1:
            h = act(h)
        acts.append(h)
    y = h[0] if squeeze else h
    if tape:
        return y, Tape(params, params.version, act_name, acts, squeeze)
    return y


def backward(tape: Tape, upstream):
    """Reverse pass. Returns ``(param_grads: MLPParams, input_grad)``.

    For a batch, parameter gradients are summed over rows.
    """
    if tape.params.version != tape.version:
        raise StaleTapeError("parameters were updated after this forward pass")
    g = np.asarray(upstream, dtype=float)
    if tape.squeeze:
        g = g[None, :]
    _, dact = _ACTIVATIONS[tape.activation]
    p = tape.params
    n = len(p.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = g * dact(tape.acts[i + 1])
        gw[i] = g.T @ tape.acts[i]
        gb[i] = g.sum(axis=0)
        g = g @ p.weights[i]
    return MLPParams(gw, gb), (g[0] if tape.squeeze else g)


def spectral_norm(W: np.ndarray, iters: int = 100, seed: int = 0) -> float:
    """Largest singular value by power iteration."""
    v = np.random.default_rng(seed).normal(size=W.shape[1])
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        u = W @ v
        s = np.linalg.norm(u)
        if s == 0:
            return 0.0
        v = W.T @ (u / s)
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(W @ v))


@dataclass
class OptimizerState:
    lr: float = 1e-3
    rho: float = 0.99
    eps: float = 1e-8
    acc: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def rmsprop_step(params, grads, opt: OptimizerState):
    """In-place RMSprop update.

    ``params``/``grads`` are either :class:`MLPParams` or lists of arrays.
    """
    ps = params.arrays() if isinstance(params, MLPParams) else params
    gs = grads.arrays() if isinstance(grads, MLPParams) else grads
    if len(ps) != len(gs):
        raise ShapeError("parameter and gradient lists differ in length")
    if not opt.acc:
        opt.acc = [np.zeros_like(p) for p in ps]
    for p, g, a in zip(ps, gs, opt.acc):
        if p.shape != np.shape(g):
            raise ShapeError("gradient shape mismatch")
        a *= opt.rho
        a += (1.0 - opt.rho) * g * g
        p -= opt.lr * g / (np.sqrt(a) + opt.eps)
    opt.step += 1
    if isinstance(params, MLPParams):
        params.version += 1
    return params


@dataclass(frozen=True)
class Normalization:
    """Fixed input/output scales for the policy network."""

    max_range: float = 50.0
    theta_scale: float = 0.5
    v_scale: float = 10.0
    u_scale: tuple[float, float] = (0.6, 5.0)
    out_scale: tuple[float, float] = (0.6, 5.0)

    def input_scale(self) -> np.ndarray:
        return np.concatenate(
            [
                np.full(N_LIDAR, 1.0 / self.max_range),
                [1.0 / self.theta_scale, 1.0 / self.v_scale],
                1.0 / np.asarray(self.u_scale),
            ]
        )

    def build_input(self, lidar, theta, v, u) -> np.ndarray:
        """Stack ``[lidar (100), theta, v, u1, u2]`` and scale; batch-aware."""
        lidar = np.atleast_2d(np.asarray(lidar, dtype=float))
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        raw = np.concatenate([lidar, theta[:, None], v[:, None], u], axis=1)
        return raw * self.input_scale()

    def to_dict(self) -> dict:
        return {
            "max_range": self.max_range,
            "theta_scale": self.theta_scale,
            "v_scale": self.v_scale,
            "u_scale": list(self.u_scale),
            "out_scale": list(self.out_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(
            float(d["max_range"]),
            float(d["theta_scale"]),
            float(d["v_scale"]),
            tuple(float(v) for v in d["u_scale"]),  # type: ignore[arg-type]
            tuple(float(v) for v in d["out_scale"]),  # type: ignore[arg-type]
        )
