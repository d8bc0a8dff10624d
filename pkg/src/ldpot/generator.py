"""Feed-forward generators with hand-written forward and reverse passes.

Parameters live in one flat float64 vector; ``layout`` records where each
layer's weight matrix and bias sit inside it, so optimizers never need to
know the architecture.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ._rng import substream
from ._validation import check_positive

__all__ = [
    "LatentSpec",
    "MlpGenerator",
    "sample_latent",
    "forward",
    "backward",
    "OptimizerState",
    "optimizer_step",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"LDPOTGEN"
LATENT_LAWS = ("uniform(-1,1)", "uniform(0,1)")


@dataclass(frozen=True)
class LatentSpec:
    dim: int = 2
    law: str = "uniform(-1,1)"

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError("latent dim must be at least 1")
        if self.law not in LATENT_LAWS:
            raise ValueError(f"latent law must be one of {LATENT_LAWS}, got {self.law!r}")


def sample_latent(spec: LatentSpec, batch: int, seed=0, rng=None) -> np.ndarray:
    """``batch x dim`` latent draws; uses the "latent" stream of ``seed`` unless ``rng`` is given."""
    if batch < 1:
        raise ValueError("batch must be at least 1")
    rng = substream(seed, "latent") if rng is None else rng
    u = rng.random((batch, spec.dim))
    if spec.law == "uniform(-1,1)":
        return 2.0 * u - 1.0
    return u


@dataclass
class MlpGenerator:
    """Dense network ``latent -> hidden (relu) ... -> output (linear or tanh)``.

    Parameters
    ----------
    layer_dims : sequence of int
        ``(latent_dim, hidden..., d)``.
    output : {"linear", "tanh"}
    theta : flat parameter vector or None.
        When omitted, every layer is drawn uniformly from
        ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` using the "init" stream of ``seed``.
    """

    layer_dims: tuple
    output: str = "linear"
    theta: np.ndarray | None = None
    seed: int | None = 0
    latent: LatentSpec = field(default_factory=LatentSpec)

    def __post_init__(self):
        dims = tuple(int(v) for v in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError("layer_dims needs at least an input and an output size, all positive")
        if self.output not in ("linear", "tanh"):
            raise ValueError("output activation must be 'linear' or 'tanh'")
        self.layer_dims = dims
        if isinstance(self.latent, dict):
            self.latent = LatentSpec(**self.latent)
        if self.latent.dim != dims[0]:
            self.latent = LatentSpec(dims[0], self.latent.law)
        self.layout = []
        off = 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w_off = off
            off += fan_in * fan_out
            self.layout.append((w_off, (fan_in, fan_out), off))
            off += fan_out
        self.n_params = off
        if self.theta is None:
            rng = substream(self.seed, "init")
            theta = np.empty(off)
            for (w_off, (fan_in, fan_out), b_off) in self.layout:
                bound = np.sqrt(1.0 / fan_in)
                theta[w_off:b_off + fan_out] = rng.uniform(-bound, bound, b_off + fan_out - w_off)
            self.theta = theta
        else:
            theta = np.array(self.theta, dtype=np.float64).ravel()
            if theta.shape[0] != off:
                raise ValueError(f"theta has {theta.shape[0]} entries, architecture needs {off}")
            if not np.all(np.isfinite(theta)):
                raise ValueError("theta contains non-finite values")
            self.theta = theta

    @property
    def n_layers(self) -> int:
        return len(self.layout)

    def params(self, theta=None):
        """Per-layer ``(W, b)`` views into ``theta`` (default: own parameters)."""
        theta = self.theta if theta is None else theta
        out = []
        for (w_off, shape, b_off) in self.layout:
            out.append((theta[w_off:b_off].reshape(shape), theta[b_off:b_off + shape[1]]))
        return out

    def copy(self, theta=None) -> "MlpGenerator":
        return MlpGenerator(self.layer_dims, self.output, (self.theta if theta is None else theta).copy(),
                            self.seed, self.latent)

    def forward(self, Z, theta=None):
        return forward(self, Z, theta)

    def backward(self, cache, upstream):
        return backward(self, cache, upstream)

    def sample(self, n, seed=0, rng=None) -> np.ndarray:
        return forward(self, sample_latent(self.latent, n, seed=seed, rng=rng))[0]


def forward(gen: MlpGenerator, Z, theta=None):
    """Returns ``(X, cache)``; the cache holds each layer's input and pre-activation."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != gen.layer_dims[0]:
        raise ValueError(f"latent batch must have shape (b, {gen.layer_dims[0]}), got {Z.shape}")
    h = Z
    inputs, pre = [], []
    layers = gen.params(theta)
    for k, (W, b) in enumerate(layers):
        inputs.append(h)
        a = h @ W + b
        pre.append(a)
        if k < len(layers) - 1:
            h = np.maximum(a, 0.0)
        elif gen.output == "tanh":
            h = np.tanh(a)
        else:
            h = a
    return h, {"inputs": inputs, "pre": pre, "out": h, "theta": gen.theta if theta is None else theta}


def backward(gen: MlpGenerator, cache, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * X)`` with respect to the flat parameters."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache["out"].shape:
        raise ValueError(f"upstream has shape {upstream.shape}, output has {cache['out'].shape}")
    grad = np.zeros(gen.n_params)
    layers = gen.params(cache["theta"])
    delta = upstream
    last = len(layers) - 1
    for k in range(last, -1, -1):
        a = cache["pre"][k]
        if k == last:
            if gen.output == "tanh":
                delta = delta * (1.0 - cache["out"] ** 2)
        else:
            delta = delta * (a > 0)
        w_off, shape, b_off = gen.layout[k]
        grad[w_off:b_off] = (cache["inputs"][k].T @ delta).ravel()
        grad[b_off:b_off + shape[1]] = delta.sum(0)
        if k > 0:
            delta = delta @ layers[k][0].T
    return grad


# --------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    kind: str = "rmsprop"
    lr: float = 1e-3
    n_params: int = 0
    decay: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("rmsprop", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        check_positive(self.lr, "lr")
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)


def optimizer_step(state: OptimizerState, theta, grad):
    """One RMSprop or Adam update; returns ``(new_theta, state)`` and updates ``state`` in place."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape or theta.shape != state.v.shape:
        raise ValueError("theta, grad and optimizer state must have the same shape")
    state.step += 1
    if state.kind == "rmsprop":
        state.v = state.decay * state.v + (1.0 - state.decay) * grad * grad
        new = theta - state.lr * grad / (np.sqrt(state.v) + state.eps)
    else:
        state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
        m_hat = state.m / (1.0 - state.beta1**state.step)
        v_hat = state.v / (1.0 - state.beta2**state.step)
        new = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, state


# --------------------------------------------------------------------------
# checkpoints: magic, uint64 LE header length, JSON header, '<f8' parameters

def save_checkpoint(gen: MlpGenerator, path, extra=None) -> None:
    header = {
        "layer_dims": list(gen.layer_dims),
        "activations": {"hidden": "relu", "output": gen.output},
        "seed": gen.seed,
        "latent": {"dim": gen.latent.dim, "law": gen.latent.law},
        "n_params": gen.n_params,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(gen.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> MlpGenerator:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a generator checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    theta = np.frombuffer(raw[pos:], dtype="<f8").astype(np.float64)
    if theta.shape[0] != header["n_params"]:
        raise ValueError(f"{path}: parameter block has {theta.shape[0]} values, header says {header['n_params']}")
    return MlpGenerator(tuple(header["layer_dims"]), header["activations"]["output"], theta, header["seed"],
                        LatentSpec(**header["latent"]))
