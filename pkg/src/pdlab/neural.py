"""Small numpy MLPs with hand-written backprop, Adam, losses and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_FORMAT = "pdlab-mlp"
CHECKPOINT_VERSION = 1
OUTPUT_ACTIVATIONS = ("identity", "tanh", "softmax")


class Mlp:
    """ReLU hidden layers, configurable output head.

    Inputs are ``(in,)`` vectors or ``(batch, in)`` matrices. The softmax head
    accepts an optional boolean mask; masked entries get exactly zero weight.
    """

    def __init__(self, sizes, output: str = "identity", rng: np.random.Generator | None = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        if output not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output!r}")
        self.sizes = sizes
        self.output = output
        rng = np.random.default_rng(0) if rng is None else rng
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(1.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, fan_out))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (live references)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "Mlp":
        twin = Mlp.__new__(Mlp)
        twin.sizes = list(self.sizes)
        twin.output = self.output
        twin.weights = [W.copy() for W in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        return twin

    def forward(self, x, mask=None):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input of length {self.in_dim}, got {x.shape[-1]}")
        single = x.ndim == 1
        h = x[None, :] if single else x
        acts = [h]
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if k < last:
                h = np.maximum(z, 0.0)
            elif self.output == "tanh":
                h = np.tanh(z)
            elif self.output == "softmax":
                h = masked_softmax(z, mask)
            else:
                h = z
            acts.append(h)
        out = h[0] if single else h
        return out, (single, acts)

    def __call__(self, x, mask=None):
        return self.forward(x, mask)[0]

    def backward(self, cache, grad_out):
        """Gradients ``[dW0, db0, ...]`` (batch-summed) and the input gradient."""
        single, acts = cache
        g = np.asarray(grad_out, dtype=float)
        g = g[None, :] if single else g
        y = acts[-1]
        if self.output == "tanh":
            g = g * (1.0 - y * y)
        elif self.output == "softmax":
            g = y * (g - np.sum(g * y, axis=-1, keepdims=True))
        grads = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = acts[k]
            grads[2 * k] = h_in.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k].T
            if k > 0:
                g = g * (acts[k] > 0.0)
        return grads, (g[0] if single else g)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


def masked_softmax(z, mask=None):
    z = np.asarray(z, dtype=float)
    if mask is None:
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
        return e / e.sum(axis=-1, keepdims=True)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    zz = np.where(mask, z, -np.inf)
    m = zz.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(zz - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def huber(pred, target, delta: float = 1.0):
    """Mean Huber loss over all elements and its gradient with respect to ``pred``."""
    r = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    a = np.abs(r)
    quad = a <= delta
    loss = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.where(quad, r, delta * np.sign(r))
    n = max(r.size, 1)
    return float(loss.sum() / n), grad / n


def mse(pred, target):
    r = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    n = max(r.size, 1)
    return float((r * r).sum() / n), 2.0 * r / n


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place update of ``params``."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        d = {"adam_t": np.array(self.t), "adam_lr": np.array(self.lr)}
        for k, (m, v) in enumerate(zip(self.m, self.v)):
            d[f"m{k}"] = m
            d[f"v{k}"] = v
        return d

    def load_state_dict(self, d: dict) -> None:
        self.t = int(d["adam_t"])
        self.lr = float(d["adam_lr"])
        k = 0
        self.m, self.v = [], []
        while f"m{k}" in d:
            self.m.append(np.array(d[f"m{k}"], dtype=float))
            self.v.append(np.array(d[f"v{k}"], dtype=float))
            k += 1


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    for t, o in zip(target.params(), online.params()):
        t *= 1.0 - tau
        t += tau * o
    return target


def hard_update(target: Mlp, online: Mlp) -> Mlp:
    return soft_update(target, online, 1.0)


# --- checkpoints -------------------------------------------------------------


def net_arrays(net: Mlp, prefix: str) -> dict:
    out = {f"{prefix}/{k}": p for k, p in enumerate(net.params())}
    out[f"{prefix}/__meta__"] = np.array(json.dumps({"sizes": net.sizes, "output": net.output}))
    return out


def net_from_arrays(arrays, prefix: str) -> Mlp:
    meta = json.loads(str(arrays[f"{prefix}/__meta__"]))
    net = Mlp(meta["sizes"], meta["output"])
    for k, p in enumerate(net.params()):
        src = np.asarray(arrays[f"{prefix}/{k}"], dtype=float)
        if src.shape != p.shape:
            raise ValueError(f"{prefix}/{k}: shape {src.shape} does not match {p.shape}")
        p[...] = src
    return net


def save_checkpoint(path, nets: dict[str, Mlp], extra: dict | None = None) -> None:
    """Write named networks (plus optional raw arrays) to one ``.npz`` file with a version header."""
    arrays = {"__header__": np.array(json.dumps({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "nets": sorted(nets)}))}
    for name, net in nets.items():
        arrays.update(net_arrays(net, name))
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, Mlp], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a network checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        nets = {name: net_from_arrays(data, name) for name in header["nets"]}
        extra = {k[len("extra/") :]: data[k] for k in data.files if k.startswith("extra/")}
    return nets, extra
