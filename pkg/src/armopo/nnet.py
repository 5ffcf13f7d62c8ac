"""Dense networks with Gaussian output heads, written directly in numpy.

A :class:`DenseNet` is a trunk of fully connected hidden layers followed by
two parallel heads. Each head is one ``tanh`` layer of the trunk's width and
a linear output layer; one head emits the mean, the other the log standard
deviation, which is clamped to ``[log_sigma_min, log_sigma_max]``. The clamp
passes gradient only strictly inside the bounds.

Parameters live in one flat ``float64`` vector. Layer weights are views into
it, so optimisers and checkpoints only ever deal with flat arrays.

:class:`Mlp` is the plain variant with a single linear output, used for
critics.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
ACTIVATIONS = ("tanh", "swish")


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return z * _sigmoid(z)


def _activate_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    s = _sigmoid(z)
    return s + z * s * (1.0 - s)


def _layout(shapes):
    offsets, n = [], 0
    for fan_in, fan_out in shapes:
        offsets.append(n)
        n += fan_in * fan_out + fan_out
    return offsets, n


def _views(flat: np.ndarray, shapes, offsets):
    out = []
    for (fan_in, fan_out), off in zip(shapes, offsets):
        w = flat[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        b = flat[off + fan_in * fan_out : off + fan_in * fan_out + fan_out]
        out.append((w, b))
    return out


class _Layered:
    """Shared plumbing: layer shapes, flat-parameter views, initialisation."""

    shapes: list

    def _finish_layout(self):
        self._offsets, self.n_params = _layout(self.shapes)

    def layers(self, params: np.ndarray):
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        return _views(params, self.shapes, self._offsets)

    def init_params(self, rng: np.random.Generator, zero_output: bool = False) -> np.ndarray:
        params = np.zeros(self.n_params)
        for i, (w, _) in enumerate(self.layers(params)):
            if zero_output and i in self._output_layers:
                continue
            limit = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        return params

    def _trunk_forward(self, layers, x, train, rng):
        h = x
        hs, zs, masks = [x], [], []
        p = self.dropout
        for w, b in layers:
            z = h @ w + b
            h = _activate(self.activation, z)
            if train and p > 0.0:
                if rng is None:
                    raise ValueError("train mode with dropout needs an rng")
                mask = (rng.random(h.shape) >= p) / (1.0 - p)
                h = h * mask
            else:
                mask = None
            zs.append(z)
            masks.append(mask)
            hs.append(h)
        return h, (hs, zs, masks)

    def _trunk_backward(self, layers, grads, cache, dh):
        hs, zs, masks = cache
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            gw, gb = grads[i]
            if masks[i] is not None:
                dh = dh * masks[i]
            h_out = hs[i + 1] if masks[i] is None else _activate(self.activation, zs[i])
            dz = dh * _activate_grad(self.activation, zs[i], h_out)
            gw += hs[i].T @ dz
            gb += dz.sum(axis=0)
            dh = dz @ w.T
        return dh


def _check_params(params):
    if not np.all(np.isfinite(params)):
        raise ValueError("non-finite parameters")


@dataclass
class DenseNet(_Layered):
    """Trunk + (mean, log-sigma) heads. ``widths`` = (input, hidden...)."""

    widths: tuple[int, ...]
    out_dim: int
    activation: str = "tanh"
    dropout: float = 0.0
    log_sigma_min: float = -10.0
    log_sigma_max: float = 2.0
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 1 or any(w <= 0 for w in self.widths) or self.out_dim <= 0:
            raise ValueError("widths and out_dim must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        trunk = list(zip(self.widths[:-1], self.widths[1:]))
        top = self.widths[-1]
        self.n_trunk = len(trunk)
        self.shapes = trunk + [(top, top), (top, self.out_dim), (top, top), (top, self.out_dim)]
        self._output_layers = {self.n_trunk + 1, self.n_trunk + 3}
        self._finish_layout()

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    def forward(self, params, x, mode: str = "eval", rng=None, return_cache: bool = False):
        """Return ``(mu, log_sigma)`` for inputs ``x`` of shape (in,) or (N, in)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.shape[-1] != self.in_dim:
            raise ValueError(f"input has {x2.shape[-1]} features, expected {self.in_dim}")
        layers = self.layers(params)
        _check_params(params)
        h, trunk_cache = self._trunk_forward(layers[: self.n_trunk], x2, mode == "train", rng)
        (wm1, bm1), (wm2, bm2), (wl1, bl1), (wl2, bl2) = layers[self.n_trunk :]
        tm = np.tanh(h @ wm1 + bm1)
        mu = tm @ wm2 + bm2
        tl = np.tanh(h @ wl1 + bl1)
        raw = tl @ wl2 + bl2
        log_sigma = np.clip(raw, self.log_sigma_min, self.log_sigma_max)
        if single:
            mu, log_sigma = mu[0], log_sigma[0]
        if return_cache:
            cache = (trunk_cache, h, tm, tl, raw, single)
            return mu, log_sigma, cache
        return mu, log_sigma

    def backward_outputs(self, params, cache, dmu, dlog_sigma):
        """Backpropagate output gradients; returns ``(param_grad, input_grad)``."""
        trunk_cache, h, tm, tl, raw, single = cache
        dmu = np.atleast_2d(dmu)
        dls = np.atleast_2d(dlog_sigma)
        layers = self.layers(params)
        grad = np.zeros(self.n_params)
        glayers = self.layers(grad)
        k = self.n_trunk
        (wm1, _), (wm2, _), (wl1, _), (wl2, _) = layers[k:]
        (gwm1, gbm1), (gwm2, gbm2), (gwl1, gbl1), (gwl2, gbl2) = glayers[k:]

        draw = dls * ((raw > self.log_sigma_min) & (raw < self.log_sigma_max))
        gwl2 += tl.T @ draw
        gbl2 += draw.sum(axis=0)
        dzl = (draw @ wl2.T) * (1.0 - tl * tl)
        gwl1 += h.T @ dzl
        gbl1 += dzl.sum(axis=0)

        gwm2 += tm.T @ dmu
        gbm2 += dmu.sum(axis=0)
        dzm = (dmu @ wm2.T) * (1.0 - tm * tm)
        gwm1 += h.T @ dzm
        gbm1 += dzm.sum(axis=0)

        dh = dzl @ wl1.T + dzm @ wm1.T
        dx = self._trunk_backward(layers[:k], glayers[:k], trunk_cache, dh)
        return grad, (dx[0] if single else dx)

    def config(self) -> dict:
        return {
            "type": "DenseNet",
            "widths": list(self.widths),
            "out_dim": self.out_dim,
            "activation": self.activation,
            "dropout": self.dropout,
            "log_sigma_min": self.log_sigma_min,
            "log_sigma_max": self.log_sigma_max,
        }


@dataclass
class Mlp(_Layered):
    """Plain MLP: hidden layers with ``activation`` and a linear output."""

    widths: tuple[int, ...]
    out_dim: int
    activation: str = "tanh"
    dropout: float = 0.0
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        trunk = list(zip(self.widths[:-1], self.widths[1:]))
        self.n_trunk = len(trunk)
        self.shapes = trunk + [(self.widths[-1], self.out_dim)]
        self._output_layers = {self.n_trunk}
        self._finish_layout()

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    def forward(self, params, x, mode: str = "eval", rng=None, return_cache: bool = False):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.shape[-1] != self.in_dim:
            raise ValueError(f"input has {x2.shape[-1]} features, expected {self.in_dim}")
        layers = self.layers(params)
        h, trunk_cache = self._trunk_forward(layers[:-1], x2, mode == "train", rng)
        w, b = layers[-1]
        y = h @ w + b
        out = y[0] if single else y
        if return_cache:
            return out, (trunk_cache, h, single)
        return out

    def backward_outputs(self, params, cache, dy):
        trunk_cache, h, single = cache
        dy = np.atleast_2d(dy)
        layers = self.layers(params)
        grad = np.zeros(self.n_params)
        glayers = self.layers(grad)
        w, _ = layers[-1]
        gw, gb = glayers[-1]
        gw += h.T @ dy
        gb += dy.sum(axis=0)
        dx = self._trunk_backward(layers[:-1], glayers[:-1], trunk_cache, dy @ w.T)
        return grad, (dx[0] if single else dx)

    def config(self) -> dict:
        return {
            "type": "Mlp",
            "widths": list(self.widths),
            "out_dim": self.out_dim,
            "activation": self.activation,
            "dropout": self.dropout,
        }


def net_from_config(cfg: dict):
    cfg = dict(cfg)
    kind = cfg.pop("type")
    if kind == "DenseNet":
        return DenseNet(**cfg)
    if kind == "Mlp":
        return Mlp(**cfg)
    raise ValueError(f"unknown network type {kind!r}")


def gaussian_log_density(mu, log_sigma, target):
    """Elementwise log N(target | mu, exp(log_sigma)²)."""
    mu, log_sigma, target = np.broadcast_arrays(
        np.asarray(mu, dtype=np.float64),
        np.asarray(log_sigma, dtype=np.float64),
        np.asarray(target, dtype=np.float64),
    )
    resid = (target - mu) * np.exp(-log_sigma)
    return -log_sigma - 0.5 * LOG_2PI - 0.5 * resid * resid


def gaussian_nll(mu, log_sigma, target):
    """Negative log-likelihood summed over the last axis, averaged over rows.

    Returns ``(loss, log_densities)`` where ``log_densities`` has the shape of
    the inputs.
    """
    mu = np.asarray(mu, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    log_sigma = np.asarray(log_sigma, dtype=np.float64)
    if mu.shape != target.shape or mu.shape != log_sigma.shape:
        raise ValueError(f"shape mismatch: {mu.shape}, {log_sigma.shape}, {target.shape}")
    logp = gaussian_log_density(mu, log_sigma, target)
    if logp.ndim == 1:
        return float(-logp.sum()), logp
    return float(-logp.sum(axis=-1).mean()), logp


def _nll_output_grads(mu, log_sigma, target):
    inv_var = np.exp(-2.0 * log_sigma)
    resid = target - mu
    n = mu.shape[0]
    dmu = -resid * inv_var / n
    dls = (1.0 - resid * resid * inv_var) / n
    return dmu, dls


def backward(net: DenseNet, params, x, target, mode: str = "eval", rng=None):
    """Exact gradient of :func:`gaussian_nll` w.r.t. ``params``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    mu, ls, cache = net.forward(params, x, mode=mode, rng=rng, return_cache=True)
    dmu, dls = _nll_output_grads(mu, ls, target)
    grad, _ = net.backward_outputs(params, cache, dmu, dls)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return grad


@dataclass
class AdamState:
    n_params: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update. Mutates ``state``; returns new params."""
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment lengths differ")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    patience: int = 20
    seed: int = 0
    weight_decay: float = 0.0


def _weight_mask(net) -> np.ndarray:
    mask = np.zeros(net.n_params)
    for w, _ in net.layers(mask):
        w[...] = 1.0
    return mask


def eval_nll(net: DenseNet, params, x, y, chunk: int = 8192) -> float:
    total = 0.0
    for i in range(0, x.shape[0], chunk):
        mu, ls = net.forward(params, x[i : i + chunk])
        total += -gaussian_log_density(mu, ls, y[i : i + chunk]).sum()
    return total / x.shape[0]


def train(net: DenseNet, params, train_set, val_set, config: TrainConfig):
    """Minibatch NLL training with per-epoch shuffling and early stopping.

    ``train_set`` and ``val_set`` are ``(inputs, targets)`` pairs, already
    standardised. Returns ``(best_params, history)``; ``best_params`` are the
    parameters with the lowest validation NLL seen (including the initial
    ones).
    """
    x_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in train_set)
    x_va, y_va = (np.asarray(a, dtype=np.float64) for a in val_set)
    rng = np.random.default_rng(config.seed)
    state = AdamState(net.n_params, lr=config.lr)
    decay = _weight_mask(net) * config.weight_decay if config.weight_decay > 0 else None

    params = np.array(params, dtype=np.float64)
    best = params.copy()
    best_val = eval_nll(net, params, x_va, y_va)
    history = {"train_nll": [], "val_nll": [best_val], "best_epoch": 0}
    if not math.isfinite(best_val):
        raise TrainingDivergence(0, "non-finite initial validation loss")
    stale = 0
    n = x_tr.shape[0]
    bs = min(config.batch_size, n)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            xb, yb = x_tr[idx], y_tr[idx]
            mu, ls, cache = net.forward(params, xb, mode="train", rng=rng, return_cache=True)
            loss, _ = gaussian_nll(mu, ls, yb)
            if not math.isfinite(loss):
                raise TrainingDivergence(epoch)
            running += loss * len(idx)
            dmu, dls = _nll_output_grads(mu, ls, yb)
            grad, _ = net.backward_outputs(params, cache, dmu, dls)
            if decay is not None:
                grad += decay * params
            params = adam_step(state, params, grad)
        val = eval_nll(net, params, x_va, y_va)
        if not math.isfinite(val):
            raise TrainingDivergence(epoch, "non-finite validation loss")
        history["train_nll"].append(running / n)
        history["val_nll"].append(val)
        if val < best_val:
            best_val, best, stale = val, params.copy(), 0
            history["best_epoch"] = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    history["best_val_nll"] = best_val
    return best, history


_MAGIC = b"ARNN"
_VERSION = 1


def save_checkpoint(path, net, params, meta: dict | None = None) -> None:
    """Write ``net`` and ``params``: magic, header length, JSON header, f8 LE params."""
    header = {
        "format_version": _VERSION,
        "net": net.config(),
        "n_params": int(net.n_params),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.asarray(params, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(net, params, meta)`` from a file written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    net = net_from_config(header["net"])
    params = np.frombuffer(raw[8 + hlen :], dtype="<f8").astype(np.float64)
    if params.shape != (header["n_params"],):
        raise ValueError(f"{path}: truncated parameter block")
    return net, params, header["meta"]
