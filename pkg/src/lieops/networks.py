"""Small feed-forward networks with hand-written reverse-mode gradients.

One ``MlpNet`` class covers every network in the system: the toy backbone and
classifier (``plain`` head), the coefficient encoder and prior (``laplacian``
head: two linear heads producing shift and clamped log-scale), and the
projection head (``projection`` head with optional row normalization). Hidden
layers use a leaky rectifier.

``forward`` returns the output together with a cache; ``backward`` consumes
that cache plus an upstream gradient and returns parameter gradients (in
``parameters()`` order) and the gradient with respect to the input. Caches
are invalidated by parameter updates: every optimizer step bumps the net's
version counter and a backward pass with an older cache raises.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StaleCacheError
from .inference import LaplacianParams

CHECKPOINT_FORMAT = "lieops-checkpoint-v1"

ParamList = list


@dataclass
class MlpCache:
    x: np.ndarray
    trunk_inputs: list
    trunk_pre: list
    head_input: np.ndarray
    single: bool
    version: int
    # laplacian head
    clamp_mask: np.ndarray | None = None
    log_scale: np.ndarray | None = None
    # projection head with normalization
    pre_norm: np.ndarray | None = None
    norms: np.ndarray | None = None


class MlpNet:
    """Feed-forward network; see module docstring for the head types."""

    HEADS = ("plain", "laplacian", "projection")

    def __init__(
        self,
        layer_dims: list[int],
        out_dim: int,
        head: str = "plain",
        *,
        negative_slope: float = 0.01,
        log_scale_clamp: tuple[float, float] = (-6.0, 2.0),
        normalize: bool = False,
        head_weight_scale: float = 1.0,
        log_scale_bias: float = 0.0,
        rng: np.random.Generator | None = None,
    ):
        if head not in self.HEADS:
            raise ValueError(f"unknown head {head!r}, expected one of {self.HEADS}")
        if len(layer_dims) < 1 or any(d < 1 for d in layer_dims) or out_dim < 1:
            raise ValueError("layer_dims must be non-empty positive ints, out_dim >= 1")
        if log_scale_clamp[0] >= log_scale_clamp[1]:
            raise ValueError("log_scale_clamp must be an increasing interval")
        self.layer_dims = list(layer_dims)
        self.out_dim = int(out_dim)
        self.head = head
        self.negative_slope = float(negative_slope)
        self.log_scale_clamp = (float(log_scale_clamp[0]), float(log_scale_clamp[1]))
        self.normalize = bool(normalize)
        self.head_weight_scale = float(head_weight_scale)
        self.version = 0

        rng = rng or np.random.default_rng(0)
        gain = math.sqrt(2.0 / (1.0 + self.negative_slope**2))
        self.trunk_w = []
        self.trunk_b = []
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            self.trunk_w.append(rng.normal(size=(d_in, d_out)) * gain / math.sqrt(d_in))
            self.trunk_b.append(np.zeros(d_out))
        d_last = layer_dims[-1]
        n_heads = 2 if head == "laplacian" else 1
        # head_weight_scale = 0 gives input-independent initial outputs (the
        # biases), which keeps early distribution parameters tame whatever the
        # input magnitudes are.
        self.head_w = [
            head_weight_scale * rng.normal(size=(d_last, out_dim)) / math.sqrt(d_last)
            for _ in range(n_heads)
        ]
        self.head_b = [np.zeros(out_dim) for _ in range(n_heads)]
        self.log_scale_bias = float(log_scale_bias)
        if head == "laplacian" and log_scale_bias != 0.0:
            self.head_b[1][:] = log_scale_bias

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> ParamList:
        """References to all parameter arrays, in a fixed order."""
        out = []
        for w, b in zip(self.trunk_w, self.trunk_b):
            out.extend((w, b))
        for w, b in zip(self.head_w, self.head_b):
            out.extend((w, b))
        return out

    def set_parameters(self, values: ParamList) -> None:
        current = self.parameters()
        if len(values) != len(current):
            raise ValueError(f"expected {len(current)} arrays, got {len(values)}")
        for dst, src in zip(current, values):
            if dst.shape != np.asarray(src).shape:
                raise ValueError(f"shape mismatch: {dst.shape} vs {np.asarray(src).shape}")
            dst[...] = src
        self.mark_updated()

    def mark_updated(self) -> None:
        self.version += 1

    def zero_grads(self) -> ParamList:
        return [np.zeros_like(p) for p in self.parameters()]

    def clone(self) -> "MlpNet":
        net = MlpNet(
            self.layer_dims,
            self.out_dim,
            self.head,
            negative_slope=self.negative_slope,
            log_scale_clamp=self.log_scale_clamp,
            normalize=self.normalize,
            head_weight_scale=self.head_weight_scale,
            log_scale_bias=self.log_scale_bias,
        )
        for dst, src in zip(net.parameters(), self.parameters()):
            dst[...] = src
        return net

    # -- forward / backward ---------------------------------------------------

    def forward(self, x: np.ndarray):
        """Run the network; returns ``(output, cache)``.

        ``x`` may be a single vector or a batch of rows. A laplacian head
        returns LaplacianParams whose log-scale is clamped to the configured
        interval; a projection head optionally L2-normalizes each row.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[-1] != self.layer_dims[0]:
            raise ValueError(f"input dim {h.shape[-1]}, expected {self.layer_dims[0]}")
        trunk_inputs, trunk_pre = [], []
        for w, b in zip(self.trunk_w, self.trunk_b):
            trunk_inputs.append(h)
            pre = h @ w + b
            trunk_pre.append(pre)
            h = np.where(pre > 0.0, pre, self.negative_slope * pre)
        cache = MlpCache(
            x=x, trunk_inputs=trunk_inputs, trunk_pre=trunk_pre,
            head_input=h, single=single, version=self.version,
        )
        if self.head == "laplacian":
            shift = h @ self.head_w[0] + self.head_b[0]
            raw_ls = h @ self.head_w[1] + self.head_b[1]
            lo, hi = self.log_scale_clamp
            cache.clamp_mask = (raw_ls >= lo) & (raw_ls <= hi)
            ls = np.clip(raw_ls, lo, hi)
            cache.log_scale = ls
            if single:
                shift, ls = shift[0], ls[0]
            return LaplacianParams(shift, ls), cache
        out = h @ self.head_w[0] + self.head_b[0]
        if self.head == "projection" and self.normalize:
            norms = np.linalg.norm(out, axis=-1, keepdims=True)
            if np.any(norms == 0.0):
                raise ValueError("cannot normalize a zero projection output")
            cache.pre_norm = out
            cache.norms = norms
            out = out / norms
        return (out[0] if single else out), cache

    def backward(self, cache: MlpCache, upstream):
        """Reverse-mode pass; returns ``(param_grads, d_input)``.

        ``upstream`` matches the forward output: an array for plain and
        projection heads, a ``(d_shift, d_log_scale)`` pair for a laplacian
        head. Gradients of the clamped log-scale are zeroed outside the clamp
        interval.
        """
        if cache.version != self.version:
            raise StaleCacheError(
                f"cache from version {cache.version}, network now at {self.version}"
            )
        if self.head == "laplacian":
            d_shift, d_ls = upstream
            d_shift = np.atleast_2d(np.asarray(d_shift, dtype=np.float64))
            d_ls = np.atleast_2d(np.asarray(d_ls, dtype=np.float64)) * cache.clamp_mask
            h = cache.head_input
            head_grads = [h.T @ d_shift, d_shift.sum(axis=0), h.T @ d_ls, d_ls.sum(axis=0)]
            d_h = d_shift @ self.head_w[0].T + d_ls @ self.head_w[1].T
        else:
            d_out = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
            if self.head == "projection" and self.normalize:
                vn = cache.pre_norm / cache.norms
                d_out = (d_out - vn * np.sum(d_out * vn, axis=-1, keepdims=True)) / cache.norms
            h = cache.head_input
            head_grads = [h.T @ d_out, d_out.sum(axis=0)]
            d_h = d_out @ self.head_w[0].T
        trunk_grads = []
        for w, x_in, pre in zip(
            reversed(self.trunk_w), reversed(cache.trunk_inputs), reversed(cache.trunk_pre)
        ):
            d_pre = d_h * np.where(pre > 0.0, 1.0, self.negative_slope)
            trunk_grads.append((x_in.T @ d_pre, d_pre.sum(axis=0)))
            d_h = d_pre @ w.T
        grads: ParamList = []
        for dw, db in reversed(trunk_grads):
            grads.extend((dw, db))
        grads.extend(head_grads)
        d_input = d_h[0] if cache.single else d_h
        return grads, d_input

    # -- serialization --------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "kind": "mlp",
            "layer_dims": self.layer_dims,
            "out_dim": self.out_dim,
            "head": self.head,
            "negative_slope": self.negative_slope,
            "log_scale_clamp": list(self.log_scale_clamp),
            "normalize": self.normalize,
            "head_weight_scale": self.head_weight_scale,
            "log_scale_bias": self.log_scale_bias,
            "params": [p.tolist() for p in self.parameters()],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "MlpNet":
        if data.get("kind") != "mlp":
            raise ValueError(f"not an mlp checkpoint: kind={data.get('kind')!r}")
        net = cls(
            [int(d) for d in data["layer_dims"]],
            int(data["out_dim"]),
            data["head"],
            negative_slope=float(data["negative_slope"]),
            log_scale_clamp=tuple(data["log_scale_clamp"]),
            normalize=bool(data["normalize"]),
            head_weight_scale=float(data.get("head_weight_scale", 1.0)),
            log_scale_bias=float(data.get("log_scale_bias", 0.0)),
        )
        net.set_parameters([np.array(p, dtype=np.float64) for p in data["params"]])
        return net


def save_mlp(net: MlpNet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net.to_json_dict()) + "\n", encoding="utf-8")


def load_mlp(path: str | Path) -> MlpNet:
    return MlpNet.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Posterior / prior encoders
# ---------------------------------------------------------------------------


@dataclass
class WarmupSchedule:
    """Linear blend from fixed prior parameters to the network's over
    ``total_iters`` iterations."""

    total_iters: int = 5000
    mu0: float = 0.05
    b0: float = 0.01

    def __post_init__(self):
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.b0 <= 0.0:
            raise ValueError("b0 must be positive")

    def kappa(self, iteration: int) -> float:
        if iteration < 0:
            raise ValueError("iteration must be >= 0")
        if self.total_iters == 0 or iteration >= self.total_iters:
            return 1.0
        return iteration / self.total_iters


def encode_posterior(q_net: MlpNet, z: np.ndarray, zp: np.ndarray):
    """Laplacian parameters from the concatenated pair.

    The inputs are treated as detached: no gradient ever flows back into
    ``z`` or ``zp`` through this encoder (use ``posterior_backward``).
    """
    z = np.asarray(z, dtype=np.float64)
    zp = np.asarray(zp, dtype=np.float64)
    if z.shape != zp.shape:
        raise ValueError(f"z shape {z.shape} != z' shape {zp.shape}")
    if q_net.head != "laplacian":
        raise ValueError("posterior encoder must have a laplacian head")
    params, cache = q_net.forward(np.concatenate([z, zp], axis=-1))
    return params, cache


def posterior_backward(q_net: MlpNet, cache: MlpCache, d_shift, d_scale) -> ParamList:
    """Parameter gradients of the posterior encoder.

    ``d_scale`` is with respect to the scale; converted to log-scale here.
    The input gradient is discarded (detach contract).
    """
    scale = np.exp(cache.log_scale)
    if np.asarray(d_shift).ndim == 1:
        scale = scale[0]
    grads, _ = q_net.backward(cache, (d_shift, np.asarray(d_scale) * scale))
    return grads


@dataclass
class PriorCache:
    net_cache: MlpCache
    kappa: float
    net_scale: np.ndarray


def encode_prior(
    p_net: MlpNet, z: np.ndarray, schedule: WarmupSchedule, iteration: int
) -> tuple[LaplacianParams, PriorCache]:
    """Laplacian prior parameters from a single feature, with warm-up.

    For ``iteration < total_iters`` the network's shift and scale are blended
    linearly with the schedule's fixed values using kappa = iteration /
    total_iters, so iteration 0 returns exactly the fixed parameters. The
    input is treated as detached, like the posterior.
    """
    if p_net.head != "laplacian":
        raise ValueError("prior encoder must have a laplacian head")
    raw, cache = p_net.forward(np.asarray(z, dtype=np.float64))
    kappa = schedule.kappa(iteration)
    net_scale = raw.scale
    shift = kappa * raw.shift + (1.0 - kappa) * schedule.mu0
    scale = kappa * net_scale + (1.0 - kappa) * schedule.b0
    return LaplacianParams.from_scale(shift, scale), PriorCache(cache, kappa, net_scale)


def prior_backward(p_net: MlpNet, pcache: PriorCache, d_shift, d_scale) -> ParamList:
    """Parameter gradients of the warm-up-blended prior encoder."""
    d_shift_net = pcache.kappa * np.asarray(d_shift, dtype=np.float64)
    d_ls_net = pcache.kappa * np.asarray(d_scale, dtype=np.float64) * pcache.net_scale
    grads, _ = p_net.backward(pcache.net_cache, (d_shift_net, d_ls_net))
    return grads


# ---------------------------------------------------------------------------
# Classification losses
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -float(np.mean(log_probs[np.arange(n), labels]))
    d_logits = np.exp(log_probs)
    d_logits[np.arange(n), labels] -= 1.0
    return loss, d_logits / n


# ---------------------------------------------------------------------------
# EMA and optimizers
# ---------------------------------------------------------------------------


class EmaState:
    """Exponential moving average of a network's parameters."""

    def __init__(self, net: MlpNet, decay: float = 0.999):
        if not (0.0 <= decay < 1.0):
            raise ValueError("decay must be in [0, 1)")
        self.decay = decay
        self.shadow = [p.copy() for p in net.parameters()]

    def network(self, net: MlpNet) -> MlpNet:
        """A copy of ``net`` carrying the shadow parameters."""
        out = net.clone()
        out.set_parameters(self.shadow)
        return out


def ema_update(ema: EmaState, net: MlpNet) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * current, in place."""
    params = net.parameters()
    if len(params) != len(ema.shadow):
        raise ValueError("EMA state does not match network")
    for s, p in zip(ema.shadow, params):
        if s.shape != p.shape:
            raise ValueError(f"EMA shape mismatch: {s.shape} vs {p.shape}")
        s *= ema.decay
        s += (1.0 - ema.decay) * p
    return ema


@dataclass
class AdamWState:
    m: ParamList = field(default_factory=list)
    v: ParamList = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_net(cls, net: MlpNet) -> "AdamWState":
        return cls(
            m=[np.zeros_like(p) for p in net.parameters()],
            v=[np.zeros_like(p) for p in net.parameters()],
        )


def adamw_update(
    net: MlpNet,
    grads: ParamList,
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
    clip_norm: float = np.inf,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1.0e-8,
) -> None:
    """One decoupled-weight-decay adaptive step, with global-norm clipping.

    The clip is applied jointly over the whole gradient list before the
    moment updates; weight decay multiplies the parameters directly.
    """
    params = net.parameters()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    scale = clip_norm / norm if (np.isfinite(clip_norm) and norm > clip_norm) else 1.0
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g * scale
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    net.mark_updated()
