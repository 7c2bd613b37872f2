"""Non-iterative cluster routing between two capsule layers.

Each (output channel, input group) pair owns a weight cluster of ``K``
affine maps.  Applied to the 3x3 neighbourhood of an input capsule, the
cluster yields ``K`` votes; their mean is the centroid and the negative log
of their per-dimension standard deviation is the agreement.  Centroids of
the ``G`` clusters feeding one output capsule are fused with a per-dimension
softmax over agreements, then layer-normalised.

Capsule grids are laid out as ``(B, H, W, C, D)``.  Internally the votes are
kept as ``(G, N, C_out, K, D_out)`` with ``N = B * H' * W'`` so that a single
batched matrix product produces all of them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import LN_EPS, LOG_EPS, Tensor


class RoutingMode(str, Enum):
    DATA_DEPENDENT = "data_dependent"
    CONSTANT = "constant"


@dataclass(frozen=True)
class LayerConfig:
    """Shape of one cluster-routing layer.

    ``channels_in`` is the number of capsule channels of the incoming grid.
    It must equal ``groups`` (one cluster per input channel, multi-channel
    variants) or be 1 (every cluster reads the single channel).
    """

    groups: int
    channels_out: int
    votes: int
    dims_in: int
    dims_out: int
    stride: int = 1
    pad: int = 1
    channels_in: int | None = None
    routing: RoutingMode = RoutingMode.DATA_DEPENDENT
    layer_norm: bool = True
    sliced: bool = False

    def __post_init__(self):
        if self.channels_in is None:
            object.__setattr__(self, "channels_in", self.groups)
        object.__setattr__(self, "routing", RoutingMode(self.routing))
        for field in ("groups", "channels_out", "votes", "dims_in", "dims_out"):
            if getattr(self, field) < 1:
                raise ValueError(f"LayerConfig.{field} must be >= 1")
        if self.stride not in (1, 2):
            raise ValueError(f"LayerConfig.stride must be 1 or 2, got {self.stride}")
        if self.pad not in (0, 1):
            raise ValueError(f"LayerConfig.pad must be 0 or 1, got {self.pad}")
        if self.channels_in not in (1, self.groups):
            raise ValueError(
                f"channels_in={self.channels_in} must be 1 or equal groups={self.groups}")
        if self.sliced and self.dims_in % self.votes:
            raise ValueError("sliced mode needs dims_in divisible by votes")

    @property
    def fan_in(self) -> int:
        return 9 * self.dims_in

    def out_size(self, size: int) -> int:
        return T.gather_output_size(size, self.stride, self.pad)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c, g, k, d = self.channels_out, self.groups, self.votes, self.dims_out
        shapes = {"weights": (c, g, k, d, self.fan_in), "biases": (c, g, k, d)}
        if self.layer_norm:
            shapes["ln_gain"] = (c, d)
            shapes["ln_bias"] = (c, d)
        return shapes

    def count_params(self) -> int:
        n = self.channels_out * self.groups * self.votes * self.dims_out * (self.fan_in + 1)
        if self.layer_norm:
            n += 2 * self.channels_out * self.dims_out
        return n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["routing"] = self.routing.value
        return d


def init_params(cfg: LayerConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights and biases, unit layer-norm gain.

    Zero biases would make every vote of a blank neighbourhood identical, and
    layer norm of a constant vector has a ``1/sqrt(eps)`` Jacobian.
    """
    bound = 1.0 / math.sqrt(cfg.fan_in)
    shapes = cfg.param_shapes()
    params = {
        "weights": Tensor(rng.uniform(-bound, bound, shapes["weights"]), requires_grad=True),
        "biases": Tensor(rng.uniform(-bound, bound, shapes["biases"]), requires_grad=True),
    }
    if cfg.layer_norm:
        params["ln_gain"] = Tensor(np.ones(shapes["ln_gain"]), requires_grad=True)
        params["ln_bias"] = Tensor(np.zeros(shapes["ln_bias"]), requires_grad=True)
    return params


def slice_mask(cfg: LayerConfig) -> np.ndarray:
    """0/1 mask letting vote ``k`` read only its ``D_in/K`` slice of each cell."""
    step = cfg.dims_in // cfg.votes
    mask = np.zeros((cfg.votes, 9, cfg.dims_in))
    for k in range(cfg.votes):
        mask[k, :, k * step:(k + 1) * step] = 1.0
    mask = mask.reshape(1, 1, cfg.votes, 1, cfg.fan_in)
    return np.broadcast_to(mask, cfg.param_shapes()["weights"]).copy()


def _check_input(caps: Tensor, params: dict[str, Tensor], cfg: LayerConfig) -> None:
    if caps.ndim != 5:
        raise ValueError(f"capsule grid must be (B, H, W, C, D), got {caps.shape}")
    if caps.shape[3] != cfg.channels_in or caps.shape[4] != cfg.dims_in:
        raise ValueError(
            f"input (C={caps.shape[3]}, D={caps.shape[4]}) does not match config "
            f"(C={cfg.channels_in}, D={cfg.dims_in})")
    for name, shape in cfg.param_shapes().items():
        if name not in params:
            raise ValueError(f"missing parameter {name!r}")
        if params[name].shape != shape:
            raise ValueError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")


def _votes(caps: Tensor, params: dict[str, Tensor], cfg: LayerConfig) -> tuple[Tensor, tuple]:
    """Votes in the internal ``(G, N, C_out, K, D_out)`` layout."""
    _check_input(caps, params, cfg)
    b = caps.shape[0]
    c, g, k, d, f = cfg.param_shapes()["weights"]
    gathered = T.neighborhood_gather(caps, 3, cfg.stride, cfg.pad)
    ho, wo = gathered.shape[1], gathered.shape[2]
    n = b * ho * wo
    w = params["weights"]
    if cfg.sliced:
        w = w * Tensor(slice_mask(cfg))
    # one GEMM per (cluster, vote) block keeps votes exact under vote permutations
    w_b = w.transpose(1, 2, 4, 0, 3).reshape(g, k, f, c * d)     # (G, K, F, C*D)
    if cfg.channels_in == g:
        x = gathered.transpose(3, 0, 1, 2, 4).reshape(g, n, f)
        votes = T.grouped_matmul(x, w_b)
    else:
        x = gathered.reshape(1, n, f)
        votes = T.grouped_matmul(x, w_b.reshape(1, g * k, f, c * d))
    votes = votes.reshape(g, k, n, c, d)
    bias = params["biases"].transpose(1, 2, 0, 3).reshape(g, k, 1, c, d)
    votes = votes + T.broadcast_to(bias, (g, k, n, c, d))
    return votes.transpose(0, 2, 3, 1, 4), (b, ho, wo)


def compute_votes(caps: Tensor, params: dict[str, Tensor], cfg: LayerConfig) -> Tensor:
    """All votes, shaped ``(B, H', W', C_out, G, K, D_out)``."""
    votes, (b, ho, wo) = _votes(caps, params, cfg)
    g, _, c, k, d = votes.shape
    return votes.reshape(g, b, ho, wo, c, k, d).transpose(1, 2, 3, 4, 0, 5, 6)


def cluster_stats(votes: Tensor, eps: float = LOG_EPS) -> tuple[Tensor, Tensor]:
    """Centroid and agreement of vote clusters.

    ``votes`` has the vote index on axis -2 and the capsule dimension on
    axis -1.  Returns ``(m, a)`` with the vote axis reduced, where
    ``a = -log(std + eps)`` and std uses divisor ``K``.
    """
    if eps <= 0:
        raise ValueError("cluster_stats: eps must be positive")
    if votes.ndim < 2:
        raise ValueError(f"cluster_stats: need (..., K, D) votes, got {votes.shape}")
    # order-free reductions make the result bitwise invariant to vote order
    m = votes.mean(axis=-2, keepdims=True, order_free=True)
    dev = votes - T.broadcast_to(m, votes.shape)
    var = (dev * dev).mean(axis=-2, order_free=True)
    a = -T.log(T.sqrt(var) + eps)
    shape = m.shape[:-2] + m.shape[-1:]
    return m.reshape(shape), a


def routing_weights(agreements: Tensor, mode: RoutingMode | str = RoutingMode.DATA_DEPENDENT) -> Tensor:
    """Per-dimension softmax over the cluster axis (axis 0).

    The per-dimension maximum is subtracted before exponentiation; it is
    treated as a constant, which leaves both value and gradient unchanged.
    """
    mode = RoutingMode(mode)
    g = agreements.shape[0]
    if mode is RoutingMode.CONSTANT:
        return Tensor(np.full(agreements.shape, 1.0 / g))
    shift = T.stop_gradient(agreements).data.max(axis=0, keepdims=True)
    e = T.exp(agreements - Tensor(np.broadcast_to(shift, agreements.shape)))
    z = T.broadcast_to(e.sum(axis=0, keepdims=True), e.shape)
    return e / z


def fuse(centroids: Tensor, c: Tensor) -> Tensor:
    """``s[..., d] = sum_g c[g, ..., d] * m[g, ..., d]``."""
    if centroids.shape != c.shape:
        raise ValueError(f"fuse: centroid shape {centroids.shape} != weight shape {c.shape}")
    return (c * centroids).sum(axis=0)


def layer_forward(caps: Tensor, params: dict[str, Tensor], cfg: LayerConfig,
                  eps: float = LOG_EPS, return_routing: bool = False):
    """One cluster-routing layer: ``(B, H, W, C_in, D_in) -> (B, H', W', C_out, D_out)``.

    With ``return_routing`` the routing weights are returned as well, shaped
    ``(B, H', W', C_out, G, D_out)``.
    """
    votes, (b, ho, wo) = _votes(caps, params, cfg)
    m, a = cluster_stats(votes, eps)                  # (G, N, C, D)
    c = routing_weights(a, cfg.routing)
    s = fuse(m, c).reshape(b, ho, wo, cfg.channels_out, cfg.dims_out)
    if cfg.layer_norm:
        s = T.layer_norm(s, params["ln_gain"], params["ln_bias"], LN_EPS)
    if return_routing:
        g = cfg.groups
        cw = c.data.reshape(g, b, ho, wo, cfg.channels_out, cfg.dims_out)
        return s, cw.transpose(1, 2, 3, 4, 0, 5)
    return s


def layer_forward_oracle(caps, params, cfg: LayerConfig, eps: float = LOG_EPS) -> np.ndarray:
    """Reference implementation with explicit loops; for tests only.

    Accepts numpy arrays or tensors; ``caps`` is ``(H, W, C, D)`` or
    ``(B, H, W, C, D)``.
    """
    x = np.asarray(caps.data if isinstance(caps, Tensor) else caps, dtype=float)
    p = {k: np.asarray(v.data if isinstance(v, Tensor) else v, dtype=float) for k, v in params.items()}
    if x.ndim == 4:
        return layer_forward_oracle(x[None], p, cfg, eps)[0]
    w = p["weights"] * slice_mask(cfg) if cfg.sliced else p["weights"]
    bsz, h, wd, cin, din = x.shape
    if cin != cfg.channels_in or din != cfg.dims_in:
        raise ValueError("oracle: input does not match config")
    ho, wo = cfg.out_size(h), cfg.out_size(wd)
    G, C, K, D = cfg.groups, cfg.channels_out, cfg.votes, cfg.dims_out
    out = np.zeros((bsz, ho, wo, C, D))
    for bi in range(bsz):
        for i in range(ho):
            for j in range(wo):
                for co in range(C):
                    cents, agrees = [], []
                    for g in range(G):
                        ch = g if cin == G else 0
                        nb = []
                        for ky in range(3):
                            for kx in range(3):
                                y = i * cfg.stride + ky - cfg.pad
                                xx = j * cfg.stride + kx - cfg.pad
                                for dd in range(din):
                                    inside = 0 <= y < h and 0 <= xx < wd
                                    nb.append(x[bi, y, xx, ch, dd] if inside else 0.0)
                        votes = []
                        for k in range(K):
                            v = []
                            for d in range(D):
                                acc = p["biases"][co, g, k, d]
                                for f in range(9 * din):
                                    acc += w[co, g, k, d, f] * nb[f]
                                v.append(acc)
                            votes.append(v)
                        cent = [sum(votes[k][d] for k in range(K)) / K for d in range(D)]
                        agree = []
                        for d in range(D):
                            var = sum((votes[k][d] - cent[d]) ** 2 for k in range(K)) / K
                            agree.append(-math.log(math.sqrt(var) + eps))
                        cents.append(cent)
                        agrees.append(agree)
                    s = []
                    for d in range(D):
                        if cfg.routing is RoutingMode.CONSTANT:
                            cw = [1.0 / G] * G
                        else:
                            top = max(agrees[g][d] for g in range(G))
                            ex = [math.exp(agrees[g][d] - top) for g in range(G)]
                            cw = [e / sum(ex) for e in ex]
                        s.append(sum(cw[g] * cents[g][d] for g in range(G)))
                    if cfg.layer_norm:
                        mu = sum(s) / D
                        var = sum((v - mu) ** 2 for v in s) / D
                        s = [(v - mu) / math.sqrt(var + LN_EPS) * p["ln_gain"][co, d] + p["ln_bias"][co, d]
                             for d, v in enumerate(s)]
                    out[bi, i, j, co] = s
    return out
