"""Network variants built from cluster-routing layers, plus heads and decoders.

The input image enters as a single capsule channel whose capsule dimension
is the number of image channels.  The classification head flattens the last
capsule grid and applies one affine map.  Two optional decoders exist: a
fully connected one fed by class-masked last-layer capsules, and a
convolutional one fed by the last layer's channels.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .routing import LayerConfig, RoutingMode, init_params, layer_forward
from .tensor import Tensor

FC_DECODER_SIZES = (512, 1024, 784)
CONV_DECODER_FILTERS = 32


@dataclass(frozen=True)
class VariantSpec:
    name: str
    layers: tuple[LayerConfig, ...]
    num_classes: int = 10
    input_geometry: tuple[int, int, int] = (28, 28, 1)
    decoder: str | None = None          # None, "fc" or "conv"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_geometry", tuple(self.input_geometry))
        if self.decoder not in (None, "fc", "conv"):
            raise ValueError(f"unknown decoder {self.decoder!r}")
        h, w, ch = self.input_geometry
        c_in, d_in = 1, ch
        for i, layer in enumerate(self.layers):
            if layer.channels_in != c_in or layer.dims_in != d_in:
                raise ValueError(
                    f"{self.name}: layer {i} expects (C={layer.channels_in}, D={layer.dims_in}) "
                    f"but receives (C={c_in}, D={d_in})")
            h, w = layer.out_size(h), layer.out_size(w)
            if h < 1 or w < 1:
                raise ValueError(f"{self.name}: layer {i} reduces the grid to nothing")
            c_in, d_in = layer.channels_out, layer.dims_out
        if self.decoder == "conv" and (2 * h, 2 * w) != self.input_geometry[:2]:
            raise ValueError(f"{self.name}: conv decoder needs a half-resolution last grid, got {h}x{w}")

    def grid_shapes(self) -> list[tuple[int, int, int, int]]:
        """``(H, W, C, D)`` of the input grid and of every layer output."""
        h, w, ch = self.input_geometry
        shapes = [(h, w, 1, ch)]
        for layer in self.layers:
            h, w = layer.out_size(h), layer.out_size(w)
            shapes.append((h, w, layer.channels_out, layer.dims_out))
        return shapes

    @property
    def feature_size(self) -> int:
        return int(np.prod(self.grid_shapes()[-1]))

    def with_routing(self, mode: RoutingMode | str) -> "VariantSpec":
        return replace(self, layers=tuple(replace(l, routing=RoutingMode(mode)) for l in self.layers))

    def without_layer_norm(self) -> "VariantSpec":
        return replace(self, layers=tuple(replace(l, layer_norm=False) for l in self.layers))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": [l.to_dict() for l in self.layers],
            "num_classes": self.num_classes,
            "input_geometry": list(self.input_geometry),
            "decoder": self.decoder,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariantSpec":
        return cls(d["name"], tuple(LayerConfig(**l) for l in d["layers"]), d["num_classes"],
                   tuple(d["input_geometry"]), d.get("decoder"))

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def stack_layers(channels, votes, dims, strides, pads=None, image_channels=1,
                 single_channel=False, layer_norm=True) -> tuple[LayerConfig, ...]:
    """Chain of layer configs; scalar arguments are repeated for every layer.

    ``single_channel`` builds the one-channel family, where ``channels`` is
    the number of weight clusters applied to the single channel.
    """
    n = len(strides)
    rep = lambda v: list(v) if isinstance(v, (list, tuple)) else [v] * n
    channels, votes, dims, pads = rep(channels), rep(votes), rep(dims), rep(1 if pads is None else pads)
    layers = []
    c_in, d_in = 1, image_channels
    for i in range(n):
        if single_channel:
            cfg = LayerConfig(groups=channels[i], channels_out=1, votes=votes[i], dims_in=d_in,
                              dims_out=dims[i], stride=strides[i], pad=pads[i], channels_in=1,
                              layer_norm=layer_norm)
        else:
            cfg = LayerConfig(groups=c_in, channels_out=channels[i], votes=votes[i], dims_in=d_in,
                              dims_out=dims[i], stride=strides[i], pad=pads[i], channels_in=c_in,
                              layer_norm=layer_norm)
        layers.append(cfg)
        c_in, d_in = cfg.channels_out, cfg.dims_out
    return tuple(layers)


FIVE_STRIDES = (1, 2, 1, 2, 1)
GLOBAL_STRIDES = (2, 2, 2, 1)
GLOBAL_PADS = (1, 1, 0, 0)

# name -> (family, C or N, K, D)
STANDARD_VARIANTS = {
    "M-variant1": ("M", 4, 5, 6),
    "M-variant2": ("M", 4, 5, 8),
    "M-variant3": ("M", 4, 8, 16),
    "M-variant4": ("M", 4, 8, 24),
    "S-variant1": ("S", 4, 4, 13),
    "S-variant2": ("S", 4, 4, 16),
    "S-variant3": ("S", 8, 8, 16),
    "S-variant4": ("S", 8, 8, 32),
}

EXTRA_VARIANTS = ("tiny", "tiny-global", "recon", "recon-tiny", "disentangle", "disentangle-tiny")


def variant_names() -> list[str]:
    return list(STANDARD_VARIANTS) + list(EXTRA_VARIANTS)


def variant_code(spec: VariantSpec) -> str:
    """Short code such as ``C4K5D6`` or ``N8K8D16`` for uniform specs."""
    hidden = spec.layers[1] if len(spec.layers) > 1 else spec.layers[0]
    if hidden.channels_out == 1 and hidden.groups > 1:
        return f"N{hidden.groups}K{hidden.votes}D{hidden.dims_out}"
    return f"C{hidden.channels_out}K{hidden.votes}D{hidden.dims_out}"


def get_variant(name: str, input_geometry=(28, 28, 1), num_classes: int = 10) -> VariantSpec:
    """Built-in variant by name, instantiated for an input geometry."""
    h, w, ch = input_geometry
    if name in STANDARD_VARIANTS:
        family, c, k, d = STANDARD_VARIANTS[name]
        layers = stack_layers(c, k, d, FIVE_STRIDES, image_channels=ch, single_channel=family == "S")
        return VariantSpec(name, layers, num_classes, input_geometry)
    if name == "tiny":
        return VariantSpec(name, stack_layers(2, 2, 8, (1, 2, 2), image_channels=ch), num_classes, input_geometry)
    if name == "tiny-global":
        layers = stack_layers(4, 2, 8, GLOBAL_STRIDES, GLOBAL_PADS, image_channels=ch)
        return VariantSpec(name, layers, num_classes, input_geometry)
    if name in ("recon", "recon-tiny"):
        # last layer carries 4 channels x 4 dims = 16 features per position
        k, d = (4, 32) if name == "recon" else (2, 8)
        layers = stack_layers(4, k, (d, d, 4), (1, 2, 1), image_channels=ch, layer_norm=False)
        return VariantSpec(name, layers, num_classes, input_geometry, decoder="conv")
    if name in ("disentangle", "disentangle-tiny"):
        c, k, d = (4, 5, 8) if name == "disentangle" else (2, 2, 8)
        layers = stack_layers((c, c, c, c, num_classes), k, d, GLOBAL_STRIDES + (1,),
                              GLOBAL_PADS + (1,), image_channels=ch)
        return VariantSpec(name, layers, num_classes, input_geometry, decoder="fc")
    raise KeyError(name)


# -- parameters ------------------------------------------------------------------


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def head_shapes(spec: VariantSpec) -> dict[str, tuple[int, ...]]:
    f = spec.feature_size
    shapes = {"head.weights": (spec.num_classes, f), "head.bias": (spec.num_classes,)}
    h, w, c, d = spec.grid_shapes()[-1]
    if spec.decoder == "fc":
        sizes = (spec.num_classes * d,) + FC_DECODER_SIZES
        for i in range(3):
            shapes[f"dec_fc.{i}.weights"] = (sizes[i + 1], sizes[i])
            shapes[f"dec_fc.{i}.bias"] = (sizes[i + 1],)
    elif spec.decoder == "conv":
        cd = c * d
        shapes["dec_conv.0.weights"] = (CONV_DECODER_FILTERS, 9 * cd)
        shapes["dec_conv.0.bias"] = (CONV_DECODER_FILTERS,)
        shapes["dec_conv.1.weights"] = (spec.input_geometry[2], 9 * CONV_DECODER_FILTERS)
        shapes["dec_conv.1.bias"] = (spec.input_geometry[2],)
    return shapes


def param_shapes(spec: VariantSpec) -> "OrderedDict[str, tuple[int, ...]]":
    """Every parameter name and shape in canonical (checkpoint) order."""
    shapes = OrderedDict()
    for i, layer in enumerate(spec.layers):
        for k, s in layer.param_shapes().items():
            shapes[f"layer{i}.{k}"] = s
    shapes.update(head_shapes(spec))
    return shapes


@dataclass
class Model:
    spec: VariantSpec
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def layer_params(self, i: int) -> dict[str, Tensor]:
        prefix = f"layer{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def capsules(self, images, return_routing: bool = False):
        """Run all capsule layers on ``(B, channels, H, W)`` images."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        b, ch, h, w = x.shape
        if (h, w, ch) != self.spec.input_geometry:
            raise ValueError(f"image geometry {(h, w, ch)} != {self.spec.input_geometry}")
        caps = x.transpose(0, 2, 3, 1).reshape(b, h, w, 1, ch)
        routing = []
        for i, cfg in enumerate(self.spec.layers):
            out = layer_forward(caps, self.layer_params(i), cfg, return_routing=return_routing)
            if return_routing:
                out, c = out
                routing.append(c)
            caps = out
        return (caps, routing) if return_routing else caps

    def logits(self, caps: Tensor) -> Tensor:
        flat = caps.reshape(caps.shape[0], -1)
        return T.affine_map(flat, self.params["head.weights"], self.params["head.bias"])

    def classify(self, images) -> Tensor:
        return self.logits(self.capsules(images))

    def decode_fc(self, masked: Tensor) -> Tensor:
        return decode_fc(self.params, masked)

    def decode_conv(self, caps: Tensor) -> Tensor:
        return decode_conv(self.params, caps)


def build_variant(spec: VariantSpec, seed: int) -> Model:
    """Deterministically initialised model for ``spec``."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for i, layer in enumerate(spec.layers):
        for k, v in init_params(layer, rng).items():
            params[f"layer{i}.{k}"] = v
    for name, shape in head_shapes(spec).items():
        if name.endswith("weights"):
            params[name] = _uniform(rng, shape[1], shape)
        else:
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
    for name, p in params.items():
        p.name = name
    return Model(spec, params)


def count_params(model_or_spec) -> int:
    if isinstance(model_or_spec, Model):
        return int(sum(p.size for p in model_or_spec.params.values()))
    return int(sum(np.prod(s) for s in param_shapes(model_or_spec).values()))


def param_breakdown(spec: VariantSpec) -> "OrderedDict[str, int]":
    """Closed-form counts per layer / head / decoder part."""
    out = OrderedDict()
    for i, layer in enumerate(spec.layers):
        out[f"layer{i}"] = layer.count_params()
    for name, shape in head_shapes(spec).items():
        part = name.rsplit(".", 1)[0]
        out[part] = out.get(part, 0) + int(np.prod(shape))
    return out


# -- masking and perturbation --------------------------------------------------


def mask_capsules(last_layer: np.ndarray, keep: int) -> np.ndarray:
    """Zero every capsule row except ``keep``."""
    last_layer = np.asarray(last_layer)
    if not 0 <= keep < last_layer.shape[0]:
        raise IndexError(f"class index {keep} out of range for {last_layer.shape[0]} capsules")
    out = np.zeros_like(last_layer)
    out[keep] = last_layer[keep]
    return out


def class_mask(labels, num_classes: int, dims: int) -> Tensor:
    """Constant ``(B, num_classes, dims)`` mask selecting each item's class capsule."""
    m = np.zeros((len(labels), num_classes, dims))
    m[np.arange(len(labels)), np.asarray(labels)] = 1.0
    return Tensor(m)


def perturb_dimension(capsule: np.ndarray, dim: int, delta: float) -> np.ndarray:
    capsule = np.asarray(capsule, dtype=float)
    if not 0 <= dim < capsule.shape[-1]:
        raise IndexError(f"dimension {dim} out of range for {capsule.shape[-1]}-d capsule")
    out = capsule.copy()
    out[..., dim] += delta
    return out


def perturbation_deltas(limit: float = 0.25, step: float = 0.05) -> np.ndarray:
    n = int(round(2 * limit / step))
    return np.round(np.linspace(-limit, limit, n + 1), 10)


# -- decoders --------------------------------------------------------------------


def decode_fc(params, masked: Tensor) -> Tensor:
    """Three affine maps (ReLU, ReLU, sigmoid) to a ``(B, 28, 28)`` image."""
    h = masked.reshape(masked.shape[0], -1)
    h = T.relu(T.affine_map(h, params["dec_fc.0.weights"], params["dec_fc.0.bias"]))
    h = T.relu(T.affine_map(h, params["dec_fc.1.weights"], params["dec_fc.1.bias"]))
    h = T.sigmoid(T.affine_map(h, params["dec_fc.2.weights"], params["dec_fc.2.bias"]))
    return h.reshape(h.shape[0], 28, 28)


def conv3x3(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Same-size 3x3 convolution of ``(B, H, W, F)`` feature maps."""
    b, h, w, f = x.shape
    cols = T.neighborhood_gather(x.reshape(b, h, w, 1, f), 3, 1, 1)
    return T.affine_map(cols, weights, bias).reshape(b, h, w, weights.shape[0])


def decode_conv(params, caps: Tensor) -> Tensor:
    """Nearest 2x upsample, 3x3 conv + ReLU, 3x3 conv + sigmoid.

    ``caps`` is ``(B, H, W, C, D)``; returns ``(B, 2H, 2W)`` for one output
    channel, or ``(B, 2H, 2W, channels)`` otherwise.
    """
    b, h, w, c, d = caps.shape
    expected = params["dec_conv.0.weights"].shape[1] // 9
    if c * d != expected:
        raise ValueError(f"decoder expects {expected} channels per position, got {c * d}")
    x = T.upsample_nearest(caps.reshape(b, h, w, c * d), 2)
    x = T.relu(conv3x3(x, params["dec_conv.0.weights"], params["dec_conv.0.bias"]))
    x = T.sigmoid(conv3x3(x, params["dec_conv.1.weights"], params["dec_conv.1.bias"]))
    if x.shape[-1] == 1:
        return x.reshape(b, 2 * h, 2 * w)
    return x


# -- spatial transforms of channels ----------------------------------------------


def rotation(degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    # exact entries for multiples of 90 degrees
    c, s = round(c, 15), round(s, 15)
    return np.array([[c, -s, 0.0], [s, c, 0.0]])


def hflip() -> np.ndarray:
    return np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def vflip() -> np.ndarray:
    return np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def shift(dx: float, dy: float = 0.0) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]])


def scaling(factor: float) -> np.ndarray:
    return np.array([[factor, 0.0, 0.0], [0.0, factor, 0.0]])


def scale_translation(t: np.ndarray, factor: float) -> np.ndarray:
    """Same transform expressed on a grid ``factor`` times finer."""
    out = np.array(t, dtype=float)
    out[:, 2] *= factor
    return out


def invert_affine(t: np.ndarray) -> np.ndarray:
    a = np.asarray(t, float)[:, :2]
    inv = np.linalg.inv(a)
    return np.hstack([inv, -inv @ np.asarray(t, float)[:, 2:]])


def transform_plane(planes: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Resample ``(..., H, W)`` planes under the 2x3 affine ``t``.

    Coordinates are (column, row) relative to the plane centre; bilinear
    interpolation with zero fill outside the plane.
    """
    t = np.asarray(t, float)
    a = t[:, :2]
    if abs(np.linalg.det(a)) < 1e-12:
        raise ValueError("degenerate transform (zero determinant)")
    *lead, h, w = planes.shape
    inv = np.linalg.inv(a)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    px, py = xx - t[0, 2], yy - t[1, 2]
    sx = inv[0, 0] * px + inv[0, 1] * py + cx
    sy = inv[1, 0] * px + inv[1, 1] * py + cy
    # snap float fuzz so that lattice-preserving maps are exact permutations
    sx = np.where(np.abs(sx - np.round(sx)) < 1e-9, np.round(sx), sx)
    sy = np.where(np.abs(sy - np.round(sy)) < 1e-9, np.round(sy), sy)
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros(planes.shape)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            wgt = wy * wx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w) & (wgt > 0)
            vals = planes[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += np.where(ok, wgt, 0.0) * vals
    return out


def transform_channels(channels: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Apply ``t`` to every (channel, dim) slice of an ``(..., H, W, C, D)`` grid."""
    x = np.asarray(channels, float)
    moved = np.moveaxis(x, (-4, -3), (-2, -1))
    return np.moveaxis(transform_plane(moved, t), (-2, -1), (-4, -3))


def recon_transforms() -> list[tuple[str, np.ndarray]]:
    """The eighteen channel transforms, translations in last-layer pixels."""
    out = [(f"R-{a}", rotation(a)) for a in range(0, 360, 45)]
    out += [("H-flip", hflip()), ("V-flip", vflip())]
    out += [(f"Shift-{s}", shift(s)) for s in (1, 2, 4)]
    out += [(f"Scale-{f:g}", scaling(f)) for f in (0.5, 0.75, 1.2, 1.5, 2)]
    return out
