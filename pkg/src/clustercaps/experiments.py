"""Experiment drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import RECIPES, AugmentSpec, Dataset, load_dataset, output_geometry
from .models import (
    Model,
    VariantSpec,
    build_variant,
    get_variant,
    mask_capsules,
    perturb_dimension,
    perturbation_deltas,
    recon_transforms,
    scale_translation,
    transform_channels,
    transform_plane,
)
from .routing import RoutingMode
from .tensor import Tensor
from .training import TrainConfig, TrainResult, evaluate, train

log = logging.getLogger(__name__)

# Desk-scale learning rate; at 0.1 the flattened head diverges within a few dozen steps.
DESK_LR = 0.01


@dataclass
class DeskData:
    train: Dataset
    test: Dataset
    aug: AugmentSpec | None
    geometry: tuple[int, int, int]


def load_desk_data(dataset: str, data_dir=None, train_subset: int | None = None,
                   test_subset: int | None = None) -> DeskData:
    """Train/test splits plus the dataset's augmentation recipe.

    smallNORB is loaded unstandardised so that brightness jitter acts on
    [0, 1] pixels; the recipe standardises afterwards.
    """
    normalize = dataset != "smallnorb"
    train_set = load_dataset(dataset, "train", data_dir, normalize=normalize)
    test_set = load_dataset(dataset, "test", data_dir, normalize=normalize)
    if train_subset is not None:
        train_set = train_set.subset(np.arange(min(train_subset, len(train_set))))
    if test_subset is not None:
        test_set = test_set.subset(np.arange(min(test_subset, len(test_set))))
    aug = RECIPES.get(dataset)
    if aug is not None and aug == AugmentSpec():
        aug = None
    geometry = output_geometry(train_set.geometry, aug) if aug else train_set.geometry
    return DeskData(train_set, test_set, aug, geometry)


def make_spec(variant: str, data: DeskData, routing="data_dependent",
              layer_norm: bool = True) -> VariantSpec:
    spec = get_variant(variant, data.geometry, data.train.num_classes).with_routing(routing)
    return spec if layer_norm else spec.without_layer_norm()


def run_training(spec: VariantSpec, data: DeskData, cfg: TrainConfig, out_dir=None,
                 resume=None, on_epoch=None) -> TrainResult:
    model = build_variant(spec, cfg.seed)
    return train(model, data.train, data.test, cfg, out_dir, data.aug, resume, on_epoch)


# -- ablation ----------------------------------------------------------------------


def constant_routing_check(model: Model, images: np.ndarray) -> bool:
    """True when every routing weight of every layer equals 1/G exactly."""
    with T.no_grad():
        _, routing = model.capsules(images, return_routing=True)
    return all(np.all(c == 1.0 / cfg.groups) for c, cfg in zip(routing, model.spec.layers))


def ablation(variant: str, data: DeskData, cfg: TrainConfig, seeds, out_dir=None) -> list[dict]:
    """Train data-dependent and constant routing with matched seeds and budget."""
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for mode in (RoutingMode.DATA_DEPENDENT, RoutingMode.CONSTANT):
            spec = make_spec(variant, data, mode)
            run_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed,
                                     "ablation_constant_routing": mode is RoutingMode.CONSTANT})
            if mode is RoutingMode.CONSTANT:
                probe = build_variant(spec, seed)
                ok = constant_routing_check(probe, data.train.images[:2])
                log.info("seed %d constant routing: c == 1/G at first step: %s", seed, ok)
                row["constant_check"] = ok
            sub = None if out_dir is None else f"{out_dir}/seed{seed}-{mode.value}"
            res = run_training(spec, data, run_cfg, sub)
            row[f"{mode.value}_acc"] = 1.0 - res.metrics[-1].eval_err if res.metrics else float("nan")
        rows.append(row)
    return rows


# -- routing statistic -------------------------------------------------------------


def last_layer_routing(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Routing weights of the final layer, shape ``(N, C, G, D)``.

    Requires a global last layer (1x1 spatial extent).
    """
    h, w = model.spec.grid_shapes()[-1][:2]
    if (h, w) != (1, 1):
        raise ValueError(f"last layer is {h}x{w}, not global (1x1)")
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            _, routing = model.capsules(images[s:s + batch_size], return_routing=True)
            out.append(routing[-1][:, 0, 0])
    return np.concatenate(out)


def pairwise_l1_stats(weights: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean within-class and between-class pairwise L1 distance of flattened weights."""
    x = weights.reshape(len(weights), -1)
    labels = np.asarray(labels)
    within_sum = between_sum = 0.0
    within_n = between_n = 0
    for i in range(len(x) - 1):
        d = np.abs(x[i + 1:] - x[i]).sum(axis=1)
        same = labels[i + 1:] == labels[i]
        within_sum += d[same].sum()
        within_n += int(same.sum())
        between_sum += d[~same].sum()
        between_n += int((~same).sum())
    within = within_sum / within_n if within_n else float("nan")
    between = between_sum / between_n if between_n else float("nan")
    return within, between


# -- reconstruction under channel transforms ----------------------------------------


def reconstruct(model: Model, images: np.ndarray, transform=None) -> np.ndarray:
    """Decode (optionally transformed) last-layer channels to ``(B, H, W)`` images."""
    with T.no_grad():
        caps = model.capsules(images).data
        if transform is not None:
            caps = transform_channels(caps, transform)
        rec = model.decode_conv(Tensor(caps)).data
    return rec if rec.ndim == 3 else rec[..., 0]


def transform_recon_mse(model: Model, images: np.ndarray, batch_size: int = 128):
    """Per-transform MSE between reconstructions and transformed ground truth.

    Returns ``[(name, mse), ...]`` in the order of ``recon_transforms``.
    Channel translations are in last-layer pixels; the ground truth is moved
    by the same transform expressed at image resolution.
    """
    factor = images.shape[-1] // model.spec.grid_shapes()[-1][1]
    totals = {name: 0.0 for name, _ in recon_transforms()}
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            x = images[s:s + batch_size]
            caps = model.capsules(x).data
            for name, t in recon_transforms():
                rec = model.decode_conv(Tensor(transform_channels(caps, t))).data
                rec = rec if rec.ndim == 3 else rec[..., 0]
                target = transform_plane(x[:, 0], scale_translation(t, factor))
                totals[name] += float(((rec - target) ** 2).mean(axis=(1, 2)).sum())
    return [(name, totals[name] / len(images)) for name in totals]


def transform_grid(model: Model, image: np.ndarray) -> np.ndarray:
    """One row of 19 tiles: ground truth followed by the 18 reconstructions."""
    x = image[None]
    tiles = [x[0, 0]]
    for _, t in recon_transforms():
        tiles.append(reconstruct(model, x, t)[0])
    return np.concatenate(tiles, axis=1)


# -- capsule perturbation ------------------------------------------------------------


def perturbation_rows(model: Model, image: np.ndarray, label: int | None = None) -> list[np.ndarray]:
    """Per capsule dimension, 11 reconstructions side by side (``28 x 308``)."""
    with T.no_grad():
        caps = model.capsules(image[None]).data[0, 0, 0]        # (num_classes, D)
        if label is None:
            label = int(model.logits(Tensor(caps.reshape(1, 1, 1, *caps.shape))).data.argmax())
        kept = mask_capsules(caps, label)
        rows = []
        for d in range(caps.shape[1]):
            # perturb, then re-mask so only the kept capsule moves
            # one decode per delta: GEMM rounding can depend on batch size, and
            # the delta-0 tile must equal the plain reconstruction bit for bit
            tiles = [model.decode_fc(Tensor(mask_capsules(perturb_dimension(kept, d, delta), label)[None])).data[0]
                     for delta in perturbation_deltas()]
            rows.append(np.concatenate(tiles, axis=1))
    return rows


# -- viewpoint generalisation --------------------------------------------------------


def select_epoch(history: list[dict], target: float | None = None) -> dict:
    """Epoch whose familiar accuracy is closest below ``target`` (best if None)."""
    if not history:
        raise ValueError("no epochs to select from")
    if target is None:
        return max(history, key=lambda r: (r["familiar_acc"], -r["epoch"]))
    below = [r for r in history if r["familiar_acc"] <= target]
    if not below:
        return min(history, key=lambda r: (r["familiar_acc"], r["epoch"]))
    return max(below, key=lambda r: (r["familiar_acc"], -r["epoch"]))


def viewpoint_history(model: Model, familiar: Dataset, novel: Dataset, aug) -> dict:
    return {"familiar_acc": 1.0 - evaluate(model, familiar, aug),
            "novel_acc": 1.0 - evaluate(model, novel, aug)}
