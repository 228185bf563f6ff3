"""Masked-patch self-supervised pretraining.

The encoder sees only the visible subset of patch tokens; a light decoder
restores the full sequence with a shared learnable mask token and
reconstructs raw pixels. The loss is mean squared error over the masked
patches only, so visible pixels of the target cannot influence it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .backbone import (
    BackboneConfig,
    DecoderConfig,
    backbone_forward,
    encoder_block,
    init_backbone,
    sincos_pos_table,
    _weight,
    _zeros,
)
from .optim import AdamW, effective_lr, warmup_cosine_lr
from .rng import Rng
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    backward,
    gather_rows,
    layer_norm,
    matmul,
    mean_all,
    mul,
    reshape,
    scale,
    scatter_rows,
    sub,
    transpose,
)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


# ---------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------

@dataclass
class MaskPlan:
    total: int
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    seed: int

    def __post_init__(self):
        self.visible_idx = np.asarray(self.visible_idx, dtype=np.int64)
        self.masked_idx = np.asarray(self.masked_idx, dtype=np.int64)


def make_mask_plan(total: int, ratio: float, rng: Rng) -> MaskPlan:
    """Uniform random split of token indices into visible and masked sets."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    k = int(round(total * ratio))
    perm = rng.permutation(total)
    return MaskPlan(total=total,
                    visible_idx=np.sort(perm[k:]),
                    masked_idx=np.sort(perm[:k]),
                    seed=int(rng.seed))


# ---------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------

@dataclass
class PretrainSchedule:
    """Pretraining defaults; batch 8 is the desk-scale default, with the
    batch*base/256 effective-LR rule still applied."""

    epochs: int = 400
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    batch: int = 8
    mask_ratio: float = 0.75
    warmup_epochs: int = 20

    @classmethod
    def for_model(cls, name: str, **overrides) -> "PretrainSchedule":
        # the largest registered model needs the lower base LR to converge
        defaults = {"base_lr": 1e-4} if name.startswith("ViT-G") else {}
        defaults.update(overrides)
        return cls(**defaults)


# ---------------------------------------------------------------------
# augmentation (data pipeline; plain numpy, no gradients)
# ---------------------------------------------------------------------

def flip(image: np.ndarray, horizontal: bool = False, vertical: bool = False) -> np.ndarray:
    out = image
    if horizontal:
        out = out[:, :, ::-1]
    if vertical:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of [C, H, W] with half-pixel-centre mapping."""
    c, h, w = image.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(image.dtype)


def augment(image: np.ndarray, rng: Rng, out_size: int = 224) -> np.ndarray:
    """Random resized crop (area 0.2-1.0, aspect 3/4-4/3) to ``out_size``,
    then independent 50% horizontal and vertical flips.

    Draw order is fixed: crop attempts first, then the two flip coins, so
    a given rng split always produces the same augmentation.
    """
    c, h, w = image.shape
    if h < 32 or w < 32:
        raise ValueError(f"augment needs at least 32x32 input, got {h}x{w}")
    crop = None
    for _ in range(10):
        area = (0.2 + 0.8 * rng.uniform()) * h * w
        aspect = math.exp(math.log(3 / 4) + rng.uniform() * (math.log(4 / 3) - math.log(3 / 4)))
        cw = int(round(math.sqrt(area * aspect)))
        ch = int(round(math.sqrt(area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = rng.integers(0, h - ch + 1)
            left = rng.integers(0, w - cw + 1)
            crop = image[:, top:top + ch, left:left + cw]
            break
    if crop is None:
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        crop = image[:, top:top + side, left:left + side]
    out = bilinear_resize(np.ascontiguousarray(crop), out_size, out_size)
    return flip(out, horizontal=bool(rng.uniform() < 0.5), vertical=bool(rng.uniform() < 0.5))


# ---------------------------------------------------------------------
# patchify / embed
# ---------------------------------------------------------------------

def patchify_pixels(image: Tensor, patch: int) -> Tensor:
    """[C, H, W] -> [grid^2, patch^2*C] raw-pixel patches (differentiable)."""
    c, h, w = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = reshape(image, (c, gh, patch, gw, patch))
    x = transpose(x, (1, 3, 2, 4, 0))  # [gh, gw, p, p, c]
    return reshape(x, (gh * gw, patch * patch * c))


def unpatchify_pixels(patches: Tensor, patch: int, grid: int, channels: int = 3) -> Tensor:
    """Exact inverse of :func:`patchify_pixels` for a square grid."""
    x = reshape(patches, (grid, grid, patch, patch, channels))
    x = transpose(x, (4, 0, 2, 1, 3))  # [c, gh, p, gw, p]
    return reshape(x, (channels, grid * patch, grid * patch))


def patchify_embed(image, params: dict, cfg: BackboneConfig, pos: Tensor | None = None) -> Tensor:
    """Patchify + linear projection + positional addition -> [T, hidden]."""
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    pixels = patchify_pixels(img, cfg.patch)
    tokens = add(matmul(pixels, params["patch_embed.w"]), params["patch_embed.b"])
    return add(tokens, params["pos"] if pos is None else pos)


# ---------------------------------------------------------------------
# model
# ---------------------------------------------------------------------

def _decoder_backbone_cfg(cfg: BackboneConfig, dcfg: DecoderConfig) -> BackboneConfig:
    return BackboneConfig(hidden=dcfg.hidden, layers=dcfg.layers, parallelism=1,
                          mlp=dcfg.mlp, heads=dcfg.heads, patch=cfg.patch,
                          image=cfg.image, in_channels=cfg.in_channels)


def init_mae(cfg: BackboneConfig, rng: Rng, decoder: DecoderConfig | None = None,
             dtype=np.float32) -> dict[str, Tensor]:
    """Encoder tensors plus a ``dec.``-prefixed reconstruction decoder."""
    dcfg = decoder or DecoderConfig()
    if dcfg.hidden > cfg.hidden:
        raise ValueError(f"decoder hidden {dcfg.hidden} exceeds encoder hidden {cfg.hidden}")
    dtype_t = np.dtype(dtype).type
    params = init_backbone(cfg, rng, dtype)
    params["dec.embed.w"] = _weight(rng, "dec.embed.w", (cfg.hidden, dcfg.hidden), dtype_t)
    params["dec.embed.b"] = _zeros((dcfg.hidden,), dtype_t)
    params["dec.mask_token"] = _weight(rng, "dec.mask_token", (1, dcfg.hidden), dtype_t)
    params["dec.pos"] = Tensor(sincos_pos_table(cfg.grid, dcfg.hidden).astype(dtype_t),
                               requires_grad=False)
    dec_body = init_backbone(_decoder_backbone_cfg(cfg, dcfg), rng.split("decoder"), dtype)
    for name, t in dec_body.items():
        if name.startswith(("patch_embed.", "pos")):
            continue  # the decoder has its own embed/pos above
        params[f"dec.{name}"] = t
    params["dec.out.w"] = _weight(rng, "dec.out.w", (dcfg.hidden, cfg.patch_dim), dtype_t)
    params["dec.out.b"] = _zeros((cfg.patch_dim,), dtype_t)
    return params


def mae_forward(params: dict, cfg: BackboneConfig, dcfg: DecoderConfig,
                tokens: Tensor, plan: MaskPlan) -> Tensor:
    """Visible-only encoding, mask-token decoding, masked-pixel prediction.

    Returns predictions of shape [|masked|, patch^2 * channels].
    """
    if plan.total != tokens.shape[0]:
        raise ValueError(f"mask plan covers {plan.total} tokens but got {tokens.shape[0]}")
    visible = gather_rows(tokens, plan.visible_idx)
    encoded = backbone_forward(params, cfg, visible)
    d = add(matmul(encoded, params["dec.embed.w"]), params["dec.embed.b"])
    mask_rows = gather_rows(params["dec.mask_token"], np.zeros(len(plan.masked_idx), dtype=np.int64))
    full = add(scatter_rows(d, plan.visible_idx, plan.total),
               scatter_rows(mask_rows, plan.masked_idx, plan.total))
    x = add(full, params["dec.pos"])
    dec_view = {k[4:]: v for k, v in params.items() if k.startswith("dec.")}
    dcfg_bb = _decoder_backbone_cfg(cfg, dcfg)
    for l in range(1, dcfg.layers + 1):
        x = encoder_block(dec_view, dcfg_bb, l, x)
    x = layer_norm(x, dec_view["norm.g"], dec_view["norm.b"])
    pred_full = add(matmul(x, dec_view["out.w"]), dec_view["out.b"])
    return gather_rows(pred_full, plan.masked_idx)


def mae_loss(pred: Tensor, target_image: Tensor, plan: MaskPlan, patch: int) -> Tensor:
    """Mean squared error over masked-patch pixels only.

    With nothing masked the loss is defined as exactly zero (and flagged),
    since there is no reconstruction target.
    """
    target_patches = patchify_pixels(target_image, patch)
    if pred.shape[0] != len(plan.masked_idx) or pred.shape[1] != target_patches.shape[1]:
        raise ValueError(f"prediction {pred.shape} does not cover the {len(plan.masked_idx)} masked patches")
    if len(plan.masked_idx) == 0:
        warnings.warn("mask ratio 0: no masked area, reconstruction loss defined as 0")
        return Tensor(np.asarray(0.0, dtype=pred.data.dtype))
    target = gather_rows(target_patches, plan.masked_idx)
    diff = sub(pred, target)
    return mean_all(mul(diff, diff))


# ---------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------

def pretrain(cfg: BackboneConfig, schedule: PretrainSchedule, dataset, rng: Rng,
             decoder: DecoderConfig | None = None, on_epoch=None):
    """Run the full self-supervised loop over an in-memory image list.

    Per-sample augmentation and masking streams are derived by label from
    the top-level rng, so results are bit-identical regardless of worker
    count or batch boundaries. Returns (params, per-epoch mean losses).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    dcfg = decoder or DecoderConfig()
    params = init_mae(cfg, rng.split("init"), dcfg)
    opt = AdamW(params, weight_decay=schedule.weight_decay, betas=(0.9, 0.95))
    lr_peak = effective_lr(schedule.batch, schedule.base_lr)
    n = len(dataset)
    steps_per_epoch = max(1, math.ceil(n / schedule.batch))
    total_steps = schedule.epochs * steps_per_epoch
    warmup_steps = schedule.warmup_epochs * steps_per_epoch

    losses = []
    step = 0
    for epoch in range(schedule.epochs):
        order = rng.split(f"order/{epoch}").permutation(n)
        epoch_losses = []
        for b in range(steps_per_epoch):
            batch_idx = order[b * schedule.batch:(b + 1) * schedule.batch]
            if len(batch_idx) == 0:
                continue
            sample_losses = []
            try:
                for i in batch_idx:
                    img = augment(np.asarray(dataset[int(i)], dtype=np.float32),
                                  rng.split(f"aug/{epoch}/{int(i)}"), out_size=cfg.image)
                    tokens = patchify_embed(img, params, cfg)
                    plan = make_mask_plan(cfg.tokens, schedule.mask_ratio,
                                          rng.split(f"mask/{epoch}/{int(i)}"))
                    pred = mae_forward(params, cfg, dcfg, tokens, plan)
                    sample_losses.append(mae_loss(pred, Tensor(img), plan, cfg.patch))
                total = sample_losses[0]
                for sl in sample_losses[1:]:
                    total = add(total, sl)
                loss = scale(total, 1.0 / len(sample_losses))
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {b}")
                backward(loss)
            except NonFiniteError as e:
                raise TrainingDiverged(f"divergence at epoch {epoch} step {b}: {e}") from e
            opt.step(warmup_cosine_lr(lr_peak, step, total_steps, warmup_steps))
            opt.zero_grad()
            epoch_losses.append(value)
            step += 1
        losses.append(float(np.mean(epoch_losses)))
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return params, losses


def write_loss_csv(path, losses) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,mean_loss\n")
        for e, v in enumerate(losses):
            f.write(f"{e},{v:.10g}\n")
