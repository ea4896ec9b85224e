"""The segmentation network: cascade-atrous backbone, pyramid-pooling head,
classifier, SGD training, prediction and checkpoint I/O.

Topology (C = base_channels, output stride 16):
  stem   conv3x3 s2          3 -> C          crop   -> crop/2
  block1 conv3x3 s2, conv3x3 C -> 2C         -> /4
  block2 conv3x3 s2, conv3x3 2C -> 4C        -> /8
  block3 conv3x3 s2, conv3x3 4C -> 8C        -> /16
  atrous conv3x3 d2, conv3x3 d2, 8C -> 8C    keeps /16
  head   five-branch pyramid pool -> 1x1 classifier -> bilinear to crop

Every backbone conv is followed by (optional) batchnorm and ReLU; the
pyramid branches use conv + ReLU only.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointError,
    IncompatibleModelError,
    ShapeError,
    TrainingDivergedError,
)
from .ops import (
    ConvParams,
    LossConfig,
    NormParams,
    batchnorm_backward,
    batchnorm_forward,
    bilinear_upsample,
    bilinear_upsample_backward,
    conv2d_forward,
    conv2d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    lr_at_step,
    relu,
    relu_backward,
    same_padding,
    weighted_ce_loss,
)
from .tensor import RngState, he_init

CHECKPOINT_MAGIC = b"LSCKPT1"
META_NAME = "meta.arch"


@dataclass
class ModelConfig:
    num_classes: int = 2
    crop: int = 513
    output_stride: int = 16
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    base_channels: int = 32
    norm_enabled: bool = True
    seed: int = 0


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    fg_weight: float = 100.0
    batch: int = 2
    max_steps: int = 100
    decay_power: float = 0.9
    seed: int = 0


@dataclass
class SegModel:
    """Named-parameter registry plus config and step counter.

    Wherever ordering matters (updates, checkpoints, direction vectors)
    parameters are visited sorted by name.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0


@dataclass(frozen=True)
class _Unit:
    """One conv (+ optional norm) (+ optional ReLU) stage."""

    name: str
    cin: int
    cout: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    norm: bool = False
    act: bool = True

    @property
    def padding(self) -> int:
        return same_padding(self.kernel, self.dilation)


def _validate_config(cfg: ModelConfig) -> None:
    if cfg.output_stride != 16:
        raise ValueError(f"output_stride is fixed at 16, got {cfg.output_stride}")
    if cfg.crop < 17 or cfg.crop % cfg.output_stride != 1:
        raise ValueError(f"crop must be 1 mod {cfg.output_stride} and >= 17, got {cfg.crop}")
    if cfg.num_classes != 2:
        raise ValueError(f"binary segmentation only, got {cfg.num_classes} classes")
    if cfg.base_channels < 1:
        raise ValueError("base_channels must be >= 1")
    rates = tuple(cfg.aspp_rates)
    if len(rates) < 1 or any(r < 1 for r in rates) or list(rates) != sorted(set(rates)):
        raise ValueError(f"aspp_rates must be strictly increasing and >= 1, got {rates}")


def _backbone_units(cfg: ModelConfig) -> list[_Unit]:
    c = cfg.base_channels
    nrm = cfg.norm_enabled
    units = [_Unit("backbone.stem", 3, c, stride=2, norm=nrm)]
    cin = c
    for i in (1, 2, 3):
        cout = cin * 2
        units.append(_Unit(f"backbone.block{i}.a", cin, cout, stride=2, norm=nrm))
        units.append(_Unit(f"backbone.block{i}.b", cout, cout, norm=nrm))
        cin = cout
    units.append(_Unit("backbone.atrous.a", cin, cin, dilation=2, norm=nrm))
    units.append(_Unit("backbone.atrous.b", cin, cin, dilation=2, norm=nrm))
    return units


def _head_units(cfg: ModelConfig) -> tuple[list[_Unit], _Unit, _Unit]:
    """(pyramid branches, projection, classifier); branch order is fixed:
    1x1 first, then the atrous rates ascending, then the image-pool branch."""
    cin = 8 * cfg.base_channels
    branch = 2 * cfg.base_channels
    branches = [_Unit("aspp.branch1x1", cin, branch, kernel=1)]
    branches += [_Unit(f"aspp.rate{r}", cin, branch, dilation=r)
                 for r in cfg.aspp_rates]
    branches.append(_Unit("aspp.image", cin, branch, kernel=1))
    project = _Unit("aspp.project", branch * len(branches), cin, kernel=1, act=False)
    classifier = _Unit("head.classifier", cin, cfg.num_classes, kernel=1, act=False)
    return branches, project, classifier


def _all_units(cfg: ModelConfig) -> list[_Unit]:
    branches, project, classifier = _head_units(cfg)
    return _backbone_units(cfg) + branches + [project, classifier]


def param_layout(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Expected parameter names and shapes for a config (sorted by name)."""
    _validate_config(cfg)
    layout: dict[str, tuple[int, ...]] = {}
    for u in _all_units(cfg):
        layout[f"{u.name}.conv.weight"] = (u.cout, u.cin, u.kernel, u.kernel)
        layout[f"{u.name}.conv.bias"] = (u.cout,)
        if u.norm:
            for stat in ("gamma", "beta", "running_mean", "running_var"):
                layout[f"{u.name}.norm.{stat}"] = (u.cout,)
    return dict(sorted(layout.items()))


# classifier foreground bias starts at the background prior so the heavily
# foreground-weighted loss grows the lesion region outward instead of having
# to carve the background back at 1/fg_weight of the learning speed
FG_PRIOR = 0.01


def build_model(cfg: ModelConfig) -> SegModel:
    """He-initialized model; byte-identical for identical configs and seeds."""
    _validate_config(cfg)
    rng = RngState(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for u in _all_units(cfg):
        fan_in = u.cin * u.kernel * u.kernel
        weight, rng = he_init(rng, (u.cout, u.cin, u.kernel, u.kernel), fan_in)
        params[f"{u.name}.conv.weight"] = weight
        params[f"{u.name}.conv.bias"] = np.zeros(u.cout, dtype=np.float32)
        if u.norm:
            params[f"{u.name}.norm.gamma"] = np.ones(u.cout, dtype=np.float32)
            params[f"{u.name}.norm.beta"] = np.zeros(u.cout, dtype=np.float32)
            params[f"{u.name}.norm.running_mean"] = np.zeros(u.cout, dtype=np.float32)
            params[f"{u.name}.norm.running_var"] = np.ones(u.cout, dtype=np.float32)
    bias = params["head.classifier.conv.bias"]
    bias[1] = -np.log((1.0 - FG_PRIOR) / FG_PRIOR)
    return SegModel(config=cfg, params=dict(sorted(params.items())), step=0)


# ---------------------------------------------------------------------------
# Forward / backward plumbing

def _unit_forward(model: SegModel, u: _Unit, x: np.ndarray, train: bool,
                  caches: list | None) -> np.ndarray:
    p = model.params
    conv = ConvParams(p[f"{u.name}.conv.weight"], p[f"{u.name}.conv.bias"],
                      stride=u.stride, dilation=u.dilation, padding=u.padding)
    y = conv2d_forward(x, conv)
    norm_cache = None
    if u.norm:
        norm = NormParams(p[f"{u.name}.norm.gamma"], p[f"{u.name}.norm.beta"],
                          p[f"{u.name}.norm.running_mean"],
                          p[f"{u.name}.norm.running_var"])
        y, norm_cache = batchnorm_forward(y, norm, train=train)
    pre_act = y if u.act else None
    if u.act:
        y = relu(y)
    if caches is not None:
        caches.append((u, x, norm_cache, pre_act))
    return y


def _unit_backward(model: SegModel, cache, grad_out: np.ndarray,
                   grads: dict[str, np.ndarray]) -> np.ndarray:
    u, x, norm_cache, pre_act = cache
    g = grad_out
    if u.act:
        g = relu_backward(pre_act, g)
    if u.norm:
        g, dgamma, dbeta = batchnorm_backward(norm_cache, g)
        grads[f"{u.name}.norm.gamma"] = dgamma
        grads[f"{u.name}.norm.beta"] = dbeta
    conv = ConvParams(model.params[f"{u.name}.conv.weight"],
                      model.params[f"{u.name}.conv.bias"],
                      stride=u.stride, dilation=u.dilation, padding=u.padding)
    gin, dw, db = conv2d_backward(x, conv, g)
    grads[f"{u.name}.conv.weight"] = dw
    grads[f"{u.name}.conv.bias"] = db
    return gin


def backbone_forward(model: SegModel, images: np.ndarray, mode: str = "infer",
                     _caches: list | None = None) -> np.ndarray:
    """Images (N, 3, crop, crop) -> features (N, 8C, crop/16 + 1, same)."""
    train = _check_mode(mode)
    x = images
    for u in _backbone_units(model.config):
        x = _unit_forward(model, u, x, train, _caches)
    return x


def aspp_forward(model: SegModel, features: np.ndarray, mode: str = "infer",
                 _caches: list | None = None) -> np.ndarray:
    """Five parallel branches (1x1, three atrous rates, pooled image branch),
    concatenated and projected back to the feature width."""
    train = _check_mode(mode)
    h, w = features.shape[2:]
    branches, project, _ = _head_units(model.config)
    outs = []
    pool_cache = None
    for u in branches:
        if u.name == "aspp.image":
            pooled = global_avg_pool(features)
            y = _unit_forward(model, u, pooled, train, _caches)
            outs.append(bilinear_upsample(y, h, w))
            pool_cache = (features.shape, y.shape)
        else:
            outs.append(_unit_forward(model, u, features, train, _caches))
    concat = np.concatenate(outs, axis=1)
    projected = _unit_forward(model, project, concat, train, _caches)
    if _caches is not None:
        _caches.append(("aspp.glue", pool_cache, [o.shape[1] for o in outs]))
    return projected


def _aspp_backward(model: SegModel, caches: list, grad_out: np.ndarray,
                   grads: dict[str, np.ndarray]) -> np.ndarray:
    tag, pool_cache, widths = caches.pop()
    assert tag == "aspp.glue"
    gcat = _unit_backward(model, caches.pop(), grad_out, grads)
    feat_shape, pooled_out_shape = pool_cache
    grad_feat = np.zeros(feat_shape, dtype=grad_out.dtype)
    # branch caches sit on the stack in forward order; split the concat grad
    # by channel and pop them in reverse
    edges = np.cumsum([0] + widths)
    pieces = [gcat[:, edges[i]:edges[i + 1]] for i in range(len(widths))]
    for piece in reversed(pieces):
        cache = caches.pop()
        unit = cache[0]
        if unit.name == "aspp.image":
            gp = bilinear_upsample_backward(piece, 1, 1)
            gp = _unit_backward(model, cache, gp, grads)
            grad_feat += global_avg_pool_backward(feat_shape, gp)
        else:
            grad_feat += _unit_backward(model, cache, piece, grads)
    return grad_feat


def _forward(model: SegModel, images: np.ndarray, train: bool,
             caches: list | None) -> np.ndarray:
    cfg = model.config
    n = images.shape[0]
    if images.shape != (n, 3, cfg.crop, cfg.crop):
        raise ShapeError(
            f"expected images (N, 3, {cfg.crop}, {cfg.crop}), got {images.shape}")
    mode = "train" if train else "infer"
    feats = backbone_forward(model, images, mode, caches)
    y = aspp_forward(model, feats, mode, caches)
    _, project, classifier = _head_units(cfg)
    logits_small = _unit_forward(model, classifier, y, train, caches)
    if caches is not None:
        caches.append(("upsample", logits_small.shape[2:]))
    return bilinear_upsample(logits_small, cfg.crop, cfg.crop)


def _backward(model: SegModel, caches: list,
              grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    tag, (fh, fw) = caches.pop()
    assert tag == "upsample"
    g = bilinear_upsample_backward(grad_logits, fh, fw)
    g = _unit_backward(model, caches.pop(), g, grads)  # classifier
    g = _aspp_backward(model, caches, g, grads)
    while caches:
        g = _unit_backward(model, caches.pop(), g, grads)
    return grads


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return mode == "train"


def model_forward(model: SegModel, images: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Full network: (N, 3, crop, crop) images -> (N, 2, crop, crop) logits.

    Train mode updates batchnorm running statistics as a side effect.
    """
    return _forward(model, images, _check_mode(mode), None)


def train_step(model: SegModel, batch: tuple[np.ndarray, np.ndarray],
               tcfg: TrainConfig) -> dict:
    """One SGD step at the polynomial-decay rate for the current step.

    Returns {"loss": pre-update loss, "lr": rate used, "step": index used}.
    """
    images, masks = batch
    lr = lr_at_step(model.step, tcfg.base_lr, tcfg.max_steps, tcfg.decay_power)
    caches: list = []
    logits = _forward(model, images, True, caches)
    loss, grad_logits = weighted_ce_loss(
        logits, masks, LossConfig((1.0, tcfg.fg_weight)))
    if not np.isfinite(loss):
        raise TrainingDivergedError(model.step)
    grads = _backward(model, caches, grad_logits)
    for name in sorted(grads):
        model.params[name] -= (lr * grads[name]).astype(np.float32, copy=False)
    used = model.step
    model.step += 1
    return {"loss": loss, "lr": lr, "step": used}


def predict(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Per-pixel argmax mask for one normalized (3, crop, crop) image.

    Exactly tied logits resolve to class 0 (background).
    """
    if image.ndim != 3:
        raise ShapeError(f"predict expects one (3, crop, crop) image, got {image.shape}")
    logits = model_forward(model, image[None], "infer")[0]
    return np.argmax(logits, axis=0).astype(np.uint8)  # argmax takes the first max


# ---------------------------------------------------------------------------
# Checkpoints

def _meta_tensor(cfg: ModelConfig) -> np.ndarray:
    vals = [cfg.crop, cfg.output_stride, cfg.base_channels, cfg.num_classes,
            1 if cfg.norm_enabled else 0] + list(cfg.aspp_rates)
    return np.array(vals, dtype=np.float32)


def _config_from_meta(meta: np.ndarray) -> ModelConfig:
    if meta.ndim != 1 or meta.size < 6:
        raise IncompatibleModelError(f"malformed {META_NAME} tensor")
    vals = [int(v) for v in meta]
    return ModelConfig(crop=vals[0], output_stride=vals[1], base_channels=vals[2],
                       num_classes=vals[3], norm_enabled=bool(vals[4]),
                       aspp_rates=tuple(vals[5:]), seed=0)


def checkpoint_save(model: SegModel, path) -> None:
    """Binary format: magic "LSCKPT1", u64 step, u32 tensor count, then per
    tensor (sorted by name): u16 name length, name, u8 ndims, u32 dims,
    raw little-endian float32 data. Includes a reserved meta.arch tensor
    encoding the architecture so a checkpoint is self-describing.
    """
    tensors = dict(model.params)
    tensors[META_NAME] = _meta_tensor(model.config)
    blobs = [CHECKPOINT_MAGIC, struct.pack("<QI", model.step, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        blobs.append(struct.pack("<H", len(encoded)))
        blobs.append(encoded)
        blobs.append(struct.pack("<B", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


def checkpoint_load(path) -> SegModel:
    """Restore a model; tensor names must exactly match the stored layout."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:7] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:7]!r}, expected {CHECKPOINT_MAGIC!r}")
    pos = 7

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    step, count = struct.unpack("<QI", take(12))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_elem = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(4 * n_elem), dtype="<f4")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = data.reshape(dims).copy()
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after tensors")

    if META_NAME not in tensors:
        raise IncompatibleModelError(f"checkpoint lacks the {META_NAME} tensor")
    cfg = _config_from_meta(tensors.pop(META_NAME))
    try:
        layout = param_layout(cfg)
    except ValueError as exc:
        raise IncompatibleModelError(f"invalid stored config: {exc}") from exc
    unknown = sorted(set(tensors) - set(layout))
    missing = sorted(set(layout) - set(tensors))
    if unknown:
        raise IncompatibleModelError(f"unknown tensor names: {', '.join(unknown)}")
    if missing:
        raise IncompatibleModelError(f"missing tensors: {', '.join(missing)}")
    for name, shape in layout.items():
        if tensors[name].shape != shape:
            raise IncompatibleModelError(
                f"{name}: stored shape {tensors[name].shape}, expected {shape}")
    return SegModel(config=cfg, params=dict(sorted(tensors.items())), step=int(step))
