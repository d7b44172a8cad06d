"""Two-stream pass classifier: conv stream for the tracking image, small MLP
for the passer-stats vector, concatenated into a linear softmax head.

The conv stream is a compact ConvNeXt-style stack: patchify stem, stages of
residual blocks (7x7 depthwise conv, channels-last layer norm, pointwise 4x
expansion, GELU, pointwise projection), 2x2 stride-2 downsampling between
stages, global average pooling and a final layer norm. The stats stream is a
single hidden layer (15 -> 64) with GELU. ``image_only`` drops the stats
stream entirely and puts a fresh head on the conv features.

Everything runs in float64 by default so reverse-mode gradients can be
checked against central finite differences at tight tolerances; float32 is
available for faster training.

Class convention used across the package: probability/logit index 0 is
"success", index 1 is "failure"; dataset labels are these class indices.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .features import N_FEATURES, Standardizer, standardizer_from_dict, standardizer_to_dict
from .scene import RasterConfig, RasterImage, raster_config_from_dict, raster_config_to_dict

CLASS_NAMES = ("success", "failure")
SUCCESS, FAILURE = 0, 1

CHECKPOINT_VERSION = 1


class ModelConfigError(ValueError):
    """Raised when configured shapes are inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    input_px: int = 64
    stem_patch: int = 4
    stage_dims: tuple[int, ...] = (16, 32, 64, 128)
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    dw_kernel: int = 7
    mlp_in: int = N_FEATURES
    mlp_hidden: int = 64
    num_classes: int = 2
    image_only: bool = False

    def __post_init__(self):
        if len(self.stage_dims) != len(self.stage_depths) or not self.stage_dims:
            raise ModelConfigError("stage_dims and stage_depths must be equally sized, nonempty")
        if self.dw_kernel % 2 != 1:
            raise ModelConfigError("depthwise kernel must be odd")
        total_stride = self.stem_patch * 2 ** (len(self.stage_dims) - 1)
        if self.input_px % total_stride != 0:
            raise ModelConfigError(
                f"input_px {self.input_px} must be divisible by {total_stride} "
                f"(stem_patch * 2^(stages-1))"
            )

    @property
    def fused_dim(self) -> int:
        if self.image_only:
            return self.stage_dims[-1]
        return self.stage_dims[-1] + self.mlp_hidden

    @property
    def featuremap_px(self) -> int:
        return self.input_px // (self.stem_patch * 2 ** (len(self.stage_dims) - 1))


def paper_model_config(image_only: bool = False) -> ModelConfig:
    """Full-size preset: 224 px input, tiny-variant widths/depths, 768-d conv features."""
    return ModelConfig(
        input_px=224,
        stage_dims=(96, 192, 384, 768),
        stage_depths=(3, 3, 9, 3),
        image_only=image_only,
    )


def desk_model_config(image_only: bool = False) -> ModelConfig:
    """Desk preset: 64 px input, small widths, trains in minutes on a CPU."""
    return ModelConfig(image_only=image_only)


def desk_tiny_model_config(image_only: bool = False) -> ModelConfig:
    """Minimal preset for finite-difference gradient verification."""
    return ModelConfig(
        input_px=16,
        stage_dims=(4, 8),
        stage_depths=(1, 1),
        image_only=image_only,
    )


MODEL_PRESETS = {
    "paper": paper_model_config,
    "desk": desk_model_config,
    "desk_tiny": desk_tiny_model_config,
}


class _Block(nn.Module):
    """Residual unit: depthwise conv -> LN -> 4x expand -> GELU -> project."""

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.pwconv2 = nn.Linear(4 * dim, dim)

    def forward(self, x):
        y = self.dwconv(x)
        y = y.permute(0, 2, 3, 1)
        y = self.norm(y)
        y = self.pwconv2(self.act(self.pwconv1(y)))
        y = y.permute(0, 3, 1, 2)
        return x + y


class _Downsample(nn.Module):
    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim_in, eps=1e-6)
        self.conv = nn.Conv2d(dim_in, dim_out, 2, stride=2)

    def forward(self, x):
        y = x.permute(0, 2, 3, 1)
        y = self.norm(y)
        y = y.permute(0, 3, 1, 2)
        return self.conv(y)


class TwoStreamClassifier(nn.Module):
    """The network. Use the module-level init/forward/grad helpers below for
    the numpy-facing API; this class holds structure and the torch forward."""

    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config
        dims = config.stage_dims
        self.stem = nn.Conv2d(3, dims[0], config.stem_patch, stride=config.stem_patch)
        self.stages = nn.ModuleList(
            nn.ModuleList(_Block(dims[i], config.dw_kernel) for _ in range(config.stage_depths[i]))
            for i in range(len(dims))
        )
        self.downsamples = nn.ModuleList(
            _Downsample(dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        )
        self.head_norm = nn.LayerNorm(dims[-1], eps=1e-6)
        if not config.image_only:
            self.mlp_fc = nn.Linear(config.mlp_in, config.mlp_hidden)
            self.mlp_act = nn.GELU()
        self.head = nn.Linear(config.fused_dim, config.num_classes)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def forward(self, images: torch.Tensor, features: torch.Tensor | None):
        """images (B, 3, H, W), features (B, 15) -> (logits (B, 2), fmap (B, K, u, v)).

        The returned feature map is the last stage output before pooling, the
        tap point for class-activation maps. The two fusion halves only meet
        in the head, so gradients through one stream never leak into the
        other (the explanation identities rely on this).
        """
        x = self.stem(images)
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.downsamples[i - 1](x)
            for block in stage:
                x = block(x)
        fmap = x
        conv_vec = self.head_norm(fmap.mean(dim=(2, 3)))
        if self.config.image_only:
            fused = conv_vec
        else:
            fused = torch.cat([conv_vec, self.mlp_act(self.mlp_fc(features))], dim=1)
        return self.head(fused), fmap


def _trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> None:
    # inverse-CDF sampling truncated at +/- 2 std
    lo = (1.0 + math.erf(-2.0 / math.sqrt(2.0))) / 2.0
    hi = (1.0 + math.erf(2.0 / math.sqrt(2.0))) / 2.0
    with torch.no_grad():
        tensor.uniform_(lo, hi, generator=generator)
        tensor.mul_(2.0).sub_(1.0)
        tensor.erfinv_()
        tensor.mul_(std * math.sqrt(2.0))
        tensor.clamp_(-2.0 * std, 2.0 * std)


def init_params(
    config: ModelConfig, seed: int, dtype: torch.dtype = torch.float64
) -> TwoStreamClassifier:
    """Fresh model: truncated-normal (sigma 0.02) conv/linear weights, zero
    biases, unit layer-norm scales. Deterministic per seed."""
    model = TwoStreamClassifier(config, dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            _trunc_normal_(module.weight, 0.02, gen)
            with torch.no_grad():
                module.bias.zero_()
        elif isinstance(module, nn.LayerNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def param_count(model: TwoStreamClassifier) -> int:
    return sum(p.numel() for p in model.parameters())


# --- numpy-facing inference API ------------------------------------------------


@dataclass(frozen=True)
class ForwardTrace:
    """Single-example forward outputs: pre-softmax logits, probabilities and
    the last conv feature map (u, v, K) used by class-activation maps."""

    logits: np.ndarray
    probabilities: np.ndarray
    feature_map: np.ndarray


@dataclass(frozen=True)
class InputGrads:
    """Gradients of one pre-softmax logit w.r.t. the float image, the
    standardized feature vector and the last conv feature map, all taken in
    a single backward pass, plus the forward trace they came from."""

    class_index: int
    pixel_grads: np.ndarray  # (H, W, 3)
    feature_grads: np.ndarray  # (15,)
    featuremap_grads: np.ndarray  # (u, v, K)
    trace: ForwardTrace


def _image_array(image) -> np.ndarray:
    """Accepts a RasterImage, a uint8 array (scaled to [0, 1]) or a float array."""
    if isinstance(image, RasterImage):
        arr = image.float_view()
    else:
        arr = np.asarray(image)
        arr = arr.astype(np.float64) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {arr.shape}")
    return arr


def _to_batch_tensors(model, images: np.ndarray, features: np.ndarray | None):
    imgs = torch.as_tensor(images, dtype=model.dtype).permute(0, 3, 1, 2)
    if imgs.shape[-1] != model.config.input_px or imgs.shape[-2] != model.config.input_px:
        raise ValueError(
            f"image side {tuple(imgs.shape[-2:])} does not match config input_px "
            f"{model.config.input_px}"
        )
    if not torch.isfinite(imgs).all():
        raise ValueError("non-finite image input")
    if model.config.image_only:
        return imgs, None
    feats = torch.as_tensor(features, dtype=model.dtype)
    if feats.shape[-1] != model.config.mlp_in:
        raise ValueError(f"feature vectors must have {model.config.mlp_in} entries")
    if not torch.isfinite(feats).all():
        raise ValueError("non-finite feature input")
    return imgs, feats


def forward(model: TwoStreamClassifier, image, features) -> ForwardTrace:
    """One example through the network. ``features`` is the standardized
    15-vector (ignored, and may be anything, when the model is image_only)."""
    arr = _image_array(image)
    feats = None if model.config.image_only else np.asarray(features, dtype=np.float64)[None, :]
    imgs, feats_t = _to_batch_tensors(model, arr[None, ...], feats)
    with torch.no_grad():
        logits, fmap = model(imgs, feats_t)
    logits = logits[0]
    return ForwardTrace(
        logits=logits.numpy().copy(),
        probabilities=torch.softmax(logits, dim=0).numpy().copy(),
        feature_map=fmap[0].permute(1, 2, 0).numpy().copy(),
    )


def batch_probabilities(
    model: TwoStreamClassifier,
    images: np.ndarray,
    features: np.ndarray | None,
    batch_size: int = 256,
) -> np.ndarray:
    """Softmax probabilities (N, 2) over a dataset, chunked for memory."""
    out = []
    n = images.shape[0]
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            chunk = images[lo:hi]
            if chunk.dtype == np.uint8:
                chunk = chunk.astype(np.float64) / 255.0
            feats = None if features is None else features[lo:hi]
            imgs, feats_t = _to_batch_tensors(model, chunk, feats)
            logits, _ = model(imgs, feats_t)
            out.append(torch.softmax(logits, dim=1).numpy())
    return np.concatenate(out, axis=0)


def predict(model: TwoStreamClassifier, image, features) -> tuple[int, np.ndarray]:
    """(class index, probabilities); exact ties go to "failure"."""
    trace = forward(model, image, features)
    p = trace.probabilities
    label = SUCCESS if p[SUCCESS] > p[FAILURE] else FAILURE
    return label, p


def loss_and_param_grads(
    model: TwoStreamClassifier,
    images: np.ndarray,
    features: np.ndarray | None,
    labels: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Summed cross-entropy over the batch and exact reverse-mode gradients
    for every parameter tensor."""
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    imgs, feats_t = _to_batch_tensors(model, images, features)
    targets = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    logits, _ = model(imgs, feats_t)
    per_example = F.cross_entropy(logits, targets, reduction="none")
    bad = torch.nonzero(~torch.isfinite(per_example))
    if bad.numel() > 0:
        raise FloatingPointError(f"non-finite loss at batch example {int(bad[0, 0])}")
    loss = per_example.sum()
    model.zero_grad(set_to_none=True)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params)
    return float(loss), {n: g.numpy().copy() for n, g in zip(names, grads)}


def input_grads(model: TwoStreamClassifier, image, features, class_index: int) -> InputGrads:
    """Gradients of the pre-softmax logit of ``class_index`` w.r.t. the image,
    the feature vector and the last conv feature map (one backward pass).

    For image_only models the feature gradients are exactly zero: there is no
    path from the stats vector into the logits.
    """
    if class_index not in (SUCCESS, FAILURE):
        raise ValueError(f"class_index must be {SUCCESS} or {FAILURE}")
    arr = _image_array(image)
    feats = None if model.config.image_only else np.asarray(features, dtype=np.float64)[None, :]
    imgs, feats_t = _to_batch_tensors(model, arr[None, ...], feats)
    imgs.requires_grad_(True)
    if feats_t is not None:
        feats_t.requires_grad_(True)
    logits, fmap = model(imgs, feats_t)
    y_c = logits[0, class_index]
    wanted = [imgs, fmap] if feats_t is None else [imgs, feats_t, fmap]
    grads = torch.autograd.grad(y_c, wanted)
    pixel = grads[0][0].permute(1, 2, 0).numpy().copy()
    if feats_t is None:
        feature = np.zeros(model.config.mlp_in, dtype=np.float64)
        fmap_g = grads[1]
    else:
        feature = grads[1][0].numpy().astype(np.float64).copy()
        fmap_g = grads[2]
    logits_d = logits[0].detach()
    trace = ForwardTrace(
        logits=logits_d.numpy().copy(),
        probabilities=torch.softmax(logits_d, dim=0).numpy().copy(),
        feature_map=fmap[0].detach().permute(1, 2, 0).numpy().copy(),
    )
    return InputGrads(
        class_index=class_index,
        pixel_grads=pixel.astype(np.float64),
        feature_grads=feature,
        featuremap_grads=fmap_g[0].permute(1, 2, 0).numpy().astype(np.float64).copy(),
        trace=trace,
    )


# --- checkpoint container ------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to reproduce inference: model config and weights, the
    fitted feature standardizer, the raster config the weights were trained
    on, and training metadata (seed, fold, best validation accuracy, config
    hash)."""

    model_config: ModelConfig
    state: dict[str, np.ndarray]
    raster_config: RasterConfig
    standardizer: Standardizer | None = None
    metadata: dict = field(default_factory=dict)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["stage_dims"] = list(cfg.stage_dims)
    d["stage_depths"] = list(cfg.stage_depths)
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["stage_dims"] = tuple(d["stage_dims"])
    d["stage_depths"] = tuple(d["stage_depths"])
    return ModelConfig(**d)


def checkpoint_from_model(
    model: TwoStreamClassifier,
    raster_config: RasterConfig,
    standardizer: Standardizer | None = None,
    metadata: dict | None = None,
) -> Checkpoint:
    state = {name: p.detach().numpy().copy() for name, p in model.named_parameters()}
    return Checkpoint(
        model_config=model.config,
        state=state,
        raster_config=raster_config,
        standardizer=standardizer,
        metadata=dict(metadata or {}),
    )


def model_from_checkpoint(ckpt: Checkpoint, dtype: torch.dtype | None = None) -> TwoStreamClassifier:
    sample = next(iter(ckpt.state.values()))
    dtype = dtype or {np.dtype("float64"): torch.float64, np.dtype("float32"): torch.float32}[
        sample.dtype
    ]
    model = TwoStreamClassifier(ckpt.model_config, dtype=dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            arr = ckpt.state[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, want {tuple(p.shape)}")
            p.copy_(torch.as_tensor(arr, dtype=dtype))
    return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Single-file container: a zip (numpy .npz) holding one float array per
    parameter under ``p::<name>`` plus a ``__meta__`` JSON string with the
    schema version, model config, raster config, standardizer and metadata.
    Arrays round-trip bit-exactly."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": model_config_to_dict(ckpt.model_config),
        "raster_config": raster_config_to_dict(ckpt.raster_config),
        "standardizer": None
        if ckpt.standardizer is None
        else standardizer_to_dict(ckpt.standardizer),
        "metadata": ckpt.metadata,
    }
    arrays = {f"p::{name}": arr for name, arr in ckpt.state.items()}
    arrays["__meta__"] = np.asarray(json.dumps(meta, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        state = {
            key[len("p::"):]: data[key] for key in data.files if key.startswith("p::")
        }
    return Checkpoint(
        model_config=model_config_from_dict(meta["model_config"]),
        state=state,
        raster_config=raster_config_from_dict(meta["raster_config"]),
        standardizer=None
        if meta["standardizer"] is None
        else standardizer_from_dict(meta["standardizer"]),
        metadata=meta["metadata"],
    )
