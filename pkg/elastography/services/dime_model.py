"""
The learned inversion network: a 4-level U-Net mapping the two displacement
channels (Re u, Im u) of a patch to a one-channel stiffness map in kPa, the
MSE + isotropic total variation loss, reverse-mode gradients, a central
difference gradient checker and the DIMC checkpoint container.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..exceptions import FieldFormatError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

MIN_INPUT_SIZE = 8
DEFAULT_TV_LAMBDA = 1e-3
DEFAULT_TV_EPSILON = 1e-8

DIMC_MAGIC = b"DIMC"
DIMC_VERSION = 1
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    levels: int = 4
    in_channels: int = 2
    out_channels: int = 1
    negative_slope: float = 0.01
    batch_norm: bool = True

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValidationError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.levels < 1:
            raise ValidationError(f"levels must be >= 1, got {self.levels}")
        if self.in_channels != 2 or self.out_channels != 1:
            raise ValidationError("The network maps 2 displacement channels to 1 stiffness channel")
        if self.negative_slope < 0:
            raise ValidationError(f"negative_slope must be >= 0, got {self.negative_slope}")

    @property
    def channels(self) -> List[int]:
        return [self.base_channels * 2 ** level for level in range(self.levels)]

    @property
    def multiple(self) -> int:
        return 2 ** self.levels

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "UNetConfig":
        return cls(**data)


def _pad_same(x: torch.Tensor) -> torch.Tensor:
    # reflect needs at least 2 pixels along each padded axis
    mode = "reflect" if min(x.shape[-2:]) > 1 else "replicate"
    return F.pad(x, (1, 1, 1, 1), mode=mode)


class ConvBlock(nn.Module):
    """(3x3 conv -> LeakyReLU -> batch norm) twice, spatial size preserved."""

    def __init__(self, in_channels: int, out_channels: int, cfg: UNetConfig):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3)
        self.act1 = nn.LeakyReLU(cfg.negative_slope)
        self.norm1 = nn.BatchNorm2d(out_channels) if cfg.batch_norm else nn.Identity()
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3)
        self.act2 = nn.LeakyReLU(cfg.negative_slope)
        self.norm2 = nn.BatchNorm2d(out_channels) if cfg.batch_norm else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(self.act1(self.conv1(_pad_same(x))))
        return self.norm2(self.act2(self.conv2(_pad_same(x))))


class UpBlock(nn.Module):
    """Nearest-neighbour x2 upsample, 3x3 conv, concat with the skip, ConvBlock."""

    def __init__(self, in_channels: int, out_channels: int, cfg: UNetConfig):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3)
        self.block = ConvBlock(2 * out_channels, out_channels, cfg)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.conv(_pad_same(self.up(x)))
        return self.block(torch.cat((skip, x), dim=1))


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig = UNetConfig()):
        super().__init__()
        self.cfg = cfg
        channels = cfg.channels
        self.encoders = nn.ModuleList()
        in_channels = cfg.in_channels
        for c in channels:
            self.encoders.append(ConvBlock(in_channels, c, cfg))
            in_channels = c
        self.pool = nn.MaxPool2d(kernel_size=2)
        self.bottleneck = ConvBlock(channels[-1], channels[-1], cfg)
        self.decoders = nn.ModuleList()
        in_channels = channels[-1]
        for c in reversed(channels):
            self.decoders.append(UpBlock(in_channels, c, cfg))
            in_channels = c
        self.head = nn.Conv2d(channels[0], cfg.out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValidationError(f"Expected input (N, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        height, width = x.shape[-2:]
        if min(height, width) < MIN_INPUT_SIZE:
            raise ValidationError(f"Input must be at least {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}, got {height}x{width}")

        x, crop = pad_to_multiple(x, self.cfg.multiple)
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for decoder, skip in zip(self.decoders, reversed(skips)):
            x = decoder(x, skip)
        x = self.head(x)
        top, left = crop
        return x[..., top:top + height, left:left + width]


def pad_to_multiple(x: torch.Tensor, multiple: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Reflect-pad H and W up to the next multiple, split evenly; returns the crop offsets."""
    height, width = x.shape[-2:]
    pad_h = -height % multiple
    pad_w = -width % multiple
    if pad_h == 0 and pad_w == 0:
        return x, (0, 0)
    top, left = pad_h // 2, pad_w // 2
    pads = (left, pad_w - left, top, pad_h - top)
    mode = "reflect" if max(pads) < min(height, width) else "replicate"
    return F.pad(x, pads, mode=mode), (top, left)


def init_weights(model: nn.Module, negative_slope: float = 0.01) -> None:
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            nn.init.kaiming_uniform_(module.weight, a=negative_slope, mode="fan_in", nonlinearity="leaky_relu")
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.BatchNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)


def build_model(cfg: UNetConfig = UNetConfig(), seed: int = 0) -> UNet:
    """Seeded construction; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNet(cfg)
        init_weights(model, cfg.negative_slope)
    return model


def total_variation(pred: torch.Tensor, epsilon: float = DEFAULT_TV_EPSILON) -> torch.Tensor:
    """Isotropic TV with forward differences; the gradient at the last row/column is 0."""
    dx = F.pad(pred[..., :, 1:] - pred[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(pred[..., 1:, :] - pred[..., :-1, :], (0, 0, 0, 1))
    return torch.sqrt(dx ** 2 + dy ** 2 + epsilon).sum()


def composite_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    tv_lambda: float = DEFAULT_TV_LAMBDA,
    tv_epsilon: float = DEFAULT_TV_EPSILON,
) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValidationError(f"Prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    mse = torch.mean((pred - target) ** 2)
    if tv_lambda == 0:
        return mse
    return mse + tv_lambda * total_variation(pred, tv_epsilon)


def backward(
    model: nn.Module,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    tv_lambda: float = DEFAULT_TV_LAMBDA,
    tv_epsilon: float = DEFAULT_TV_EPSILON,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Loss and its gradient with respect to every trainable parameter.

    The model is run in whatever mode it is in; training mode uses batch
    statistics in batch norm.
    """
    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    loss = composite_loss(model(inputs), targets, tv_lambda, tv_epsilon)
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    result = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericalError(f"Non-finite gradient in {name}", parameter=name)
        result[name] = g
    return loss.detach(), result


@dataclass
class GradientCheck:
    checked: int = 0
    skipped: int = 0  # coordinates whose perturbation crossed a ReLU kink or a pool switch
    max_rel_error: float = 0.0
    errors: List[Tuple[str, int, float, float]] = field(default_factory=list)  # name, index, analytic, numeric

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.checked > 0 and self.max_rel_error <= tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


class _ActivationPattern:
    """Records which side of every non-smooth point the forward pass took."""

    def __init__(self, model: nn.Module):
        self.pattern: List[torch.Tensor] = []
        self.handles = []
        for module in model.modules():
            if isinstance(module, (nn.LeakyReLU, nn.MaxPool2d)):
                self.handles.append(module.register_forward_hook(self._record))

    def _record(self, module, inputs, output):
        x = inputs[0].detach()
        if isinstance(module, nn.LeakyReLU):
            self.pattern.append(x > 0)
        else:
            self.pattern.append(F.max_pool2d(x, module.kernel_size, return_indices=True)[1])

    def take(self) -> List[torch.Tensor]:
        pattern, self.pattern = self.pattern, []
        return pattern

    def remove(self) -> None:
        for handle in self.handles:
            handle.remove()


def check_gradients(
    model: nn.Module,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    samples: int = 100,
    eps: float = 1e-6,
    tv_lambda: float = DEFAULT_TV_LAMBDA,
    tv_epsilon: float = DEFAULT_TV_EPSILON,
    seed: int = 0,
) -> GradientCheck:
    """Compare autograd against central differences on randomly sampled coordinates.

    Run on a double-precision model in training mode. Coordinates where the
    two perturbed passes take different activation patterns are skipped and
    replaced by fresh samples.
    """
    state = {k: v.clone() for k, v in model.state_dict().items()}
    _, analytic = backward(model, inputs, targets, tv_lambda, tv_epsilon)
    params = dict(model.named_parameters())
    names = list(analytic)
    sizes = np.array([params[n].numel() for n in names])
    rng = np.random.default_rng(seed)
    recorder = _ActivationPattern(model)
    result = GradientCheck()

    def loss_at() -> Tuple[float, List[torch.Tensor]]:
        value = composite_loss(model(inputs), targets, tv_lambda, tv_epsilon).item()
        return value, recorder.take()

    try:
        attempts = 0
        with torch.no_grad():
            while result.checked < samples and attempts < 10 * samples:
                attempts += 1
                name = names[rng.choice(len(names), p=sizes / sizes.sum())]
                index = int(rng.integers(params[name].numel()))
                flat = params[name].view(-1)
                original = flat[index].item()
                flat[index] = original + eps
                plus, pattern_plus = loss_at()
                flat[index] = original - eps
                minus, pattern_minus = loss_at()
                flat[index] = original
                if any(not torch.equal(a, b) for a, b in zip(pattern_plus, pattern_minus)):
                    result.skipped += 1
                    continue
                numeric = (plus - minus) / (2 * eps)
                a = analytic[name].view(-1)[index].item()
                err = relative_error(a, numeric)
                result.errors.append((name, index, a, numeric))
                result.max_rel_error = max(result.max_rel_error, err)
                result.checked += 1
    finally:
        recorder.remove()
        model.load_state_dict(state)

    logger.info(
        f"Gradient check: {result.checked} coordinates, {result.skipped} skipped, "
        f"max relative error {result.max_rel_error:.2e}"
    )
    return result


def save_checkpoint(path: Union[str, Path], model: UNet, meta: Optional[Dict[str, Any]] = None) -> None:
    """DIMC container: magic | version | JSON config block | ordered f32 records."""
    path = Path(path)
    config = {"unet": model.cfg.to_dict(), **(meta or {})}
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    state = model.state_dict()

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(DIMC_MAGIC)
        fh.write(_U32.pack(DIMC_VERSION))
        fh.write(_U32.pack(len(config_bytes)))
        fh.write(config_bytes)
        fh.write(_U32.pack(len(state)))
        for name, tensor in state.items():
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(tensor.dim()))
            for dim in tensor.shape:
                fh.write(_U32.pack(dim))
            fh.write(tensor.detach().cpu().numpy().astype("<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.name = name
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise FieldFormatError(f"{self.name}: truncated at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def load_checkpoint(path: Union[str, Path]) -> Tuple[UNet, Dict[str, Any]]:
    """Rebuild the model in eval mode; returns it with the stored config block."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path.name)
    if reader.take(4) != DIMC_MAGIC:
        raise FieldFormatError(f"{path.name}: not a DIMC checkpoint")
    version = reader.u32()
    if version != DIMC_VERSION:
        raise FieldFormatError(f"{path.name}: version {version} not supported")
    config = json.loads(reader.take(reader.u32()).decode("utf-8"))

    model = UNet(UNetConfig.from_dict(config["unet"]))
    expected = model.state_dict()
    state = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = math.prod(shape)
        values = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        if name not in expected:
            raise FieldFormatError(f"{path.name}: unexpected record {name}")
        state[name] = torch.from_numpy(values.copy()).to(expected[name].dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise FieldFormatError(f"{path.name}: records do not match the stored config: {e}") from e
    model.eval()
    logger.debug(f"Loaded checkpoint {path.name} ({len(state)} records)")
    return model, config
