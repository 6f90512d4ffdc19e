"""Small contractive/expanding flow network with five prediction scales.

Encoder: six stride-2 3x3 conv stages with leaky ReLU, widths
base * (1, 2, 4, 8, 8, 8). Decoder: four stages, each bilinearly
upsampling the previous features, concatenating the matching encoder skip
and the upsampled previous flow (values doubled into the finer scale's
pixel units), then convolving. A 3x3 conv to 2 channels predicts flow at
1/64, 1/32, 1/16, 1/8 and 1/4 of the input resolution, each prediction in
its own scale's pixel units.

Checkpoint format (little-endian): magic "GOFL", u32 version, u32
parameter count, then per parameter u32 name length, UTF-8 name, shape as
4 x u32, float32 values. Optional Adam section: magic "ADAM", u32 step,
f64 beta1/beta2/eps, u32 record count, then first- and second-moment
records ("<name>.m", "<name>.v") in the same layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .flow_io import FlowField, Image, images_to_tensor, tensor_to_flow

CONTRACTION_LEVELS = 6
PREDICTION_SCALES = 5
ENCODER_WIDTH_FACTORS = (1, 2, 4, 8, 8, 8)
DECODER_WIDTH_FACTORS = (4, 2, 1, 1)
LEAKY_SLOPE = 0.1

CHECKPOINT_MAGIC = b"GOFL"
ADAM_MAGIC = b"ADAM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    input_channels: int = 2   # two stacked frames, grayscale by default

    def __post_init__(self):
        if self.base_channels < 1 or self.input_channels < 2:
            raise ValueError(f"invalid model config: {self}")


def _layer_specs(cfg: ModelConfig):
    """(name, in_channels, out_channels) for every conv, in checkpoint order."""
    enc = [cfg.base_channels * f for f in ENCODER_WIDTH_FACTORS]
    dec = [cfg.base_channels * f for f in DECODER_WIDTH_FACTORS]
    specs = []
    ins = cfg.input_channels
    for i, out in enumerate(enc, start=1):
        specs.append((f"enc{i}", ins, out))
        ins = out
    # decoder stage d consumes: upsampled previous features + encoder skip + 2 flow channels
    prev = enc[-1]
    for d in range(1, 5):
        skip = enc[5 - d]       # enc5, enc4, enc3, enc2 outputs
        specs.append((f"dec{d}", prev + skip + 2, dec[d - 1]))
        prev = dec[d - 1]
    feats = [enc[-1]] + dec
    for k in range(PREDICTION_SCALES):
        specs.append((f"pred{k}", feats[k], 2))
    return specs


def parameter_count(cfg: ModelConfig) -> int:
    """Total scalar parameters: sum over convs of 9 * c_in * c_out + c_out."""
    return sum(9 * cin * cout + cout for _, cin, cout in _layer_specs(cfg))


@dataclass
class ModelParams:
    """Named parameter tensors in checkpoint order plus their config."""

    cfg: ModelConfig
    seed: int | None
    tensors: dict = field(default_factory=dict)

    def parameters(self) -> list:
        return list(self.tensors.values())

    def names(self) -> list:
        return list(self.tensors.keys())


def clone_params(params: ModelParams) -> ModelParams:
    """Deep copy; training mutates parameters in place, so fan-out runs
    (several fine-tuning seeds from one checkpoint) must clone first."""
    tensors = {name: Tensor(t.data.copy(), requires_grad=True)
               for name, t in params.tensors.items()}
    return ModelParams(cfg=params.cfg, seed=params.seed, tensors=tensors)


def init_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases,
    deterministic in the seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, cin, cout in _layer_specs(cfg):
        bound = np.sqrt(6.0 / (cin * 9))
        w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(dtype)
        tensors[f"{name}.weight"] = Tensor(w, requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros((1, cout, 1, 1), dtype), requires_grad=True)
    return ModelParams(cfg=cfg, seed=seed, tensors=tensors)


def _conv(params: ModelParams, name: str, x: Tensor, stride: int) -> Tensor:
    return ad.conv2d(x, params.tensors[f"{name}.weight"], params.tensors[f"{name}.bias"],
                     stride=stride, padding=1)


def _up_flow(flow: Tensor) -> Tensor:
    # doubling the resolution halves the pixel size, so values double
    return ad.scalar_mul(ad.upsample_bilinear2x(flow), 2.0)


def forward(params: ModelParams, i1, i2) -> list:
    """Run the network; returns the 5 flow predictions, coarsest first.

    ``i1``/``i2`` may be Images (batch of one) or (B, C, H, W) tensors;
    extents must be divisible by 64. Intensities are centered to [-0.5, 0.5]
    before the first convolution."""
    if isinstance(i1, Image):
        i1 = images_to_tensor(i1)
    if isinstance(i2, Image):
        i2 = images_to_tensor(i2)
    b, c, h, w = i1.shape
    if i2.shape != i1.shape:
        raise ad.ShapeError(f"frame tensors differ: {i1.shape} vs {i2.shape}")
    if h % 64 or w % 64:
        raise ad.ShapeError(f"input extents must be divisible by 64, got {h}x{w}")
    if 2 * c != params.cfg.input_channels:
        raise ad.ShapeError(
            f"model expects {params.cfg.input_channels} stacked channels, frames have {c} each")

    x = ad.add_scalar(ad.concat_channels(i1, i2), -0.5)
    skips = []
    for i in range(1, CONTRACTION_LEVELS + 1):
        x = ad.leaky_relu(_conv(params, f"enc{i}", x, stride=2), LEAKY_SLOPE)
        skips.append(x)

    preds = [_conv(params, "pred0", x, stride=1)]
    feat = x
    for d in range(1, 5):
        merged = ad.concat_channels(
            ad.concat_channels(ad.upsample_bilinear2x(feat), skips[5 - d]),
            _up_flow(preds[-1]))
        feat = ad.leaky_relu(_conv(params, f"dec{d}", merged, stride=1), LEAKY_SLOPE)
        preds.append(_conv(params, f"pred{d}", feat, stride=1))
    return preds


def predict_full(params: ModelParams, i1, i2) -> FlowField:
    """Inference: bilinearly upsample the finest (1/4 scale) prediction by 4
    and convert the values to full-resolution pixel units (multiply by 4)."""
    finest = forward(params, i1, i2)[-1]
    b, _, h, w = finest.shape
    full = ad.resize_bilinear(finest.data, 4 * h, 4 * w) * finest.dtype.type(4)
    return tensor_to_flow(Tensor(full))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_record(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    header = struct.pack("<I", len(encoded)) + encoded + struct.pack("<4I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def record(self):
        name = self.take(self.u32()).decode("utf-8")
        shape = struct.unpack("<4I", self.take(16))
        count = int(np.prod(shape))
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).copy()
        return name, arr

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.blob)


def save_checkpoint(params: ModelParams, adam_states, path) -> None:
    """Serialize parameters (and optionally aligned Adam states) to ``path``."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.tensors))]
    for name, t in params.tensors.items():
        chunks.append(_pack_record(name, t.data))
    if adam_states is not None:
        states = list(adam_states)
        if len(states) != len(params.tensors):
            raise ValueError(f"{len(states)} Adam states for {len(params.tensors)} parameters")
        steps = {s.step for s in states}
        if len(steps) != 1:
            raise ValueError(f"Adam states disagree on step: {sorted(steps)}")
        first = states[0]
        chunks.append(ADAM_MAGIC)
        chunks.append(struct.pack("<Iddd", first.step, first.beta1, first.beta2, first.eps))
        chunks.append(struct.pack("<I", 2 * len(states)))
        for name, s in zip(params.tensors, states):
            chunks.append(_pack_record(f"{name}.m", s.first_moment))
            chunks.append(_pack_record(f"{name}.v", s.second_moment))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, adam_states or None).

    The model config is recovered from the first encoder weight's shape."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic in {path}")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(reader.u32()):
        name, arr = reader.record()
        tensors[name] = Tensor(arr, requires_grad=True)
    enc1 = tensors.get("enc1.weight")
    if enc1 is None:
        raise ValueError("checkpoint is missing enc1.weight; cannot infer the model config")
    cfg = ModelConfig(base_channels=enc1.shape[0], input_channels=enc1.shape[1])
    expected = {f"{n}.{kind}" for n, _, _ in _layer_specs(cfg) for kind in ("weight", "bias")}
    if set(tensors) != expected:
        raise ValueError("checkpoint parameter names do not match the architecture")
    params = ModelParams(cfg=cfg, seed=None, tensors=tensors)

    if reader.exhausted:
        return params, None
    if reader.take(4) != ADAM_MAGIC:
        raise ValueError("trailing bytes after parameters are not an Adam section")
    step = reader.u32()
    beta1, beta2, eps = reader.f64(), reader.f64(), reader.f64()
    count = reader.u32()
    if count != 2 * len(tensors):
        raise ValueError(f"Adam section has {count} records, expected {2 * len(tensors)}")
    moments = {}
    for _ in range(count):
        name, arr = reader.record()
        moments[name] = arr
    if not reader.exhausted:
        raise ValueError("unexpected trailing bytes after the Adam section")
    states = []
    for name, t in tensors.items():
        try:
            m, v = moments[f"{name}.m"], moments[f"{name}.v"]
        except KeyError as missing:
            raise ValueError(f"Adam section is missing {missing.args[0]}") from None
        if m.shape != t.shape or v.shape != t.shape:
            raise ValueError(f"Adam moment shape mismatch for {name}")
        states.append(AdamState(first_moment=m, second_moment=v, step=step,
                                beta1=beta1, beta2=beta2, eps=eps))
    return params, states
