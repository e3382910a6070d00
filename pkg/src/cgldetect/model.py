"""Shared-encoder dual-decoder segmentation model and its checkpoint format.

A four-fold-downsampling convolutional encoder feeds two small decoder
blocks: an auxiliary depth-feature branch and the main branch.  The main
branch's logits are produced from the element-wise product of both
branches' intermediate feature stacks, so depth-edge evidence gates the
main prediction.  Checkpoints are a flat binary container of named
float32 records plus a JSON-encoded config header.
"""

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import (BatchNorm, ConvSpec, Tensor, add_channel_bias, conv2d,
                     hadamard, relu, zero_pad2d)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32                # encoder output channels; decoders use d/4
    depth_of_stack: int = 2    # stride-1 conv blocks after the downsampling pair
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d < 4 or self.d % 4:
            raise ValueError("d must be a positive multiple of 4")
        if self.depth_of_stack < 0:
            raise ValueError("depth_of_stack must be non-negative")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    def np_dtype(self):
        return DTYPES[self.dtype]


class ConvLayer:
    """Convolution with centered-uniform fan-in init and optional bias.

    Stride-2 layers zero-pad one trailing row/column instead of symmetric
    padding, so even inputs halve exactly and the conv output extent stays
    integral.
    """

    def __init__(self, cin, cout, ksize, stride, padding, rng, dtype, bias=False):
        fan_in = cin * ksize * ksize
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, ksize, ksize))
        self.kernel = Tensor(w.astype(dtype), requires_grad=True)
        self.trailing_pad = stride == 2 and ksize == 3
        self.spec = ConvSpec(self.kernel, stride=stride,
                             padding=0 if self.trailing_pad else padding)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        if self.trailing_pad:
            x = zero_pad2d(x, 0, 1, 0, 1)
        y = conv2d(x, self.spec)
        if self.bias is not None:
            y = add_channel_bias(y, self.bias)
        return y

    def params(self):
        out = {"kernel": self.kernel}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class ConvBnRelu:
    def __init__(self, cin, cout, ksize, stride, rng, dtype):
        self.conv = ConvLayer(cin, cout, ksize, stride, ksize // 2, rng, dtype)
        self.bn = BatchNorm(cout, dtype=dtype)

    def __call__(self, x, training):
        return relu(self.bn(self.conv(x), training=training))

    def params(self):
        out = {f"conv.{k}": v for k, v in self.conv.params().items()}
        out.update({"bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta})
        return out

    def buffers(self):
        return {"bn.running_mean": self.bn.running_mean,
                "bn.running_var": self.bn.running_var}


class Encoder:
    """3 -> d/2 -> d feature extractor at 1/4 spatial resolution."""

    def __init__(self, cfg, rng):
        d, dt = cfg.d, cfg.np_dtype()
        self.blocks = [ConvBnRelu(3, d // 2, 3, 2, rng, dt),
                       ConvBnRelu(d // 2, d, 3, 2, rng, dt)]
        for _ in range(cfg.depth_of_stack):
            self.blocks.append(ConvBnRelu(d, d, 3, 1, rng, dt))

    def __call__(self, x, training):
        for block in self.blocks:
            x = block(x, training)
        return x

    def params(self):
        return {f"block{i}.{k}": v for i, b in enumerate(self.blocks)
                for k, v in b.params().items()}

    def buffers(self):
        return {f"block{i}.{k}": v for i, b in enumerate(self.blocks)
                for k, v in b.buffers().items()}


class DecoderBlock:
    """conv3x3 d -> d/4 (+BN+ReLU), then a 1x1 two-class head with bias."""

    def __init__(self, cfg, rng):
        d, dt = cfg.d, cfg.np_dtype()
        self.layer1 = ConvBnRelu(d, d // 4, 3, 1, rng, dt)
        self.head = ConvLayer(d // 4, 2, 1, 1, 0, rng, dt, bias=True)

    def features(self, x, training):
        return self.layer1(x, training)

    def logits(self, feats):
        return self.head(feats)

    def params(self):
        out = {f"layer1.{k}": v for k, v in self.layer1.params().items()}
        out.update({f"head.{k}": v for k, v in self.head.params().items()})
        return out

    def buffers(self):
        return {f"layer1.{k}": v for k, v in self.layer1.buffers().items()}


FORWARD_MODES = ("train", "infer")


class CglModel:
    """Shared encoder with auxiliary (depth-feature) and main decoders."""

    def __init__(self, config=None):
        self.config = config or EncoderConfig()
        rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, 811]))
        self.encoder = Encoder(self.config, rng)
        self.dflb = DecoderBlock(self.config, rng)
        self.cglsb = DecoderBlock(self.config, rng)

    def encode(self, x, training=True):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.config.np_dtype()))
        if x.data.ndim != 3 or x.data.shape[0] != 3:
            raise ValueError("expected a (3, H, W) image")
        if x.data.shape[1] % 4 or x.data.shape[2] % 4:
            raise ValueError("image height and width must be divisible by 4")
        return self.encoder(x, training)

    def forward(self, x, mode="train"):
        """train mode: (auxiliary logits, main logits).  infer mode: main
        logits only; the auxiliary head is skipped but its feature layer
        still gates the main branch."""
        if mode not in FORWARD_MODES:
            raise ValueError(f"mode must be one of {FORWARD_MODES}")
        feats = self.encode(x, training=(mode == "train"))
        training = mode == "train"
        aux_feats = self.dflb.features(feats, training)
        main_feats = self.cglsb.features(feats, training)
        main_logits = self.cglsb.logits(hadamard(aux_feats, main_feats))
        if mode == "infer":
            return main_logits
        return self.dflb.logits(aux_feats), main_logits

    def __call__(self, x, mode="train"):
        return self.forward(x, mode)

    def named_parameters(self):
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"dflb.{k}": v for k, v in self.dflb.params().items()})
        out.update({f"cglsb.{k}": v for k, v in self.cglsb.params().items()})
        return out

    def named_buffers(self):
        out = {f"encoder.{k}": v for k, v in self.encoder.buffers().items()}
        out.update({f"dflb.{k}": v for k, v in self.dflb.buffers().items()})
        out.update({f"cglsb.{k}": v for k, v in self.cglsb.buffers().items()})
        return out

    def named_state(self):
        """All arrays that define the model: parameters plus BN statistics."""
        out = {k: v.data for k, v in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def parameter_count(self):
        return sum(v.data.size for v in self.named_parameters().values())

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"CGLM"
CHECKPOINT_VERSION = 1


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated checkpoint: {path}")
    return buf


def save_checkpoint(path, model, extra=None, meta=None):
    """Write model state (plus optional extra named arrays) as float32
    records.  Float32 models round-trip bit-exactly."""
    records = dict(model.named_state())
    for name, arr in (extra or {}).items():
        if name in records:
            raise ValueError(f"extra record name collides with model state: {name}")
        records[name] = np.asarray(arr)
    header = json.dumps({"config": asdict(model.config), "meta": meta or {}},
                        sort_keys=True).encode()
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(records)))
        for name in sorted(records):
            data = np.ascontiguousarray(records[name], dtype="<f4")
            enc = name.encode()
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Parse a checkpoint into (EncoderConfig, records, meta)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path) != CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint: {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, path))
        header = json.loads(_read_exact(fh, hlen, path))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path))
        records = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, nlen, path).decode()
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path))
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * n, path), dtype="<f4")
            records[name] = data.reshape(shape).copy()
        if fh.read(1):
            raise ValueError(f"trailing bytes after last record: {path}")
    return EncoderConfig(**header["config"]), records, header["meta"]


def load_checkpoint(path):
    """Rebuild a CglModel from a checkpoint.  Returns (model, extra, meta)
    where extra holds records that are not part of the model state."""
    config, records, meta = read_checkpoint(path)
    model = CglModel(config)
    state = model.named_state()
    for name, arr in state.items():
        if name not in records:
            raise ValueError(f"checkpoint is missing record {name!r}")
        rec = records.pop(name)
        if rec.shape != arr.shape:
            raise ValueError(
                f"record {name!r} has shape {rec.shape}, expected {arr.shape}")
        arr[...] = rec.astype(arr.dtype)
    return model, records, meta
