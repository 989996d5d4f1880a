"""Multi-scale encoder, CNN + axial-attention fusion block, nest-style decoder.

All forward functions take a parameter mapping ``name -> Tensor`` produced by
:meth:`ModelWeights.tensors`, so the same code serves training (tracked
leaves) and inference (constants). Feature maps are ``[N, C, H, W]``; a
single ``[C, H, W]`` image is promoted to a batch of one and squeezed back.

Parameter names:

* ``enc.{m}.w/b``                 3x3 conv producing scale ``m``
* ``dec.{m}.w/b``                 3x3 conv merging upsampled scale ``m+1`` with scale ``m``
* ``dec.out.w/b``                 3x3 conv to one channel, then sigmoid
* ``fuse.{m}.spatial.{0,1}.w/b``  spatial branch convs
* ``fuse.{m}.{vis,ir}.{l}.{h,w}.{q,k,v,o}``  axial attention projections
* ``fuse.{m}.out.w/b``            1x1 conv over the five-way concat
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

STAGES = ("encoder", "decoder", "fusion")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_scales: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    heads: int = 2
    head_dim: int | None = None
    layers: int = 2
    height: int = 32
    width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.num_scales < 1 or len(self.channels) != self.num_scales:
            raise ConfigError(f"{len(self.channels)} channel counts for {self.num_scales} scales")
        step = 2 ** (self.num_scales - 1)
        if self.height % step or self.width % step:
            raise ConfigError(f"input {self.height}x{self.width} not divisible by {step}")
        if self.layers < 1 or self.heads < 1:
            raise ConfigError("layers and heads must be >= 1")
        if self.head_dim is None and any(c % self.heads for c in self.channels):
            raise ConfigError(f"channels {self.channels} not divisible by {self.heads} heads")

    def head_size(self, m: int) -> int:
        return self.head_dim if self.head_dim is not None else self.channels[m] // self.heads

    def scale_shape(self, m: int) -> tuple[int, int, int]:
        f = 2 ** m
        return (self.channels[m], self.height // f, self.width // f)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str, int]]:
    """(name, shape, stage, fan_in) for every parameter, in canonical order."""
    specs = []
    ch = cfg.channels
    for m in range(cfg.num_scales):
        cin = 1 if m == 0 else ch[m - 1]
        specs += [(f"enc.{m}.w", (ch[m], cin, 3, 3), "encoder", cin * 9),
                  (f"enc.{m}.b", (ch[m],), "encoder", 0)]
    for m in range(cfg.num_scales - 2, -1, -1):
        cin = ch[m + 1] + ch[m]
        specs += [(f"dec.{m}.w", (ch[m], cin, 3, 3), "decoder", cin * 9),
                  (f"dec.{m}.b", (ch[m],), "decoder", 0)]
    specs += [("dec.out.w", (1, ch[0], 3, 3), "decoder", ch[0] * 9),
              ("dec.out.b", (1,), "decoder", 0)]
    for m in range(cfg.num_scales):
        c = ch[m]
        inner = cfg.heads * cfg.head_size(m)
        specs += [(f"fuse.{m}.spatial.0.w", (c, 2 * c, 3, 3), "fusion", 2 * c * 9),
                  (f"fuse.{m}.spatial.0.b", (c,), "fusion", 0),
                  (f"fuse.{m}.spatial.1.w", (c, c, 3, 3), "fusion", c * 9),
                  (f"fuse.{m}.spatial.1.b", (c,), "fusion", 0)]
        for mod in ("vis", "ir"):
            for layer in range(cfg.layers):
                for axis in ("h", "w"):
                    pre = f"fuse.{m}.{mod}.{layer}.{axis}"
                    specs += [(f"{pre}.q", (c, inner), "fusion", c),
                              (f"{pre}.k", (c, inner), "fusion", c),
                              (f"{pre}.v", (c, inner), "fusion", c),
                              (f"{pre}.o", (inner, c), "fusion", inner)]
        specs += [(f"fuse.{m}.out.w", (c, 5 * c, 1, 1), "fusion", 5 * c),
                  (f"fuse.{m}.out.b", (c,), "fusion", 0)]
    return specs


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, np.ndarray]
    stages: dict[str, str] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "ModelWeights":
        """Uniform(+-sqrt(1/fan_in)) weights, zero biases.

        Each parameter draws from its own stream keyed by (seed, name), so a
        parameter's initial value does not depend on which others exist.
        """
        params, stages = {}, {}
        for name, shape, stage, fan_in in _param_specs(cfg):
            if fan_in == 0:
                params[name] = np.zeros(shape)
            else:
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                bound = math.sqrt(1.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
            stages[name] = stage
        return cls(cfg, params, stages)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()}, dict(self.stages))

    def names(self, stage: str | None = None) -> list[str]:
        return [n for n in self.params if stage is None or self.stages[n] == stage]

    def tensors(self, tape: Tape | None = None, trainable=()) -> dict[str, Tensor]:
        """Wrap parameters; those whose stage is in ``trainable`` become leaves on ``tape``."""
        out = {}
        for name, value in self.params.items():
            if tape is not None and self.stages[name] in trainable:
                out[name] = tape.leaf(value, name=name)
            else:
                out[name] = Tensor(value, name=name)
        return out

    def check_complete(self) -> None:
        for name, shape, stage, _ in _param_specs(self.config):
            if name not in self.params:
                raise ConfigError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise ConfigError(f"{name}: non-finite values")


# ---------------------------------------------------------------- network pieces


def _conv(x, w: Mapping[str, Tensor], prefix: str, padding: int = 1) -> Tensor:
    return ad.conv2d(x, w[f"{prefix}.w"], w[f"{prefix}.b"], padding=padding)


def _batch(x: Tensor) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim == 4:
        return x, False
    raise ad.DimensionError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return x.reshape(x.shape[1:]) if squeeze else x


def _check_input(x: Tensor, cfg: ModelConfig) -> None:
    if x.shape[1:] != (1, cfg.height, cfg.width):
        raise ConfigError(f"input {x.shape[1:]} does not match config (1, {cfg.height}, {cfg.width})")


def encode(img, w: Mapping[str, Tensor], cfg: ModelConfig) -> list[Tensor]:
    """Feature pyramid: scale ``m`` has shape ``[C_m, H / 2^m, W / 2^m]``."""
    x, squeeze = _batch(img)
    _check_input(x, cfg)
    feats = []
    h = x
    for m in range(cfg.num_scales):
        if m:
            h = ad.max_pool2d(h, 2)
        h = ad.relu(_conv(h, w, f"enc.{m}"))
        feats.append(h)
    return [_unbatch(f, squeeze) for f in feats]


def decode(pyr, w: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    if len(pyr) != cfg.num_scales:
        raise ConfigError(f"pyramid has {len(pyr)} scales, config expects {cfg.num_scales}")
    batched = [_batch(p) for p in pyr]
    squeeze = batched[0][1]
    feats = [b[0] for b in batched]
    d = feats[-1]
    for m in range(cfg.num_scales - 2, -1, -1):
        d = ad.concat([ad.upsample_nearest(d, 2), feats[m]], axis=1)
        d = ad.relu(_conv(d, w, f"dec.{m}"))
    out = ad.sigmoid(_conv(d, w, "dec.out"))
    return _unbatch(out, squeeze)


def axial_attention(x, axis: str, w: Mapping[str, Tensor], prefix: str, heads: int,
                    return_weights: bool = False):
    """Multi-head self-attention along one spatial axis, plus a residual.

    ``axis="width"`` treats every row as a sequence of W tokens of size C;
    ``axis="height"`` does the same for every column. Projections are
    ``{prefix}.q/k/v`` (``[C, heads*d]``) and ``{prefix}.o`` (``[heads*d, C]``).
    """
    xb, squeeze = _batch(x)
    n, c, hh, ww = xb.shape
    wq, wk, wv, wo = (w[f"{prefix}.{s}"] for s in "qkvo")
    inner = wq.shape[1]
    if inner % heads:
        raise ConfigError(f"projection width {inner} not divisible by {heads} heads")
    if wq.shape[0] != c:
        raise ad.DimensionError(f"projection expects {wq.shape[0]} channels, input has {c}")
    d = inner // heads
    if axis == "width":
        perm, inv = (0, 2, 3, 1), (0, 3, 1, 2)  # [N, H, W, C]: rows are sequences
    elif axis == "height":
        perm, inv = (0, 3, 2, 1), (0, 3, 2, 1)  # [N, W, H, C]: columns are sequences
    else:
        raise ValueError(f"axis must be 'height' or 'width', got {axis!r}")
    tokens = xb.transpose(perm)
    rows, length = tokens.shape[1], tokens.shape[2]

    def split(t):
        return t.reshape(n, rows, length, heads, d).transpose(0, 1, 3, 2, 4)

    q, k, v = split(tokens @ wq), split(tokens @ wk), split(tokens @ wv)
    scores = (q @ k.transpose(0, 1, 2, 4, 3)) * (1.0 / math.sqrt(d))
    attn = ad.softmax(scores, axis=-1)
    mixed = (attn @ v).transpose(0, 1, 3, 2, 4).reshape(n, rows, length, inner)
    out = (mixed @ wo).transpose(inv)
    out = _unbatch(xb + out, squeeze)
    if return_weights:
        return out, attn
    return out


def transformer_branch(phi, w: Mapping[str, Tensor], prefix: str, cfg: ModelConfig) -> Tensor:
    h = phi
    for layer in range(cfg.layers):
        h = axial_attention(h, "height", w, f"{prefix}.{layer}.h", cfg.heads)
        h = axial_attention(h, "width", w, f"{prefix}.{layer}.w", cfg.heads)
    return h


def spatial_branch(phi_v, phi_ir, w: Mapping[str, Tensor], m: int) -> Tensor:
    h = ad.concat([phi_v, phi_ir], axis=1)
    h = ad.relu(_conv(h, w, f"fuse.{m}.spatial.0"))
    return ad.relu(_conv(h, w, f"fuse.{m}.spatial.1"))


def fuse_block(phi_v, phi_ir, w: Mapping[str, Tensor], cfg: ModelConfig, m: int) -> Tensor:
    """Fuse one scale: spatial branch, per-modality transformer branch, then a 1x1 merge."""
    pv, squeeze = _batch(phi_v)
    pi, _ = _batch(phi_ir)
    if pv.shape != pi.shape:
        raise ad.DimensionError(f"fusion inputs differ: {pv.shape} vs {pi.shape}")
    spatial = spatial_branch(pv, pi, w, m)
    tv = transformer_branch(pv, w, f"fuse.{m}.vis", cfg)
    ti = transformer_branch(pi, w, f"fuse.{m}.ir", cfg)
    merged = ad.concat([spatial, tv, ti, pv, pi], axis=1)
    out = ad.relu(_conv(merged, w, f"fuse.{m}.out", padding=0))
    return _unbatch(out, squeeze)


def forward_ae(img, w: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    return decode(encode(img, w, cfg), w, cfg)


@dataclass
class FusionOutput:
    fused: Tensor
    fused_pyr: list[Tensor]
    vis_pyr: list[Tensor]
    ir_pyr: list[Tensor]


def forward_fusion(vis, ir, w: Mapping[str, Tensor], cfg: ModelConfig) -> FusionOutput:
    vis_pyr = encode(vis, w, cfg)
    ir_pyr = encode(ir, w, cfg)
    fused_pyr = [fuse_block(v, i, w, cfg, m) for m, (v, i) in enumerate(zip(vis_pyr, ir_pyr))]
    return FusionOutput(decode(fused_pyr, w, cfg), fused_pyr, vis_pyr, ir_pyr)


def passthrough_visible(weights: ModelWeights) -> ModelWeights:
    """Fusion weights that make every fused scale equal the visible features."""
    out = weights.copy()
    cfg = out.config
    for name in out.names("fusion"):
        out.params[name] = np.zeros_like(out.params[name])
    for m in range(cfg.num_scales):
        c = cfg.channels[m]
        wmat = out.params[f"fuse.{m}.out.w"]
        # merged layout: [spatial, trans_vis, trans_ir, phi_vis, phi_ir]
        wmat[np.arange(c), 3 * c + np.arange(c), 0, 0] = 1.0
    return out


# ---------------------------------------------------------------- weight file

MAGIC = b"FUSEFMRW"
VERSION = 1
_STAGE_CODE = {s: i for i, s in enumerate(STAGES)}


class WeightFileError(ValueError):
    pass


def serialize_weights(weights: ModelWeights) -> bytes:
    """Binary layout (all integers little-endian):

    magic ``FUSEFMRW`` | u32 version | u32 len + config JSON (utf-8) |
    u32 count | per parameter: u16 len + name, u8 stage, u8 ndim,
    ndim x u32 dims, raw float64 LE data | 32-byte SHA-256 of everything before.
    """
    cfg = weights.config.to_json().encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg,
              struct.pack("<I", len(weights.params))]
    for name, value in weights.params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<BB", _STAGE_CODE[weights.stages[name]], value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    body = b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def deserialize_weights(buf: bytes) -> ModelWeights:
    if len(buf) < len(MAGIC) + 32 or not buf.startswith(MAGIC):
        raise WeightFileError("not a weight file (bad magic)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightFileError("checksum mismatch")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise WeightFileError(f"unsupported version {version}")
    (clen,) = take("<I")
    cfg = ModelConfig.from_json(body[pos : pos + clen].decode("utf-8"))
    pos += clen
    (count,) = take("<I")
    params, stages = {}, {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        nbytes = 8 * int(np.prod(shape))
        params[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
        stages[name] = STAGES[code]
    if pos != len(body):
        raise WeightFileError("trailing bytes before checksum")
    weights = ModelWeights(cfg, params, stages)
    try:
        weights.check_complete()
    except ConfigError as exc:
        raise WeightFileError(str(exc)) from exc
    return weights


def save_weights(weights: ModelWeights, path) -> None:
    from .imageio import atomic_write

    atomic_write(path, serialize_weights(weights))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        return deserialize_weights(fh.read())
