"""Six-stage network assembly, parameter audit, and checkpoint persistence.

Stages 1-3 are ConvNeXt blocks, stages 4-6 parallel vision-Mamba layers,
with channel widths [8, 16, 24, 32, 48, 64]. Between stages the map is
adaptively average-pooled to ceil(H/2) and channel-grown by a grouped 1x1
convolution (chosen over a dense strided conv to stay inside the ~32K
parameter budget). A shared attention bridge refines the outputs of
stages 1-5; the refined maps and the stage-6 output are pooled to 1x1,
concatenated into one 192-wide vector and classified by the head stack.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import blocks as B
from . import head as H
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .tensor import RngStream, Tensor

__all__ = [
    "ModelConfig",
    "Model",
    "ParamAudit",
    "AuditRow",
    "head_config_named",
    "build_model",
    "model_forward",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "config_hash",
]

CHECKPOINT_MAGIC = b"XLMC"
CHECKPOINT_VERSION = 1

HEAD_KINDS = ("3l2fno", "allfno", "3l2hadamard", "allhadamard")


def head_config_named(kind: str, in_width: int, num_classes: int,
                      widths: Sequence[int] = (8, 8, 8, 4)) -> H.HeadConfig:
    """Build one of the four studied head stacks over a shared width chain.

    The chain is in_width -> widths... -> num_classes (five layers). For
    the hybrid stacks the last two positions are the fixed layers.
    """
    if kind not in HEAD_KINDS:
        raise ConfigError(f"unknown head kind {kind!r}; options: {HEAD_KINDS}")
    chain = [in_width, *widths, num_classes]
    if kind == "3l2fno":
        kinds = ["linear", "linear", "linear", "fno", "fno"]
    elif kind == "3l2hadamard":
        kinds = ["linear", "linear", "linear", "hadamard", "hadamard"]
    elif kind == "allfno":
        kinds = ["fno"] * 5
    else:
        kinds = ["hadamard"] * 5
    layers = [H.LayerSpec(k, chain[i], chain[i + 1]) for i, k in enumerate(kinds)]
    return H.HeadConfig(layers)


@dataclass
class ModelConfig:
    stage_channels: Tuple[int, ...] = (8, 16, 24, 32, 48, 64)
    stage_kinds: Tuple[str, ...] = ("convnext",) * 3 + ("pvm",) * 3
    blocks_per_stage: int = 1
    stem_kernel: int = 4
    stem_stride: int = 4
    downsample: str = "pool_pointwise"
    scab_stages: Tuple[int, ...] = (1, 2, 3, 4, 5)
    scab_hidden: int = 2
    head_kind: str = "3l2fno"
    head_widths: Tuple[int, ...] = (8, 8, 8, 4)
    image_size: int = 224
    in_channels: int = 3
    num_classes: int = 2
    mamba_state: int = 8
    mamba_kernel: int = 4
    drop_path_rate: float = 0.0
    gamma_scale_init: float = 1e-6
    theta_init: float = 1.0
    noise_stage: int = 3
    seed: int = 0

    def validate(self) -> None:
        if len(self.stage_channels) != len(self.stage_kinds):
            raise ConfigError("stage_channels and stage_kinds lengths differ")
        for kind, c in zip(self.stage_kinds, self.stage_channels):
            if kind not in ("convnext", "pvm"):
                raise ConfigError(f"unknown stage kind {kind!r}")
            if kind == "pvm" and c % 4 != 0:
                raise ConfigError(
                    f"PVM stage channels must be divisible by 4, got {c}"
                )
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        for s in self.scab_stages:
            if not 1 <= s <= len(self.stage_channels) - 1:
                raise ConfigError(
                    f"scab stage {s} out of range 1..{len(self.stage_channels) - 1}"
                )
        if self.image_size % self.stem_stride != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by stem stride"
            )
        self.head_config().validate(self.feature_width(), self.num_classes)

    def feature_width(self) -> int:
        widths = [self.stage_channels[s - 1] for s in self.scab_stages]
        return sum(widths) + self.stage_channels[-1]

    def head_config(self) -> H.HeadConfig:
        return head_config_named(self.head_kind, self.feature_width(),
                                 self.num_classes, self.head_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("stage_channels", "stage_kinds", "scab_stages", "head_widths"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = dict(d)
        for key in ("stage_channels", "stage_kinds", "scab_stages", "head_widths"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def config_hash(cfg: ModelConfig) -> bytes:
    payload = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).digest()


@dataclass
class DownsampleParams:
    """Adaptive average pool to ceil(H/2) followed by a grouped 1x1 conv."""

    w: Tensor          # (Cout, Cin/groups, 1, 1)
    groups: int

    def tensors(self):
        yield "w", self.w


def _init_downsample(cin: int, cout: int, rng: RngStream, dtype) -> DownsampleParams:
    groups = math.gcd(cin, cout)
    bound = 1.0 / np.sqrt(cin // groups)
    w = (rng.uniform((cout, cin // groups, 1, 1)) * 2.0 - 1.0) * bound
    return DownsampleParams(w=Tensor(w.astype(dtype), requires_grad=True),
                            groups=groups)


class Model:
    """Instantiated parameter store plus forward logic and a mode flag."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.mode = "train"
        self.stem_w: Tensor = None
        self.stem_b: Tensor = None
        self.stages: List[list] = []
        self.downsamples: List[DownsampleParams] = []
        self.scab: B.SCABParams = None
        self.head_layers: List[H.HeadLayer] = []

    # -- mode ------------------------------------------------------------

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    # -- parameters --------------------------------------------------------

    def named_parameters(self):
        """Ordered (name, tensor) pairs; fixed tensors have requires_grad False."""
        yield "stem.w", self.stem_w
        yield "stem.b", self.stem_b
        for i, stage in enumerate(self.stages, start=1):
            for j, blk in enumerate(stage):
                for name, t in blk.tensors():
                    yield f"stage{i}.block{j}.{name}", t
        for i, ds in enumerate(self.downsamples, start=1):
            for name, t in ds.tensors():
                yield f"down{i}.{name}", t
        for name, t in self.scab.tensors():
            yield f"scab.{name}", t
        for i, layer in enumerate(self.head_layers):
            for name, t in layer.tensors():
                yield f"head.layer{i}.{name}", t

    def trainable_parameters(self):
        for name, t in self.named_parameters():
            if t.requires_grad:
                yield name, t

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            if t.requires_grad:
                t.zero_grad()

    # -- forward -------------------------------------------------------------

    def forward(self, x: Tensor, rng: Optional[RngStream] = None,
                noise: Tuple[float, float] = (0.0, 0.0),
                capture: Optional[Dict[str, Tensor]] = None) -> Tensor:
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(
                f"model expects (B,{expected[0]},{expected[1]},{expected[2]}), "
                f"got {x.shape}"
            )
        training = self.mode == "train"
        h = T.conv2d(x, self.stem_w, self.stem_b,
                     stride=cfg.stem_stride, padding=0)
        if capture is not None:
            capture["stem"] = h
        taps = []
        n_stages = len(self.stages)
        for i, stage in enumerate(self.stages, start=1):
            kind = cfg.stage_kinds[i - 1]
            for blk in stage:
                if kind == "convnext":
                    h = B.convnext_forward(blk, h, training=training, rng=rng)
                else:
                    h = B.pvm_forward(blk, h)
            if training and i == cfg.noise_stage and (noise[0] > 0 or noise[1] > 0):
                if rng is None:
                    raise ConfigError("latent noise requested without an rng stream")
                h = T.salt_pepper_noise(h, noise[0], noise[1], rng)
            if capture is not None:
                capture[f"stage{i}"] = h
            if i in cfg.scab_stages:
                taps.append(h)
            if i < n_stages:
                ds = self.downsamples[i - 1]
                hh, ww = h.shape[2], h.shape[3]
                target = (max(1, -(-hh // 2)), max(1, -(-ww // 2)))
                h = T.pool2d("adaptive_avg", h, target)
                h = T.conv2d(h, ds.w, groups=ds.groups)
        refined = B.scab_forward(self.scab, taps)
        if capture is not None:
            for s, r in zip(cfg.scab_stages, refined):
                capture[f"scab{s}"] = r
        pooled = [T.reshape(T.pool2d("global_avg", r), (r.shape[0], r.shape[1]))
                  for r in refined]
        pooled.append(T.reshape(T.pool2d("global_avg", h), (h.shape[0], h.shape[1])))
        feat = T.concat(pooled, axis=1)
        if capture is not None:
            capture["features"] = feat
        logits = self._head_forward(feat, capture)
        if not np.isfinite(logits.data).all():
            raise ContractError("non-finite logits out of the forward pass")
        return logits

    def _head_forward(self, feat: Tensor,
                      capture: Optional[Dict[str, Tensor]] = None) -> Tensor:
        h = feat
        last = len(self.head_layers) - 1
        for i, layer in enumerate(self.head_layers):
            if capture is not None and i == last:
                capture["head_pre_final"] = h
            if isinstance(layer, H.LinearLayer):
                h = T.linear(h, layer.w, layer.b)
            elif isinstance(layer, H.FixedOrthogonalMatrix):
                h = H.fno_forward(layer, h)
            else:
                h = H.hadamard_forward(layer, h)
            if i < last:
                h = T.gelu(h)
        return h


def build_model(cfg: ModelConfig, rng: RngStream, dtype=np.float32,
                zero_mamba_out: bool = False) -> Model:
    """Instantiate all parameters deterministically from ``rng``."""
    cfg.validate()
    m = Model(cfg, dtype=dtype)
    chans = cfg.stage_channels
    c0 = chans[0]
    bound = 1.0 / np.sqrt(cfg.in_channels * cfg.stem_kernel ** 2)
    stem = (rng.uniform((c0, cfg.in_channels, cfg.stem_kernel, cfg.stem_kernel))
            * 2.0 - 1.0) * bound
    m.stem_w = Tensor(stem.astype(dtype), requires_grad=True)
    m.stem_b = Tensor(np.zeros(c0, dtype=dtype), requires_grad=True)
    for i, (kind, c) in enumerate(zip(cfg.stage_kinds, chans), start=1):
        stage = []
        for _ in range(cfg.blocks_per_stage):
            if kind == "convnext":
                stage.append(B.init_convnext_block(
                    c, rng, dtype, drop_path_rate=cfg.drop_path_rate,
                    gamma_init=cfg.gamma_scale_init))
            else:
                stage.append(B.init_pvm_layer(
                    c, rng, dtype, state=cfg.mamba_state, kernel=cfg.mamba_kernel,
                    theta_init=cfg.theta_init, zero_out_proj=zero_mamba_out))
        m.stages.append(stage)
        if i < len(chans):
            m.downsamples.append(_init_downsample(c, chans[i], rng, dtype))
    scab_widths = [chans[s - 1] for s in cfg.scab_stages]
    m.scab = B.init_scab(scab_widths, rng, dtype, hidden=cfg.scab_hidden)
    m.head_layers = H.init_head(cfg.head_config(), cfg.feature_width(),
                                cfg.num_classes, rng, dtype)
    return m


def model_forward(m: Model, x: Tensor, rng: Optional[RngStream] = None,
                  noise: Tuple[float, float] = (0.0, 0.0),
                  capture: Optional[Dict[str, Tensor]] = None) -> Tensor:
    return m.forward(x, rng=rng, noise=noise, capture=capture)


def stage_spatial_sizes(cfg: ModelConfig) -> List[int]:
    """Spatial edge length at each stage output (ceil-halving ladder)."""
    size = cfg.image_size // cfg.stem_stride
    sizes = []
    for i in range(len(cfg.stage_channels)):
        sizes.append(size)
        size = max(1, -(-size // 2))
    return sizes


def default_gradcam_layer(cfg: ModelConfig, min_extent: int = 4) -> str:
    """Deepest stage whose output keeps at least min_extent x min_extent."""
    sizes = stage_spatial_sizes(cfg)
    candidates = [i for i, s in enumerate(sizes, start=1) if s >= min_extent]
    stage = candidates[-1] if candidates else 1
    return f"stage{stage}"


# -- parameter audit ---------------------------------------------------------------


@dataclass
class AuditRow:
    name: str
    shape: Tuple[int, ...]
    count: int
    trainable: bool


@dataclass
class ParamAudit:
    rows: List[AuditRow] = field(default_factory=list)

    @property
    def total_trainable(self) -> int:
        return sum(r.count for r in self.rows if r.trainable)

    @property
    def total_fixed(self) -> int:
        return sum(r.count for r in self.rows if not r.trainable)

    def within_band(self, target: int, tolerance: float) -> bool:
        lo = target * (1.0 - tolerance)
        hi = target * (1.0 + tolerance)
        return lo <= self.total_trainable <= hi

    def format_table(self) -> str:
        name_w = max([len(r.name) for r in self.rows] + [len("layer")])
        lines = [f"{'layer':<{name_w}}  {'shape':>16}  {'count':>8}  trainable"]
        lines.append("-" * (name_w + 40))
        for r in self.rows:
            shape = "x".join(str(s) for s in r.shape) if r.shape else "scalar"
            lines.append(
                f"{r.name:<{name_w}}  {shape:>16}  {r.count:>8}  "
                f"{'yes' if r.trainable else 'no'}"
            )
        lines.append("-" * (name_w + 40))
        lines.append(f"{'total trainable':<{name_w}}  {'':>16}  "
                     f"{self.total_trainable:>8}")
        lines.append(f"{'total fixed':<{name_w}}  {'':>16}  "
                     f"{self.total_fixed:>8}")
        return "\n".join(lines)


def count_parameters(m: Model) -> ParamAudit:
    audit = ParamAudit()
    for name, t in m.named_parameters():
        audit.rows.append(AuditRow(name=name, shape=tuple(t.shape),
                                   count=int(t.size), trainable=t.requires_grad))
    return audit


# -- checkpoints ----------------------------------------------------------------------


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def save_checkpoint(m: Model, path) -> None:
    """Binary snapshot of every named tensor (trainable and fixed).

    Layout: magic 'XLMC', version u16, sha256 of the canonical config (32
    bytes), tensor count u32, then per tensor: name length u16 + utf-8
    name, rank u8, dims u32 each, precision u8 (bytes per element), and
    the little-endian payload.
    """
    entries = list(m.named_parameters())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(config_hash(m.config))
        f.write(struct.pack("<I", len(entries)))
        for name, t in entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.ndim))
            for dim in t.shape:
                f.write(struct.pack("<I", dim))
            itemsize = t.data.dtype.itemsize
            f.write(struct.pack("<B", itemsize))
            le = "<f4" if itemsize == 4 else "<f8"
            f.write(np.ascontiguousarray(t.data, dtype=le).tobytes())


def load_checkpoint(path, config: ModelConfig) -> Model:
    """Rebuild a model from a checkpoint, verifying magic, version, and
    that ``config`` hashes to the stored value. Parses the whole file
    before touching any model state: a corrupt file yields no partial model."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}, "
                              f"expected {CHECKPOINT_MAGIC!r}")
        version = struct.unpack("<H", _read_exact(f, 2))[0]
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        stored_hash = _read_exact(f, 32)
        expected = config_hash(config)
        if stored_hash != expected:
            raise FormatError(
                "config hash mismatch: checkpoint has "
                f"{stored_hash.hex()} but the supplied config hashes to "
                f"{expected.hex()}"
            )
        count = struct.unpack("<I", _read_exact(f, 4))[0]
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(f, 2))[0]
            name = _read_exact(f, name_len).decode("utf-8")
            rank = struct.unpack("<B", _read_exact(f, 1))[0]
            dims = tuple(struct.unpack("<I", _read_exact(f, 4))[0]
                         for _ in range(rank))
            itemsize = struct.unpack("<B", _read_exact(f, 1))[0]
            if itemsize not in (4, 8):
                raise FormatError(f"bad precision byte {itemsize} for {name!r}")
            n = int(np.prod(dims)) if dims else 1
            payload = _read_exact(f, n * itemsize)
            dt = "<f4" if itemsize == 4 else "<f8"
            tensors[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after the last tensor record")

    dtype = np.float64 if next(iter(tensors.values())).dtype == np.float64 \
        else np.float32
    model = build_model(config, RngStream(config.seed), dtype=dtype)
    names = [name for name, _ in model.named_parameters()]
    missing = [n for n in names if n not in tensors]
    extra = [n for n in tensors if n not in set(names)]
    if missing or extra:
        raise FormatError(
            f"checkpoint does not match model: missing {missing[:3]}, "
            f"unknown {extra[:3]}"
        )
    for name, t in model.named_parameters():
        arr = tensors[name]
        if arr.shape != t.shape:
            raise FormatError(
                f"shape mismatch for {name!r}: {arr.shape} vs {t.shape}"
            )
        arr = arr.astype(t.data.dtype)
        t.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
    return model
