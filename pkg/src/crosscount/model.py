"""Multi-branch counting networks built from a declarative config.

Two small backbones are available. ``tiny_csrnet`` is a ten-layer VGG-style
front end followed by six dilated layers (output stride 8). ``tiny_mcnn`` is
three columns of different kernel sizes, four layers deep (output stride 4).

The IADM topology splits a backbone at its injection points. Each
modality-specific branch runs the layers up to the last injection point. The
shared branch starts as a zero tensor at the first injection point and runs
every layer after it, then feeds the density head.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ParseError, UsageError
from .iadm import GATING_MODES, IadmBlock, PeerExchangeBlock
from .tensor import ConvParams, Tensor

MODALITY_CHANNELS = {"rgb": 3, "thermal": 1, "depth": 1}

VARIANTS = ("iadm", "early_fusion", "late_fusion", "no_gating", "no_shared", "no_distribution", "unimodal")
IADM_VARIANTS = ("iadm", "no_gating", "no_distribution")

CHECKPOINT_FORMAT = "crosscount-checkpoint-1"


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str  # conv | pool | columns
    channels: tuple[int, ...] = ()
    kernels: tuple[int, ...] = ()
    dilation: int = 1


def _conv(name, c, k=3, d=1):
    return LayerDef(name, "conv", (c,), (k,), d)


_POOL = LayerDef("pool", "pool")

_CSRNET = [
    _conv("conv1_1", 16), _conv("conv1_2", 16), _POOL,
    _conv("conv2_1", 32), _conv("conv2_2", 32), _POOL,
    _conv("conv3_1", 48), _conv("conv3_2", 48), _conv("conv3_3", 48), _POOL,
    _conv("conv4_1", 64), _conv("conv4_2", 64), _conv("conv4_3", 64),
    _conv("conv5_1", 64, d=2), _conv("conv5_2", 64, d=2), _conv("conv5_3", 64, d=2),
    _conv("conv5_4", 32, d=2), _conv("conv5_5", 16, d=2), _conv("conv5_6", 8, d=2),
]

_MCNN_KERNELS = (7, 5, 3)
_MCNN = [
    LayerDef("conv1", "columns", (8, 10, 12), _MCNN_KERNELS), _POOL,
    LayerDef("conv2", "columns", (16, 20, 24), _MCNN_KERNELS), _POOL,
    LayerDef("conv3", "columns", (8, 10, 12), _MCNN_KERNELS),
    LayerDef("conv4", "columns", (4, 5, 6), _MCNN_KERNELS),
]

BACKBONES = {"tiny_csrnet": _CSRNET, "tiny_mcnn": _MCNN}
DEFAULT_INJECTION = {
    "tiny_csrnet": ("conv1_2", "conv2_2", "conv3_3", "conv4_3"),
    "tiny_mcnn": ("conv1", "conv2", "conv3", "conv4"),
}
BACKBONE_STRIDE = {"tiny_csrnet": 8, "tiny_mcnn": 4}


def scaled(c: int, scale: float) -> int:
    return max(1, int(round(c * scale)))


def backbone_layers(backbone: str, scale: float = 1.0) -> list[LayerDef]:
    if backbone not in BACKBONES:
        raise ConfigurationError(f"unknown backbone {backbone!r}; valid: {sorted(BACKBONES)}")
    return [LayerDef(d.name, d.kind, tuple(scaled(c, scale) for c in d.channels), d.kernels, d.dilation)
            for d in BACKBONES[backbone]]


def layer_names(backbone: str) -> list[str]:
    return [d.name for d in backbone_layers(backbone) if d.kind != "pool"]


# ------------------------------------------------------------------ config


@dataclass
class NetworkConfig:
    backbone: str = "tiny_csrnet"
    channel_scale: float = 1.0
    modalities: tuple[str, ...] = ("rgb", "thermal")
    pyramid_levels: int = 3
    injection_points: tuple[str, ...] | None = None
    variant: str = "iadm"
    gating_mode: str = "literal"
    seed: int = 0
    init_std: float = 1e-2
    dtype: str = "float64"
    input_channels: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if self.injection_points is None:
            self.injection_points = DEFAULT_INJECTION.get(self.backbone, ())
        self.injection_points = tuple(self.injection_points)
        self.validate()

    @property
    def variant_kind(self) -> str:
        return self.variant.split("(", 1)[0]

    @property
    def unimodal_modality(self) -> str | None:
        m = re.fullmatch(r"unimodal\((\w+)\)", self.variant)
        return m.group(1) if m else None

    def channels_of(self, modality: str) -> int:
        if modality in self.input_channels:
            return int(self.input_channels[modality])
        if modality not in MODALITY_CHANNELS:
            raise ConfigurationError(
                f"unknown modality {modality!r}; known: {sorted(MODALITY_CHANNELS)} (or set input_channels)")
        return MODALITY_CHANNELS[modality]

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"unknown backbone {self.backbone!r}; valid: {sorted(BACKBONES)}")
        if not 0 < self.channel_scale <= 1:
            raise ConfigurationError(f"channel_scale must be in (0, 1], got {self.channel_scale}")
        if not self.modalities:
            raise ConfigurationError("at least one modality is required")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigurationError(f"duplicate modalities in {self.modalities}")
        for m in self.modalities:
            self.channels_of(m)
        if self.pyramid_levels < 1:
            raise ConfigurationError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.gating_mode not in GATING_MODES:
            raise ConfigurationError(f"gating_mode must be one of {GATING_MODES}, got {self.gating_mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"dtype must be float64 or float32, got {self.dtype!r}")
        kind = self.variant_kind
        if kind not in VARIANTS or (kind == "unimodal") != (self.unimodal_modality is not None):
            raise ConfigurationError(
                f"unknown variant {self.variant!r}; valid: {', '.join(v for v in VARIANTS if v != 'unimodal')}, "
                f"unimodal(<modality>)")
        if kind == "unimodal" and self.unimodal_modality not in self.modalities:
            raise ConfigurationError(
                f"variant {self.variant!r} names a modality outside {list(self.modalities)}")
        valid = layer_names(self.backbone)
        bad = [p for p in self.injection_points if p not in valid]
        if bad:
            raise ConfigurationError(f"invalid injection points {bad} for {self.backbone}; valid names: {valid}")
        if len(set(self.injection_points)) != len(self.injection_points):
            raise ConfigurationError(f"duplicate injection points in {self.injection_points}")
        if kind in IADM_VARIANTS + ("no_shared",) and not self.injection_points:
            raise ConfigurationError(f"variant {self.variant!r} needs at least one injection point")

    def to_dict(self) -> dict[str, str]:
        """Flat string mapping, the form used in manifests and config files."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("modalities", "injection_points"):
                out[f.name] = ",".join(v)
            elif f.name == "input_channels":
                out[f.name] = ",".join(f"{k}:{n}" for k, n in sorted(v.items()))
            else:
                out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown network config keys {unknown}; valid: {sorted(known)}")
        kw: dict = {}
        for key, raw in d.items():
            raw = str(raw).strip()
            try:
                if key in ("modalities", "injection_points"):
                    kw[key] = tuple(s.strip() for s in raw.split(",") if s.strip())
                elif key == "input_channels":
                    kw[key] = {k.strip(): int(n) for k, n in (p.split(":") for p in raw.split(",") if p.strip())}
                elif key in ("channel_scale", "init_std"):
                    kw[key] = float(raw)
                elif key in ("pyramid_levels", "seed"):
                    kw[key] = int(raw)
                else:
                    kw[key] = raw
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})") from None
        return cls(**kw)

    def diff(self, other: "NetworkConfig") -> list[str]:
        a, b = self.to_dict(), other.to_dict()
        return [k for k in a if a[k] != b[k]]


# ------------------------------------------------------------------ layers


class ConvLayer:
    def __init__(self, name: str, conv: ConvParams):
        self.name = name
        self.conv = conv

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def parameters(self) -> list[Tensor]:
        return self.conv.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(T.conv2d(x, self.conv))


class PoolLayer:
    name = "pool"

    def parameters(self) -> list[Tensor]:
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return T.maxpool2d(x, 2)


class ColumnLayer:
    """Parallel columns; each column reads its own slice of the previous column layer's output."""

    def __init__(self, name: str, convs: list[ConvParams], in_splits: list[tuple[int, int]] | None):
        self.name = name
        self.convs = convs
        self.in_splits = in_splits

    @property
    def out_channels(self) -> int:
        return sum(c.out_channels for c in self.convs)

    @property
    def splits(self) -> list[tuple[int, int]]:
        bounds = np.cumsum([0] + [c.out_channels for c in self.convs])
        return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def parameters(self) -> list[Tensor]:
        return T.parameters_of(self.convs)

    def __call__(self, x: Tensor) -> Tensor:
        outs = []
        for i, conv in enumerate(self.convs):
            xi = x if self.in_splits is None else T.slice_channels(x, *self.in_splits[i])
            outs.append(T.relu(T.conv2d(xi, conv)))
        return T.concat_channels(outs)


def _build_layers(rng, defs: Sequence[LayerDef], in_channels: int, prefix: str, std: float, dtype,
                  prev_splits=None):
    """Instantiate ``defs`` reading ``in_channels``; returns (layers, out_channels, column splits)."""
    layers = []
    c = in_channels
    splits = prev_splits
    for d in defs:
        if d.kind == "pool":
            layers.append(PoolLayer())
            continue
        name = f"{prefix}.{d.name}"
        if d.kind == "conv":
            k = d.kernels[0]
            pad = d.dilation * (k - 1) // 2
            conv = T.init_conv(rng, d.channels[0], c, k, std=std, padding=pad, dilation=d.dilation,
                               name=name, dtype=dtype)
            layers.append(ConvLayer(d.name, conv))
            c, splits = d.channels[0], None
        else:
            ins = [(0, c)] * len(d.channels) if splits is None else splits
            convs = [T.init_conv(rng, co, b - a, k, std=std, padding=(k - 1) // 2, name=f"{name}.col{i}",
                                 dtype=dtype)
                     for i, (co, k, (a, b)) in enumerate(zip(d.channels, d.kernels, ins))]
            layer = ColumnLayer(d.name, convs, None if splits is None else splits)
            layers.append(layer)
            c, splits = layer.out_channels, layer.splits
    return layers, c, splits


def _run(layers, x: Tensor) -> Tensor:
    for layer in layers:
        x = layer(x)
    return x


# ------------------------------------------------------------------ framework


@dataclass
class Framework:
    config: NetworkConfig
    specific: dict[str, list] = field(default_factory=dict)
    shared: list = field(default_factory=list)
    blocks: dict[str, IadmBlock | PeerExchangeBlock] = field(default_factory=dict)
    head: list[ConvParams] = field(default_factory=list)
    shared_start: int = 0

    def parameters(self) -> list[Tensor]:
        items = [layer for branch in self.specific.values() for layer in branch]
        items += self.shared + list(self.blocks.values())
        return T.parameters_of(items) + T.parameters_of(self.head)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, inputs):
        return forward(self, inputs)


def build(cfg: NetworkConfig) -> Framework:
    """Deterministically instantiate every parameter of ``cfg`` from its seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    std, dtype = cfg.init_std, np.dtype(cfg.dtype)
    defs = backbone_layers(cfg.backbone, cfg.channel_scale)
    kind = cfg.variant_kind
    fw = Framework(cfg)

    def head_conv(c_in):
        return [T.init_conv(rng, 1, c_in, 1, std=std, name="head", dtype=dtype)]

    if kind in ("unimodal", "early_fusion"):
        mods = [cfg.unimodal_modality] if kind == "unimodal" else list(cfg.modalities)
        c_in = sum(cfg.channels_of(m) for m in mods)
        layers, c, _ = _build_layers(rng, defs, c_in, "main", std, dtype)
        fw.specific["main"] = layers
        fw.head = head_conv(c)
        return fw

    if kind == "late_fusion":
        c = 0
        for m in cfg.modalities:
            fw.specific[m], c, _ = _build_layers(rng, defs, cfg.channels_of(m), m, std, dtype)
        m_count = len(cfg.modalities)
        fw.head = [T.init_conv(rng, c, m_count * c, 3, std=std, padding=1, name="fusion.conv1", dtype=dtype),
                   T.init_conv(rng, 1, c, 3, std=std, padding=1, name="fusion.conv2", dtype=dtype)]
        return fw

    inj_idx = [i for i, d in enumerate(defs) if d.name in cfg.injection_points]
    first, last = inj_idx[0], inj_idx[-1]

    if kind == "no_shared":
        c = 0
        for m in cfg.modalities:
            fw.specific[m], c, _ = _build_layers(rng, defs, cfg.channels_of(m), m, std, dtype)
        for i in inj_idx:
            block_c = _channels_after(defs, i)
            fw.blocks[defs[i].name] = PeerExchangeBlock.create(
                rng, block_c, cfg.modalities, levels=cfg.pyramid_levels, std=std, gating_mode=cfg.gating_mode,
                name=f"exchange.{defs[i].name}", dtype=dtype)
        fw.head = head_conv(len(cfg.modalities) * c)
        return fw

    splits = None
    for m in cfg.modalities:
        fw.specific[m], _, splits = _build_layers(rng, defs[:last + 1], cfg.channels_of(m), m, std, dtype)
    fw.shared_start = first + 1
    fw.shared, c, _ = _build_layers(rng, defs[first + 1:], _channels_after(defs, first), "shared", std, dtype,
                                    prev_splits=_splits_after(defs, first))
    for i in inj_idx:
        fw.blocks[defs[i].name] = IadmBlock.create(
            rng, _channels_after(defs, i), cfg.modalities, levels=cfg.pyramid_levels, std=std,
            gating_mode=cfg.gating_mode, gating_enabled=kind != "no_gating",
            distribution_enabled=kind != "no_distribution", name=f"iadm.{defs[i].name}", dtype=dtype)
    fw.head = head_conv(c)
    return fw


def _channels_after(defs, i) -> int:
    for d in reversed(defs[:i + 1]):
        if d.kind != "pool":
            return sum(d.channels)
    raise ConfigurationError("no convolution before the injection point")


def _splits_after(defs, i):
    for d in reversed(defs[:i + 1]):
        if d.kind == "columns":
            bounds = np.cumsum([0, *d.channels])
            return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        if d.kind == "conv":
            return None
    return None


def _check_inputs(fw: Framework, inputs) -> list[Tensor]:
    cfg = fw.config
    if isinstance(inputs, dict):
        missing = [m for m in cfg.modalities if m not in inputs]
        if missing:
            raise UsageError(f"missing inputs for modalities {missing}")
        inputs = [inputs[m] for m in cfg.modalities]
    inputs = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    if len(inputs) != len(cfg.modalities):
        raise UsageError(f"expected {len(cfg.modalities)} inputs for {list(cfg.modalities)}, got {len(inputs)}")
    hw = {x.shape[2:] for x in inputs}
    if len(hw) != 1 or len({x.shape[0] for x in inputs}) != 1:
        raise UsageError(f"inputs must share batch and spatial size, got {[x.shape for x in inputs]}")
    for m, x in zip(cfg.modalities, inputs):
        if x.shape[1] != cfg.channels_of(m):
            raise UsageError(f"modality {m!r} expects {cfg.channels_of(m)} channels, got {x.shape[1]}")
    dtype = np.dtype(cfg.dtype)
    return [x if x.dtype == dtype else Tensor(x.data.astype(dtype)) for x in inputs]


def forward(fw: Framework, inputs) -> Tensor:
    """Density map of shape (n, 1, ceil(h/stride), ceil(w/stride)), elementwise >= 0.

    ``inputs`` is a sequence ordered like ``config.modalities`` or a mapping keyed by modality.
    """
    cfg = fw.config
    xs = _check_inputs(fw, inputs)
    kind = cfg.variant_kind

    if kind == "unimodal":
        x = xs[list(cfg.modalities).index(cfg.unimodal_modality)]
        return T.relu(T.conv2d(_run(fw.specific["main"], x), fw.head[0]))
    if kind == "early_fusion":
        x = xs[0] if len(xs) == 1 else T.concat_channels(xs)
        return T.relu(T.conv2d(_run(fw.specific["main"], x), fw.head[0]))
    if kind == "late_fusion":
        feats = [_run(fw.specific[m], x) for m, x in zip(cfg.modalities, xs)]
        fused = T.relu(T.conv2d(T.concat_channels(feats), fw.head[0]))
        return T.relu(T.conv2d(fused, fw.head[1]))

    feats = list(xs)
    if kind == "no_shared":
        branches = [fw.specific[m] for m in cfg.modalities]
        for i in range(len(branches[0])):
            feats = [b[i](f) for b, f in zip(branches, feats)]
            name = branches[0][i].name
            if name in fw.blocks:
                feats = fw.blocks[name](feats)
        return T.relu(T.conv2d(T.concat_channels(feats) if len(feats) > 1 else feats[0], fw.head[0]))

    branches = [fw.specific[m] for m in cfg.modalities]
    n_specific = len(branches[0])
    shared = None
    for i in range(fw.shared_start + len(fw.shared)):
        if i < n_specific:
            feats = [b[i](f) for b, f in zip(branches, feats)]
        if i >= fw.shared_start:
            shared = fw.shared[i - fw.shared_start](shared)
        name = branches[0][i].name if i < n_specific else None
        if name in fw.blocks:
            if shared is None:
                shared = T.zeros(feats[0].shape, dtype=feats[0].dtype)
            shared, feats = fw.blocks[name](shared, feats)
    return T.relu(T.conv2d(shared, fw.head[0]))


def param_count(fw: Framework) -> int:
    return int(sum(p.size for p in fw.parameters()))


def output_size(cfg: NetworkConfig, h: int, w: int) -> tuple[int, int]:
    s = BACKBONE_STRIDE[cfg.backbone]
    return -(-h // s), -(-w // s)


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, fw: Framework, step: int = 0, extra: dict[str, str] | None = None) -> None:
    """Text manifest (key=value lines, terminated by ``end``) followed by tensor dumps."""
    params = fw.named_parameters()
    lines = [f"format={CHECKPOINT_FORMAT}"]
    lines += [f"config.{k}={v}" for k, v in fw.config.to_dict().items()]
    lines.append(f"seed={fw.config.seed}")
    lines.append(f"step={step}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    lines.append("params=" + ",".join(name for name, _ in params))
    lines.append("end")
    blob = bytearray(("\n".join(lines) + "\n").encode())
    for _, p in params:
        blob += T.dumps(p.data.reshape(p.shape + (1,) * (4 - p.data.ndim)))
    Path(path).write_bytes(bytes(blob))


def read_manifest(buf: bytes, path=None) -> tuple[dict[str, str], int]:
    offset, manifest, line_no = 0, {}, 0
    while True:
        end = buf.find(b"\n", offset)
        if end < 0:
            raise ParseError("manifest not terminated by 'end'", path=path, line=line_no + 1)
        line_no += 1
        line = buf[offset:end].decode("utf-8", errors="replace")
        offset = end + 1
        if line == "end":
            break
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", path=path, line=line_no)
        k, v = line.split("=", 1)
        manifest[k] = v
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"not a {CHECKPOINT_FORMAT} file", path=path, line=1)
    return manifest, offset


def load_checkpoint(path, expected: NetworkConfig | None = None) -> tuple[Framework, dict[str, str]]:
    buf = Path(path).read_bytes()
    manifest, offset = read_manifest(buf, path)
    cfg = NetworkConfig.from_dict({k[7:]: v for k, v in manifest.items() if k.startswith("config.")})
    if expected is not None:
        differing = cfg.diff(expected)
        if differing:
            detail = ", ".join(f"{k}: checkpoint={cfg.to_dict()[k]!r} expected={expected.to_dict()[k]!r}"
                               for k in differing)
            raise ConfigurationError(f"checkpoint/config mismatch in {differing} ({detail})")
    fw = build(cfg)
    params = fw.named_parameters()
    names = manifest.get("params", "").split(",") if manifest.get("params") else []
    if names != [n for n, _ in params]:
        raise ParseError("parameter list does not match the architecture named in the manifest", path=path)
    for name, p in params:
        t, offset = T.loads(buf, offset)
        if t.size != p.size:
            raise ParseError(f"{name}: stored {t.size} values, architecture needs {p.size}", path=path)
        p.data[...] = t.data.reshape(p.shape)
    if offset != len(buf):
        raise ParseError(f"{len(buf) - offset} trailing bytes", path=path)
    return fw, manifest
