"""Information Aggregation-Distribution Module.

A block sits after one backbone layer. It summarizes every feature map with a
max-pool pyramid, pushes gated context residuals from each modality-specific
feature into the shared feature (aggregation), then pushes the enhanced
shared context back into each specific feature (distribution).

Blocks are modality-count generic: ``specific`` arguments are sequences
ordered like ``block.modalities``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, UsageError
from .tensor import ConvParams, Tensor

GATING_MODES = ("literal", "sigmoid")


@dataclass
class ContextExtractor:
    levels: int
    fuse: ConvParams

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError(f"{self.fuse.name}: pyramid needs at least one level, got {self.levels}")
        c = self.fuse.out_channels
        if self.fuse.kernel != (1, 1) or self.fuse.in_channels != self.levels * c:
            raise ConfigurationError(
                f"{self.fuse.name}: fuse conv must be 1x1 mapping {self.levels}*{c} -> {c} channels, "
                f"got {self.fuse.in_channels} -> {c} with kernel {self.fuse.kernel}")

    @property
    def channels(self) -> int:
        return self.fuse.out_channels

    def parameters(self) -> list[Tensor]:
        return self.fuse.parameters()

    @classmethod
    def create(cls, rng, channels: int, levels: int = 3, *, std: float = 1e-2, name: str = "ctx",
               dtype=np.float64) -> "ContextExtractor":
        return cls(levels, T.init_conv(rng, channels, levels * channels, 1, std=std, name=name, dtype=dtype))


def extract_context(f: Tensor, e: ContextExtractor) -> Tensor:
    """Pool at windows 1, 2, ..., 2**(L-1), upsample back, concatenate, fuse with 1x1."""
    if f.shape[1] != e.channels:
        raise ConfigurationError(
            f"{e.fuse.name}: feature has {f.shape[1]} channels, extractor expects {e.channels}")
    h, w = f.shape[2], f.shape[3]
    pyramid = [f]
    for level in range(2, e.levels + 1):
        k = 2 ** (level - 1)
        pooled = T.maxpool2d(f, k)
        up = T.upsample_nearest(pooled, pooled.shape[2] * k, pooled.shape[3] * k)
        pyramid.append(T.crop(up, h, w))
    stacked = pyramid[0] if len(pyramid) == 1 else T.concat_channels(pyramid)
    return T.conv2d(stacked, e.fuse)


@dataclass
class ContextBundle:
    """Contexts of the specific features, the shared feature and the enhanced shared feature."""

    specific: list[Tensor]
    shared: Tensor
    shared_hat: Tensor | None = None


@dataclass
class IadmBlock:
    modalities: list[str]
    extractors: dict[str, ContextExtractor]
    to_shared: dict[str, ConvParams] = field(default_factory=dict)
    from_shared: dict[str, ConvParams] = field(default_factory=dict)
    gating_mode: str = "literal"
    gating_enabled: bool = True
    distribution_enabled: bool = True
    name: str = "iadm"

    def __post_init__(self):
        if self.gating_mode not in GATING_MODES:
            raise ConfigurationError(f"{self.name}: gating_mode must be one of {GATING_MODES}")
        needed = [*self.modalities, "shared"] + (["shared_hat"] if self.distribution_enabled else [])
        missing = [k for k in needed if k not in self.extractors]
        if missing:
            raise ConfigurationError(f"{self.name}: missing extractors {missing}")
        if self.gating_enabled:
            gates = [*self.to_shared] + ([*self.from_shared] if self.distribution_enabled else [])
            expected = list(self.modalities) + (list(self.modalities) if self.distribution_enabled else [])
            if sorted(gates) != sorted(expected):
                raise ConfigurationError(f"{self.name}: gates {gates} do not match modalities {self.modalities}")
        c = self.channels
        convs = [e.fuse for e in self.extractors.values()] + [*self.to_shared.values(), *self.from_shared.values()]
        for conv in convs:
            if conv.out_channels != c:
                raise ConfigurationError(f"{conv.name}: has {conv.out_channels} channels, block uses {c}")
        for gate in [*self.to_shared.values(), *self.from_shared.values()]:
            if gate.kernel != (1, 1) or gate.in_channels != c:
                raise ConfigurationError(f"{gate.name}: gates must be 1x1 convolutions {c} -> {c}")

    @property
    def channels(self) -> int:
        return self.extractors["shared"].channels

    @classmethod
    def create(cls, rng, channels: int, modalities: Sequence[str] = ("rgb", "thermal"), *, levels: int = 3,
               std: float = 1e-2, gating_mode: str = "literal", gating_enabled: bool = True,
               distribution_enabled: bool = True, name: str = "iadm", dtype=np.float64) -> "IadmBlock":
        """Fresh block with independent parameters, drawn in declaration order."""
        modalities = list(modalities)
        ext_names = [*modalities, "shared"] + (["shared_hat"] if distribution_enabled else [])
        extractors = {k: ContextExtractor.create(rng, channels, levels, std=std, name=f"{name}.ctx_{k}", dtype=dtype)
                      for k in ext_names}
        to_shared, from_shared = {}, {}
        if gating_enabled:
            to_shared = {m: T.init_conv(rng, channels, channels, 1, std=std, name=f"{name}.gate_{m}2s", dtype=dtype)
                         for m in modalities}
            if distribution_enabled:
                from_shared = {m: T.init_conv(rng, channels, channels, 1, std=std, name=f"{name}.gate_s2{m}",
                                              dtype=dtype) for m in modalities}
        return cls(modalities, extractors, to_shared, from_shared, gating_mode, gating_enabled,
                   distribution_enabled, name)

    def parameters(self) -> list[Tensor]:
        convs = [e.fuse for e in self.extractors.values()] + [*self.to_shared.values(), *self.from_shared.values()]
        return T.parameters_of(convs)

    def gate(self, residual: Tensor, conv: ConvParams | None) -> Tensor:
        """Residual scaled by its gating weights, or the raw residual when gating is off."""
        if not self.gating_enabled:
            return residual
        w = T.conv2d(residual, conv)
        if self.gating_mode == "sigmoid":
            w = T.sigmoid(w)
        return T.mul(residual, w)

    def __call__(self, shared: Tensor, specific: Sequence[Tensor]):
        return iadm_forward(shared, specific, self)


def _check_inputs(block: IadmBlock, shared: Tensor, specific: Sequence[Tensor]) -> None:
    if len(specific) != len(block.modalities):
        raise ConfigurationError(
            f"{block.name}: got {len(specific)} specific features for modalities {block.modalities}")
    for f in specific:
        if f.shape != shared.shape:
            raise ConfigurationError(f"{block.name}: feature shapes differ ({f.shape} vs {shared.shape})")


def aggregate(specific: Sequence[Tensor], shared: Tensor, block: IadmBlock) -> tuple[Tensor, ContextBundle]:
    """Information aggregation: F_s + sum_m gate(I_m - I_s)."""
    _check_inputs(block, shared, specific)
    ctx_specific = [extract_context(f, block.extractors[m]) for m, f in zip(block.modalities, specific)]
    ctx_shared = extract_context(shared, block.extractors["shared"])
    terms = [shared]
    for m, ctx in zip(block.modalities, ctx_specific):
        terms.append(block.gate(T.sub(ctx, ctx_shared), block.to_shared.get(m)))
    return T.add_n(terms), ContextBundle(ctx_specific, ctx_shared)


def distribute(specific: Sequence[Tensor], shared_hat: Tensor, ctx: ContextBundle | None,
               block: IadmBlock) -> list[Tensor]:
    """Information distribution: F_m + gate(I_hat_s - I_m), reusing I_m from ``ctx``."""
    if not block.distribution_enabled:
        return list(specific)
    if ctx is None:
        raise UsageError(f"{block.name}: distribute needs the context bundle produced by aggregate")
    _check_inputs(block, shared_hat, specific)
    ctx.shared_hat = extract_context(shared_hat, block.extractors["shared_hat"])
    out = []
    for m, f, ctx_m in zip(block.modalities, specific, ctx.specific):
        out.append(T.add(f, block.gate(T.sub(ctx.shared_hat, ctx_m), block.from_shared.get(m))))
    return out


def iadm_forward(shared: Tensor, specific: Sequence[Tensor], block: IadmBlock) -> tuple[Tensor, list[Tensor]]:
    """Return the enhanced shared feature and the refined specific features."""
    shared_hat, ctx = aggregate(specific, shared, block)
    return shared_hat, distribute(specific, shared_hat, ctx, block)


@dataclass
class PeerExchangeBlock:
    """Shared-branch-free exchange: each specific feature absorbs gated context residuals of its peers.

    Used by the ablation without a modality-shared feature.
    """

    modalities: list[str]
    extractors: dict[str, ContextExtractor]
    gates: dict[tuple[str, str], ConvParams]
    gating_mode: str = "literal"
    name: str = "exchange"

    @classmethod
    def create(cls, rng, channels: int, modalities: Sequence[str] = ("rgb", "thermal"), *, levels: int = 3,
               std: float = 1e-2, gating_mode: str = "literal", name: str = "exchange",
               dtype=np.float64) -> "PeerExchangeBlock":
        modalities = list(modalities)
        extractors = {m: ContextExtractor.create(rng, channels, levels, std=std, name=f"{name}.ctx_{m}", dtype=dtype)
                      for m in modalities}
        gates = {(src, dst): T.init_conv(rng, channels, channels, 1, std=std, name=f"{name}.gate_{src}2{dst}",
                                         dtype=dtype)
                 for dst in modalities for src in modalities if src != dst}
        return cls(modalities, extractors, gates, gating_mode, name)

    def parameters(self) -> list[Tensor]:
        return T.parameters_of([*[e.fuse for e in self.extractors.values()], *self.gates.values()])

    def __call__(self, specific: Sequence[Tensor]) -> list[Tensor]:
        if len(specific) != len(self.modalities):
            raise ConfigurationError(f"{self.name}: got {len(specific)} features for {self.modalities}")
        ctx = {m: extract_context(f, self.extractors[m]) for m, f in zip(self.modalities, specific)}
        out = []
        for dst, f in zip(self.modalities, specific):
            terms = [f]
            for src in self.modalities:
                if src == dst:
                    continue
                residual = T.sub(ctx[src], ctx[dst])
                w = T.conv2d(residual, self.gates[(src, dst)])
                if self.gating_mode == "sigmoid":
                    w = T.sigmoid(w)
                terms.append(T.mul(residual, w))
            out.append(T.add_n(terms))
        return out
