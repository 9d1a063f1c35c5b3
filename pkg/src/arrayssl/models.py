"""SE-residual encoder-decoder for channel in-painting and the bandwidth head.

Shapes use ``[N, C, T, F]`` with ``T`` the STFT time-chunk axis and ``F`` the
frequency-bin axis. Every stride and pooling factor acts on ``T`` only; ``F``
is preserved end to end.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError, TransferError
from .tensorcore import avg_pool2d, nearest_upsample2d, relu, softplus, squeeze
from .tensorcore.nn import BatchNorm, Conv1d, Conv2d, ConvTranspose2d, Module, SqueezeExcite
from .tensorcore.tensor import DiffTensor

SE_REDUCTION = 8


def _rng(seed, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


class Sequential(Module):
    def __init__(self, *modules: Module):
        for i, m in enumerate(modules):
            setattr(self, str(i), m)
        self._len = len(modules)

    def __len__(self):
        return self._len

    def __getitem__(self, i) -> Module:
        return getattr(self, str(i % self._len))

    def __iter__(self):
        return (self[i] for i in range(self._len))

    def forward(self, x):
        for m in self:
            x = m(x)
        return x


class Stem(Module):
    """Single conv -> BN -> ReLU -> SE at unit stride."""

    def __init__(self, in_channels, out_channels, kernel=5, *, rng):
        self.conv = Conv2d(in_channels, out_channels, kernel, 1, kernel // 2, rng=rng)
        self.bn = BatchNorm(out_channels)
        self.se = SqueezeExcite(out_channels, SE_REDUCTION, rng=rng)

    def forward(self, x):
        return self.se(relu(self.bn(self.conv(x))))


class DownBlock(Module):
    """Strided-conv SE residual block.

    main: conv(k, stride) -> BN -> ReLU -> conv(k, 1) -> BN -> SE
    skip: conv(1x1, stride) -> BN
    out:  ReLU(main + skip)
    """

    def __init__(self, in_channels, out_channels, kernel=(3, 3), stride=(2, 1), *, rng):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        pad = (kh // 2, kw // 2)
        self.conv1 = Conv2d(in_channels, out_channels, (kh, kw), stride, pad, rng=rng)
        self.bn1 = BatchNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, (kh, kw), 1, pad, rng=rng)
        self.bn2 = BatchNorm(out_channels)
        self.se = SqueezeExcite(out_channels, SE_REDUCTION, rng=rng)
        self.skip = Conv2d(in_channels, out_channels, 1, stride, 0, rng=rng)
        self.skip_bn = BatchNorm(out_channels)

    def forward(self, x):
        h = relu(self.bn1(self.conv1(x)))
        h = self.se(self.bn2(self.conv2(h)))
        return relu(h + self.skip_bn(self.skip(x)))


class UpBlock(Module):
    """Mirror of :class:`DownBlock` with transposed convolutions.

    ``output_padding = stride - 1`` makes each strided axis grow exactly by
    the stride factor.
    """

    def __init__(self, in_channels, out_channels, kernel=(3, 3), stride=(2, 1), *, rng):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        sh, sw = (stride, stride) if isinstance(stride, int) else stride
        pad = (kh // 2, kw // 2)
        outpad = (sh - 1, sw - 1)
        self.conv1 = ConvTranspose2d(in_channels, out_channels, (kh, kw), (sh, sw), pad, outpad, rng=rng)
        self.bn1 = BatchNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, (kh, kw), 1, pad, rng=rng)
        self.bn2 = BatchNorm(out_channels)
        self.se = SqueezeExcite(out_channels, SE_REDUCTION, rng=rng)
        self.skip = ConvTranspose2d(in_channels, out_channels, 1, (sh, sw), 0, outpad, rng=rng)
        self.skip_bn = BatchNorm(out_channels)

    def forward(self, x):
        h = relu(self.bn1(self.conv1(x)))
        h = self.se(self.bn2(self.conv2(h)))
        return relu(h + self.skip_bn(self.skip(x)))


class ResBlock1d(Module):
    """Unit-stride 1-d SE residual block with a 1x1 skip conv.

    ``final_relu=False`` drops the closing ReLU so the block output can take
    either sign (used by the last head block, which feeds a softplus).
    """

    def __init__(self, in_channels, out_channels, kernel=5, final_relu=True, *, rng):
        self.conv1 = Conv1d(in_channels, out_channels, kernel, 1, kernel // 2, rng=rng)
        self.bn1 = BatchNorm(out_channels)
        self.conv2 = Conv1d(out_channels, out_channels, kernel, 1, kernel // 2, rng=rng)
        self.bn2 = BatchNorm(out_channels)
        self.se = SqueezeExcite(out_channels, SE_REDUCTION, rng=rng)
        self.skip = Conv1d(in_channels, out_channels, 1, 1, 0, rng=rng)
        self.skip_bn = BatchNorm(out_channels)
        self.final_relu = final_relu

    def forward(self, x):
        h = relu(self.bn1(self.conv1(x)))
        h = self.se(self.bn2(self.conv2(h)))
        out = h + self.skip_bn(self.skip(x))
        return relu(out) if self.final_relu else out


class Encoder(Module):
    """stem -> avg-pool 2x in time -> two strided DownBlocks: time shrinks 8x."""

    def __init__(self, n_antennas=4, channels=32, stem_kernel=5, block_kernel=3, *, rng):
        self.n_antennas, self.channels = n_antennas, channels
        self.stem_kernel, self.block_kernel = stem_kernel, block_kernel
        self.stem = Stem(2 * n_antennas, channels, stem_kernel, rng=rng)
        self.enc1 = DownBlock(channels, channels, block_kernel, (2, 1), rng=rng)
        self.enc2 = DownBlock(channels, channels, block_kernel, (2, 1), rng=rng)

    def forward(self, x):
        h = self.stem(x)
        h = avg_pool2d(h, (2, 1))
        return self.enc2(self.enc1(h))

    def hyperparameters(self) -> dict:
        return {"n_antennas": self.n_antennas, "channels": self.channels,
                "stem_kernel": self.stem_kernel, "block_kernel": self.block_kernel}


TIME_REDUCTION = 8


def _check_input(x: DiffTensor, n_antennas: int, time_multiple: int):
    if x.ndim != 4 or x.shape[1] != 2 * n_antennas:
        raise ShapeError(f"expected input [N, {2 * n_antennas}, T, F], got {x.shape}")
    if x.shape[2] % time_multiple:
        raise ShapeError(f"time axis {x.shape[2]} must be divisible by {time_multiple}")


class InpaintNet(Module):
    """2-resblock encoder-decoder; latent ``[N, C, T/8, F]``, output shaped like the input."""

    kind = "InpaintNet"

    def __init__(self, n_antennas=4, channels=32, stem_kernel=5, block_kernel=3, head_kernel=5, seed=0):
        self.seed, self.head_kernel = seed, head_kernel
        self.encoder = Encoder(n_antennas, channels, stem_kernel, block_kernel, rng=_rng(seed, 0))
        rng = _rng(seed, 1)
        self.dec1 = UpBlock(channels, channels, block_kernel, (2, 1), rng=rng)
        self.dec2 = UpBlock(channels, channels, block_kernel, (2, 1), rng=rng)
        self.head = Conv2d(channels, 2 * n_antennas, head_kernel, 1, head_kernel // 2, rng=rng)

    def forward(self, x) -> tuple[DiffTensor, DiffTensor]:
        _check_input(x, self.encoder.n_antennas, TIME_REDUCTION)
        latent = self.encoder(x)
        h = self.dec2(self.dec1(latent))
        h = nearest_upsample2d(h, (2, 1))
        return latent, self.head(h)

    def config(self) -> dict:
        return {"kind": self.kind, **self.encoder.hyperparameters(), "head_kernel": self.head_kernel,
                "seed": self.seed}


class BandwidthNet(Module):
    """Encoder, strided time collapse to a single step, then a 1-d SE-residual head.

    The head halves channels each block (``C -> C/2 -> ... -> 1``) and ends
    in a softplus so every output is strictly positive.
    """

    kind = "BandwidthNet"

    def __init__(self, n_antennas=4, n_chunks=32, channels=32, stem_kernel=5, block_kernel=3,
                 head_kernel=5, seed=0):
        if n_chunks % 32:
            raise ConfigError(f"time axis {n_chunks} must be divisible by 32 to collapse to one step")
        latent_t = n_chunks // TIME_REDUCTION
        n_collapse = int(round(math.log2(latent_t)))
        if 2**n_collapse != latent_t:
            raise ConfigError(f"latent time {latent_t} cannot be halved down to exactly 1")
        n_head = int(round(math.log2(channels)))
        if 2**n_head != channels:
            raise ConfigError(f"channel count {channels} must be a power of two to halve down to 1")
        self.n_chunks, self.seed, self.head_kernel = n_chunks, seed, head_kernel
        self.freeze_encoder = False
        self.encoder = Encoder(n_antennas, channels, stem_kernel, block_kernel, rng=_rng(seed, 0))
        rng = _rng(seed, 1)
        self.collapse = Sequential(*[DownBlock(channels, channels, block_kernel, (2, 1), rng=rng)
                                     for _ in range(n_collapse)])
        widths = [channels >> i for i in range(n_head + 1)]
        self.head = Sequential(*[ResBlock1d(widths[i], widths[i + 1], head_kernel, final_relu=i < n_head - 1, rng=rng)
                                 for i in range(n_head)])

    def forward(self, x) -> DiffTensor:
        _check_input(x, self.encoder.n_antennas, 32)
        if x.shape[2] != self.n_chunks:
            raise ShapeError(f"network built for {self.n_chunks} time chunks, got input {x.shape}")
        h = self.collapse(self.encoder(x))
        h = squeeze(h, 2)
        return softplus(squeeze(self.head(h), 1))

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze_encoder:
            self.encoder.train(False)
        return self

    def trainable_parameters(self) -> list[DiffTensor]:
        if not self.freeze_encoder:
            return self.parameters()
        frozen = {id(p) for p in self.encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    def config(self) -> dict:
        return {"kind": self.kind, **self.encoder.hyperparameters(), "n_chunks": self.n_chunks,
                "head_kernel": self.head_kernel, "seed": self.seed}


def inpaint_forward(net: InpaintNet, x) -> tuple[DiffTensor, DiffTensor]:
    return net(x if isinstance(x, DiffTensor) else DiffTensor(x))


def bandwidth_forward(net: BandwidthNet, x) -> DiffTensor:
    return net(x if isinstance(x, DiffTensor) else DiffTensor(x))


def transfer_encoder(src: Module, dst: BandwidthNet, freeze: bool = False) -> BandwidthNet:
    """Copy ``src.encoder`` weights and BN statistics into ``dst.encoder``.

    With ``freeze`` the destination encoder is excluded from
    :meth:`BandwidthNet.trainable_parameters` and kept in eval mode.
    """
    src_rows = dict(_layer_rows(src.encoder, "encoder."))
    dst_rows = dict(_layer_rows(dst.encoder, "encoder."))
    differing = sorted(k for k in set(src_rows) | set(dst_rows) if src_rows.get(k) != dst_rows.get(k))
    if differing:
        raise TransferError("encoder architectures differ at: " + ", ".join(differing))
    dst.encoder.load_state_dict(src.encoder.state_dict())
    dst.freeze_encoder = bool(freeze)
    dst.train(dst.training)
    return dst


# -- manifest -------------------------------------------------------------
def _fmt_stride(stride) -> str:
    stride = tuple(stride)
    if all(s == 1 for s in stride):
        return "1"
    return "(" + ",".join(str(s) for s in stride) + ")"


def _layer_rows(module: Module, prefix: str = ""):
    for name, child in module.children():
        full = prefix + name
        if hasattr(child, "describe"):
            d = child.describe()
            kernel = "x".join(str(k) for k in d["kernel"])
            yield full, f"{d['kind']} ({d['in']}, {d['out']}, {kernel}) stride={_fmt_stride(d['stride'])}"
        elif isinstance(child, SqueezeExcite):
            yield full, f"squeeze_excite ({child.channels}, {child.hidden}) r={child.reduction}"
        elif isinstance(child, BatchNorm):
            yield full, f"batch_norm ({child.gamma.shape[0]})"
        else:
            yield from _layer_rows(child, full + ".")


def summarize(net: Module) -> list[str]:
    """Deterministic architecture listing, one ``name: kind (in, out, KxK) stride=S`` line per layer."""
    return [f"{name}: {row}" for name, row in _layer_rows(net)]


def count_params(net: Module) -> int:
    return net.num_parameters()


def build_from_config(config: dict) -> Module:
    """Instantiate the network described by :meth:`InpaintNet.config` / :meth:`BandwidthNet.config`."""
    cfg = dict(config)
    kind = cfg.pop("kind")
    ints = {k: int(v) for k, v in cfg.items()}
    if kind == InpaintNet.kind:
        return InpaintNet(**ints)
    if kind == BandwidthNet.kind:
        return BandwidthNet(**ints)
    raise ConfigError(f"unknown network kind {kind!r}")
