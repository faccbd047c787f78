"""Stacked-hourglass networks for joint scan-CAD embedding.

Three chained stages process a scan occupancy grid: a segmentation
hourglass splits it into foreground and background, a completion
hourglass fills in missing geometry, and a final encoder maps the
completed volume into the embedding space. A structurally identical
encoder embeds CAD grids directly, and a separate autoencoder over CAD
grids supplies latents for annotation-proposal sampling.

All encoders share one skeleton: an initial 3x3x3 convolution, four
stride-2 residual blocks doubling channels (32^3 down to 2^3), and a
2x2x2 convolution to a 1^3 latent. Decoders mirror it with transposed
convolutions at half the encoder channel width, ending in a sigmoid
occupancy head. Residual blocks downsample in their first convolution;
even kernels (4 strided, 2 for the projection) keep every layer's output
size integral, which odd kernels cannot do on even input sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    conv3d,
    conv3d_transposed,
    default_dtype,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_channels,
    tanh,
)


# radius of the embedding codomain. The triplet margin is a fixed length, so
# the box the embeddings live in decides how much geometric work the hinge
# demands: in an oversized box the margin is a rounding error and the loss
# rests at blob-versus-cloud equilibria that never bind per instance, while
# at this radius the margin is a material fraction of the attainable
# distances and satisfying it forces matching pairs together absolutely.
EMBED_RANGE = 0.25


@dataclass(frozen=True)
class ArchitectureConfig:
    base_channels: int = 8
    latent_dim: int = 512
    embed_dim: int = 256
    residual_blocks_per_encoder: int = 4
    grid_dim: int = 32

    def __post_init__(self):
        if self.base_channels < 1 or self.latent_dim < 2 or self.embed_dim < 1:
            raise ValueError("channel and latent sizes must be positive")
        if self.latent_dim % 2 != 0:
            raise ValueError("latent_dim must be even (it is split in half)")
        if self.grid_dim != 2 ** (self.residual_blocks_per_encoder + 1):
            raise ValueError(
                f"grid_dim {self.grid_dim} incompatible with "
                f"{self.residual_blocks_per_encoder} stride-2 blocks"
            )

    @classmethod
    def tiny(cls) -> "ArchitectureConfig":
        """Scaled-down shape-preserving config for fast tests."""
        return cls(base_channels=2, latent_dim=64, embed_dim=32)

    @property
    def decoder_channels(self) -> int:
        """Decoders run at half the encoder width."""
        return max(self.base_channels // 2, 1)


@dataclass
class ScanForward:
    """Everything one scan pass produces: embedding plus loss taps."""

    embedding: Tensor
    fg: Tensor | None = None
    bg: Tensor | None = None
    seg_latent: Tensor | None = None
    cmp: Tensor | None = None
    cmp_latent: Tensor | None = None


def _init_conv(rng, params, name, ci, co, k, transposed=False, stride=1, bias=0.1):
    # Kaiming-style uniform on fan-in; a transposed conv's output cell sees
    # ci * k^3 / s^3 taps
    fan_in = ci * k**3 / (stride**3 if transposed else 1)
    bound = np.sqrt(6.0 / fan_in)
    shape = (ci, co, k, k, k) if transposed else (co, ci, k, k, k)
    w = rng.uniform(-bound, bound, size=shape).astype(default_dtype())
    params[name + ".weight"] = Tensor(w, requires_grad=True)
    # hidden biases start slightly positive so sparse occupancy inputs cannot
    # silence whole channels before training gets going
    b = np.full(co, bias, dtype=default_dtype())
    params[name + ".bias"] = Tensor(b, requires_grad=True)


def _init_encoder(rng, params, prefix, in_ch, width, out_dim, n_blocks):
    _init_conv(rng, params, f"{prefix}.conv_in", in_ch, width, 3)
    c = width
    for i in range(1, n_blocks + 1):
        _init_conv(rng, params, f"{prefix}.block{i}.conv1", c, 2 * c, 4)
        _init_conv(rng, params, f"{prefix}.block{i}.conv2", 2 * c, 2 * c, 3)
        _init_conv(rng, params, f"{prefix}.block{i}.skip", c, 2 * c, 2)
        c *= 2
    _init_conv(rng, params, f"{prefix}.conv_latent", c, out_dim, 2)


def _init_decoder(rng, params, prefix, in_dim, width, n_blocks):
    c = width * 2**n_blocks
    _init_conv(rng, params, f"{prefix}.tconv_latent", in_dim, c, 2, transposed=True)
    for i in range(1, n_blocks + 1):
        _init_conv(rng, params, f"{prefix}.block{i}.tconv1", c, c // 2, 4, transposed=True, stride=2)
        _init_conv(rng, params, f"{prefix}.block{i}.conv2", c // 2, c // 2, 3)
        _init_conv(rng, params, f"{prefix}.block{i}.skip", c, c // 2, 2, transposed=True, stride=2)
        c //= 2
    _init_conv(rng, params, f"{prefix}.conv_out", c, 1, 3)


class _Stack:
    """Shared forward passes over a named parameter dict."""

    def __init__(self, config: ArchitectureConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def _apply(self, name, x, stride, pad, transposed=False):
        op = conv3d_transposed if transposed else conv3d
        return op(x, self.params[name + ".weight"], self.params[name + ".bias"], stride, pad)

    def _encode(self, prefix, x: Tensor) -> Tensor:
        h = relu(self._apply(f"{prefix}.conv_in", x, 1, 1))
        for i in range(1, self.config.residual_blocks_per_encoder + 1):
            t = relu(self._apply(f"{prefix}.block{i}.conv1", h, 2, 1))
            t = self._apply(f"{prefix}.block{i}.conv2", t, 1, 1)
            h = relu(add(t, self._apply(f"{prefix}.block{i}.skip", h, 2, 0)))
        return self._apply(f"{prefix}.conv_latent", h, 1, 0)

    def _decode(self, prefix, z: Tensor) -> Tensor:
        h = relu(self._apply(f"{prefix}.tconv_latent", z, 1, 0, transposed=True))
        for i in range(1, self.config.residual_blocks_per_encoder + 1):
            t = relu(self._apply(f"{prefix}.block{i}.tconv1", h, 2, 1, transposed=True))
            t = self._apply(f"{prefix}.block{i}.conv2", t, 1, 1)
            h = relu(add(t, self._apply(f"{prefix}.block{i}.skip", h, 2, 0, transposed=True)))
        return sigmoid(self._apply(f"{prefix}.conv_out", h, 1, 1))

    def _check_grid(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=default_dtype()))
        g = self.config.grid_dim
        if x.data.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (g, g, g):
            raise ValueError(f"expected (batch, 1, {g}, {g}, {g}) grid, got {x.shape}")
        return x

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def gradients(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items() if p.grad is not None}


class HourglassModel(_Stack):
    """Segmentation + completion + embedding stages, and the CAD encoder."""

    @classmethod
    def init(cls, config: ArchitectureConfig, seed: int) -> "HourglassModel":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        n = config.residual_blocks_per_encoder
        dec = config.decoder_channels
        _init_encoder(rng, params, "seg.encoder", 1, config.base_channels, config.latent_dim, n)
        _init_decoder(rng, params, "seg.decoder_fg", config.latent_dim // 2, dec, n)
        _init_decoder(rng, params, "seg.decoder_bg", config.latent_dim // 2, dec, n)
        _init_encoder(rng, params, "completion.encoder", 1, dec, config.embed_dim, n)
        _init_decoder(rng, params, "completion.decoder", config.embed_dim, dec, n)
        _init_encoder(rng, params, "final.encoder", 1, dec, config.embed_dim, n)
        # the cad tower starts as an exact copy of the final scan encoder:
        # both embed near-complete occupancy fields of the same object, so a
        # shared functional prior places matching pairs close as soon as the
        # completion stage becomes faithful, instead of leaving cross-domain
        # alignment entirely to the brief violation phase of the hinge
        for key in [k for k in params if k.startswith("final.encoder.")]:
            twin = params[key].data.copy()
            params["cad.encoder." + key.removeprefix("final.encoder.")] = Tensor(twin, requires_grad=True)
        return cls(config, params)

    def segment(self, scan) -> tuple[Tensor, Tensor, Tensor]:
        """Foreground/background probability grids plus the full latent."""
        scan = self._check_grid(scan)
        z = self._encode("seg.encoder", scan)
        half = self.config.latent_dim // 2
        fg = self._decode("seg.decoder_fg", slice_channels(z, 0, half))
        bg = self._decode("seg.decoder_bg", slice_channels(z, half, self.config.latent_dim))
        return fg, bg, z

    def complete(self, fg_prob) -> tuple[Tensor, Tensor]:
        """Completed occupancy probabilities from soft foreground input."""
        fg_prob = self._check_grid(fg_prob)
        z = self._encode("completion.encoder", fg_prob)
        return self._decode("completion.decoder", z), z

    def embed_scan(self, scan, *, use_segmentation: bool = True, use_completion: bool = True) -> ScanForward:
        """Full scan pipeline; stage flags support the ablation variants."""
        scan = self._check_grid(scan)
        out = ScanForward(embedding=None)
        h = scan
        if use_segmentation:
            out.fg, out.bg, out.seg_latent = self.segment(scan)
            h = out.fg
        if use_completion:
            out.cmp, out.cmp_latent = self.complete(h)
            h = out.cmp
        z = self._encode("final.encoder", h)
        out.embedding = reshape(z, (z.shape[0], self.config.embed_dim))
        return out

    def embed_cad(self, cad) -> Tensor:
        cad = self._check_grid(cad)
        z = self._encode("cad.encoder", cad)
        return reshape(z, (z.shape[0], self.config.embed_dim))


class AutoencoderModel(_Stack):
    """CAD autoencoder whose latents drive annotation-proposal sampling."""

    @classmethod
    def init(cls, config: ArchitectureConfig, seed: int) -> "AutoencoderModel":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        n = config.residual_blocks_per_encoder
        dec = config.decoder_channels
        _init_encoder(rng, params, "ae.encoder", 1, dec, config.embed_dim, n)
        _init_decoder(rng, params, "ae.decoder", config.embed_dim, dec, n)
        return cls(config, params)

    def autoencode(self, cad) -> tuple[Tensor, Tensor]:
        """(latent, reconstruction probabilities) for a CAD grid batch."""
        cad = self._check_grid(cad)
        z = self._encode("ae.encoder", cad)
        recon = self._decode("ae.decoder", z)
        return reshape(z, (z.shape[0], self.config.embed_dim)), recon
