"""Network architectures: generator G(y, z), discriminator D(y), encoder E(y).

Residual nets in the self-attention GAN style: every block is two repeats of
[norm -> ReLU -> spectrally-normalized 3x3 conv] around a skip connection,
pixel-shuffle upsampling in the generator, one self-attention block at a
configurable resolution.  The latent z is linearly projected and broadcast as
extra input planes next to the observation and its mask channel.

Spectral-norm power iterations are applied explicitly by the training loop
(``update_spectral_norms``), never inside ``forward``, so forward passes are
pure functions of (parameters, buffers, inputs) and inference is bit
reproducible in eval mode.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

_SN_EPS = 1e-12  # lower clamp for the spectral-norm estimate


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------

def spectral_norm_apply(weight: torch.Tensor, u: torch.Tensor, n_iters: int = 1):
    """Power-iterate ``u`` against ``weight`` and divide by the estimated top
    singular value.

    Returns ``(weight / max(sigma, eps), updated u)``.  ``weight`` is treated
    as a matrix (higher-rank weights are flattened to out x rest).
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    flat = weight.reshape(weight.shape[0], -1)
    u = F.normalize(u.reshape(-1), dim=0, eps=_SN_EPS)
    with torch.no_grad():
        for _ in range(n_iters):
            v = F.normalize(flat.t().mv(u), dim=0, eps=_SN_EPS)
            u = F.normalize(flat.mv(v), dim=0, eps=_SN_EPS)
    sigma = torch.dot(u, flat.mv(v))
    return weight / sigma.clamp_min(_SN_EPS), u


def _seed_vector(n: int, tag: int) -> torch.Tensor:
    """Deterministic unit vector used to start power iteration."""
    raw = np.random.default_rng([0x5EC7, n, tag]).standard_normal(n)
    vec = torch.from_numpy(raw).float()
    return F.normalize(vec, dim=0, eps=_SN_EPS)


class _SpectralNormMixin:
    """Adds u/v buffers and explicit power iteration to a weighted layer."""

    def _init_sn(self):
        out = self.weight.shape[0]
        rest = self.weight.numel() // out
        self.register_buffer("weight_u", _seed_vector(out, 0))
        self.register_buffer("weight_v", _seed_vector(rest, 1))
        self.power_iterate(1)

    @torch.no_grad()
    def power_iterate(self, n_iters: int = 1) -> None:
        flat = self.weight.reshape(self.weight.shape[0], -1)
        u, v = self.weight_u, self.weight_v
        for _ in range(n_iters):
            v = F.normalize(flat.t().mv(u), dim=0, eps=_SN_EPS)
            u = F.normalize(flat.mv(v), dim=0, eps=_SN_EPS)
        self.weight_u.copy_(u)
        self.weight_v.copy_(v)

    @torch.no_grad()
    def reset_sn_vectors(self) -> None:
        """Forget estimate history (the estimates track whatever weights the
        layer held before, so re-initialization must clear them)."""
        self.weight_u.copy_(_seed_vector(self.weight_u.numel(), 0))
        self.weight_v.copy_(_seed_vector(self.weight_v.numel(), 1))

    def normalized_weight(self) -> torch.Tensor:
        flat = self.weight.reshape(self.weight.shape[0], -1)
        sigma = torch.dot(self.weight_u, flat.mv(self.weight_v))
        return self.weight / sigma.clamp_min(_SN_EPS)


class SNConv2d(_SpectralNormMixin, nn.Conv2d):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_sn()

    def forward(self, x):
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class SNLinear(_SpectralNormMixin, nn.Linear):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_sn()

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


def update_spectral_norms(module: nn.Module, n_iters: int = 1) -> None:
    """One power-iteration round for every spectrally normalized layer.

    Called by the training loop once per optimizer update; forwards never
    touch the u/v estimates.
    """
    for m in module.modules():
        if isinstance(m, _SpectralNormMixin):
            m.power_iterate(n_iters)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def pixel_shuffle(t: torch.Tensor, r: int) -> torch.Tensor:
    """Rearrange (..., C*r^2, H, W) -> (..., C, H*r, W*r).

    out[c, h*r + i, w*r + j] = in[c*r^2 + i*r + j, h, w]; a bijective,
    parameter-free permutation.
    """
    *lead, c2, h, w = t.shape
    if c2 % (r * r) != 0:
        raise ValueError(f"channel count {c2} not divisible by r^2={r * r}")
    c = c2 // (r * r)
    t = t.reshape(*lead, c, r, r, h, w)
    k = t.dim()
    t = t.permute(*range(k - 5), k - 5, k - 2, k - 4, k - 1, k - 3)
    return t.reshape(*lead, c, h * r, w * r)


def pixel_unshuffle(t: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    *lead, c, hr, wr = t.shape
    if hr % r or wr % r:
        raise ValueError("spatial shape not divisible by r")
    h, w = hr // r, wr // r
    t = t.reshape(*lead, c, h, r, w, r)
    k = t.dim()
    t = t.permute(*range(k - 5), k - 5, k - 3, k - 1, k - 4, k - 2)
    return t.reshape(*lead, c * r * r, h, w)


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm kind {kind!r}")


def _conv3(in_ch, out_ch, spectral=True):
    cls = SNConv2d if spectral else nn.Conv2d
    return cls(in_ch, out_ch, kernel_size=3, padding=1)


def _conv1(in_ch, out_ch, spectral=True):
    cls = SNConv2d if spectral else nn.Conv2d
    return cls(in_ch, out_ch, kernel_size=1)


class ResidualBlock(nn.Module):
    """Pre-activation residual block: 2x [norm -> ReLU -> 3x3 conv].

    ``resample`` is None, "down" (average pooling) or "up" (pixel shuffle on
    the residual branch, nearest-neighbor on the skip).  With matching
    channels and no resampling the skip is the identity, so zeroing the conv
    weights makes the block the identity map.
    """

    def __init__(self, in_ch: int, out_ch: int, resample: str | None = None,
                 norm: str = "batch", spectral: bool = True):
        super().__init__()
        if resample not in (None, "down", "up"):
            raise ValueError(f"bad resample {resample!r}")
        self.resample = resample
        self.norm1 = _norm_layer(norm, in_ch)
        self.norm2 = _norm_layer(norm, out_ch)
        if resample == "up":
            self.conv1 = _conv3(in_ch, out_ch * 4, spectral)
        else:
            self.conv1 = _conv3(in_ch, out_ch, spectral)
        self.conv2 = _conv3(out_ch, out_ch, spectral)
        if in_ch != out_ch or resample is not None:
            self.proj = _conv1(in_ch, out_ch, spectral)
        else:
            self.proj = None

    def _shortcut(self, x):
        s = x
        if self.resample == "up":
            s = F.interpolate(s, scale_factor=2, mode="nearest")
        if self.proj is not None:
            s = self.proj(s)
        if self.resample == "down":
            s = F.avg_pool2d(s, 2)
        return s

    def forward(self, x):
        h = self.conv1(F.relu(self.norm1(x)))
        if self.resample == "up":
            h = pixel_shuffle(h, 2)
        h = self.conv2(F.relu(self.norm2(h)))
        if self.resample == "down":
            h = F.avg_pool2d(h, 2)
        return h + self._shortcut(x)


class SelfAttention(nn.Module):
    """Non-local block with a learned residual gate initialized to zero, so a
    freshly built block is exactly the identity."""

    def __init__(self, channels: int):
        super().__init__()
        inner = max(channels // 8, 1)
        self.query = _conv1(channels, inner)
        self.key = _conv1(channels, inner)
        self.value = _conv1(channels, channels)
        self.gamma = nn.Parameter(torch.zeros(1))

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        """(B, N_query, N_key) weights; each query row sums to one."""
        b = x.shape[0]
        q = self.query(x).reshape(b, -1, x.shape[-2] * x.shape[-1])
        k = self.key(x).reshape(b, -1, x.shape[-2] * x.shape[-1])
        return torch.softmax(q.transpose(1, 2) @ k, dim=-1)

    def forward(self, x):
        attn = self.attention_map(x)
        b, c, h, w = x.shape
        v = self.value(x).reshape(b, c, h * w)
        out = v @ attn.transpose(1, 2)
        return x + self.gamma * out.reshape(b, c, h, w)


# ---------------------------------------------------------------------------
# architecture specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    image_channels: int = 3
    image_size: int = 64
    z_dim: int = 128
    z_channels: int = 8
    base_width: int = 32
    n_blocks: int = 3
    attention_at: tuple = (16,)
    norm: str = "batch"

    def __post_init__(self):
        if self.z_dim <= 0:
            raise ValueError("z_dim must be positive")
        if self.image_size % (2 ** self.n_blocks) != 0:
            raise ValueError("image_size must be divisible by 2**n_blocks")
        object.__setattr__(self, "attention_at", tuple(self.attention_at))

    @property
    def in_channels(self) -> int:
        # observation + mask plane + broadcast z planes
        return self.image_channels + 1 + self.z_channels


@dataclass(frozen=True)
class DiscriminatorSpec:
    image_channels: int = 3
    image_size: int = 64
    base_width: int = 32
    n_blocks: int = 3
    attention_at: tuple = (16,)
    norm: str = "batch"

    def __post_init__(self):
        if self.image_size % (2 ** self.n_blocks) != 0:
            raise ValueError("image_size must be divisible by 2**n_blocks")
        object.__setattr__(self, "attention_at", tuple(self.attention_at))


@dataclass(frozen=True)
class EncoderSpec:
    image_channels: int = 3
    image_size: int = 64
    z_dim: int = 128
    base_width: int = 32
    n_blocks: int = 3
    norm: str = "batch"

    def __post_init__(self):
        if self.z_dim <= 0:
            raise ValueError("z_dim must be positive")
        if self.image_size % (2 ** self.n_blocks) != 0:
            raise ValueError("image_size must be divisible by 2**n_blocks")


def spec_to_json(spec) -> dict:
    obj = dataclasses.asdict(spec)
    obj["type"] = type(spec).__name__
    return obj


_SPEC_TYPES = {"GeneratorSpec": GeneratorSpec, "DiscriminatorSpec": DiscriminatorSpec,
               "EncoderSpec": EncoderSpec}


def spec_from_json(obj: dict):
    obj = dict(obj)
    cls = _SPEC_TYPES[obj.pop("type")]
    if "attention_at" in obj:
        obj["attention_at"] = tuple(obj["attention_at"])
    return cls(**obj)


def _stage_widths(base: int, n_blocks: int, cap_mult: int = 8) -> list[int]:
    return [min(base * (2 ** (i + 1)), base * cap_mult) for i in range(n_blocks)]


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class Generator(nn.Module):
    """Image-to-image reconstruction network x_raw = G(y, m, z) in [0, 1].

    Encoder-decoder over residual blocks; z enters as broadcast input planes.
    The raw output is composed with the observation downstream, so G itself
    never overwrites observed pixels.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.z_proj = nn.Linear(spec.z_dim, spec.z_channels)
        self.stem = _conv3(spec.in_channels, spec.base_width)

        widths = [spec.base_width] + _stage_widths(spec.base_width, spec.n_blocks)
        down, up = [], []
        res = spec.image_size
        for i in range(spec.n_blocks):
            down.append(ResidualBlock(widths[i], widths[i + 1], "down", spec.norm))
            res //= 2
        self.down = nn.ModuleList(down)
        self.mid = ResidualBlock(widths[-1], widths[-1], None, spec.norm)
        for i in reversed(range(spec.n_blocks)):
            up.append(ResidualBlock(widths[i + 1], widths[i], "up", spec.norm))
            res *= 2
            if res in spec.attention_at:
                up.append(SelfAttention(widths[i]))
        self.up = nn.ModuleList(up)
        self.head_norm = _norm_layer(spec.norm, spec.base_width)
        self.head = _conv3(spec.base_width, spec.image_channels)

    def forward(self, y: torch.Tensor, mask: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if y.dim() != 4 or y.shape[1] != self.spec.image_channels:
            raise ValueError(f"expected (B,{self.spec.image_channels},H,W) input, got {tuple(y.shape)}")
        if mask.dim() != 4 or mask.shape[1] != 1 or mask.shape[0] != y.shape[0]:
            raise ValueError(f"mask shape {tuple(mask.shape)} incompatible with input")
        if z.dim() != 2 or z.shape[1] != self.spec.z_dim or z.shape[0] != y.shape[0]:
            raise ValueError(f"latent shape {tuple(z.shape)} incompatible with z_dim={self.spec.z_dim}")
        if torch.any(y * (1 - mask) != 0):
            raise ValueError("generator input must have its masked region zeroed")
        zmap = self.z_proj(z)[:, :, None, None].expand(-1, -1, y.shape[2], y.shape[3])
        h = self.stem(torch.cat([y, mask, zmap], dim=1))
        for block in self.down:
            h = block(h)
        h = self.mid(h)
        for block in self.up:
            h = block(h)
        h = self.head(F.relu(self.head_norm(h)))
        return (torch.tanh(h) + 1) / 2


class Discriminator(nn.Module):
    """Residual score network; one real-valued score per input image."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        self.stem = _conv3(spec.image_channels, spec.base_width)
        widths = [spec.base_width] + _stage_widths(spec.base_width, spec.n_blocks)
        blocks = []
        res = spec.image_size
        for i in range(spec.n_blocks):
            blocks.append(ResidualBlock(widths[i], widths[i + 1], "down", spec.norm))
            res //= 2
            if res in spec.attention_at:
                blocks.append(SelfAttention(widths[i + 1]))
        self.blocks = nn.ModuleList(blocks)
        self.final = SNLinear(widths[-1], 1)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() != 4 or y.shape[1] != self.spec.image_channels:
            raise ValueError(f"expected (B,{self.spec.image_channels},H,W) input, got {tuple(y.shape)}")
        if y.shape[-2:] != (self.spec.image_size, self.spec.image_size):
            raise ValueError(f"expected {self.spec.image_size}^2 input, got {tuple(y.shape[-2:])}")
        h = self.stem(y)
        for block in self.blocks:
            h = block(h)
        h = F.relu(h).sum(dim=(2, 3))  # global sum pool
        return self.final(h).squeeze(1)


class Encoder(nn.Module):
    """Residual encoder with mean / log-variance heads over the latent."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.stem = nn.Conv2d(spec.image_channels, spec.base_width, 3, padding=1)
        widths = [spec.base_width] + _stage_widths(spec.base_width, spec.n_blocks)
        self.blocks = nn.ModuleList(
            ResidualBlock(widths[i], widths[i + 1], "down", spec.norm, spectral=False)
            for i in range(spec.n_blocks)
        )
        self.fc_mean = nn.Linear(widths[-1], spec.z_dim)
        self.fc_logvar = nn.Linear(widths[-1], spec.z_dim)

    def forward(self, y: torch.Tensor):
        if y.dim() != 4 or y.shape[1] != self.spec.image_channels:
            raise ValueError(f"expected (B,{self.spec.image_channels},H,W) input, got {tuple(y.shape)}")
        h = self.stem(y)
        for block in self.blocks:
            h = block(h)
        h = F.relu(h).mean(dim=(2, 3))
        return self.fc_mean(h), self.fc_logvar(h)


def sample_latent(mean: torch.Tensor, logvar: torch.Tensor,
                  eps: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw: mean + exp(logvar / 2) * eps."""
    return mean + torch.exp(0.5 * logvar) * eps


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministically (re)initialize all parameters from ``seed``.

    Xavier-uniform weights for conv/linear layers, zero biases, unit batch
    norm scale, zero attention gates.  Uses a private torch generator so the
    global RNG state is untouched; spectral-norm estimates are refreshed
    afterwards.
    """
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_out = m.weight.shape[0]
                fan_in = m.weight.numel() // fan_out
                bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
                w = torch.empty(m.weight.shape, dtype=torch.float32).uniform_(
                    -bound, bound, generator=g)
                m.weight.copy_(w)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
            if isinstance(m, SelfAttention):
                m.gamma.zero_()
            if isinstance(m, _SpectralNormMixin):
                m.reset_sn_vectors()
    update_spectral_norms(module, n_iters=1)
