"""Generator networks mapping a single-channel MR projection to a
single-channel synthesized X-ray projection of the same resolution.

Three architectures:

* U-net style encoder/decoder: stride-2 convolutions for resampling
  (no pooling), skip connections by channel concatenation, dropout
  (keep 0.5) on the first decoder levels during training.
* Residual generator: stem conv, two stride-2 downsampling convs, nine
  residual blocks (conv-norm-relu-conv-norm + identity), two transposed
  convs back up. Instance normalization throughout.
* Cascaded refinement network: coarse-to-fine stack of refinement
  modules; the input enters each scale only through bilinear resizing
  and concatenation (no convolutions on the downscaling path), two 3x3
  convs with layer normalization and lrelu(0.2) per module, final 1x1
  conv to one channel.

Initialization is He-uniform for conv kernels with zero biases;
normalization affines start at gamma=1, beta=0. Outputs are linear (no
final activation): targets are [-1, 1]-scaled projections.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .containers import load_weights, save_weights
from .errors import ConfigurationError, LoadError, NumericalError, ParameterError
from .projector import ProjectionImage


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4  # resolution levels; depth-1 downsamplings
    base_channels: int = 32
    kernel: int = 3
    dropout_keep: float = 0.5
    dropout_levels: int = 3  # coarsest decoder levels with dropout

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigurationError("depth and base_channels must be >= 1")
        if self.kernel % 2 != 1:
            raise ConfigurationError("kernel size must be odd")
        if not 0 < self.dropout_keep <= 1:
            raise ConfigurationError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")
        if self.dropout_levels > self.depth:
            raise ConfigurationError("dropout_levels cannot exceed depth")


@dataclass(frozen=True)
class ResNetGenConfig:
    n_residual_blocks: int = 9
    stem_channels: int = 32
    down_channels: tuple = (64, 128)
    stem_kernel: int = 7
    kernel: int = 3

    def __post_init__(self):
        if self.n_residual_blocks < 1:
            raise ConfigurationError("need at least one residual block")
        if self.stem_kernel % 2 != 1 or self.kernel % 2 != 1:
            raise ConfigurationError("kernel sizes must be odd")


@dataclass(frozen=True)
class CRNConfig:
    n_modules: int = 8
    coarse_h: int = 4
    coarse_w: int = 4
    widths: tuple = None  # per-module; default: halving from 256, floor 8

    def __post_init__(self):
        if self.n_modules < 1 or self.coarse_h < 1 or self.coarse_w < 1:
            raise ConfigurationError("n_modules and coarsest resolution must be >= 1")
        if self.widths is None:
            object.__setattr__(
                self, "widths", tuple(max(8, 256 >> m) for m in range(self.n_modules))
            )
        if len(self.widths) != self.n_modules:
            raise ConfigurationError(
                f"widths has {len(self.widths)} entries for {self.n_modules} modules"
            )
        if any(a < b for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigurationError("module widths must be non-increasing with scale")

    @property
    def finest_resolution(self):
        f = 1 << (self.n_modules - 1)
        return (self.coarse_h * f, self.coarse_w * f)


_CONFIG_TYPES = {"unet": UNetConfig, "resnet": ResNetGenConfig, "crn": CRNConfig}


def _he_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Model:
    """A generator: ordered named parameters, architecture tag, forward."""

    arch = None

    def __init__(self, config, rng_seed=0):
        self.config = config
        self.rng_seed = int(rng_seed)
        self.params = {}
        self._init_params(np.random.default_rng(self.rng_seed))

    # subclasses fill self.params and define forward()
    def _init_params(self, rng):
        raise NotImplementedError

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def _add_conv(self, rng, name, c_out, c_in, k, transpose=False):
        shape = (c_in, c_out, k, k) if transpose else (c_out, c_in, k, k)
        self.params[f"{name}.kernel"] = ad.tensor(
            _he_uniform(rng, shape, fan_in=c_in * k * k), requires_grad=True
        )
        self.params[f"{name}.bias"] = ad.zeros((c_out,), requires_grad=True)

    def _add_norm(self, name, channels):
        self.params[f"{name}.gamma"] = ad.tensor(np.ones(channels), requires_grad=True)
        self.params[f"{name}.beta"] = ad.zeros((channels,), requires_grad=True)

    def _conv(self, name, x, stride=1, pad=None):
        k = self.params[f"{name}.kernel"]
        if pad is None:
            pad = k.shape[-1] // 2
        return ad.conv2d(x, k, self.params[f"{name}.bias"], stride=stride, pad=pad)

    def _conv_t(self, name, x, stride=2):
        k = self.params[f"{name}.kernel"]
        pad = k.shape[-1] // 2
        return ad.conv2d_transpose(
            x, k, self.params[f"{name}.bias"], stride=stride, pad=pad, out_pad=stride - 1
        )

    def _norm(self, name, x, mode):
        return ad.normalize(x, mode, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    def n_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, tensors):
        """Install parameters from {name: array}, strict about names/shapes."""
        for name, p in self.params.items():
            if name not in tensors:
                raise LoadError(f"missing tensor {name!r} in weights")
            arr = np.asarray(tensors[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise LoadError(
                    f"tensor {name!r}: expected shape {p.data.shape}, got {arr.shape}"
                )
            p.data = arr
            p.grad = None
        extra = set(tensors) - set(self.params)
        if extra:
            raise LoadError(f"weights contain unknown tensors: {sorted(extra)}")

    def save(self, path):
        return save_weights(path, self.state_dict())

    def load(self, path):
        self.load_state(load_weights(path))

    def config_json(self):
        return json.dumps({"arch": self.arch, "config": asdict(self.config)}, indent=1)


class UNet(Model):
    arch = "unet"

    def _init_params(self, rng):
        cfg = self.config
        ch = [cfg.base_channels * (1 << i) for i in range(cfg.depth)]
        self._add_conv(rng, "enc0", ch[0], 1, cfg.kernel)
        for i in range(1, cfg.depth):
            self._add_conv(rng, f"enc{i}", ch[i], ch[i - 1], cfg.kernel)
        for i in reversed(range(cfg.depth - 1)):
            self._add_conv(rng, f"up{i}", ch[i], ch[i + 1], cfg.kernel, transpose=True)
            self._add_conv(rng, f"dec{i}", ch[i], 2 * ch[i], cfg.kernel)
        self._add_conv(rng, "out", 1, ch[0], 1)

    def forward(self, x, training=False, rng=None):
        cfg = self.config
        h, w = x.shape[2], x.shape[3]
        factor = 1 << (cfg.depth - 1)
        if h % factor or w % factor:
            raise ConfigurationError(
                f"input {h}x{w} not divisible by 2^(depth-1) = {factor}"
            )
        e = ad.relu(self._conv("enc0", x))
        skips = [e]
        for i in range(1, cfg.depth):
            e = ad.relu(self._conv(f"enc{i}", e, stride=2))
            skips.append(e)
        d = skips[-1]
        for count, i in enumerate(reversed(range(cfg.depth - 1))):
            up = ad.relu(self._conv_t(f"up{i}", d))
            d = ad.relu(self._conv(f"dec{i}", ad.concat_channels(up, skips[i])))
            if training and count < cfg.dropout_levels:
                d = ad.dropout(d, cfg.dropout_keep, training=True, rng=rng)
        return self._conv("out", d, pad=0)


class ResNetGenerator(Model):
    arch = "resnet"

    def _init_params(self, rng):
        cfg = self.config
        self._add_conv(rng, "stem", cfg.stem_channels, 1, cfg.stem_kernel)
        self._add_norm("stem_norm", cfg.stem_channels)
        prev = cfg.stem_channels
        for i, c in enumerate(cfg.down_channels):
            self._add_conv(rng, f"down{i}", c, prev, cfg.kernel)
            self._add_norm(f"down{i}_norm", c)
            prev = c
        for j in range(cfg.n_residual_blocks):
            self._add_conv(rng, f"block{j}.conv1", prev, prev, cfg.kernel)
            self._add_norm(f"block{j}.norm1", prev)
            self._add_conv(rng, f"block{j}.conv2", prev, prev, cfg.kernel)
            self._add_norm(f"block{j}.norm2", prev)
        up_channels = (cfg.stem_channels,) + tuple(cfg.down_channels[:-1])
        for i, c in enumerate(reversed(up_channels)):
            self._add_conv(rng, f"up{i}", c, prev, cfg.kernel, transpose=True)
            self._add_norm(f"up{i}_norm", c)
            prev = c
        self._add_conv(rng, "out", 1, prev, cfg.stem_kernel)

    def forward(self, x, training=False, rng=None):
        cfg = self.config
        factor = 1 << len(cfg.down_channels)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ConfigurationError(
                f"input {x.shape[2]}x{x.shape[3]} not divisible by {factor}"
            )
        h = ad.relu(self._norm("stem_norm", self._conv("stem", x), "instance"))
        for i in range(len(cfg.down_channels)):
            h = ad.relu(self._norm(f"down{i}_norm", self._conv(f"down{i}", h, stride=2), "instance"))
        for j in range(cfg.n_residual_blocks):
            t = ad.relu(self._norm(f"block{j}.norm1", self._conv(f"block{j}.conv1", h), "instance"))
            t = self._norm(f"block{j}.norm2", self._conv(f"block{j}.conv2", t), "instance")
            h = ad.add(h, t)
        for i in range(len(cfg.down_channels)):
            h = ad.relu(self._norm(f"up{i}_norm", self._conv_t(f"up{i}", h), "instance"))
        return self._conv("out", h)


class CascadedRefinementNet(Model):
    arch = "crn"

    def _init_params(self, rng):
        cfg = self.config
        for m, width in enumerate(cfg.widths):
            c_in = 1 if m == 0 else 1 + cfg.widths[m - 1]
            self._add_conv(rng, f"mod{m}.conv1", width, c_in, 3)
            self._add_norm(f"mod{m}.norm1", width)
            self._add_conv(rng, f"mod{m}.conv2", width, width, 3)
            self._add_norm(f"mod{m}.norm2", width)
        self._add_conv(rng, "out", 1, cfg.widths[-1], 1)

    def forward(self, x, training=False, rng=None):
        cfg = self.config
        fh, fw = cfg.finest_resolution
        if (x.shape[2], x.shape[3]) != (fh, fw):
            raise ConfigurationError(
                f"input {x.shape[2]}x{x.shape[3]} does not match the configured "
                f"finest resolution {fh}x{fw}"
            )
        feat = None
        for m in range(cfg.n_modules):
            sh, sw = cfg.coarse_h << m, cfg.coarse_w << m
            scaled_in = ad.resize_bilinear(x, sh, sw)
            if feat is None:
                z = scaled_in
            else:
                z = ad.concat_channels(scaled_in, ad.resize_bilinear(feat, sh, sw))
            z = ad.lrelu(self._norm(f"mod{m}.norm1", self._conv(f"mod{m}.conv1", z), "layer"), 0.2)
            feat = ad.lrelu(self._norm(f"mod{m}.norm2", self._conv(f"mod{m}.conv2", z), "layer"), 0.2)
        return self._conv("out", feat, pad=0)

    def feature_resolutions(self):
        """Spatial dims of each module's feature maps, coarse to fine."""
        return [(self.config.coarse_h << m, self.config.coarse_w << m)
                for m in range(self.config.n_modules)]


def build_unet(config=None, rng_seed=0):
    return UNet(config or UNetConfig(), rng_seed)


def build_resnet_generator(config=None, rng_seed=0):
    return ResNetGenerator(config or ResNetGenConfig(), rng_seed)


def build_crn(config=None, rng_seed=0):
    return CascadedRefinementNet(config or CRNConfig(), rng_seed)


_BUILDERS = {"unet": build_unet, "resnet": build_resnet_generator, "crn": build_crn}


def build_model(arch, config=None, rng_seed=0):
    if arch not in _BUILDERS:
        raise ParameterError(f"unknown architecture {arch!r}; choose from {sorted(_BUILDERS)}")
    return _BUILDERS[arch](config, rng_seed)


def config_from_dict(arch, raw):
    if arch not in _CONFIG_TYPES:
        raise ParameterError(f"unknown architecture {arch!r}")
    cfg_type = _CONFIG_TYPES[arch]
    try:
        cfg = cfg_type(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    except TypeError as e:
        raise ConfigurationError(f"bad {arch} config: {e}") from e
    return cfg


def forward(model, image, training=False, rng=None):
    """Run a generator on one projection image; output is tagged SYNTH."""
    nu, nv = image.dims
    x = ad.tensor(image.data.reshape(1, 1, nv, nu))
    y = model.forward(x, training=training, rng=rng)
    if not np.isfinite(y.data).all():
        raise NumericalError("generator produced non-finite output")
    return ProjectionImage(dims=image.dims, spacing=image.spacing, data=y.data[0, 0], modality="SYNTH")
