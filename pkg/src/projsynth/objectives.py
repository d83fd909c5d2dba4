"""Training losses: pixel-wise l1 and the perceptual loss.

The l1 loss sums |label - generated| over all pixels (a mean-normalized
variant is selectable and recorded in LossConfig). The perceptual loss
feeds both images through a frozen VGG-19-topology evaluation network
and aggregates per-layer mean absolute differences of the raw feature
activations, weighted and summed over the selected layers. Only the
generated image receives gradients; the label path and the network stay
frozen.

The stock evaluation network here carries fixed seeded-random weights (a
desk-scale stand-in for ImageNet pretraining, which is out of scope);
genuinely pretrained VGG-19 weights can be supplied through the same
weights container.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .containers import load_weights, save_weights
from .errors import ConfigurationError, DimensionError, LoadError, ParameterError

# VGG-19 feature stack: (channels, conv count) per block, maxpool between.
VGG19_BLOCKS = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 4))

DEFAULT_LAYERS = ("relu1_2", "relu2_2", "relu3_2", "relu4_2", "relu5_2")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "l1"  # "l1" | "perceptual"
    l1_reduction: str = "sum"  # "sum" (as defined) | "mean" (per-pixel)
    layers: tuple = DEFAULT_LAYERS
    layer_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("l1", "perceptual"):
            raise ConfigurationError(f"loss kind must be 'l1' or 'perceptual', got {self.kind!r}")
        if self.l1_reduction not in ("sum", "mean"):
            raise ConfigurationError(f"l1_reduction must be 'sum' or 'mean', got {self.l1_reduction!r}")
        if len(self.layers) != len(self.layer_weights):
            raise ConfigurationError("layers and layer_weights must have equal length")
        if any(w <= 0 for w in self.layer_weights):
            raise ConfigurationError("per-layer weights must be > 0")


def l1_loss(label, generated, reduction="sum"):
    """Sum (or mean) of absolute pixel differences. Differentiable."""
    if label.shape != generated.shape:
        raise DimensionError(f"l1_loss: shape mismatch {label.shape} vs {generated.shape}")
    diff = ad.absolute(ad.sub(label, generated))
    if reduction == "sum":
        return ad.tsum(diff)
    if reduction == "mean":
        return ad.tmean(diff)
    raise ParameterError(f"unknown reduction {reduction!r}")


class EvaluationNetwork:
    """Frozen VGG-19-topology feature extractor.

    Layer names: conv{b}_{i} / relu{b}_{i} within block b, pool{b} after
    it. ``width_scale`` shrinks all channel widths proportionally for
    desk-scale runs; 1.0 reproduces the true VGG-19 widths.
    """

    in_channels = 3

    def __init__(self, params, widths):
        self.params = params  # {name: Tensor}, requires_grad=False
        self.widths = tuple(widths)

    @staticmethod
    def _layer_plan(widths):
        plan = []  # (layer_name, kind, block, conv_index)
        for b, (width, n_convs) in enumerate(zip(widths, (n for _, n in VGG19_BLOCKS)), start=1):
            for i in range(1, n_convs + 1):
                plan.append((f"conv{b}_{i}", "conv", b, i))
                plan.append((f"relu{b}_{i}", "relu", b, i))
            plan.append((f"pool{b}", "pool", b, None))
        return plan

    @classmethod
    def random(cls, seed=0, width_scale=1.0):
        """Fixed random weights from a seed.

        He-uniform kernels; small random biases keep pre-activations away
        from exact zero, so no feature region is stuck on the relu kink.
        """
        if width_scale <= 0:
            raise ParameterError(f"width_scale must be > 0, got {width_scale}")
        widths = [max(1, int(round(c * width_scale))) for c, _ in VGG19_BLOCKS]
        rng = np.random.default_rng(seed)
        params = {}
        c_in = cls.in_channels
        for b, (width, (_, n_convs)) in enumerate(zip(widths, VGG19_BLOCKS), start=1):
            for i in range(1, n_convs + 1):
                fan_in = c_in * 9
                bound = np.sqrt(6.0 / fan_in)
                params[f"conv{b}_{i}.kernel"] = ad.tensor(
                    rng.uniform(-bound, bound, size=(width, c_in, 3, 3))
                )
                params[f"conv{b}_{i}.bias"] = ad.tensor(rng.uniform(-0.2, 0.2, size=width))
                c_in = width
        return cls(params, widths)

    @classmethod
    def load(cls, path):
        tensors = load_weights(path)
        widths = []
        c_in = cls.in_channels
        for b, (_, n_convs) in enumerate(VGG19_BLOCKS, start=1):
            for i in range(1, n_convs + 1):
                kname, bname = f"conv{b}_{i}.kernel", f"conv{b}_{i}.bias"
                if kname not in tensors:
                    raise LoadError(f"missing tensor {kname!r} in evaluation network weights")
                if bname not in tensors:
                    raise LoadError(f"missing tensor {bname!r} in evaluation network weights")
                kern = tensors[kname]
                if kern.ndim != 4 or kern.shape[1] != c_in or kern.shape[2:] != (3, 3):
                    raise LoadError(
                        f"tensor {kname!r}: expected shape (*, {c_in}, 3, 3), got {kern.shape}"
                    )
                if tensors[bname].shape != (kern.shape[0],):
                    raise LoadError(f"tensor {bname!r}: bias/kernel width mismatch")
                c_in = kern.shape[0]
            widths.append(c_in)
        params = {name: ad.tensor(arr) for name, arr in tensors.items()}
        return cls(params, widths)

    def save(self, path):
        return save_weights(path, {name: p.data for name, p in self.params.items()})

    def layer_names(self):
        return [name for name, *_ in self._layer_plan(self.widths)]

    def has_layer(self, name):
        return name in set(self.layer_names())

    def activations(self, x, layers):
        """Feature maps for the requested layer names.

        Evaluates the stack only as deep as the last requested layer. The
        input must have 3 channels and spatial dims divisible by 2 at each
        pool crossed on the way.
        """
        wanted = set(layers)
        plan = self._layer_plan(self.widths)
        known = {name for name, *_ in plan}
        unknown = wanted - known
        if unknown:
            raise ConfigurationError(
                f"evaluation network has no layers {sorted(unknown)}; "
                f"names look like conv1_1 / relu1_2 / pool3"
            )
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"evaluation network expects {self.in_channels} channels, got {x.shape[1]}"
            )
        out = {}
        h = x
        for name, kind, _, _ in plan:
            if kind == "conv":
                h = ad.conv2d(h, self.params[f"{name}.kernel"], self.params[f"{name}.bias"], 1, 1)
            elif kind == "relu":
                h = ad.relu(h)
            else:
                h = ad.max_pool2d(h, 2)
            if name in wanted:
                out[name] = h
                wanted.discard(name)
                if not wanted:
                    break
        return out


def _replicate_channels(x, n):
    out = x
    for _ in range(n - 1):
        out = ad.concat_channels(out, x)
    return out


def perceptual_loss(label, generated, net, cfg=None):
    """Weighted sum over layers k of meanAbs(V_k(label) - V_k(generated)).

    Zero iff all selected activation maps agree. Only ``generated``
    receives gradients; the label branch is detached and the network is
    frozen.
    """
    cfg = cfg or LossConfig(kind="perceptual")
    if label.shape != generated.shape:
        raise DimensionError(
            f"perceptual_loss: shape mismatch {label.shape} vs {generated.shape}"
        )
    for name in cfg.layers:
        if not net.has_layer(name):
            raise ConfigurationError(f"selected layer {name!r} not present in evaluation network")

    label = label.detach()
    if label.shape[1] == 1 and net.in_channels == 3:
        label = _replicate_channels(label, 3)
        generated = _replicate_channels(generated, 3)
    acts_label = net.activations(label, cfg.layers)
    acts_gen = net.activations(generated, cfg.layers)

    total = None
    for name, weight in zip(cfg.layers, cfg.layer_weights):
        term = ad.tmean(ad.absolute(ad.sub(acts_gen[name], acts_label[name])))
        term = ad.scale(term, weight)
        total = term if total is None else ad.add(total, term)
    return total


def make_loss_fn(cfg, eval_net=None):
    """Bind a LossConfig (plus evaluation network, for perceptual) into a
    callable loss(label_tensor, generated_tensor) -> scalar tensor."""
    if cfg.kind == "l1":
        return lambda label, generated: l1_loss(label, generated, cfg.l1_reduction)
    if eval_net is None:
        raise ParameterError("perceptual loss needs an evaluation network")
    return lambda label, generated: perceptual_loss(label, generated, eval_net, cfg)
