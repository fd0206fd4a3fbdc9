"""Network assembly: the two generators and two discriminators.

Generators are 12-layer (or 10-layer at 64 resolution) 3D U-nets whose
encoder activations are added element-wise into the decoder inputs; the
stage-2 generator drops the two outermost skip pairs so it cannot collapse
into an identity map. Discriminators reuse the encoder plus a single-node
sigmoid head and expose feature taps for the motion descriptor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import (BN_EPS, BN_MOMENTUM, BatchNormState, ConvParams, activation,
                  batchnorm3d, conv3d, conv_output_shape, deconv3d,
                  deconv_output_shape)
from .tensor import Tensor, _accumulate, clamp

log = logging.getLogger(__name__)

CLIP_FRAMES = 32  # temporal extent of every video the networks see

# (name, filters, kernel, stride, padding) for the 128-resolution generator.
# deconv1's temporal kernel extent is 2 (not the nominal 4): the bottleneck
# time extent is 1 and the conv5 skip target is 2, so only k_t=2 keeps the
# encoder/decoder shapes symmetric.
_GENERATOR_TABLE = (
    ("conv1", 32, (3, 4, 4), (1, 2, 2), (1, 1, 1)),
    ("conv2", 64, (4, 4, 4), (2, 2, 2), (1, 1, 1)),
    ("conv3", 128, (4, 4, 4), (2, 2, 2), (1, 1, 1)),
    ("conv4", 256, (4, 4, 4), (2, 2, 2), (1, 1, 1)),
    ("conv5", 512, (4, 4, 4), (2, 2, 2), (1, 1, 1)),
    ("conv6", 512, (2, 4, 4), (1, 1, 1), (0, 0, 0)),
    ("deconv1", 512, (2, 4, 4), (1, 1, 1), (0, 0, 0)),
    ("deconv2", 256, (4, 4, 4), (2, 2, 2), (1, 1, 1)),
    ("deconv3", 128, (4, 4, 4), (2, 2, 2), (1, 1, 1)),
    ("deconv4", 64, (4, 4, 4), (2, 2, 2), (1, 1, 1)),
    ("deconv5", 32, (4, 4, 4), (2, 2, 2), (1, 1, 1)),
    ("deconv6", 3, (3, 4, 4), (1, 2, 2), (1, 1, 1)),
)

# encoder layer added into each decoder layer's input (full 128-res net)
_SKIPS_STAGE1 = {
    "deconv6": "conv1",
    "deconv5": "conv2",
    "deconv4": "conv3",
    "deconv3": "conv4",
    "deconv2": "conv5",
}
_STAGE2_REMOVED = (("conv1", "deconv6"), ("conv2", "deconv5"))


@dataclass(frozen=True)
class LayerSpec:
    name: str
    params: ConvParams
    in_channels: int
    batch_norm: bool
    activation: str | None
    out_shape: tuple  # (C, T, H, W) per sample

    @property
    def out_channels(self):
        return self.params.num_filters


@dataclass(frozen=True)
class NetworkSpec:
    kind: str                 # "generator" | "discriminator"
    stage: int | None
    resolution: int
    width_multiplier: float
    input_shape: tuple        # (C, T, H, W)
    layers: tuple
    skip_map: dict = field(default_factory=dict)   # decoder name -> encoder name
    taps: tuple = ()          # feature-tap layer names (discriminators)

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)


@dataclass
class GeneratorOutput:
    """Generated video in (-1,1), with the per-layer activations when cached."""

    video: Tensor
    activations: dict | None = None


def _scale_width(base, width_multiplier):
    return max(1, round(base * width_multiplier))


def _check_resolution(resolution):
    if resolution not in (128, 64):
        raise ConfigError(f"resolution must be 128 or 64, got {resolution}")


def _check_width(width_multiplier):
    if not 0.0 < width_multiplier <= 1.0:
        raise ConfigError(f"width_multiplier must lie in (0,1], got {width_multiplier}")


def _assemble(rows, skip_map, resolution, width_multiplier, kind, stage, taps=()):
    """Chain output shapes through the rows, apply width scaling, and verify
    every skip junction; raises DimensionError on any mismatch."""
    layers = []
    shapes = {}
    channels, spatial = 3, (CLIP_FRAMES, resolution, resolution)
    last_index = len(rows) - 1
    for i, (name, filters, kernel, stride, padding, bn, act) in enumerate(rows):
        transposed = name.startswith("deconv")
        # the output/score layer keeps its channel count; width scales the rest
        scaled = filters if i == last_index else _scale_width(filters, width_multiplier)
        params = ConvParams(scaled, kernel, stride, padding, transposed=transposed)
        if transposed:
            out_spatial = deconv_output_shape(spatial, params)
        else:
            out_spatial = conv_output_shape(spatial, params)
        if name in skip_map:
            source = shapes.get(skip_map[name])
            if source is None:
                raise DimensionError(
                    f"skip source {skip_map[name]!r} not built before {name!r}")
            if source != (channels,) + tuple(spatial):
                raise DimensionError(
                    f"skip junction mismatch at {name}: encoder {source} vs "
                    f"decoder input {(channels,) + tuple(spatial)}")
        layers.append(LayerSpec(name, params, channels, bn, act,
                                (scaled,) + tuple(out_spatial)))
        shapes[name] = (scaled,) + tuple(out_spatial)
        channels, spatial = scaled, out_spatial
    return NetworkSpec(kind=kind, stage=stage, resolution=resolution,
                       width_multiplier=width_multiplier,
                       input_shape=(3, CLIP_FRAMES, resolution, resolution),
                       layers=tuple(layers), skip_map=dict(skip_map), taps=tuple(taps))


def _generator_rows(resolution):
    """Table rows with normalization/activation flags for one resolution.

    Batch norm rides every layer except the first conv, the 1x1x1 bottleneck
    conv, and the output deconv; conv activations are leaky, deconv
    activations plain ReLU, and the output layer is tanh.
    """
    rows = []
    table = [r for r in _GENERATOR_TABLE
             if resolution == 128 or r[0] not in ("conv1", "deconv6")]
    out_name = table[-1][0]
    for name, filters, kernel, stride, padding in table:
        if name == out_name:
            rows.append((name, 3, kernel, stride, padding, False, "tanh"))
        elif name in ("conv1", "conv6"):
            rows.append((name, filters, kernel, stride, padding, False, "leaky_relu"))
        elif name.startswith("conv"):
            rows.append((name, filters, kernel, stride, padding, True, "leaky_relu"))
        else:
            rows.append((name, filters, kernel, stride, padding, True, "relu"))
    return rows


def build_generator(stage, resolution, width_multiplier=1.0):
    """Declarative spec for the stage-1 or stage-2 generator."""
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    _check_resolution(resolution)
    _check_width(width_multiplier)
    rows = _generator_rows(resolution)
    present = {r[0] for r in rows}
    skip_map = {d: e for d, e in _SKIPS_STAGE1.items()
                if d in present and e in present}
    if stage == 2:
        for enc, dec in _STAGE2_REMOVED:
            skip_map.pop(dec, None)
    return _assemble(rows, skip_map, resolution, width_multiplier,
                     "generator", stage)


def build_discriminator(resolution, width_multiplier=1.0):
    """Spec for a video discriminator: the generator encoder plus a
    single-filter sigmoid head; feature taps after the first and third
    convolutional layers feed the motion descriptor."""
    _check_resolution(resolution)
    _check_width(width_multiplier)
    rows = []
    for name, filters, kernel, stride, padding in _GENERATOR_TABLE[:5]:
        if resolution == 64 and name == "conv1":
            continue
        rows.append((name, filters, kernel, stride, padding,
                     name != "conv1", "leaky_relu"))
    # final single node over the (512,2,4,4) encoder output
    rows.append(("score", 1, (2, 4, 4), (1, 1, 1), (0, 0, 0), False, "sigmoid"))
    conv_names = [r[0] for r in rows[:-1]]
    taps = (conv_names[0], conv_names[2])
    return _assemble(rows, {}, resolution, width_multiplier,
                     "discriminator", None, taps=taps)


def duplicate_frame(x, t):
    """Tile one frame (N,C,H,W) into a static video (N,C,t,H,W)."""
    if t < 1:
        raise DimensionError(f"frame count must be >= 1, got {t}")
    if x.ndim != 4:
        raise DimensionError(f"expected (N,C,H,W) frame, got {x.shape}")
    out = np.repeat(x.values[:, :, None], t, axis=2)

    def backward(g):
        _accumulate(x, g.sum(axis=2))

    return Tensor._from_op(out, (x,), backward, "duplicate_frame")


def _bn_state(params, name, eps, momentum):
    return BatchNormState(
        gamma=params.tensors[f"{name}.gamma"],
        beta=params.tensors[f"{name}.beta"],
        running_mean=params.buffers[f"{name}.running_mean"],
        running_var=params.buffers[f"{name}.running_var"],
        momentum=momentum, eps=eps)


def _apply_layer(layer, params, x, mode, update_running, bn_eps, bn_momentum):
    w = params.tensors[f"{layer.name}.weight"]
    b = params.tensors[f"{layer.name}.bias"]
    op = deconv3d if layer.params.transposed else conv3d
    out = op(x, w, b, layer.params)
    if layer.batch_norm:
        out = batchnorm3d(out, _bn_state(params, layer.name, bn_eps, bn_momentum),
                          mode, update_running=update_running)
    if layer.activation is not None:
        out = activation(layer.activation, out)
    return out


def forward_generator(spec, params, x, mode="train", update_running=True,
                      cache_activations=False, bn_eps=BN_EPS, bn_momentum=BN_MOMENTUM):
    """Run a generator over a static or stage-1 video (N,3,T,H,W).

    Skip additions happen on the decoder inputs; output is tanh-bounded, the
    same shape as the input. Differentiable end to end.
    """
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise DimensionError(
            f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
    cache = {}
    cur = x
    for layer in spec.layers:
        if layer.name in spec.skip_map:
            skip = cache[spec.skip_map[layer.name]]
            if skip.shape != cur.shape:
                raise RuntimeError(
                    f"internal skip junction mismatch at {layer.name}: "
                    f"{skip.shape} vs {cur.shape}")
            cur = cur + skip
        cur = _apply_layer(layer, params, cur, mode, update_running,
                           bn_eps, bn_momentum)
        cache[layer.name] = cur
    return GeneratorOutput(video=cur, activations=cache if cache_activations else None)


def forward_discriminator(spec, params, video, mode="train", update_running=True,
                          bn_eps=BN_EPS, bn_momentum=BN_MOMENTUM):
    """Score a video and return the tapped post-activation features.

    Returns (score, features): score (N,1) strictly inside (0,1), features a
    list of tap activations in tap order. Inputs outside [-1,1] are clamped
    with a logged warning; gradients flow through both outputs.
    """
    if tuple(video.shape[1:]) != tuple(spec.input_shape):
        raise DimensionError(
            f"video shape {video.shape[1:]} does not match spec {spec.input_shape}")
    peak = float(np.max(np.abs(video.values))) if video.size else 0.0
    if peak > 1.0:
        log.warning("discriminator input exceeds [-1,1] (max |v| = %.4g); clamping", peak)
        video = clamp(video, -1.0, 1.0)
    cur = video
    features = {}
    for layer in spec.layers:
        cur = _apply_layer(layer, params, cur, mode, update_running,
                           bn_eps, bn_momentum)
        if layer.name in spec.taps:
            features[layer.name] = cur
    n = cur.shape[0]
    score = cur.reshape((n, 1))
    return score, [features[name] for name in spec.taps]


def parameter_count(spec):
    total = 0
    for l in spec.layers:
        k = int(np.prod(l.params.kernel))
        total += l.in_channels * l.out_channels * k + l.out_channels
        if l.batch_norm:
            total += 2 * l.out_channels
    return total


def format_spec(spec):
    """Human-readable layer table (name, filters, kernel, stride, padding,
    norm/activation, skip source, output shape)."""
    head = (f"{spec.kind} stage={spec.stage} resolution={spec.resolution} "
            f"width={spec.width_multiplier:g} params={parameter_count(spec)}")
    cols = f"{'layer':<9}{'filters':>8}  {'kernel':<10}{'stride':<10}{'pad':<10}" \
           f"{'bn':<4}{'act':<12}{'skip':<8}out (C,T,H,W)"
    lines = [head, cols]
    for l in spec.layers:
        skip = spec.skip_map.get(l.name, "-")
        lines.append(
            f"{l.name:<9}{l.out_channels:>8}  {str(l.params.kernel):<10}"
            f"{str(l.params.stride):<10}{str(l.params.padding):<10}"
            f"{'y' if l.batch_norm else 'n':<4}{l.activation or '-':<12}"
            f"{skip:<8}{l.out_shape}")
    return "\n".join(lines)
