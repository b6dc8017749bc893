"""
Small fully connected decoders from fused plane features to density, color and mask.

Every network is written out as explicit forward and backward passes over numpy arrays; the
forward pass returns a cache that the backward pass consumes.
"""
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from src import constants
from src.errors import ConfigurationError, ModeError
from src.plane_field import FieldGradient, FieldSample


def encode_direction(d: np.ndarray) -> np.ndarray:
    '''d followed by sin(2^k pi d) and cos(2^k pi d), k = 0..3, for a 3-vector or an (N, 3) batch'''
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    parts = [d]
    for k in range(constants.DIRECTION_FREQUENCIES):
        scaled = (2.0 ** k) * np.pi * d
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    encoded = np.concatenate(parts, axis=1)
    return encoded[0] if single else encoded


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == constants.ACTIVATION_SOFTPLUS:
        return softplus(x)
    return np.maximum(x, 0.0)


def _activation_grad(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == constants.ACTIVATION_SOFTPLUS:
        return expit(x)
    return (x > 0.0).astype(np.float64)


def _linear_backward(x: np.ndarray, w: np.ndarray, upstream: np.ndarray):
    return upstream @ w.T, x.T @ upstream, upstream.sum(axis=0)


def decoder_shapes(mode: str, feature_dim: int, num_scales: int, hidden_width: int) -> Dict[str, Tuple[int, ...]]:
    '''Tensor name to shape for every network the given mode uses'''
    width = feature_dim * num_scales
    hidden = hidden_width
    shapes = {}
    if mode == constants.FIELD_MODE_EXTENDED:
        fusion_in = 2 * width + len(constants.TEMPORAL_AXIS_PAIRS)
        shapes.update({
            "fusion.w0": (fusion_in, hidden), "fusion.b0": (hidden,),
            "fusion.w1": (hidden, width), "fusion.b1": (width,),
        })
    elif mode not in constants.FIELD_MODES:
        raise ModeError(f"Unknown field mode '{mode}'")
    shapes.update({
        "density.w0": (width, hidden), "density.b0": (hidden,),
        "density.w1": (hidden, 1), "density.b1": (1,),
        "color.w0": (width + constants.DIRECTION_ENCODING_DIM, hidden), "color.b0": (hidden,),
        "color.w1": (hidden, 3), "color.b1": (3,),
    })
    if mode == constants.FIELD_MODE_EXTENDED:
        shapes.update({"mask.w": (len(constants.TEMPORAL_AXIS_PAIRS), 1), "mask.b": (1,)})
    return shapes


@dataclass
class DecoderParams:
    """Named weight tensors of the fusion, density, color and mask networks"""
    mode: str
    feature_dim: int
    num_scales: int
    hidden_width: int
    tensors: Dict[str, np.ndarray]
    activation: str = constants.ACTIVATION_RELU

    def __post_init__(self):
        if self.activation not in constants.ACTIVATIONS:
            raise ConfigurationError(f"Unknown activation '{self.activation}'")
        expected = self.expected_shapes()
        if set(self.tensors) != set(expected):
            raise ConfigurationError(
                f"Decoder tensors {sorted(self.tensors)} do not match {self.mode} layout {sorted(expected)}")
        for name, shape in expected.items():
            self.tensors[name] = np.asarray(self.tensors[name], dtype=np.float64)
            if self.tensors[name].shape != shape:
                raise ConfigurationError(f"Decoder tensor {name} has shape {self.tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ConfigurationError(f"Decoder tensor {name} contains non-finite values")

    @property
    def feature_width(self) -> int:
        return self.feature_dim * self.num_scales

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return decoder_shapes(self.mode, self.feature_dim, self.num_scales, self.hidden_width)

    @classmethod
    def initialize(cls, mode: str, feature_dim: int, num_scales: int,
                   hidden_width: int = constants.DECODER_HIDDEN_DEFAULT,
                   activation: str = constants.ACTIVATION_RELU,
                   density_bias: float = constants.DENSITY_BIAS_DEFAULT,
                   seed: int = 0) -> "DecoderParams":
        '''Uniform fan-in scaled weights (bound sqrt(6 / fan_in)) and zero biases; density_bias offsets the density output'''
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in decoder_shapes(mode, feature_dim, num_scales, hidden_width).items():
            if len(shape) == 2:
                bound = np.sqrt(6.0 / shape[0])
                tensors[name] = rng.uniform(-bound, bound, size=shape)
            else:
                tensors[name] = np.zeros(shape)
        tensors["density.b1"][:] = density_bias
        return cls(mode, feature_dim, num_scales, hidden_width, tensors, activation)

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.tensors

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.mode, self.feature_dim, self.num_scales, self.hidden_width,
                             {name: value.copy() for name, value in self.tensors.items()}, self.activation)


@dataclass
class DecodeOutput:
    sigma: np.ndarray
    rgb: np.ndarray
    mask: np.ndarray


@dataclass
class DecoderCache:
    fusion_input: Optional[np.ndarray]
    fusion_pre: Optional[np.ndarray]
    fusion_hidden: Optional[np.ndarray]
    fused: np.ndarray
    density_pre: np.ndarray
    density_hidden: np.ndarray
    sigma_pre: np.ndarray
    color_input: np.ndarray
    color_pre: np.ndarray
    color_hidden: np.ndarray
    rgb: np.ndarray
    mask_logits: Optional[np.ndarray]
    mask: np.ndarray


def decode_forward(params: DecoderParams, sample: FieldSample, directions: np.ndarray) -> Tuple[DecodeOutput, DecoderCache]:
    '''Batched decode; directions is (N, 3)'''
    if sample.mode != params.mode:
        raise ModeError(f"Sample mode {sample.mode} does not match decoder mode {params.mode}")
    t = params.tensors
    activation = params.activation

    fusion_input = fusion_pre = fusion_hidden = None
    if params.mode == constants.FIELD_MODE_EXTENDED:
        fusion_input = np.concatenate([sample.f_s, sample.f_d, sample.mask_logits], axis=1)
        fusion_pre = fusion_input @ t["fusion.w0"] + t["fusion.b0"]
        fusion_hidden = _activate(fusion_pre, activation)
        fused = fusion_hidden @ t["fusion.w1"] + t["fusion.b1"]
    else:
        fused = sample.f

    density_pre = fused @ t["density.w0"] + t["density.b0"]
    density_hidden = _activate(density_pre, activation)
    sigma_pre = (density_hidden @ t["density.w1"] + t["density.b1"])[:, 0]

    color_input = np.concatenate([fused, encode_direction(np.atleast_2d(directions))], axis=1)
    color_pre = color_input @ t["color.w0"] + t["color.b0"]
    color_hidden = _activate(color_pre, activation)
    rgb = expit(color_hidden @ t["color.w1"] + t["color.b1"])

    if params.mode == constants.FIELD_MODE_EXTENDED:
        mask_logits = sample.mask_logits
        mask = expit((mask_logits @ t["mask.w"] + t["mask.b"])[:, 0])
    else:
        mask_logits = None
        mask = np.zeros(fused.shape[0])

    output = DecodeOutput(softplus(sigma_pre), rgb, mask)
    cache = DecoderCache(fusion_input, fusion_pre, fusion_hidden, fused, density_pre, density_hidden,
                         sigma_pre, color_input, color_pre, color_hidden, rgb, mask_logits, mask)
    return output, cache


def decode_backward(params: DecoderParams, cache: DecoderCache, grad_sigma: np.ndarray,
                    grad_rgb: np.ndarray, grad_mask: Optional[np.ndarray] = None
                    ) -> Tuple[Dict[str, np.ndarray], FieldGradient]:
    '''Gradients of all decoder tensors and of the field sample given dL/dsigma, dL/drgb and dL/dmask'''
    t = params.tensors
    activation = params.activation
    width = params.feature_width
    grads = {}

    # Density head
    grad_sigma_pre = (grad_sigma * expit(cache.sigma_pre))[:, None]
    grad_hidden, grads["density.w1"], grads["density.b1"] = _linear_backward(cache.density_hidden, t["density.w1"], grad_sigma_pre)
    grad_pre = grad_hidden * _activation_grad(cache.density_pre, activation)
    grad_fused, grads["density.w0"], grads["density.b0"] = _linear_backward(cache.fused, t["density.w0"], grad_pre)

    # Color head
    grad_rgb_pre = grad_rgb * cache.rgb * (1.0 - cache.rgb)
    grad_hidden, grads["color.w1"], grads["color.b1"] = _linear_backward(cache.color_hidden, t["color.w1"], grad_rgb_pre)
    grad_pre = grad_hidden * _activation_grad(cache.color_pre, activation)
    grad_color_input, grads["color.w0"], grads["color.b0"] = _linear_backward(cache.color_input, t["color.w0"], grad_pre)
    grad_fused = grad_fused + grad_color_input[:, :width]

    if params.mode != constants.FIELD_MODE_EXTENDED:
        return grads, FieldGradient(f=grad_fused)

    # Mask head
    if grad_mask is None:
        grad_mask = np.zeros_like(cache.mask)
    grad_mask_pre = (grad_mask * cache.mask * (1.0 - cache.mask))[:, None]
    grad_logits, grads["mask.w"], grads["mask.b"] = _linear_backward(cache.mask_logits, t["mask.w"], grad_mask_pre)

    # Fusion network
    grad_hidden, grads["fusion.w1"], grads["fusion.b1"] = _linear_backward(cache.fusion_hidden, t["fusion.w1"], grad_fused)
    grad_pre = grad_hidden * _activation_grad(cache.fusion_pre, activation)
    grad_input, grads["fusion.w0"], grads["fusion.b0"] = _linear_backward(cache.fusion_input, t["fusion.w0"], grad_pre)

    field_grad = FieldGradient(f_s=grad_input[:, :width],
                               f_d=grad_input[:, width:2 * width],
                               mask_logits=grad_input[:, 2 * width:] + grad_logits)
    return grads, field_grad


def decode(sample: FieldSample, d: np.ndarray, params: DecoderParams, mode: str):
    '''(sigma, rgb, m) for a field sample; scalars and a 3-vector when the sample holds one query'''
    if mode != params.mode:
        raise ModeError(f"Requested mode {mode} does not match decoder mode {params.mode}")
    single = np.ndim(d) == 1
    output, _ = decode_forward(params, sample, np.atleast_2d(d))
    if single:
        return float(output.sigma[0]), output.rgb[0], float(output.mask[0])
    return output.sigma, output.rgb, output.mask
