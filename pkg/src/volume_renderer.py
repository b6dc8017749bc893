"""
Quadrature volume rendering: samples along rays, transmittance compositing, and image rendering.

Compositing uses alpha_i = 1 - exp(-sigma_i * delta_i) and T_i = exp(-sum_{j<i} sigma_j * delta_j).
The mask channel is composited like color over a zero background.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src import constants
from src.configuration import RenderSettings
from src.errors import RangeError
from src.field_decoder import DecoderCache, DecoderParams, decode_backward, decode_forward
from src.logger import create_logger
from src.plane_field import FieldGradient, FieldSample, PlaneStack, normalize_points, sample_field
from src.scene_model import CameraPose, Ray, RayBatch, SceneBounds, rays_for_image

logger = create_logger()


@dataclass
class RaySamples:
    """Quadrature nodes along one ray"""
    positions: np.ndarray
    deltas: np.ndarray
    ts: np.ndarray

    def __len__(self):
        return self.ts.shape[0]


@dataclass
class RenderOutput:
    """Per-ray color, expected depth, accumulated opacity and composited mask"""
    rgb: np.ndarray
    depth: np.ndarray
    acc: np.ndarray
    mask: np.ndarray


@dataclass
class ImageBuffers:
    rgb: np.ndarray
    depth: np.ndarray
    acc: np.ndarray
    mask: np.ndarray


def sample_distances(near: np.ndarray, far: np.ndarray, n: int, stratified: bool = False,
                     rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Split [near, far] of each ray into n equal bins and take the centre (or a uniform jitter) of each.
    Returns (ts, deltas) of shape (R, n) with delta_i = t_{i+1} - t_i and delta_n = far - t_n.
    '''
    if n < 1:
        raise RangeError(f"Sample count must be at least 1, got {n}")
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    width = (far - near) / n
    starts = near[:, None] + width[:, None] * np.arange(n)[None, :]
    if stratified:
        if rng is None:
            rng = np.random.default_rng()
        offsets = rng.uniform(0.0, 1.0, size=starts.shape)
    else:
        offsets = 0.5
    ts = starts + offsets * width[:, None]
    deltas = np.empty_like(ts)
    deltas[:, :-1] = np.diff(ts, axis=1)
    deltas[:, -1] = far - ts[:, -1]
    return ts, deltas


def sample_along_ray(ray: Optional[Ray], n: int, stratified: bool = False, rng_seed=None) -> RaySamples:
    '''Samples for a single ray; the empty-ray marker (None) yields no samples'''
    if n < 1:
        raise RangeError(f"Sample count must be at least 1, got {n}")
    if ray is None:
        return RaySamples(np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    rng = np.random.default_rng(rng_seed) if stratified else None
    ts, deltas = sample_distances(np.array([ray.near]), np.array([ray.far]), n, stratified, rng)
    positions = ray.origin[None, :] + ts[0][:, None] * ray.direction[None, :]
    return RaySamples(positions, deltas[0], ts[0])


@dataclass
class CompositeState:
    """Forward quantities the compositing backward pass reuses"""
    weights: np.ndarray
    transmittance_after: np.ndarray
    final_transmittance: np.ndarray
    deltas: np.ndarray
    colors: np.ndarray
    masks: np.ndarray
    background: np.ndarray


def composite_rays(sigmas: np.ndarray, colors: np.ndarray, masks: np.ndarray, deltas: np.ndarray,
                   ts: np.ndarray, background: Sequence[float]) -> Tuple[RenderOutput, CompositeState]:
    '''Batched compositing; sigmas, masks, deltas, ts are (R, n) and colors (R, n, 3)'''
    background = np.asarray(background, dtype=np.float64)
    optical = sigmas * deltas
    optical_after = np.cumsum(optical, axis=1)
    transmittance = np.exp(-(optical_after - optical))
    alpha = -np.expm1(-optical)
    weights = transmittance * alpha
    final_transmittance = np.exp(-optical_after[:, -1]) if optical.shape[1] else np.ones(optical.shape[0])

    acc = weights.sum(axis=1)
    rgb = np.einsum("rn,rnc->rc", weights, colors) + final_transmittance[:, None] * background[None, :]
    depth = (weights * ts).sum(axis=1) / np.maximum(acc, constants.DEPTH_EPSILON)
    mask = (weights * masks).sum(axis=1)

    state = CompositeState(weights, np.exp(-optical_after), final_transmittance, deltas, colors, masks, background)
    return RenderOutput(rgb, depth, acc, mask), state


def composite(sigmas: np.ndarray, rgbs: np.ndarray, masks: np.ndarray, deltas: np.ndarray,
              background: Sequence[float] = constants.BACKGROUND_DEFAULT,
              ts: Optional[np.ndarray] = None) -> RenderOutput:
    '''Composite the samples of one ray; ts defaults to the cumulative segment starts'''
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(sigmas < 0):
        raise RangeError("Densities must be non-negative")
    deltas = np.asarray(deltas, dtype=np.float64)
    if ts is None:
        ts = np.concatenate([[0.0], np.cumsum(deltas)[:-1]])
    output, _ = composite_rays(sigmas[None, :], np.asarray(rgbs, dtype=np.float64)[None, :, :],
                              np.asarray(masks, dtype=np.float64)[None, :], deltas[None, :],
                              np.asarray(ts, dtype=np.float64)[None, :], background)
    return RenderOutput(output.rgb[0], float(output.depth[0]), float(output.acc[0]), float(output.mask[0]))


def composite_backward(state: CompositeState, grad_rgb: np.ndarray,
                       grad_mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    '''
    dL/dsigma, dL/dcolor and dL/dmask per sample from dL/d(ray rgb) and dL/d(ray mask).

    With e_i = g.c_i + g_m * m_i:
    dL/dsigma_k = delta_k * (T_{k+1} e_k - sum_{i>k} w_i e_i - T_{n+1} g.background).
    Depth carries no gradient.
    '''
    if grad_mask is None:
        grad_mask = np.zeros(grad_rgb.shape[0])
    emitted = np.einsum("rc,rnc->rn", grad_rgb, state.colors) + grad_mask[:, None] * state.masks
    weighted = state.weights * emitted
    behind = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1] - weighted
    background_term = (grad_rgb @ state.background) * state.final_transmittance
    grad_sigma = state.deltas * (state.transmittance_after * emitted - behind - background_term[:, None])
    grad_colors = state.weights[:, :, None] * grad_rgb[:, None, :]
    grad_masks = state.weights * grad_mask[:, None]
    return grad_sigma, grad_colors, grad_masks


@dataclass
class RenderCache:
    """Everything render_backward needs to differentiate one render_rays call"""
    valid: np.ndarray
    samples_per_ray: int
    sample: Optional[FieldSample]
    decoder_cache: Optional[DecoderCache]
    composite: Optional[CompositeState]


def render_rays(stack: PlaneStack, decoder: DecoderParams, rays: RayBatch, bounds: SceneBounds,
                n_samples: int, stratified: bool = False, rng: Optional[np.random.Generator] = None,
                background: Sequence[float] = constants.BACKGROUND_DEFAULT) -> Tuple[RenderOutput, RenderCache]:
    '''Render a batch of rays; rays that miss the bounds render as the background with zero opacity'''
    count = len(rays)
    background = np.asarray(background, dtype=np.float64)
    rgb = np.broadcast_to(background, (count, 3)).copy()
    depth = np.zeros(count)
    acc = np.zeros(count)
    mask = np.zeros(count)
    valid = np.asarray(rays.valid, dtype=bool)
    if not np.any(valid):
        return RenderOutput(rgb, depth, acc, mask), RenderCache(valid, n_samples, None, None, None)

    active = rays.subset(valid)
    ts, deltas = sample_distances(active.near, active.far, n_samples, stratified, rng)
    # The first sample also stands for the gap between near and its own position
    deltas[:, 0] += ts[:, 0] - active.near

    positions = active.origins[:, None, :] + ts[:, :, None] * active.directions[:, None, :]
    times = np.repeat(active.times, n_samples)
    queries = normalize_points(positions.reshape(-1, 3), times, bounds)
    sample = sample_field(stack, queries)
    decoded, decoder_cache = decode_forward(decoder, sample, np.repeat(active.directions, n_samples, axis=0))

    shape = ts.shape
    output, state = composite_rays(decoded.sigma.reshape(shape), decoded.rgb.reshape(shape + (3,)),
                                   decoded.mask.reshape(shape), deltas, ts, background)
    rgb[valid] = output.rgb
    depth[valid] = output.depth
    acc[valid] = output.acc
    mask[valid] = output.mask
    return RenderOutput(rgb, depth, acc, mask), RenderCache(valid, n_samples, sample, decoder_cache, state)


def render_backward(decoder: DecoderParams, cache: RenderCache, grad_rgb: np.ndarray,
                    grad_mask: Optional[np.ndarray] = None) -> Tuple[Dict[str, np.ndarray], Optional[FieldGradient]]:
    '''Decoder gradients and per-sample field gradients for upstream gradients on the rendered rays'''
    if cache.sample is None:
        return {name: np.zeros_like(value) for name, value in decoder.tensors.items()}, None
    grad_rgb = grad_rgb[cache.valid]
    grad_mask = None if grad_mask is None else grad_mask[cache.valid]
    grad_sigma, grad_colors, grad_masks = composite_backward(cache.composite, grad_rgb, grad_mask)
    return decode_backward(decoder, cache.decoder_cache, grad_sigma.ravel(),
                           grad_colors.reshape(-1, 3), grad_masks.ravel())


def _render_chunk(stack: PlaneStack, decoder: DecoderParams, rays: RayBatch, bounds: SceneBounds,
                  settings: RenderSettings, stratified: bool, chunk_index: int) -> RenderOutput:
    rng = np.random.default_rng([settings.seed, chunk_index]) if stratified else None
    output, _ = render_rays(stack, decoder, rays, bounds, settings.samples_eval, stratified, rng, settings.background)
    return output


def render_image(stack: PlaneStack, decoder: DecoderParams, pose: CameraPose, tau: float,
                 settings: RenderSettings, bounds: SceneBounds, stratified: bool = False) -> ImageBuffers:
    '''
    Render every pixel of pose at time tau.
    Rays are cut into fixed-size chunks whose boundaries and seeds never depend on the thread count,
    so the buffers are identical for any settings.threads.
    '''
    intrinsics = pose.intrinsics
    if intrinsics.width < 1 or intrinsics.height < 1:
        raise RangeError("Cannot render an image with zero size")
    if not 0.0 <= tau <= 1.0:
        raise RangeError(f"Timestamp {tau} outside [0, 1]")

    rays = rays_for_image(pose, bounds, tau)
    chunk = settings.chunk_size
    chunks = [rays.subset(slice(start, start + chunk)) for start in range(0, len(rays), chunk)]

    if settings.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=settings.threads) as executor:
            outputs: List[RenderOutput] = list(executor.map(
                lambda item: _render_chunk(stack, decoder, item[1], bounds, settings, stratified, item[0]),
                enumerate(chunks)))
    else:
        outputs = [_render_chunk(stack, decoder, rays_chunk, bounds, settings, stratified, index)
                   for index, rays_chunk in enumerate(chunks)]

    height, width = intrinsics.height, intrinsics.width
    return ImageBuffers(
        rgb=np.concatenate([output.rgb for output in outputs]).reshape(height, width, 3),
        depth=np.concatenate([output.depth for output in outputs]).reshape(height, width),
        acc=np.concatenate([output.acc for output in outputs]).reshape(height, width),
        mask=np.concatenate([output.mask for output in outputs]).reshape(height, width),
    )
