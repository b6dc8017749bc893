"""
Optimization of a plane stack and its decoders against posed images.

Gradients are computed in reverse mode by hand: photometric and mask losses flow back through
compositing, the decoders and the plane interpolation; the cosine separation and total variation
terms act on the planes directly. Routing masks what reaches the static and dynamic plane sets.
"""
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src import constants
from src.configuration import LossWeights, OptimizerSettings, RenderSettings, RunConfig
from src.errors import ConfigurationError, NonFiniteLossError, RangeError
from src.field_decoder import DecoderParams
from src.logger import close_training_log, create_logger, create_training_log
from src.plane_field import (PlaneStack, cosine_separation_gradient, cosine_separation_loss,
                             field_backward, total_variation)
from src.scene_model import RayBatch, SceneBounds, rays_for_image
from src.volume_renderer import render_backward, render_image, render_rays

logger = create_logger()


@dataclass
class LossBreakdown:
    photometric: float = 0.0
    cosine_sep: float = 0.0
    mask_bce: float = 0.0
    tv_spatial: float = 0.0
    tv_temporal: float = 0.0
    total: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return {constants.LOSS_TERM_PHOTOMETRIC: self.photometric,
                constants.LOSS_TERM_COSINE_SEP: self.cosine_sep,
                constants.LOSS_TERM_MASK_BCE: self.mask_bce,
                constants.LOSS_TERM_TV_SPATIAL: self.tv_spatial,
                constants.LOSS_TERM_TV_TEMPORAL: self.tv_temporal,
                "total": self.total}

    def check_finite(self) -> None:
        for term, value in self.as_dict().items():
            if not math.isfinite(value):
                raise NonFiniteLossError(term, value)


@dataclass
class TrainState:
    """Learnable parameters, Adam moments and the step counter of one field"""
    stack: PlaneStack
    decoder: DecoderParams
    bounds: SceneBounds
    first_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    background: Tuple[float, float, float] = constants.BACKGROUND_DEFAULT

    def __post_init__(self):
        if self.step < 0:
            raise RangeError("Step counter must be non-negative")
        self.background = tuple(float(channel) for channel in self.background)
        parameters = self.parameters()
        for moments in (self.first_moments, self.second_moments):
            if not moments:
                moments.update({name: np.zeros_like(value) for name, value in parameters.items()})
            if set(moments) != set(parameters):
                raise RangeError("Optimizer moments do not cover the parameters")
            for name, value in parameters.items():
                if moments[name].shape != value.shape:
                    raise RangeError(f"Moment shape {moments[name].shape} does not match parameter {name} {value.shape}")

    @classmethod
    def initialize(cls, config: RunConfig, bounds: SceneBounds, training_frames: int) -> "TrainState":
        stack = PlaneStack.initialize(config.mode, config.planes.feature_dim,
                                      config.planes.resolve(training_frames),
                                      config.planes.scale_multipliers, seed=config.seed)
        decoder = DecoderParams.initialize(config.mode, config.planes.feature_dim, stack.num_scales,
                                           hidden_width=config.decoder.hidden_width,
                                           activation=config.decoder.activation,
                                           density_bias=config.decoder.density_bias,
                                           seed=config.seed + 1)
        return cls(stack, decoder, bounds, seed=config.seed, background=tuple(config.render.background))

    @property
    def mode(self) -> str:
        return self.stack.mode

    def parameters(self) -> Dict[str, np.ndarray]:
        '''Plane arrays and decoder tensors by name; the arrays are the live parameters'''
        parameters = dict(self.stack.parameters())
        parameters.update(self.decoder.parameters())
        return parameters

    def copy(self) -> "TrainState":
        return TrainState(self.stack.copy(), self.decoder.copy(), self.bounds,
                          {name: value.copy() for name, value in self.first_moments.items()},
                          {name: value.copy() for name, value in self.second_moments.items()},
                          self.step, self.seed, self.background)


@dataclass
class PixelBatch:
    """Rays with their target colors and bbox-interior flags"""
    rays: RayBatch
    target_rgb: np.ndarray
    dynamic_flag: np.ndarray

    def __post_init__(self):
        self.target_rgb = np.asarray(self.target_rgb, dtype=np.float64).reshape(-1, 3)
        self.dynamic_flag = np.asarray(self.dynamic_flag, dtype=np.float64).ravel()
        if not (len(self.rays) == self.target_rgb.shape[0] == self.dynamic_flag.shape[0]):
            raise RangeError("Rays, targets and flags must have equal lengths")
        if np.any((self.dynamic_flag != 0.0) & (self.dynamic_flag != 1.0)):
            raise RangeError("Dynamic flags must be 0 or 1")

    def __len__(self):
        return len(self.rays)


def _check_batch(state: TrainState, batch: PixelBatch, weights: LossWeights) -> None:
    if len(batch) == 0:
        raise RangeError("Pixel batch is empty")
    weights.check_mode(state.mode)


def _forward(state: TrainState, batch: PixelBatch, samples: int, rng: Optional[np.random.Generator]):
    return render_rays(state.stack, state.decoder, batch.rays, state.bounds, samples,
                       stratified=rng is not None, rng=rng, background=state.background)


def _mask_terms(mask: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    clipped = np.clip(mask, constants.BCE_EPSILON, 1.0 - constants.BCE_EPSILON)
    loss = -np.mean(target * np.log(clipped) + (1.0 - target) * np.log(1.0 - clipped))
    inside = (mask > constants.BCE_EPSILON) & (mask < 1.0 - constants.BCE_EPSILON)
    grad = np.where(inside, (clipped - target) / (clipped * (1.0 - clipped)), 0.0) / mask.shape[0]
    return float(loss), grad


def compute_losses(state: TrainState, batch: PixelBatch, weights: LossWeights,
                   samples: int = constants.SAMPLES_TRAIN_DEFAULT,
                   rng: Optional[np.random.Generator] = None) -> LossBreakdown:
    '''Every loss term and their weighted total; rng switches on stratified sampling'''
    _check_batch(state, batch, weights)
    output, cache = _forward(state, batch, samples, rng)
    return _loss_values(state, batch, weights, output, cache)


def _loss_values(state, batch, weights, output, cache) -> LossBreakdown:
    losses = LossBreakdown()
    losses.photometric = float(np.mean((output.rgb - batch.target_rgb) ** 2))
    if state.mode == constants.FIELD_MODE_EXTENDED:
        losses.mask_bce, _ = _mask_terms(output.mask, batch.dynamic_flag)
        if cache.sample is not None:
            losses.cosine_sep = cosine_separation_loss(cache.sample)
    losses.tv_spatial, losses.tv_temporal = total_variation(state.stack)
    losses.total = (weights.photometric * losses.photometric
                    + weights.cosine_sep * losses.cosine_sep
                    + weights.mask_bce * losses.mask_bce
                    + weights.tv_spatial * losses.tv_spatial
                    + weights.tv_temporal * losses.tv_temporal)
    return losses


def compute_gradients(state: TrainState, batch: PixelBatch, weights: LossWeights, routing: bool = True,
                      samples: int = constants.SAMPLES_TRAIN_DEFAULT,
                      rng: Optional[np.random.Generator] = None) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    '''Loss breakdown and the gradient of the weighted total with respect to every parameter'''
    _check_batch(state, batch, weights)
    output, cache = _forward(state, batch, samples, rng)
    losses = _loss_values(state, batch, weights, output, cache)
    extended = state.mode == constants.FIELD_MODE_EXTENDED

    grad_rgb = weights.photometric * 2.0 * (output.rgb - batch.target_rgb) / output.rgb.size
    grad_mask = None
    if extended:
        grad_mask = weights.mask_bce * _mask_terms(output.mask, batch.dynamic_flag)[1]
    decoder_grads, field_grad = render_backward(state.decoder, cache, grad_rgb, grad_mask)

    if field_grad is None:
        plane_grads = {name: np.zeros_like(value) for name, value in state.stack.parameters().items()}
    else:
        extra = None
        if extended and weights.cosine_sep > 0:
            _, cosine_grads = cosine_separation_gradient(cache.sample)
            extra = {key: weights.cosine_sep * value for key, value in cosine_grads.items()}
        static_weight = dynamic_weight = None
        if extended and routing:
            dynamic_weight = np.repeat(batch.dynamic_flag[cache.valid], cache.samples_per_ray)
            static_weight = 1.0 - dynamic_weight
        plane_grads = field_backward(state.stack, cache.sample, field_grad, static_weight, dynamic_weight, extra)

    if weights.tv_spatial > 0 or weights.tv_temporal > 0:
        _, _, tv_spatial_grads, tv_temporal_grads = total_variation(state.stack, with_grad=True)
        for name, value in tv_spatial_grads.items():
            plane_grads[name] += weights.tv_spatial * value
        for name, value in tv_temporal_grads.items():
            plane_grads[name] += weights.tv_temporal * value

    grads = dict(plane_grads)
    grads.update(decoder_grads)
    return losses, grads


def adam_update(state: TrainState, grads: Dict[str, np.ndarray], learning_rate: float,
                settings: Optional[OptimizerSettings] = None) -> None:
    '''One bias-corrected Adam step applied in place; increments the step counter'''
    settings = settings or OptimizerSettings()
    state.step += 1
    correction1 = 1.0 - settings.beta1 ** state.step
    correction2 = 1.0 - settings.beta2 ** state.step
    for name, parameter in state.parameters().items():
        gradient = grads[name]
        first = state.first_moments[name]
        second = state.second_moments[name]
        first *= settings.beta1
        first += (1.0 - settings.beta1) * gradient
        second *= settings.beta2
        second += (1.0 - settings.beta2) * gradient * gradient
        parameter -= learning_rate * (first / correction1) / (np.sqrt(second / correction2) + settings.epsilon)


def learning_rate_at(step: int, total_steps: int, settings: OptimizerSettings) -> float:
    '''Cosine decay from the base rate to final_lr_ratio times it over the schedule'''
    if total_steps <= 1:
        return settings.learning_rate
    progress = min(step / (total_steps - 1), 1.0)
    ratio = settings.final_lr_ratio + (1.0 - settings.final_lr_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress))
    return settings.learning_rate * ratio


def train_step(state: TrainState, batch: PixelBatch, weights: LossWeights, routing: bool = True,
               learning_rate: float = constants.LEARNING_RATE_DEFAULT,
               samples: int = constants.SAMPLES_TRAIN_DEFAULT,
               rng: Optional[np.random.Generator] = None,
               optimizer: Optional[OptimizerSettings] = None) -> Tuple[TrainState, LossBreakdown]:
    '''Gradient of the weighted loss followed by an Adam update of state in place'''
    losses, grads = compute_gradients(state, batch, weights, routing, samples, rng)
    losses.check_finite()
    adam_update(state, grads, learning_rate, optimizer)
    return state, losses


def finite_difference_check(loss_fn: Callable[[], float], parameters: Dict[str, np.ndarray],
                            analytic: Dict[str, np.ndarray], h: float = constants.GRADIENT_CHECK_STEP,
                            subset_size: Optional[int] = None, seed: int = 0) -> float:
    '''
    Max relative error between analytic gradients and central differences of loss_fn.
    Parameters are perturbed in place and restored; subset_size picks random entries across all parameters.
    '''
    names = list(parameters)
    sizes = np.array([parameters[name].size for name in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    if subset_size is None or subset_size >= total:
        chosen = np.arange(total)
    else:
        chosen = np.sort(np.random.default_rng(seed).choice(total, size=subset_size, replace=False))

    worst = 0.0
    for flat_index in chosen:
        slot = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        name = names[slot]
        local = int(flat_index - offsets[slot])
        values = parameters[name].reshape(-1)
        original = values[local]
        values[local] = original + h
        loss_plus = loss_fn()
        values[local] = original - h
        loss_minus = loss_fn()
        values[local] = original
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        exact = float(analytic[name].reshape(-1)[local])
        denominator = max(abs(exact), abs(numeric), constants.GRADIENT_CHECK_FLOOR)
        worst = max(worst, abs(exact - numeric) / denominator)
    return worst


def gradient_check(state: TrainState, batch: PixelBatch, weights: LossWeights, routing: bool = False,
                   h: float = constants.GRADIENT_CHECK_STEP, subset_size: Optional[int] = 64,
                   samples: int = 8, seed: int = 0) -> float:
    '''Analytic training gradients against central differences on a random parameter subset'''
    _, analytic = compute_gradients(state, batch, weights, routing, samples)
    if routing and state.mode == constants.FIELD_MODE_EXTENDED:
        logger.warning("Routed gradients are compared against differences of the unrouted loss")
    return finite_difference_check(lambda: compute_losses(state, batch, weights, samples).total,
                                   state.parameters(), analytic, h, subset_size, seed)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    '''10 log10(1 / MSE) for images in [0, 1], capped for identical images'''
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RangeError(f"Image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return constants.PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), constants.PSNR_CAP)


class PixelPool:
    """All training pixels of a dataset as flat ray/target/flag arrays"""

    def __init__(self, frames: Sequence, bounds: SceneBounds):
        ray_batches = []
        targets = []
        flags = []
        for frame in frames:
            image = frame.load_image()
            ray_batches.append(rays_for_image(frame.pose, bounds))
            targets.append(image.reshape(-1, 3))
            flags.append(frame.dynamic_flags().reshape(-1))
        self.rays = RayBatch.concatenate(ray_batches)
        self.targets = np.concatenate(targets)
        self.flags = np.concatenate(flags)

    def __len__(self):
        return len(self.rays)

    def sample(self, batch_size: int, rng: np.random.Generator) -> PixelBatch:
        index = rng.integers(0, len(self), size=batch_size)
        return PixelBatch(self.rays.subset(index), self.targets[index], self.flags[index])


def evaluate(state: TrainState, frames: Sequence, settings: RenderSettings,
             max_frames: int = 0) -> Dict[str, float]:
    '''Held-out PSNR per frame (keyed by image name) plus their mean under "mean"'''
    if max_frames:
        frames = list(frames)[:max_frames]
    table = {}
    for frame in frames:
        buffers = render_image(state.stack, state.decoder, frame.pose, frame.pose.timestamp, settings, state.bounds)
        table[frame.name] = psnr(np.clip(buffers.rgb, 0.0, 1.0), frame.load_image())
    table["mean"] = float(np.mean(list(table.values()))) if table else 0.0
    return table


def train(state: TrainState, dataset, config: RunConfig, log_path: Optional[str] = None,
          checkpoint_callback: Optional[Callable[[TrainState], None]] = None) -> Tuple[TrainState, List[Tuple[int, float]]]:
    '''
    Run config.schedule.iterations training steps over the training half of dataset.
    Returns the state and the (step, mean held-out PSNR) curve.
    '''
    schedule = config.schedule
    weights = config.loss_weights
    weights.check_mode(state.mode)
    if dataset.frame_count < 2:
        raise ConfigurationError("Training needs a dataset with at least two frames")
    if state.mode == constants.FIELD_MODE_EXTENDED and weights.mask_bce > 0 and not dataset.has_boxes:
        raise ConfigurationError("Mask supervision needs ground-truth boxes, but the scene has none")

    curve: List[Tuple[int, float]] = []
    if schedule.iterations == 0:
        return state, curve

    train_frames, heldout_frames = dataset.split()
    pool = PixelPool(train_frames, state.bounds)
    training_log = create_training_log(log_path) if log_path else None
    logger.info("Training %s field for %d iterations on %d pixels", state.mode, schedule.iterations, len(pool))

    try:
        first_step = state.step
        for iteration in range(schedule.iterations):
            rng = np.random.default_rng([state.seed, state.step])
            batch = pool.sample(schedule.batch_size, rng)
            learning_rate = learning_rate_at(iteration, schedule.iterations, config.optimizer)
            _, losses = train_step(state, batch, weights, config.routing, learning_rate,
                                   config.render.samples_train,
                                   rng if config.render.stratified else None, config.optimizer)
            record = {"step": state.step, **losses.as_dict(), "learning_rate": learning_rate}

            done = iteration + 1
            if heldout_frames and schedule.eval_interval and (done % schedule.eval_interval == 0
                                                              or done == schedule.iterations):
                table = evaluate(state, heldout_frames, config.render, schedule.eval_max_frames)
                record["psnr"] = table["mean"]
                curve.append((state.step, table["mean"]))
                logger.info("Step %d: loss %.6f, held-out PSNR %.2f dB", state.step, losses.total, table["mean"])

            if training_log is not None:
                training_log.info(json.dumps(record))
            if checkpoint_callback and schedule.checkpoint_interval and done % schedule.checkpoint_interval == 0:
                checkpoint_callback(state)
        logger.info("Finished %d steps (from step %d)", state.step - first_step, first_step)
    finally:
        if training_log is not None:
            close_training_log()

    return state, curve
