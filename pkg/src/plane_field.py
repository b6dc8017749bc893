"""
Multi-resolution 2D feature planes over (x, y, z, t).

A 4D query q in [0,1]^4 is projected onto every plane, bilinearly interpolated, and the per-plane
vectors are fused by elementwise product within a scale and concatenated across scales. The extended
mode keeps two plane sets: three static spatial planes and six dynamic planes whose temporal members
carry one extra mask channel.

All sampling functions work on batches: queries are (N, 4) arrays and every array in a FieldSample
carries a leading batch axis (a single 4-vector query is promoted to a batch of one).
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src import constants
from src.errors import BoundsError, ModeError, RangeError
from src.scene_model import SceneBounds

PlaneKey = Tuple[str, str]


@dataclass
class PlaneGrid:
    """One feature plane; values has shape (R_u, R_v, feature_dim)"""
    axis_pair: str
    values: np.ndarray
    group: str = constants.PLANE_GROUP_FIELD

    def __post_init__(self):
        if self.axis_pair not in constants.ALL_AXIS_PAIRS:
            raise ModeError(f"Unknown axis pair '{self.axis_pair}'")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] < 2 or self.values.shape[1] < 2:
            raise RangeError(f"Plane {self.axis_pair} needs at least 2x2 cells, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise RangeError(f"Plane {self.axis_pair} contains non-finite values")

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[2]

    @property
    def axes(self) -> Tuple[int, int]:
        return constants.AXIS_INDEX[self.axis_pair[0]], constants.AXIS_INDEX[self.axis_pair[1]]

    @property
    def is_temporal(self) -> bool:
        return self.axis_pair in constants.TEMPORAL_AXIS_PAIRS


def plane_layout(mode: str) -> List[PlaneKey]:
    '''Ordered (group, axis_pair) keys of the planes each scale holds in the given mode'''
    if mode == constants.FIELD_MODE_STOCK:
        return [(constants.PLANE_GROUP_FIELD, pair) for pair in constants.ALL_AXIS_PAIRS]
    if mode == constants.FIELD_MODE_SPATIAL_ONLY:
        return [(constants.PLANE_GROUP_FIELD, pair) for pair in constants.SPATIAL_AXIS_PAIRS]
    if mode == constants.FIELD_MODE_EXTENDED:
        return ([(constants.PLANE_GROUP_STATIC, pair) for pair in constants.SPATIAL_AXIS_PAIRS]
                + [(constants.PLANE_GROUP_DYNAMIC, pair) for pair in constants.ALL_AXIS_PAIRS])
    raise ModeError(f"Unknown field mode '{mode}'")


@dataclass
class PlaneStack:
    """All learnable plane features, one dictionary of planes per scale"""
    mode: str
    feature_dim: int
    base_resolution: Tuple[int, int, int, int]
    scale_multipliers: Tuple[int, ...]
    scales: List[Dict[PlaneKey, PlaneGrid]]

    def __post_init__(self):
        self.base_resolution = tuple(int(r) for r in self.base_resolution)
        self.scale_multipliers = tuple(int(m) for m in self.scale_multipliers)
        layout = plane_layout(self.mode)
        if self.feature_dim < 1:
            raise RangeError("Feature dimension must be at least 1")
        if len(self.scales) != len(self.scale_multipliers):
            raise RangeError("One plane set is required per scale multiplier")
        for k, planes in enumerate(self.scales):
            if list(planes.keys()) != layout:
                raise ModeError(f"Scale {k} planes {list(planes.keys())} do not match {self.mode} layout")
            resolution = self.scale_resolution(k)
            for (group, pair), plane in planes.items():
                u, v = plane.axes
                if plane.resolution != (resolution[u], resolution[v]):
                    raise RangeError(f"Plane {group}.{pair} at scale {k} has resolution {plane.resolution}")
                if plane.feature_dim != self.channels(group, pair):
                    raise RangeError(f"Plane {group}.{pair} has {plane.feature_dim} channels")

    @classmethod
    def initialize(cls, mode: str, feature_dim: int, base_resolution: Sequence[int],
                   scale_multipliers: Sequence[int], seed: int = 0) -> "PlaneStack":
        '''Product planes start uniform in [0.9, 1.1] so that initial products are close to 1; mask channels start at 0'''
        rng = np.random.default_rng(seed)
        base_resolution = tuple(int(r) for r in base_resolution)
        scales = []
        for multiplier in scale_multipliers:
            resolution = cls._resolution(base_resolution, multiplier)
            planes = {}
            for group, pair in plane_layout(mode):
                u, v = constants.AXIS_INDEX[pair[0]], constants.AXIS_INDEX[pair[1]]
                channels = feature_dim + (1 if (mode == constants.FIELD_MODE_EXTENDED
                                                and pair in constants.TEMPORAL_AXIS_PAIRS) else 0)
                values = rng.uniform(constants.PLANE_INIT_LOW, constants.PLANE_INIT_HIGH,
                                     size=(resolution[u], resolution[v], channels))
                if channels > feature_dim:
                    values[..., feature_dim] = constants.MASK_CHANNEL_INIT
                planes[(group, pair)] = PlaneGrid(pair, values, group)
            scales.append(planes)
        return cls(mode, feature_dim, base_resolution, tuple(scale_multipliers), scales)

    @staticmethod
    def _resolution(base_resolution: Tuple[int, ...], multiplier: int) -> Tuple[int, int, int, int]:
        # Time is never multiplied across scales
        rx, ry, rz, rt = base_resolution
        return rx * multiplier, ry * multiplier, rz * multiplier, rt

    def scale_resolution(self, scale: int) -> Tuple[int, int, int, int]:
        return self._resolution(self.base_resolution, self.scale_multipliers[scale])

    def channels(self, group: str, pair: str) -> int:
        if self.mode == constants.FIELD_MODE_EXTENDED and pair in constants.TEMPORAL_AXIS_PAIRS:
            return self.feature_dim + 1
        return self.feature_dim

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @property
    def output_dim(self) -> int:
        return self.feature_dim * self.num_scales

    @staticmethod
    def parameter_name(scale: int, group: str, pair: str) -> str:
        return f"planes.{scale}.{group}.{pair}"

    def parameters(self) -> Dict[str, np.ndarray]:
        '''Named views of every plane array (updated in place by the optimizer)'''
        return {self.parameter_name(k, group, pair): plane.values
                for k, planes in enumerate(self.scales)
                for (group, pair), plane in planes.items()}

    def parameter_group(self, name: str) -> str:
        return name.split(".")[2]

    def copy(self) -> "PlaneStack":
        scales = [{key: PlaneGrid(plane.axis_pair, plane.values.copy(), plane.group)
                   for key, plane in planes.items()} for planes in self.scales]
        return PlaneStack(self.mode, self.feature_dim, self.base_resolution, self.scale_multipliers, scales)


@dataclass
class BilinearWeights:
    """Flat corner indices and weights of N queries on an (R_u, R_v) grid"""
    index: np.ndarray
    weights: np.ndarray


def bilinear_weights(u: np.ndarray, v: np.ndarray, ru: int, rv: int) -> BilinearWeights:
    '''Grid nodes sit at i/(R-1); coordinates are clamped to the edge cells'''
    x = np.clip(u, 0.0, 1.0) * (ru - 1)
    y = np.clip(v, 0.0, 1.0) * (rv - 1)
    i0 = np.clip(np.floor(x).astype(np.int64), 0, ru - 2)
    j0 = np.clip(np.floor(y).astype(np.int64), 0, rv - 2)
    fx = x - i0
    fy = y - j0
    base = i0 * rv + j0
    index = np.stack([base, base + 1, base + rv, base + rv + 1], axis=-1)
    weights = np.stack([(1.0 - fx) * (1.0 - fy), (1.0 - fx) * fy, fx * (1.0 - fy), fx * fy], axis=-1)
    return BilinearWeights(index, weights)


def gather(values: np.ndarray, bilinear: BilinearWeights) -> np.ndarray:
    corners = values.reshape(-1, values.shape[-1])[bilinear.index]
    return (bilinear.weights[..., None] * corners).sum(axis=1)


def scatter(gradient: np.ndarray, bilinear: BilinearWeights, upstream: np.ndarray) -> None:
    '''Accumulate dL/d(interpolated vector) into dL/d(plane values); sequential and order-deterministic'''
    flat = gradient.reshape(-1, gradient.shape[-1])
    np.add.at(flat, bilinear.index, bilinear.weights[..., None] * upstream[:, None, :])


def _as_query(q: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if q.shape[-1] != 4:
        raise RangeError(f"Queries must be 4-vectors, got shape {q.shape}")
    if np.any(q < 0.0) or np.any(q > 1.0):
        raise RangeError("Queries must lie in [0, 1]^4")
    return q


def normalize_point(p: np.ndarray, tau: float, bounds: SceneBounds) -> np.ndarray:
    '''World point and timestamp to q = (i, j, k, tau) in [0, 1]^4'''
    p = np.asarray(p, dtype=np.float64)
    if not bounds.contains(p):
        raise BoundsError(f"Point {p} lies outside the scene bounds")
    if not 0.0 <= tau <= 1.0:
        raise RangeError(f"Timestamp {tau} outside [0, 1]")
    spatial = (p - bounds.minimum) / bounds.extent
    return np.append(spatial, tau)


def normalize_points(positions: np.ndarray, times: np.ndarray, bounds: SceneBounds) -> np.ndarray:
    '''Batched normalize_point; samples sitting on the box faces are clamped instead of rejected'''
    spatial = np.clip((positions - bounds.minimum) / bounds.extent, 0.0, 1.0)
    return np.concatenate([spatial, np.clip(times, 0.0, 1.0)[:, None]], axis=1)


def interp_plane(plane: PlaneGrid, q: np.ndarray) -> np.ndarray:
    '''Bilinear interpolation of one plane at q (a 4-vector or an (N, 4) batch)'''
    single = np.ndim(q) == 1
    query = _as_query(q)
    u, v = plane.axes
    ru, rv = plane.resolution
    result = gather(plane.values, bilinear_weights(query[:, u], query[:, v], ru, rv))
    return result[0] if single else result


@dataclass
class FieldSample:
    """Fused features at a batch of queries plus the per-plane vectors needed for losses and gradients"""
    mode: str
    f: Optional[np.ndarray] = None
    f_s: Optional[np.ndarray] = None
    f_d: Optional[np.ndarray] = None
    mask_logits: Optional[np.ndarray] = None
    per_plane: Dict[Tuple[int, str, str], np.ndarray] = field(default_factory=dict)
    interpolation: Dict[Tuple[int, str], BilinearWeights] = field(default_factory=dict, repr=False)

    def __len__(self):
        for array in (self.f, self.f_s, self.mask_logits):
            if array is not None:
                return array.shape[0]
        return next(iter(self.per_plane.values())).shape[0]


@dataclass
class FieldGradient:
    """Upstream gradients with respect to the outputs of a FieldSample"""
    f: Optional[np.ndarray] = None
    f_s: Optional[np.ndarray] = None
    f_d: Optional[np.ndarray] = None
    mask_logits: Optional[np.ndarray] = None


def _interpolate(sample: FieldSample, scale: int, plane: PlaneGrid, query: np.ndarray) -> np.ndarray:
    key = (scale, plane.axis_pair)
    if key not in sample.interpolation:
        u, v = plane.axes
        ru, rv = plane.resolution
        sample.interpolation[key] = bilinear_weights(query[:, u], query[:, v], ru, rv)
    return gather(plane.values, sample.interpolation[key])


def _group_product(sample: FieldSample, stack: PlaneStack, scale: int, group: str, query: np.ndarray,
                   mask_sums: Optional[np.ndarray] = None) -> np.ndarray:
    dim = stack.feature_dim
    product = None
    for (plane_group, pair), plane in stack.scales[scale].items():
        if plane_group != group:
            continue
        vector = _interpolate(sample, scale, plane, query)
        features = vector[:, :dim]
        sample.per_plane[(scale, group, pair)] = features
        if mask_sums is not None and plane.feature_dim > dim:
            mask_sums[:, constants.TEMPORAL_AXIS_PAIRS.index(pair)] += vector[:, dim]
        product = features.copy() if product is None else product * features
    return product


def sample_stock(stack: PlaneStack, q: np.ndarray) -> FieldSample:
    '''Hadamard product over all planes of a scale, concatenated across scales'''
    if stack.mode not in (constants.FIELD_MODE_STOCK, constants.FIELD_MODE_SPATIAL_ONLY):
        raise ModeError(f"sample_stock needs a stock or spatial_only stack, got {stack.mode}")
    query = _as_query(q)
    sample = FieldSample(mode=stack.mode)
    products = [_group_product(sample, stack, k, constants.PLANE_GROUP_FIELD, query)
                for k in range(stack.num_scales)]
    sample.f = np.concatenate(products, axis=1)
    return sample


def sample_extended(stack: PlaneStack, q: np.ndarray) -> FieldSample:
    '''Separate static and dynamic products plus the scale-averaged mask channels of the temporal planes'''
    if stack.mode != constants.FIELD_MODE_EXTENDED:
        raise ModeError(f"sample_extended needs an extended stack, got {stack.mode}")
    query = _as_query(q)
    sample = FieldSample(mode=stack.mode)
    mask_sums = np.zeros((query.shape[0], len(constants.TEMPORAL_AXIS_PAIRS)))
    static_products = []
    dynamic_products = []
    for k in range(stack.num_scales):
        static_products.append(_group_product(sample, stack, k, constants.PLANE_GROUP_STATIC, query))
        dynamic_products.append(_group_product(sample, stack, k, constants.PLANE_GROUP_DYNAMIC, query, mask_sums))
    sample.f_s = np.concatenate(static_products, axis=1)
    sample.f_d = np.concatenate(dynamic_products, axis=1)
    sample.mask_logits = mask_sums / stack.num_scales
    return sample


def sample_field(stack: PlaneStack, q: np.ndarray) -> FieldSample:
    if stack.mode == constants.FIELD_MODE_EXTENDED:
        return sample_extended(stack, q)
    return sample_stock(stack, q)


def _product_of_others(vectors: List[np.ndarray], skip: int) -> np.ndarray:
    result = np.ones_like(vectors[0])
    for index, vector in enumerate(vectors):
        if index != skip:
            result = result * vector
    return result


def field_backward(stack: PlaneStack, sample: FieldSample, upstream: FieldGradient,
                   static_weight: Optional[np.ndarray] = None,
                   dynamic_weight: Optional[np.ndarray] = None,
                   extra: Optional[Dict[Tuple[int, str, str], np.ndarray]] = None) -> Dict[str, np.ndarray]:
    '''
    Reverse-mode pass from fused-feature gradients to plane-value gradients.

    static_weight / dynamic_weight are per-query multipliers applied to everything flowing into the
    static / dynamic plane sets (gradient routing). extra holds gradients on individual per-plane
    vectors that bypass the routing weights (the cosine separation term).
    '''
    dim = stack.feature_dim
    grads = {name: np.zeros_like(values) for name, values in stack.parameters().items()}
    group_upstream = {
        constants.PLANE_GROUP_FIELD: upstream.f,
        constants.PLANE_GROUP_STATIC: upstream.f_s,
        constants.PLANE_GROUP_DYNAMIC: upstream.f_d,
    }
    group_weight = {
        constants.PLANE_GROUP_STATIC: static_weight,
        constants.PLANE_GROUP_DYNAMIC: dynamic_weight,
    }
    extra = extra or {}

    for k, planes in enumerate(stack.scales):
        columns = slice(k * dim, (k + 1) * dim)
        for group in dict.fromkeys(group for group, _ in planes):
            keys = [key for key in planes if key[0] == group]
            vectors = [sample.per_plane[(k, group, pair)] for _, pair in keys]
            product_grad = group_upstream[group]
            weight = group_weight.get(group)
            for index, (_, pair) in enumerate(keys):
                plane = planes[(group, pair)]
                full = np.zeros((vectors[0].shape[0], plane.feature_dim))
                if product_grad is not None:
                    full[:, :dim] = product_grad[:, columns] * _product_of_others(vectors, index)
                if plane.feature_dim > dim and upstream.mask_logits is not None:
                    full[:, dim] = upstream.mask_logits[:, constants.TEMPORAL_AXIS_PAIRS.index(pair)] / stack.num_scales
                if weight is not None:
                    full = full * weight[:, None]
                if (k, group, pair) in extra:
                    full[:, :dim] += extra[(k, group, pair)]
                if not np.any(full):
                    continue
                scatter(grads[stack.parameter_name(k, group, pair)], sample.interpolation[(k, pair)], full)
    return grads


def _cosine_terms(samples: FieldSample, valid: Optional[np.ndarray], with_grad: bool):
    count = len(samples)
    if valid is None:
        weights = np.full(count, 1.0 / max(count, 1))
    else:
        weights = valid.astype(np.float64) / max(int(np.count_nonzero(valid)), 1)

    loss = 0.0
    grads = {}
    scales = sorted({key[0] for key in samples.per_plane})
    for k in scales:
        for pair in constants.SPATIAL_AXIS_PAIRS:
            a = samples.per_plane[(k, constants.PLANE_GROUP_STATIC, pair)]
            b = samples.per_plane[(k, constants.PLANE_GROUP_DYNAMIC, pair)]
            dot = np.sum(a * b, axis=1)
            norm_a = np.linalg.norm(a, axis=1)
            norm_b = np.linalg.norm(b, axis=1)
            denominator = norm_a * norm_b + constants.COSINE_EPSILON
            cosine = dot / denominator
            loss += float(np.sum(weights * np.abs(cosine)))
            if not with_grad:
                continue
            scale = weights * np.sign(cosine)
            safe_a = np.where(norm_a > 0, norm_a, 1.0)
            safe_b = np.where(norm_b > 0, norm_b, 1.0)
            shared = dot / denominator ** 2
            grad_a = b / denominator[:, None] - (shared * norm_b / safe_a)[:, None] * a
            grad_b = a / denominator[:, None] - (shared * norm_a / safe_b)[:, None] * b
            grads[(k, constants.PLANE_GROUP_STATIC, pair)] = scale[:, None] * grad_a
            grads[(k, constants.PLANE_GROUP_DYNAMIC, pair)] = scale[:, None] * grad_b
    return loss, grads


def cosine_separation_loss(samples: Union[FieldSample, Sequence[FieldSample]],
                           valid: Optional[np.ndarray] = None) -> float:
    '''|cosine similarity| between static and dynamic spatial-plane vectors, summed over pairs and scales, averaged over the batch'''
    if isinstance(samples, FieldSample):
        if samples.mode != constants.FIELD_MODE_EXTENDED:
            raise ModeError("cosine_separation_loss needs extended-mode samples")
        return _cosine_terms(samples, valid, with_grad=False)[0]
    total = 0.0
    count = 0
    for sample in samples:
        total += cosine_separation_loss(sample) * len(sample)
        count += len(sample)
    return total / max(count, 1)


def cosine_separation_gradient(sample: FieldSample, valid: Optional[np.ndarray] = None
                               ) -> Tuple[float, Dict[Tuple[int, str, str], np.ndarray]]:
    '''Loss value and its gradient with respect to each per-plane vector'''
    if sample.mode != constants.FIELD_MODE_EXTENDED:
        raise ModeError("cosine_separation_gradient needs extended-mode samples")
    return _cosine_terms(sample, valid, with_grad=True)


def total_variation(stack: PlaneStack, with_grad: bool = False):
    '''
    Mean squared difference of adjacent cells: spatial planes along both axes, temporal planes along time only.
    Returns (tv_spatial, tv_temporal) and, when requested, per-term gradient dictionaries.
    '''
    tv_spatial = 0.0
    tv_temporal = 0.0
    grads_spatial = {}
    grads_temporal = {}
    for k, planes in enumerate(stack.scales):
        for (group, pair), plane in planes.items():
            name = stack.parameter_name(k, group, pair)
            values = plane.values
            axes = (1,) if plane.is_temporal else (0, 1)
            gradient = np.zeros_like(values) if with_grad else None
            term = 0.0
            for axis in axes:
                difference = np.diff(values, axis=axis)
                term += float(np.mean(difference ** 2))
                if with_grad:
                    local = 2.0 * difference / difference.size
                    if axis == 0:
                        gradient[1:] += local
                        gradient[:-1] -= local
                    else:
                        gradient[:, 1:] += local
                        gradient[:, :-1] -= local
            if plane.is_temporal:
                tv_temporal += term
                if with_grad:
                    grads_temporal[name] = gradient
            else:
                tv_spatial += term
                if with_grad:
                    grads_spatial[name] = gradient
    if with_grad:
        return tv_spatial, tv_temporal, grads_spatial, grads_temporal
    return tv_spatial, tv_temporal
