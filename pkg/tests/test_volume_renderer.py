import pytest
import numpy as np
from src import constants
from src.configuration import RenderSettings
from src.errors import RangeError
from src.field_decoder import DecoderParams, decode_forward
from src.plane_field import FieldSample, PlaneStack
from src.scene_model import Intrinsics, RayBatch, SceneBounds, look_at, ray_for_pixel
from src.volume_renderer import (
    composite,
    composite_rays,
    composite_backward,
    render_backward,
    render_image,
    render_rays,
    sample_along_ray,
    sample_distances,
)

UNIT_BOUNDS = SceneBounds(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
BACKGROUND = (0.2, 0.3, 0.4)

HOMOGENEOUS_CASES = [
    (4, False),
    (64, False),
    (64, True),
]


def vertical_rays(count, time=0.5):
    offsets = np.linspace(-0.5, 0.5, count)
    origins = np.stack([offsets, -offsets, np.full(count, 5.0)], axis=1)
    directions = np.tile([0.0, 0.0, -1.0], (count, 1))
    return RayBatch(origins, directions, np.full(count, 4.0), np.full(count, 6.0), np.full(count, time))


@pytest.fixture(name="homogeneous_model", scope="module")
def fixture_homogeneous_model():
    # Constant planes and a direction-blind color head give the same density and color everywhere
    stack = PlaneStack.initialize(constants.FIELD_MODE_STOCK, 2, (4, 4, 4, 4), (1,))
    for values in stack.parameters().values():
        values[...] = 1.0
    decoder = DecoderParams.initialize(constants.FIELD_MODE_STOCK, 2, 1, 8, seed=1)
    decoder.tensors["color.w0"][2:] = 0.0
    decoder.tensors["density.w1"][...] = 0.0
    decoder.tensors["density.b1"][...] = np.log(np.expm1(0.7))
    return stack, decoder


@pytest.fixture(name="extended_model", scope="module")
def fixture_extended_model():
    stack = PlaneStack.initialize(constants.FIELD_MODE_EXTENDED, 2, (4, 4, 4, 3), (1, 2), seed=3)
    decoder = DecoderParams.initialize(constants.FIELD_MODE_EXTENDED, 2, 2, 8,
                                       activation=constants.ACTIVATION_SOFTPLUS, seed=4)
    return stack, decoder


def test_sample_distances_centres():
    ts, deltas = sample_distances(np.array([0.0]), np.array([4.0]), 4)
    assert np.allclose(ts, [[0.5, 1.5, 2.5, 3.5]])
    assert np.allclose(deltas, [[1.0, 1.0, 1.0, 0.5]])


def test_stratified_samples_stay_in_bins():
    near = np.array([1.0, 2.0])
    far = np.array([3.0, 10.0])
    ts, _ = sample_distances(near, far, 8, stratified=True, rng=np.random.default_rng(0))
    width = (far - near) / 8
    bins = np.floor((ts - near[:, None]) / width[:, None])
    assert np.array_equal(bins, np.tile(np.arange(8), (2, 1)))


def test_sample_along_empty_ray():
    assert len(sample_along_ray(None, 16)) == 0


def test_sample_along_ray():
    pose = look_at(np.array([0.0, 0.0, 10.0]), np.zeros(3), Intrinsics(10.0, 10.0, 4.0, 4.0, 9, 9))
    samples = sample_along_ray(ray_for_pixel(pose, 4, 4, UNIT_BOUNDS), 8)
    assert len(samples) == 8
    assert np.all(UNIT_BOUNDS.contains(samples.positions))
    assert np.all(np.diff(samples.ts) > 0)
    with pytest.raises(RangeError):
        sample_along_ray(None, 0)


def test_composite_empty_space():
    output = composite(np.zeros(5), np.full((5, 3), 0.9), np.zeros(5), np.full(5, 0.2), BACKGROUND)
    assert np.allclose(output.rgb, BACKGROUND)
    assert output.acc == 0.0
    assert output.depth == 0.0


def test_composite_opaque_first_sample():
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    output = composite(np.array([1e4, 1e4]), colors, np.array([1.0, 0.0]), np.array([1.0, 1.0]), BACKGROUND,
                       ts=np.array([2.0, 3.0]))
    assert np.allclose(output.rgb, [1.0, 0.0, 0.0])
    assert output.acc == pytest.approx(1.0)
    assert output.depth == pytest.approx(2.0)
    assert output.mask == pytest.approx(1.0)


def test_composite_rejects_negative_density():
    with pytest.raises(RangeError):
        composite(np.array([0.1, -0.1]), np.zeros((2, 3)), np.zeros(2), np.ones(2))


def test_opacity_and_transmittance_sum_to_one():
    rng = np.random.default_rng(1)
    sigmas = rng.exponential(2.0, size=(1000, 32))
    deltas = rng.uniform(0.0, 0.2, size=(1000, 32))
    ts = np.cumsum(deltas, axis=1)
    output, state = composite_rays(sigmas, rng.uniform(size=(1000, 32, 3)), rng.uniform(size=(1000, 32)),
                                   deltas, ts, BACKGROUND)
    assert np.allclose(output.acc + state.final_transmittance, 1.0, rtol=0.0, atol=1e-9)
    assert np.all((output.acc >= 0.0) & (output.acc <= 1.0))


def test_composite_backward_matches_differences():
    rng = np.random.default_rng(2)
    sigmas = rng.uniform(0.0, 3.0, size=(3, 5))
    colors = rng.uniform(size=(3, 5, 3))
    masks = rng.uniform(size=(3, 5))
    deltas = rng.uniform(0.05, 0.5, size=(3, 5))
    ts = np.cumsum(deltas, axis=1)
    grad_rgb = rng.normal(size=(3, 3))
    grad_mask = rng.normal(size=3)

    def loss():
        output, _ = composite_rays(sigmas, colors, masks, deltas, ts, BACKGROUND)
        return float(np.sum(grad_rgb * output.rgb) + np.sum(grad_mask * output.mask))

    _, state = composite_rays(sigmas, colors, masks, deltas, ts, BACKGROUND)
    grad_sigma, grad_colors, grad_masks = composite_backward(state, grad_rgb, grad_mask)
    h = 1e-6
    for array, analytic in ((sigmas, grad_sigma), (colors, grad_colors), (masks, grad_masks)):
        for flat in range(0, array.size, 4):
            index = np.unravel_index(flat, array.shape)
            original = array[index]
            array[index] = original + h
            plus = loss()
            array[index] = original - h
            minus = loss()
            array[index] = original
            assert analytic[index] == pytest.approx((plus - minus) / (2.0 * h), abs=1e-7)


@pytest.mark.parametrize("n_samples, stratified", HOMOGENEOUS_CASES)
def test_homogeneous_medium_closed_form(homogeneous_model, n_samples, stratified):
    stack, decoder = homogeneous_model
    rays = vertical_rays(6)
    output, _ = render_rays(stack, decoder, rays, UNIT_BOUNDS, n_samples, stratified,
                            np.random.default_rng(5), BACKGROUND)

    decoded, _ = decode_forward(decoder, FieldSample(constants.FIELD_MODE_STOCK, f=np.ones((1, 2))),
                                np.array([[0.0, 0.0, -1.0]]))
    sigma = decoded.sigma[0]
    assert sigma == pytest.approx(0.7)
    length = 2.0
    transmittance = np.exp(-sigma * length)
    expected = (1.0 - transmittance) * decoded.rgb[0] + transmittance * np.array(BACKGROUND)
    assert np.allclose(output.rgb, expected[None, :], rtol=0.0, atol=1e-6)
    assert np.allclose(output.acc, 1.0 - transmittance, rtol=0.0, atol=1e-6)


def test_missed_rays_render_background(extended_model):
    stack, decoder = extended_model
    rays = vertical_rays(4)
    rays.valid = np.array([True, False, True, False])
    output, cache = render_rays(stack, decoder, rays, UNIT_BOUNDS, 8, background=BACKGROUND)
    assert np.allclose(output.rgb[1], BACKGROUND)
    assert output.acc[3] == 0.0
    assert output.depth[1] == 0.0
    assert output.acc[0] > 0.0

    rays.valid[:] = False
    output, cache = render_rays(stack, decoder, rays, UNIT_BOUNDS, 8, background=BACKGROUND)
    grads, field_grad = render_backward(decoder, cache, np.ones((4, 3)))
    assert field_grad is None
    assert all(not np.any(gradient) for gradient in grads.values())


def test_render_backward_decoder_gradients(extended_model):
    stack, decoder = extended_model
    decoder = decoder.copy()
    rays = vertical_rays(3, time=0.25)
    rng = np.random.default_rng(6)
    grad_rgb = rng.normal(size=(3, 3))
    grad_mask = rng.normal(size=3)

    def loss():
        output, _ = render_rays(stack, decoder, rays, UNIT_BOUNDS, 6, background=BACKGROUND)
        return float(np.sum(grad_rgb * output.rgb) + np.sum(grad_mask * output.mask))

    _, cache = render_rays(stack, decoder, rays, UNIT_BOUNDS, 6, background=BACKGROUND)
    grads, field_grad = render_backward(decoder, cache, grad_rgb, grad_mask)
    assert field_grad.f_s.shape == (18, 4)
    h = 1e-6
    for name in ("density.w0", "density.b1", "color.w1", "fusion.w0", "mask.w"):
        values = decoder.tensors[name]
        index = np.unravel_index(values.size // 2, values.shape)
        original = values[index]
        values[index] = original + h
        plus = loss()
        values[index] = original - h
        minus = loss()
        values[index] = original
        assert grads[name][index] == pytest.approx((plus - minus) / (2.0 * h), rel=1e-5, abs=1e-8)


def test_render_image_independent_of_threads(extended_model):
    stack, decoder = extended_model
    pose = look_at(np.array([3.0, 2.0, 2.5]), np.zeros(3), Intrinsics(9.0, 9.0, 5.5, 4.5, 12, 10))
    single = RenderSettings(samples_eval=8, chunk_size=16, threads=1, seed=11)
    threaded = single.model_copy(update={"threads": 4})

    first = render_image(stack, decoder, pose, 0.6, single, UNIT_BOUNDS, stratified=True)
    second = render_image(stack, decoder, pose, 0.6, threaded, UNIT_BOUNDS, stratified=True)
    assert first.rgb.shape == (10, 12, 3)
    assert first.depth.shape == (10, 12)
    for name in ("rgb", "depth", "acc", "mask"):
        assert np.array_equal(getattr(first, name), getattr(second, name))


def test_render_image_rejects_timestamp(extended_model):
    stack, decoder = extended_model
    pose = look_at(np.array([3.0, 2.0, 2.5]), np.zeros(3), Intrinsics(9.0, 9.0, 5.5, 4.5, 12, 10))
    with pytest.raises(RangeError):
        render_image(stack, decoder, pose, 1.5, RenderSettings(), UNIT_BOUNDS)
