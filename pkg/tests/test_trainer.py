import os
import json
import math
import pytest
import numpy as np
from dataclasses import replace
from src import constants
from src.configuration import (DecoderConfig, LossWeights, OptimizerSettings, PlaneConfig, RenderSettings,
                               RunConfig, Schedule, read_configuration)
from src.dataset import SceneDataset
from src.errors import ConfigurationError, NonFiniteLossError, RangeError
from src.scene_synth import CameraPathSpec, PoseNoiseSpec, PrimitiveSpec, SceneSpec, generate_scene, perturb_poses, toy_dyn_1
from src.volume_renderer import render_rays
from src.trainer import (
    LossBreakdown,
    PixelBatch,
    PixelPool,
    TrainState,
    adam_update,
    compute_gradients,
    compute_losses,
    evaluate,
    finite_difference_check,
    gradient_check,
    learning_rate_at,
    psnr,
    train,
    train_step,
)

TINY_SCENE = SceneSpec(
    name="tiny",
    camera=CameraPathSpec(frame_count=6, resolution=16),
    primitives=[PrimitiveSpec(size=0.6, albedo=[0.9, 0.2, 0.1], class_id=0,
                              waypoints=[[-1.0, 0.0, 0.6], [1.0, 0.0, 0.6]])],
    class_names=["ball"],
)

PSNR_CASES = [
    (0.1, 20.0),
    (0.01, 40.0),
]

CONFIG_LOCATION = os.path.join(os.path.dirname(__file__), "..", "configs", "toy_dyn_1.json")


def tiny_config(mode=constants.FIELD_MODE_EXTENDED, iterations=4, seed=3):
    return RunConfig(
        mode=mode,
        planes=PlaneConfig(feature_dim=2, resolution_x=4, resolution_y=4, scale_multipliers=[1]),
        decoder=DecoderConfig(hidden_width=8),
        loss_weights=LossWeights().for_mode(mode),
        schedule=Schedule(iterations=iterations, eval_interval=2, batch_size=32),
        render=RenderSettings(samples_train=4, samples_eval=4),
        seed=seed,
    )


def check_state(mode, seed=0):
    '''Plane stack of 8x8 cells with D=4 over two scales and a softplus decoder'''
    config = RunConfig(
        mode=mode,
        planes=PlaneConfig(feature_dim=4, resolution_x=8, resolution_y=8, resolution_z=8,
                           resolution_t=4, scale_multipliers=[1, 2]),
        decoder=DecoderConfig(hidden_width=8, activation=constants.ACTIVATION_SOFTPLUS),
        seed=seed,
    )
    return TrainState.initialize(config, TINY_SCENE.bounds(), 3)


@pytest.fixture(name="tiny_dataset", scope="module")
def fixture_tiny_dataset():
    return generate_scene(TINY_SCENE)


@pytest.fixture(name="pixel_batch", scope="module")
def fixture_pixel_batch(tiny_dataset):
    train_frames, _ = tiny_dataset.split()
    pool = PixelPool(train_frames, tiny_dataset.bounds)
    return pool.sample(8, np.random.default_rng(0))


@pytest.mark.parametrize("mse, expected", [(value * value, db) for value, db in PSNR_CASES])
def test_psnr(mse, expected):
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), math.sqrt(mse))
    assert psnr(a, b) == pytest.approx(expected)


def test_psnr_identical_images():
    image = np.random.default_rng(0).uniform(size=(5, 5, 3))
    assert psnr(image, image) == constants.PSNR_CAP


def test_psnr_shape_mismatch():
    with pytest.raises(RangeError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_learning_rate_schedule():
    settings = OptimizerSettings(learning_rate=0.01, final_lr_ratio=0.1)
    rates = [learning_rate_at(step, 100, settings) for step in range(100)]
    assert rates[0] == pytest.approx(0.01)
    assert rates[-1] == pytest.approx(0.001)
    # Assert that the rate never increases
    assert all(later <= earlier for earlier, later in zip(rates, rates[1:]))


def test_finite_difference_check_quadratic():
    parameters = {"a": np.array([1.0, -2.0, 3.0]), "b": np.array([[0.5, 0.25]])}

    def loss():
        return float(np.sum(parameters["a"] ** 2) + np.sum(parameters["b"] ** 3))

    analytic = {"a": 2.0 * parameters["a"], "b": 3.0 * parameters["b"] ** 2}
    assert finite_difference_check(loss, parameters, analytic) < 1e-6
    analytic["a"] = analytic["a"] + 1.0
    assert finite_difference_check(loss, parameters, analytic) > 0.1
    # Assert that the parameters were restored after perturbation
    assert np.array_equal(parameters["a"], [1.0, -2.0, 3.0])


def test_adam_first_step():
    state = check_state(constants.FIELD_MODE_STOCK)
    before = {name: value.copy() for name, value in state.parameters().items()}
    grads = {name: np.full(value.shape, 0.5) for name, value in before.items()}
    adam_update(state, grads, 0.01)
    assert state.step == 1
    for name, value in state.parameters().items():
        # Bias correction makes the first step lr * sign(g)
        assert np.allclose(before[name] - value, 0.01, rtol=1e-6)


def test_non_finite_loss():
    with pytest.raises(NonFiniteLossError) as error:
        LossBreakdown(photometric=float("nan")).check_finite()
    assert error.value.term == constants.LOSS_TERM_PHOTOMETRIC


def test_pixel_batch_validation(pixel_batch):
    with pytest.raises(RangeError):
        PixelBatch(pixel_batch.rays, pixel_batch.target_rgb, np.full(len(pixel_batch), 0.5))
    with pytest.raises(RangeError):
        PixelBatch(pixel_batch.rays, pixel_batch.target_rgb[:3], pixel_batch.dynamic_flag)


def test_extended_terms_rejected_in_stock_mode(pixel_batch):
    state = check_state(constants.FIELD_MODE_STOCK)
    with pytest.raises(ConfigurationError):
        compute_losses(state, pixel_batch, LossWeights(), samples=4)


def test_loss_breakdown(pixel_batch):
    state = check_state(constants.FIELD_MODE_EXTENDED)
    weights = LossWeights()
    losses = compute_losses(state, pixel_batch, weights, samples=4)
    expected = (weights.photometric * losses.photometric + weights.cosine_sep * losses.cosine_sep
                + weights.mask_bce * losses.mask_bce + weights.tv_spatial * losses.tv_spatial
                + weights.tv_temporal * losses.tv_temporal)
    assert losses.total == pytest.approx(expected)
    assert losses.cosine_sep > 0.0
    # Mask channels start at zero, so every ray predicts 0.5 times its opacity
    assert losses.mask_bce > 0.0


def test_adam_zero_gradients():
    state = check_state(constants.FIELD_MODE_EXTENDED)
    before = {name: value.copy() for name, value in state.parameters().items()}
    adam_update(state, {name: np.zeros_like(value) for name, value in before.items()}, 0.01)
    assert state.step == 1
    for name, value in state.parameters().items():
        assert np.array_equal(value, before[name])


def test_zero_learning_rate(pixel_batch):
    state = check_state(constants.FIELD_MODE_EXTENDED, seed=6)
    before = {name: value.copy() for name, value in state.parameters().items()}
    train_step(state, pixel_batch, LossWeights(), learning_rate=0.0, samples=4)
    # Assert that the step counter advances while every parameter stays put
    assert state.step == 1
    for name, value in state.parameters().items():
        assert np.array_equal(value, before[name])


def test_cosine_gradient_is_linear_in_its_weight(pixel_batch):
    state = check_state(constants.FIELD_MODE_EXTENDED, seed=7)
    grads = []
    for weight in (0.5, 1.0):
        weights = LossWeights(photometric=0.0, cosine_sep=weight, mask_bce=0.0, tv_spatial=0.0, tv_temporal=0.0)
        grads.append(compute_gradients(state, pixel_batch, weights, routing=False, samples=4)[1])
    single, double = grads
    assert any(np.any(value) for value in single.values())
    for name, value in single.items():
        assert np.allclose(double[name], 2.0 * value, rtol=0.0, atol=1e-10)


def brute_force_tv(stack):
    spatial = 0.0
    temporal = 0.0
    for planes in stack.scales:
        for plane in planes.values():
            values = plane.values
            ru, rv = values.shape[:2]
            along_v = sum(float(np.sum((values[i, j + 1] - values[i, j]) ** 2))
                          for i in range(ru) for j in range(rv - 1)) / (ru * (rv - 1) * values.shape[2])
            if plane.is_temporal:
                temporal += along_v
                continue
            along_u = sum(float(np.sum((values[i + 1, j] - values[i, j]) ** 2))
                          for i in range(ru - 1) for j in range(rv)) / ((ru - 1) * rv * values.shape[2])
            spatial += along_u + along_v
    return spatial, temporal


def test_loss_terms_match_direct_evaluation(pixel_batch):
    state = check_state(constants.FIELD_MODE_EXTENDED, seed=8)
    rng = np.random.default_rng(9)
    for value in state.stack.parameters().values():
        value += rng.normal(scale=0.05, size=value.shape)
    losses = compute_losses(state, pixel_batch, LossWeights(), samples=4)

    # Photometric and mask terms from one ray at a time
    squared = 0.0
    cross_entropy = 0.0
    for index in range(len(pixel_batch)):
        output, _ = render_rays(state.stack, state.decoder, pixel_batch.rays.subset(slice(index, index + 1)),
                                state.bounds, 4, background=state.background)
        squared += float(np.sum((output.rgb[0] - pixel_batch.target_rgb[index]) ** 2))
        p = min(max(output.mask[0], constants.BCE_EPSILON), 1.0 - constants.BCE_EPSILON)
        y = pixel_batch.dynamic_flag[index]
        cross_entropy -= y * math.log(p) + (1.0 - y) * math.log(1.0 - p)
    assert losses.photometric == pytest.approx(squared / (3 * len(pixel_batch)), rel=1e-10)
    assert losses.mask_bce == pytest.approx(cross_entropy / len(pixel_batch), rel=1e-10)

    # Cosine term row by row from the per-plane vectors
    _, cache = render_rays(state.stack, state.decoder, pixel_batch.rays, state.bounds, 4,
                           background=state.background)
    total = 0.0
    for (k, group, pair), static in cache.sample.per_plane.items():
        if group != constants.PLANE_GROUP_STATIC:
            continue
        dynamic = cache.sample.per_plane[(k, constants.PLANE_GROUP_DYNAMIC, pair)]
        for a, b in zip(static, dynamic):
            total += abs(float(a @ b)) / (float(np.linalg.norm(a) * np.linalg.norm(b)) + constants.COSINE_EPSILON)
    assert losses.cosine_sep == pytest.approx(total / len(cache.sample), rel=1e-10)

    tv_spatial, tv_temporal = brute_force_tv(state.stack)
    assert losses.tv_spatial == pytest.approx(tv_spatial, rel=1e-10)
    assert losses.tv_temporal == pytest.approx(tv_temporal, rel=1e-10)


@pytest.mark.parametrize("mode", [constants.FIELD_MODE_EXTENDED, constants.FIELD_MODE_STOCK])
def test_full_pipeline_gradient_check(pixel_batch, mode):
    state = check_state(mode, seed=5)
    weights = LossWeights().for_mode(mode)
    error = gradient_check(state, pixel_batch, weights, samples=8, subset_size=64, seed=1)
    assert error < 1e-3


@pytest.mark.parametrize("flag, frozen_group", [(0.0, constants.PLANE_GROUP_DYNAMIC),
                                                (1.0, constants.PLANE_GROUP_STATIC)])
def test_routing_freezes_the_other_plane_set(pixel_batch, flag, frozen_group):
    state = check_state(constants.FIELD_MODE_EXTENDED, seed=2)
    batch = PixelBatch(pixel_batch.rays, pixel_batch.target_rgb, np.full(len(pixel_batch), flag))
    weights = LossWeights(cosine_sep=0.0, tv_spatial=0.0, tv_temporal=0.0)
    before = {name: value.copy() for name, value in state.stack.parameters().items()}
    for _ in range(3):
        train_step(state, batch, weights, routing=True, learning_rate=0.01, samples=4)
    for name, value in state.stack.parameters().items():
        if state.stack.parameter_group(name) == frozen_group:
            assert np.array_equal(value, before[name])
        else:
            assert not np.array_equal(value, before[name])


def test_train_zero_iterations(tiny_dataset):
    config = tiny_config(iterations=0)
    state = TrainState.initialize(config, tiny_dataset.bounds, 3)
    before = {name: value.copy() for name, value in state.parameters().items()}
    state, curve = train(state, tiny_dataset, config)
    assert curve == []
    assert state.step == 0
    assert all(np.array_equal(value, before[name]) for name, value in state.parameters().items())


def test_train_requires_boxes_for_mask_loss(tiny_dataset):
    frames = [replace(frame, boxes=None) for frame in tiny_dataset.frames]
    unboxed = SceneDataset(tiny_dataset.name, tiny_dataset.bounds, frames)
    config = tiny_config()
    with pytest.raises(ConfigurationError):
        train(TrainState.initialize(config, unboxed.bounds, 3), unboxed, config)


def test_train_is_reproducible(tiny_dataset, tmp_path):
    config = tiny_config(iterations=4)
    runs = []
    for name in ("first", "second"):
        log_location = tmp_path / f"{name}.jsonl"
        state = TrainState.initialize(config, tiny_dataset.bounds, 3)
        state, curve = train(state, tiny_dataset, config, str(log_location))
        runs.append((state, curve, log_location.read_text()))

    (first, first_curve, first_log), (second, second_curve, second_log) = runs
    assert first.step == 4
    assert len(first_curve) == 2
    assert first_curve == second_curve
    assert first_log == second_log
    assert len(first_log.splitlines()) == 4
    for name, value in first.parameters().items():
        assert np.array_equal(value, second.parameters()[name])


def test_train_checkpoint_callback(tiny_dataset):
    config = tiny_config(iterations=4)
    config.schedule.checkpoint_interval = 2
    steps = []
    train(TrainState.initialize(config, tiny_dataset.bounds, 3), tiny_dataset, config,
          checkpoint_callback=lambda state: steps.append(state.step))
    assert steps == [2, 4]


def test_evaluate_table(tiny_dataset):
    config = tiny_config(constants.FIELD_MODE_STOCK)
    state = TrainState.initialize(config, tiny_dataset.bounds, 3)
    _, heldout = tiny_dataset.split()
    table = evaluate(state, heldout, config.render)
    assert set(table) == {frame.name for frame in heldout} | {"mean"}
    assert table["mean"] == pytest.approx(np.mean([table[frame.name] for frame in heldout]))
    assert len(evaluate(state, heldout, config.render, max_frames=1)) == 2


def final_psnr(mode, dataset, seed=0):
    config, success = read_configuration(CONFIG_LOCATION)
    assert success
    config = config.model_copy(update={"mode": mode, "seed": seed,
                                       "loss_weights": config.loss_weights.for_mode(mode)})
    train_frames, _ = dataset.split()
    state = TrainState.initialize(config, dataset.bounds, len(train_frames))
    _, curve = train(state, dataset, config)
    return curve[-1][1]


@pytest.mark.skipif(os.environ.get("RUN_SLOW") != "1", reason="full training runs take several minutes")
@pytest.mark.parametrize("mode", [constants.FIELD_MODE_STOCK, constants.FIELD_MODE_EXTENDED])
def test_reconstruction_floor(mode):
    assert final_psnr(mode, generate_scene(toy_dyn_1())) >= 25.0


@pytest.mark.skipif(os.environ.get("RUN_SLOW") != "1", reason="full training runs take several minutes")
def test_separation_helps_with_noisy_poses():
    dataset = generate_scene(toy_dyn_1())
    gaps = []
    for seed in range(3):
        noisy = perturb_poses(dataset, PoseNoiseSpec(rotation_sigma=0.5, translation_sigma=0.01, seed=seed))
        gaps.append(final_psnr(constants.FIELD_MODE_EXTENDED, noisy, seed)
                    - final_psnr(constants.FIELD_MODE_STOCK, noisy, seed))
    assert np.mean(gaps) >= 1.0


@pytest.mark.skipif(os.environ.get("RUN_SLOW") != "1", reason="full training runs take several minutes")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases(seed, tmp_path):
    config, success = read_configuration(CONFIG_LOCATION)
    assert success
    config = config.model_copy(update={"seed": seed, "schedule": Schedule(iterations=500, eval_interval=0)})
    dataset = generate_scene(toy_dyn_1())
    state = TrainState.initialize(config, dataset.bounds, len(dataset.split()[0]))
    train(state, dataset, config, str(tmp_path / "train_log.jsonl"))
    totals = {record["step"]: record["total"]
              for record in map(json.loads, (tmp_path / "train_log.jsonl").read_text().splitlines())}
    assert totals[500] < totals[10]
