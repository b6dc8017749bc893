"""Command-line entry points for scene generation, training, rendering, annotation and dataset assembly"""
import argparse
import os
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src import constants
from src.annotator import BBoxAnnotation, InstancePalette, annotate_instance_mask, annotate_scalar_mask
from src.checkpoint import read_checkpoint, save_checkpoint
from src.configuration import RunConfig, read_configuration
from src.dataset import build_mask_images, load_scene, save_scene
from src.detection_export import AnnotatedImage, assemble_hybrid, export_detection, load_detection_export
from src.errors import ConfigurationError, DatasetError, ModeError, PaletteError
from src.logger import create_logger
from src.pose_sampler import (NovelViewRequest, OrbitSpec, load_requests, sample_dynamic_requests,
                              sample_static_poses, save_requests, static_requests)
from src.scene_synth import PoseNoiseSpec, generate_scene, load_scene_spec, perturb_poses
from src.trainer import TrainState, evaluate, train
from src.utils import Result, check_file_integrity, load_png, save_png, staged_output, to_uint8, write_json
from src.volume_renderer import ImageBuffers, render_image

logger = create_logger()


def _write_run_record(folder: str, args: argparse.Namespace, extra: Optional[dict] = None) -> None:
    arguments = {key: value for key, value in vars(args).items() if key != "handler"}
    write_json(os.path.join(folder, constants.RUN_RECORD_FILE),
               {"command": args.command, "arguments": arguments, **(extra or {})})


def _checkpoint_location(path: str) -> str:
    if os.path.isdir(path):
        return os.path.join(path, constants.CHECKPOINT_FILE)
    return path


def _load_model(path: str, threads: int) -> Tuple[TrainState, RunConfig]:
    state, metadata = read_checkpoint(_checkpoint_location(path))
    if "config" in metadata:
        config = RunConfig.model_validate(metadata["config"])
    else:
        config = RunConfig(mode=state.mode)
    config.render.threads = threads
    return state, config


def _render(state: TrainState, config: RunConfig, request: NovelViewRequest) -> ImageBuffers:
    return render_image(state.stack, state.decoder, request.pose, request.timestamp, config.render, state.bounds)


def load_palette(file_location: str) -> InstancePalette:
    result, json_data = check_file_integrity(file_location, ("entries",))
    if result != Result.VALID:
        raise PaletteError(f"Palette {file_location} is missing or unreadable ({result.name})")
    return InstancePalette.model_validate(json_data)


def save_palette(palette: InstancePalette, file_location: str) -> None:
    write_json(file_location, palette.model_dump(mode="json"))


def _scene_palette(dataset, palette_path: Optional[str]) -> InstancePalette:
    if palette_path:
        return load_palette(palette_path)
    return InstancePalette.generate(dataset.instances(), dataset.class_names)


def gen_scene(args: argparse.Namespace) -> None:
    spec = load_scene_spec(args.spec)
    with staged_output(args.out) as staging:
        generate_scene(spec, args.resolution, staging, args.threads)
        _write_run_record(staging, args, {"scene": spec.model_dump()})


def perturb_poses_command(args: argparse.Namespace) -> None:
    dataset = load_scene(args.input)
    noise = PoseNoiseSpec(rotation_sigma=args.rot_sigma, translation_sigma=args.trans_sigma, seed=args.seed)
    with staged_output(args.out or args.input) as staging:
        save_scene(perturb_poses(dataset, noise), staging)
        _write_run_record(staging, args)


def build_masks(args: argparse.Namespace) -> None:
    dataset = load_scene(args.scene)
    palette = _scene_palette(dataset, args.palette)
    with staged_output(args.out) as staging:
        save_scene(build_mask_images(dataset, palette), staging)
        save_palette(palette, os.path.join(staging, constants.PALETTE_FILE))
        _write_run_record(staging, args)


def train_command(args: argparse.Namespace) -> None:
    config = RunConfig()
    if args.config:
        config, success = read_configuration(args.config)
        if not success:
            raise ConfigurationError(f"Invalid configuration file {args.config}")
    if args.mode:
        config.mode = args.mode.replace("-", "_")
    if args.iterations is not None:
        config.schedule.iterations = args.iterations
    if args.seed is not None:
        config.seed = args.seed
    config.render.threads = args.threads
    config.loss_weights = config.loss_weights.for_mode(config.mode)

    dataset = load_scene(args.scene)
    train_frames, _ = dataset.split()
    state = TrainState.initialize(config, dataset.bounds, len(train_frames))
    metadata = {"config": config.model_dump(mode="json"), "scene": dataset.name, "training_frames": len(train_frames)}

    with staged_output(args.out) as staging:
        def save_periodic(current: TrainState) -> None:
            save_checkpoint(current, os.path.join(staging, "checkpoints", f"step_{current.step:06d}.ckpt"),
                            config.checkpoint_precision, metadata)

        state, curve = train(state, dataset, config, os.path.join(staging, constants.TRAINING_LOG_FILE), save_periodic)
        save_checkpoint(state, os.path.join(staging, constants.CHECKPOINT_FILE), config.checkpoint_precision, metadata)
        _write_run_record(staging, args, {"config": metadata["config"],
                                          "curve": [{"step": step, "psnr": value} for step, value in curve]})


def _save_buffers(folder: str, name: str, buffers: ImageBuffers) -> None:
    for subfolder in (constants.IMAGES_FOLDER, constants.MASKS_FOLDER, "depth"):
        os.makedirs(os.path.join(folder, subfolder), exist_ok=True)
    save_png(os.path.join(folder, constants.IMAGES_FOLDER, name), to_uint8(buffers.rgb))
    save_png(os.path.join(folder, constants.MASKS_FOLDER, name), to_uint8(buffers.mask))
    depth = np.clip(np.round(buffers.depth * constants.DEPTH_PNG_SCALE), 0, 65535).astype(np.uint16)
    save_png(os.path.join(folder, "depth", name), depth)


def render_command(args: argparse.Namespace) -> None:
    state, config = _load_model(args.ckpt, args.threads)
    requests = load_requests(args.requests)
    with staged_output(args.out) as staging:
        renders = []
        for index, request in enumerate(requests):
            name = f"{index:04d}_{request.tag}.png"
            _save_buffers(staging, name, _render(state, config, request))
            renders.append({"file": name, "tag": request.tag, "time": request.timestamp})
        _write_run_record(staging, args, {"renders": renders})
    logger.info("Rendered %d requests", len(requests))


def sample_poses_command(args: argparse.Namespace) -> None:
    dataset = load_scene(args.scene)
    if args.dynamic is not None:
        requests = sample_dynamic_requests(dataset.trajectory(), args.dynamic, args.seed)
    else:
        spec = OrbitSpec(center=args.center, altitude_range=tuple(args.altitude), radius_range=tuple(args.radius),
                         view_angle_range=tuple(args.view_angle) if args.view_angle else None,
                         count=args.count, seed=args.seed, altitude_step=args.altitude_step,
                         radius_step=args.radius_step, waypoint_density=args.waypoint_density)
        poses = sample_static_poses(spec, dataset.frames[0].pose.intrinsics, dataset.bounds)
        requests = static_requests(poses)
    save_requests(requests, args.out)
    logger.info("Wrote %d requests to %s", len(requests), args.out)


def _mask_images(folder: str, subfolder: str = constants.IMAGES_FOLDER) -> List[str]:
    nested = os.path.join(folder, subfolder)
    if os.path.isdir(nested):
        folder = nested
    return sorted(os.path.join(folder, name) for name in os.listdir(folder) if name.lower().endswith(".png"))


def _annotate_file(location: str, palette: Optional[InstancePalette], args: argparse.Namespace) -> List[BBoxAnnotation]:
    if args.scalar_mask:
        return annotate_scalar_mask(load_png(location)[..., 0], args.threshold, args.class_id, args.min_area)
    return annotate_instance_mask(load_png(location), palette, args.threshold, args.tolerance, args.min_area)


def annotate_command(args: argparse.Namespace) -> None:
    '''Boxes from palette-coloured renders, or with --scalar-mask from the rendered dynamic-mask channel'''
    if not args.scalar_mask and not args.palette:
        raise PaletteError("--palette is required unless --scalar-mask is set")
    palette = load_palette(args.palette) if args.palette else None
    locations = _mask_images(args.masks, constants.MASKS_FOLDER if args.scalar_mask else constants.IMAGES_FOLDER)
    if not locations:
        raise DatasetError(f"No mask images found in {args.masks}")
    with staged_output(args.out) as staging:
        annotations = {}
        for location in locations:
            boxes = _annotate_file(location, palette, args)
            annotations[os.path.basename(location)] = [box.model_dump() for box in boxes]
        write_json(os.path.join(staging, "boxes.json"), annotations)
        _write_run_record(staging, args)
    logger.info("Annotated %d mask images", len(locations))


def augment_command(args: argparse.Namespace) -> None:
    dataset = load_scene(args.scene)
    palette = _scene_palette(dataset, args.palette)
    image_state, image_config = _load_model(args.ckpt_im, args.threads)
    mask_state, mask_config = _load_model(args.ckpt_bbox, args.threads)
    if args.scalar_mask and mask_state.mode != constants.FIELD_MODE_EXTENDED:
        raise ModeError(f"--scalar-mask needs an extended checkpoint, {args.ckpt_bbox} is {mask_state.mode}")
    requests = load_requests(args.requests)
    if args.match_real:
        requests = requests[:len(dataset.split()[0])]

    items = []
    for index, request in enumerate(requests):
        image = _render(image_state, image_config, request)
        mask = _render(mask_state, mask_config, request)
        if args.scalar_mask:
            boxes = annotate_scalar_mask(mask.mask, args.threshold, args.class_id, args.min_area)
        else:
            boxes = annotate_instance_mask(np.clip(mask.rgb, 0.0, 1.0), palette, args.threshold, args.tolerance,
                                           args.min_area)
        items.append(AnnotatedImage(f"synthetic_{index:04d}_{request.tag}.png", np.clip(image.rgb, 0.0, 1.0),
                                    boxes, constants.SOURCE_SYNTHETIC))

    with staged_output(args.out) as staging:
        export_detection(items, staging, palette.class_names)
        _write_run_record(staging, args)


def export_scene(args: argparse.Namespace) -> None:
    '''Training frames of a scene with their ground-truth boxes as a real detection export'''
    dataset = load_scene(args.scene)
    palette = _scene_palette(dataset, args.palette)
    frames = dataset.split()[0] if args.training_only else dataset.frames
    items = [AnnotatedImage(frame.name, frame.load_image(), frame.boxes or [], constants.SOURCE_REAL)
             for frame in frames]
    with staged_output(args.out) as staging:
        export_detection(items, staging, palette.class_names)
        _write_run_record(staging, args)


def eval_psnr(args: argparse.Namespace) -> None:
    state, config = _load_model(args.ckpt, args.threads)
    dataset = load_scene(args.scene)
    _, heldout = dataset.split()
    table = evaluate(state, heldout, config.render, args.max_frames)
    for name, value in table.items():
        logger.info("%s: %.2f dB", name, value)
    if args.out:
        write_json(args.out, table)


def merge(args: argparse.Namespace) -> None:
    real = load_detection_export(args.real)
    synthetic = load_detection_export(args.synthetic)
    with staged_output(args.out) as staging:
        assemble_hybrid(real, synthetic, staging)
        _write_run_record(staging, args)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--threads', type=int, default=1, help="worker threads (1 is fully deterministic)")

    annotation = argparse.ArgumentParser(add_help=False)
    annotation.add_argument('--threshold', type=float, default=constants.MASK_THRESHOLD_DEFAULT)
    annotation.add_argument('--tolerance', type=float, default=constants.COLOR_TOLERANCE_DEFAULT)
    annotation.add_argument('--min-area', type=int, default=constants.MIN_AREA_DEFAULT)
    annotation.add_argument('--scalar-mask', action='store_true',
                            help="boxes from the dynamic-mask channel of an extended model instead of palette colours")
    annotation.add_argument('--class-id', type=int, default=0, help="class of --scalar-mask boxes")

    parser = argparse.ArgumentParser(description="Dynamic radiance fields for detector data augmentation")
    commands = parser.add_subparsers(dest="command", required=True)

    command = commands.add_parser('gen-scene', parents=[common], help="generate a synthetic scene")
    command.add_argument('--spec', default=constants.TOY_SCENE_NAME, help="scene JSON or toy-dyn-1")
    command.add_argument('--out', required=True)
    command.add_argument('--resolution', type=int, default=None)
    command.set_defaults(handler=gen_scene)

    command = commands.add_parser('perturb-poses', parents=[common], help="add noise to scene poses")
    command.add_argument('--in', dest="input", required=True)
    command.add_argument('--out', default=None, help="defaults to replacing --in")
    command.add_argument('--rot-sigma', type=float, default=0.0, help="degrees")
    command.add_argument('--trans-sigma', type=float, default=0.0, help="fraction of the scene diagonal")
    command.add_argument('--seed', type=int, default=0)
    command.set_defaults(handler=perturb_poses_command)

    command = commands.add_parser('build-masks', parents=[common], help="masked-image copy of a scene")
    command.add_argument('--scene', required=True)
    command.add_argument('--palette', default=None)
    command.add_argument('--out', required=True)
    command.set_defaults(handler=build_masks)

    command = commands.add_parser('train', parents=[common], help="train a field on a scene")
    command.add_argument('--scene', required=True)
    command.add_argument('--mode', choices=["stock", "extended", "spatial-only"], default=None)
    command.add_argument('--config', default=None)
    command.add_argument('--iterations', type=int, default=None)
    command.add_argument('--seed', type=int, default=None)
    command.add_argument('--out', required=True, help="run folder for the checkpoint and log")
    command.set_defaults(handler=train_command)

    command = commands.add_parser('render', parents=[common], help="render requests from a checkpoint")
    command.add_argument('--ckpt', required=True)
    command.add_argument('--requests', required=True)
    command.add_argument('--out', required=True)
    command.set_defaults(handler=render_command)

    command = commands.add_parser('sample-poses', parents=[common], help="sample novel-view requests")
    command.add_argument('--scene', required=True)
    kind = command.add_mutually_exclusive_group(required=True)
    kind.add_argument('--orbit', action='store_true', help="static orbit poses")
    kind.add_argument('--dynamic', type=int, default=None, metavar="N", help="N trajectory locations (3N requests)")
    command.add_argument('--altitude', type=float, nargs=2, default=[5.0, 5.0], metavar=("LO", "HI"))
    command.add_argument('--radius', type=float, nargs=2, default=[6.0, 6.0], metavar=("LO", "HI"))
    command.add_argument('--view-angle', type=float, nargs=2, default=None, metavar=("LO", "HI"))
    command.add_argument('--center', type=float, nargs=3, default=None, metavar=("X", "Y", "Z"))
    command.add_argument('--count', type=int, default=1)
    command.add_argument('--altitude-step', type=float, default=None)
    command.add_argument('--radius-step', type=float, default=None)
    command.add_argument('--waypoint-density', type=int, default=0)
    command.add_argument('--seed', type=int, default=0)
    command.add_argument('--out', default=constants.REQUESTS_FILE)
    command.set_defaults(handler=sample_poses_command)

    command = commands.add_parser('annotate', parents=[common, annotation], help="boxes from rendered masks")
    command.add_argument('--masks', required=True)
    command.add_argument('--palette', default=None, help="required without --scalar-mask")
    command.add_argument('--out', required=True)
    command.set_defaults(handler=annotate_command)

    command = commands.add_parser('augment', parents=[common, annotation], help="render and annotate synthetic data")
    command.add_argument('--scene', required=True)
    command.add_argument('--ckpt-im', required=True)
    command.add_argument('--ckpt-bbox', required=True)
    command.add_argument('--requests', required=True)
    command.add_argument('--palette', default=None)
    command.add_argument('--match-real', action='store_true', help="at most as many images as training frames")
    command.add_argument('--out', required=True)
    command.set_defaults(handler=augment_command)

    command = commands.add_parser('export-scene', parents=[common], help="scene frames as a real detection export")
    command.add_argument('--scene', required=True)
    command.add_argument('--palette', default=None)
    command.add_argument('--training-only', action='store_true')
    command.add_argument('--out', required=True)
    command.set_defaults(handler=export_scene)

    command = commands.add_parser('eval-psnr', parents=[common], help="held-out PSNR of a checkpoint")
    command.add_argument('--ckpt', required=True)
    command.add_argument('--scene', required=True)
    command.add_argument('--max-frames', type=int, default=0)
    command.add_argument('--out', default=None, help="optional JSON table")
    command.set_defaults(handler=eval_psnr)

    command = commands.add_parser('merge', parents=[common], help="combine real and synthetic exports")
    command.add_argument('--real', required=True)
    command.add_argument('--synthetic', required=True)
    command.add_argument('--out', required=True)
    command.set_defaults(handler=merge)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    '''Parse argv and run one subcommand; errors are logged and give exit status 1'''
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        logger.error("--threads must be at least 1")
        return 1
    try:
        args.handler(args)
    except (ValueError, ArithmeticError, OSError) as error:
        logger.error("%s failed: %s", args.command, error)
        return 1
    return 0
