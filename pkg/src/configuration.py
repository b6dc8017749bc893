"""This module encompasses the run configuration models and the functions for reading, writing, and resetting configuration files"""
import json
import math
from pydantic import BaseModel, Field, ValidationError, field_validator
from typing import List, Optional, Tuple
from src import constants
from src.errors import ConfigurationError
from src.logger import create_logger

logger = create_logger()


class PlaneConfig(BaseModel):
    """This class holds the plane stack dimensions; unset z/t resolutions are derived from the scene"""
    feature_dim: int = Field(default=constants.FEATURE_DIM_DEFAULT, ge=1)
    resolution_x: int = Field(default=constants.BASE_RESOLUTION_XY_DEFAULT, ge=2)
    resolution_y: int = Field(default=constants.BASE_RESOLUTION_XY_DEFAULT, ge=2)
    resolution_z: Optional[int] = Field(default=None, ge=2)
    resolution_t: Optional[int] = Field(default=None, ge=2)
    scale_multipliers: List[int] = Field(
        default_factory=lambda: list(constants.SCALE_MULTIPLIERS_DEFAULT))

    @field_validator('scale_multipliers')
    @classmethod
    def validate_scale_multipliers(cls, value):
        if not value or any(multiplier < 1 for multiplier in value):
            raise ValueError("scale multipliers must be a non-empty list of positive integers")
        return value

    def resolve(self, training_frames: int) -> Tuple[int, int, int, int]:
        '''Base (Rx, Ry, Rz, Rt): z defaults to half of x, t to half the training frame count'''
        resolution_z = self.resolution_z or max(2, self.resolution_x // 2)
        resolution_t = self.resolution_t or max(2, math.ceil(training_frames / 2))
        return self.resolution_x, self.resolution_y, resolution_z, resolution_t


class DecoderConfig(BaseModel):
    """This class holds the decoder network sizes"""
    hidden_width: int = Field(default=constants.DECODER_HIDDEN_DEFAULT, ge=1)
    activation: str = constants.ACTIVATION_RELU
    density_bias: float = constants.DENSITY_BIAS_DEFAULT

    @field_validator('activation')
    @classmethod
    def validate_activation(cls, value, info):
        if value not in constants.ACTIVATIONS:
            return cls.model_fields[info.field_name].default
        return value


class LossWeights(BaseModel):
    """This class holds the weight of every loss term"""
    photometric: float = Field(default=constants.LOSS_PHOTOMETRIC_DEFAULT, ge=0.0)
    cosine_sep: float = Field(default=constants.LOSS_COSINE_SEP_DEFAULT, ge=0.0)
    mask_bce: float = Field(default=constants.LOSS_MASK_BCE_DEFAULT, ge=0.0)
    tv_spatial: float = Field(default=constants.LOSS_TV_SPATIAL_DEFAULT, ge=0.0)
    tv_temporal: float = Field(default=constants.LOSS_TV_TEMPORAL_DEFAULT, ge=0.0)

    def for_mode(self, mode: str) -> "LossWeights":
        '''Copy with the extended-only terms switched off for stock and spatial_only runs'''
        if mode == constants.FIELD_MODE_EXTENDED:
            return self.model_copy()
        return self.model_copy(update={"cosine_sep": 0.0, "mask_bce": 0.0})

    def check_mode(self, mode: str) -> None:
        if mode != constants.FIELD_MODE_EXTENDED and (self.cosine_sep > 0 or self.mask_bce > 0):
            raise ConfigurationError(
                f"Loss terms '{constants.LOSS_TERM_COSINE_SEP}' and '{constants.LOSS_TERM_MASK_BCE}' "
                f"require extended mode, not {mode}")


class Schedule(BaseModel):
    """This class holds the training schedule"""
    iterations: int = Field(default=2000, ge=0)
    eval_interval: int = Field(default=250, ge=0)
    checkpoint_interval: int = Field(default=0, ge=0)
    batch_size: int = Field(default=constants.BATCH_SIZE_DEFAULT, ge=1)
    eval_max_frames: int = Field(default=0, ge=0)


class OptimizerSettings(BaseModel):
    """This class holds the Adam hyperparameters and the learning rate decay"""
    learning_rate: float = Field(default=constants.LEARNING_RATE_DEFAULT, ge=0.0)
    beta1: float = Field(default=constants.ADAM_BETA1, ge=0.0, lt=1.0)
    beta2: float = Field(default=constants.ADAM_BETA2, ge=0.0, lt=1.0)
    epsilon: float = Field(default=constants.ADAM_EPSILON, gt=0.0)
    final_lr_ratio: float = Field(default=constants.LR_FINAL_RATIO_DEFAULT, ge=0.0, le=1.0)


class RenderSettings(BaseModel):
    """This class holds the ray sampling and image rendering options"""
    samples_train: int = Field(default=constants.SAMPLES_TRAIN_DEFAULT, ge=1)
    samples_eval: int = Field(default=constants.SAMPLES_EVAL_DEFAULT, ge=1)
    stratified: bool = True
    chunk_size: int = Field(default=constants.RENDER_CHUNK_DEFAULT, ge=1)
    threads: int = Field(default=1, ge=1)
    background: List[float] = Field(
        default_factory=lambda: list(constants.BACKGROUND_DEFAULT))
    seed: int = 0

    @field_validator('background')
    @classmethod
    def validate_background(cls, value):
        if len(value) != 3 or any(not 0.0 <= channel <= 1.0 for channel in value):
            raise ValueError("background must be three values in [0, 1]")
        return value


class RunConfig(BaseModel):
    """This class groups together the data stored in a run configuration file"""
    mode: str = constants.FIELD_MODE_EXTENDED
    planes: PlaneConfig = Field(default_factory=lambda: PlaneConfig())
    decoder: DecoderConfig = Field(default_factory=lambda: DecoderConfig())
    loss_weights: LossWeights = Field(default_factory=lambda: LossWeights())
    schedule: Schedule = Field(default_factory=lambda: Schedule())
    optimizer: OptimizerSettings = Field(default_factory=lambda: OptimizerSettings())
    render: RenderSettings = Field(default_factory=lambda: RenderSettings())
    routing: bool = True
    seed: int = 0
    checkpoint_precision: str = constants.CHECKPOINT_PRECISION_DEFAULT

    @field_validator('mode', mode='before')
    @classmethod
    def validate_mode(cls, value):
        value = str(value).replace("-", "_")
        if value not in constants.FIELD_MODES:
            raise ValueError(f"unknown mode {value}")
        return value

    @field_validator('checkpoint_precision')
    @classmethod
    def validate_checkpoint_precision(cls, value, info):
        if value not in constants.CHECKPOINT_PRECISIONS:
            return cls.model_fields[info.field_name].default
        return value


def read_configuration(file_location: str = constants.CONFIG_FILE) -> Tuple[RunConfig, bool]:
    '''function is responsible for reading the contents of file and storing it as a RunConfig object'''
    config_object = RunConfig()
    success = False

    try:
        with open(file_location, 'r', encoding="utf8", errors="replace") as data:
            config_data = json.loads(data.read())

        config_object = RunConfig.model_validate(config_data)
        success = True
    except (FileNotFoundError, json.JSONDecodeError, ValidationError) as error:
        logger.error(error)

    return config_object, success


def write_configuration(config_object: RunConfig, file_location: str = constants.CONFIG_FILE) -> bool:
    '''function is responsible for writing the contents of a RunConfig object to a specified file location'''
    success = False

    try:
        with open(file_location, 'w', encoding="utf8", errors="replace") as data:
            json.dump(config_object.model_dump(), data, ensure_ascii=False, indent=4)
        success = True
    except (FileNotFoundError, TypeError, OSError) as error:
        logger.error(error)

    return success


def reset_configuration(file_location: str = constants.CONFIG_FILE) -> bool:
    '''function is responsible for resetting the configuration file to the default RunConfig'''
    return write_configuration(RunConfig(), file_location)
