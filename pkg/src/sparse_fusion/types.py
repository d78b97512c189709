"""Types for sparse-fusion."""

import os
import typing as t
from logging import Logger

import typing_extensions as tx

from .config import PipelineConfig
from .lidar_query import Scorer, Voter
from .refine import FinalPredictor, ReferencePredictor
from .scene_synth import ClassSpec


class SparseFusionParams(tx.TypedDict, total=False):
    """SparseFusion parameters."""

    config: t.Optional[PipelineConfig]
    classes: t.Optional[t.Sequence[ClassSpec]]
    scorer: t.Optional[Scorer]
    voter: t.Optional[Voter]
    reference_predictor: t.Optional[ReferencePredictor]
    final_predictor: t.Optional[FinalPredictor]
    log_file: t.Optional[t.Union[str, "os.PathLike[t.Any]"]]
    quiet: t.Optional[bool]


class SparseFusionAttributes:
    """SparseFusion attributes."""

    _classes: t.Tuple[ClassSpec, ...]
    _config: PipelineConfig
    _final_predictor: FinalPredictor
    _logger: Logger
    _quiet: bool
    _reference_predictor: t.Optional[ReferencePredictor]
    _scorer: Scorer
    _voter: Voter
