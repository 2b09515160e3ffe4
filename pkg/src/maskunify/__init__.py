"""Convert referring-segmentation probability maps into outputs for other vision tasks.

Also ships the triplet curation engine and the evaluation metrics used to
score every task.
"""

from .mask_core import (
    BBox,
    BinaryMask,
    InstanceMask,
    ProbMap,
    RleError,
    ShapeMismatchError,
    binarize,
    connected_components,
    mask_iou,
    mask_to_bbox,
    rle_decode,
    rle_encode,
)
from .task_convert import (
    ConversionConfig,
    Detection,
    SemSegMap,
    aggregate_confidence,
    count_objects,
    detect_objects,
    generate_caption,
    ground_expression,
    multilabel_classify,
    scene_classify,
    semantic_segmentation,
)

__version__ = "0.1.0"
