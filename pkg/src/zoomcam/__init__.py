"""Multi-layer gradient-weighted saliency maps for small numpy CNNs.

Per-layer maps keep the spatial structure of each intermediate activation
(pixelwise gradient times activation, positive part) and are fused across
layers after normalization and bilinear upsampling.
"""
from .aggregation import aggregate, normalize_minmax, parse_layer_policy, select_layers, upsample_bilinear
from .evaluation import LocRecord, SegRecord, iou_box, iou_seg, miou, topk_localization_error
from .graph import (
    ActivationTape,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    GraphError,
    Linear,
    MaxPool,
    ModelGraph,
    ReLU,
    backward_to_layer,
    finite_difference,
    forward,
    grad_check,
)
from .io import FormatError, load_model, load_tensor, save_model, save_tensor
from .labeling import (
    BBox,
    LabelingError,
    connected_components,
    fuse_multilabel,
    largest_component_bbox,
    threshold_relative,
)
from .pipeline import explain, localize, pseudo_segment
from .saliency import (
    SaliencyError,
    SaliencyMap,
    cam,
    contribution_map,
    conv_block_outputs,
    grad_cam,
    grad_cam_layer,
    weight_mask,
    zoom_cam_layer,
)

__version__ = "0.1.0"
