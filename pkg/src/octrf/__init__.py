"""octrf: sparse octree radiance fields with signal-guided calibration."""

import importlib

from . import errors
from .octree import (
    INVALID,
    LeafPayload,
    SparseOctree,
    TreeStats,
    build_dense,
)

__version__ = "0.1.0"

# Rendering and IO modules pull in compiled kernels, so they are loaded on
# first attribute access; the CLI pins its thread count before that happens.
_LAZY_EXPORTS = {
    "decode_color": "sh",
    "eval_sh_basis": "sh",
    "eval_sh_basis_many": "sh",
    "sh_from_rgb": "sh",
    "EPS_T": "render",
    "GradBuffer": "render",
    "Ray": "render",
    "RaySegmentList": "render",
    "RenderOutput": "render",
    "render_and_backprop": "render",
    "render_image": "render",
    "render_rays": "render",
    "traverse": "render",
    "SignalBuffer": "signals",
    "SignalTarget": "signals",
    "dump_signals": "signals",
    "load_signals": "signals",
    "signal_value": "signals",
    "signal_values": "signals",
    "CalibrationConfig": "calibrate",
    "CalibrationReport": "calibrate",
    "calibrate": "calibrate",
    "prune": "calibrate",
    "sample": "calibrate",
    "select_prune": "calibrate",
    "select_sample": "calibrate",
    "RmsPropState": "optim",
    "TrainConfig": "optim",
    "heldout_psnr": "optim",
    "rmsprop_step": "optim",
    "train": "optim",
    "train_epoch": "optim",
    "write_history": "optim",
    "MetricReport": "metrics",
    "psnr": "metrics",
    "ssim": "metrics",
    "Camera": "scene_io",
    "RayDataset": "scene_io",
    "ToySceneSpec": "scene_io",
    "compress_tree": "scene_io",
    "generate_toy_scene": "scene_io",
    "load_nerf_synthetic": "scene_io",
    "load_tree": "scene_io",
    "orbit_cameras": "scene_io",
    "save_tree": "scene_io",
    "toy_dataset": "scene_io",
}

__all__ = sorted([
    "INVALID",
    "LeafPayload",
    "SparseOctree",
    "TreeStats",
    "build_dense",
    "errors",
    "__version__",
    *_LAZY_EXPORTS,
])


def __getattr__(name: str):
    module_name = _LAZY_EXPORTS.get(name)
    if module_name is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    module = importlib.import_module(f".{module_name}", __name__)
    value = getattr(module, name)
    globals()[name] = value
    return value


def __dir__():
    return __all__
