"""Python surface of the groundiff C++ core.

Everything heavy lives in the compiled extension; this package only
re-exports it. Box coordinates are (cx, cy, w, h) in [0, 1] throughout.
"""

from groundiff._core import (  # noqa: F401
    DiffusionSchedule,
    Denoiser,
    LossRow,
    RunConfig,
    Sample,
    SceneConfig,
    build_cosine_schedule,
    clamp_box,
    cxcywh_to_xyxy,
    ddim_step,
    desk_default,
    evaluate,
    fit,
    gen_dataset,
    giou,
    hungarian,
    infer_scene,
    iou,
    load_dataset,
    load_model,
    make_timestep_plan,
    parse_config,
    q_sample,
    save_dataset,
    xyxy_to_cxcywh,
)

__all__ = [
    "DiffusionSchedule",
    "Denoiser",
    "LossRow",
    "RunConfig",
    "Sample",
    "SceneConfig",
    "build_cosine_schedule",
    "clamp_box",
    "cxcywh_to_xyxy",
    "ddim_step",
    "desk_default",
    "evaluate",
    "fit",
    "gen_dataset",
    "giou",
    "hungarian",
    "infer_scene",
    "iou",
    "load_dataset",
    "load_model",
    "make_timestep_plan",
    "parse_config",
    "q_sample",
    "save_dataset",
    "xyxy_to_cxcywh",
]
