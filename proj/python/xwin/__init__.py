"""Cross-view world-model pretraining on synthetic chest radiographs."""

from ._xwin import (
    Config,
    DomainStyle,
    Error,
    FormatError,
    Geometry,
    InvalidArgument,
    Trainer,
    affinity,
    affinity_loss,
    auroc,
    codebook_usage,
    cylinder,
    fdk,
    infonce,
    nearest_indices,
    phantom,
    pseudo_real,
    psnr,
    ramp_filter,
    render_drr,
    softmax_rows,
    ssim,
    to_display,
    volume_metrics,
)

__all__ = [name for name in dir() if not name.startswith("_")]
