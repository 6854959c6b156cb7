"""Brain extraction for 3D MR volumes.

A compact numpy/scipy implementation of a multi-scale V-Net variant with
hand-written backpropagation, dense CRF refinement of its soft output, and
connected-component cleanup, plus the preprocessing and evaluation pieces
needed to run the whole chain from NIfTI in to NIfTI out.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .volume import (  # noqa: F401
    LabelMask,
    ProbMap,
    Volume,
    mask_to_native,
    pad_to,
    reorient_ras,
    resample_isotropic,
    resize_half,
)

from .crf import CrfConfig, refine  # noqa: F401
from .evnet import EvNetConfig  # noqa: F401
from .pipeline import (  # noqa: F401
    GridConfig,
    PipelineConfig,
    TrainConfig,
    evaluate,
    extract,
    train,
)
from .synth import make_phantom, synth_dataset  # noqa: F401
