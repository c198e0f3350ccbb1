"""acdk: corruption-robust relative depth training and evaluation, desk scale.

A self-contained toolkit: synthetic scenes with analytic ground truth, a
seven-kind image perturbation synthesizer with severity levels, scale-shift
invariant losses with exact gradients, a pairwise spatial-distance
constraint, a small hand-backpropagated disparity network with a frozen
teacher, and AbsRel/delta1/ordinal evaluation with robustness sweeps.
"""

from .imagecore import (DisparityMap, FileFormatError, ImageBuffer, Rng,
                        load_image, load_pfm, save_image, save_pfm)
from .losses import (DegenerateScaleError, LossValue, NormStats,
                     affine_invariant_loss, consistency_loss, kd_loss,
                     norm_stats, total_loss)
from .sdr import (PatchGrid, SdrConfig, depth_relation, patchify,
                  position_relation, sdr_loss, sdr_row_map, spatial_distance)

__version__ = "0.1.0"
