"""Voxel scene representation, rendering and fitting."""

from .grid import CHANNELS, VALUE_CHANNELS, VoxelField, sample_field, trilinear
from .render import (Pinhole, PoseOffset, RayOutputs, RayResult, RenderResult, backprop_rays,
                     render_camera, render_ray, render_rays, render_scan, scan_rays)
from .fit import FitConfig, FitDiverged, FitResult, Observation, evaluate_loss, fit
from .gradcheck import GradCheckReport, grad_check
