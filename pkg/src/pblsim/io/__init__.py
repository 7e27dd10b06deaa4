"""File formats and the analytic scene synthesizer."""

from .formats import (load_cloud_npz, load_range_npz, read_cloud, save_npz, save_range_npz, write_cloud, load_field, load_params, read_incidence_png, read_intrinsics,
                      read_kitti_bin, read_mask_png, read_normals_png, read_poses, read_range_png,
                      save_cloud_npz, save_field, save_params, write_incidence_png, write_intrinsics,
                      write_kitti_bin, write_mask_png, write_normals_png, write_poses, write_range_png)
from .synth import (Noise, Primitive, SceneSpec, SynthScan, courtyard_primitives, corridor_primitives,
                    hdl64_like, planted_params, raw_scan_order, street_primitives, street_scene,
                    synthesize_scan, voxelize)
