"""Joint 3D reconstruction and attitude estimation of tumbling objects.

Subpackage map:
    diffcore        reverse-mode autodiff over dense numpy arrays
    geometry        rotations, camera model, ray generation
    encoders        multiresolution hash encoding, SH direction encoding
    field           density / radiance networks and checkpointing
    renderer        ray sampling, volumetric integration, tone mapping
    losses          training objectives
    pose            attitude models (independent / global uniform rotation)
    trainer         joint optimization loop
    synthdata       synthetic ground-truth generator (independent ray tracer)
    export_metrics  point cloud / mesh export and quantitative evaluation
    cli             command-line entry points
"""

__version__ = "0.1.0"
