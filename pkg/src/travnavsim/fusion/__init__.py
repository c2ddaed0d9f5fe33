"""Lift-splat voxel fusion and the stand-in traversability model."""
