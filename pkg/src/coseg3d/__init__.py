"""coseg3d: adaptive K-way co-segmentation of point-cloud sets.

Two stages: an offline part-denoising prior trained on corrupted part masks,
and a per-set runtime optimization of a point classifier against a rank-based
group consistency energy plus a gap-penalizing completeness term.
"""

__version__ = "0.1.0"
