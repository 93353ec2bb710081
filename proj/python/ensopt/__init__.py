"""Hybrid restoration architecture search: Python surface over the native core."""

from ._ens_native import (
    decode,
    ehvi,
    enumerate_search_space,
    generate_pairs,
    hypervolume,
    knee_point,
    pareto_front,
    penalty,
    psnr,
    run_search,
    scrambled_halton,
    search_space_size,
    selective_scan,
    ssim,
    stage_specs,
)

__all__ = [
    "decode",
    "ehvi",
    "enumerate_search_space",
    "generate_pairs",
    "hypervolume",
    "knee_point",
    "pareto_front",
    "penalty",
    "psnr",
    "run_search",
    "scrambled_halton",
    "search_space_size",
    "selective_scan",
    "ssim",
    "stage_specs",
]
