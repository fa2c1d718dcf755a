"""Organ label convention and the per-organ Hounsfield window table.

Label convention (configurable in experiment configs, this is the default):
0 background, 1 left lung, 2 right lung, 3 heart, 4 esophagus, 5 trachea,
6 spinal cord. Both lungs share one window.
"""

from __future__ import annotations

from .preprocess import WindowSpec

BACKGROUND = 0
LEFT_LUNG = 1
RIGHT_LUNG = 2
HEART = 3
ESOPHAGUS = 4
TRACHEA = 5
SPINAL_CORD = 6

NUM_ORGANS = 6

ORGAN_NAMES = {
    LEFT_LUNG: "left_lung",
    RIGHT_LUNG: "right_lung",
    HEART: "heart",
    ESOPHAGUS: "esophagus",
    TRACHEA: "trachea",
    SPINAL_CORD: "spinal_cord",
}

ORGAN_IDS = {name: organ for organ, name in ORGAN_NAMES.items()}

# Width/level pairs in HU.
ORGAN_WINDOWS = {
    LEFT_LUNG: WindowSpec(width=1500, level=-600),
    RIGHT_LUNG: WindowSpec(width=1500, level=-600),
    HEART: WindowSpec(width=350, level=50),
    ESOPHAGUS: WindowSpec(width=300, level=80),
    TRACHEA: WindowSpec(width=1200, level=-440),
    SPINAL_CORD: WindowSpec(width=600, level=0),
}


def organ_name(organ: int) -> str:
    if organ not in ORGAN_NAMES:
        raise ValueError(f"unknown organ label {organ}")
    return ORGAN_NAMES[organ]


def organ_id(name: str) -> int:
    if name not in ORGAN_IDS:
        raise ValueError(f"unknown organ name {name!r}")
    return ORGAN_IDS[name]
