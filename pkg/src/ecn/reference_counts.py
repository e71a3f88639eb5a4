"""Published trainable-parameter counts used as exact audit oracles.

Transcribed once from the original ECN experiments.  Keys are
``(block, init_channels, scale)``; every configuration uses a 32x32 input,
a 4 px stopping threshold, three recurrent iterations and the default growth.
"""
from __future__ import annotations

from typing import Dict, Iterator, Tuple

__all__ = ["BLOCK_SWEEP", "ECN6_ROWS", "oracle_cells"]

_SCALES = ("1/2", "3/4", "7/8")

# block-comparison sweep, rows = (init, scale), columns = blocks 1..6
_SWEEP_10 = {
    (16, "1/2"): (47482, 114586, 47866, 115546, 9066, 19514),
    (16, "3/4"): (97258, 212410, 98122, 214330, 17090, 35370),
    (16, "7/8"): (195082, 407194, 196906, 411034, 32946, 66986),
    (32, "1/2"): (187114, 454954, 187882, 456874, 28362, 64106),
    (32, "3/4"): (385738, 845290, 387466, 849130, 55418, 117450),
    (32, "7/8"): (776074, 1622506, 779722, 1630186, 108762, 223754),
    (64, "1/2"): (742858, 1813066, 744394, 1816906, 97674, 228554),
    (64, "3/4"): (1536394, 3372490, 1539850, 3380170, 195818, 421770),
    (64, "7/8"): (3095818, 6477514, 3103114, 6492874, 389034, 806666),
}
_SWEEP_100 = {
    (16, "1/2"): (53332, 120436, 53716, 121396, 14916, 25364),
    (16, "3/4"): (103108, 218260, 103972, 220180, 22940, 41220),
    (16, "7/8"): (200932, 413044, 202756, 416884, 38796, 72836),
    (32, "1/2"): (198724, 466564, 199492, 468484, 39972, 75716),
    (32, "3/4"): (397348, 856900, 399076, 860740, 67028, 129060),
    (32, "7/8"): (787684, 1634116, 791332, 1641796, 120372, 235364),
    (64, "1/2"): (765988, 1836196, 767524, 1840036, 120804, 251684),
    (64, "3/4"): (1559524, 3395620, 1562980, 3403300, 218948, 444900),
    (64, "7/8"): (3118948, 6500644, 3126244, 6516004, 412164, 829796),
}

BLOCK_SWEEP: Dict[int, Dict[Tuple[int, int, str], int]] = {
    classes: {(block, init, scale): row[block - 1]
              for (init, scale), row in table.items() for block in range(1, 7)}
    for classes, table in ((10, _SWEEP_10), (100, _SWEEP_100))
}

# six-layer (scale 3/4) headline networks
ECN6_ROWS: Dict[int, Dict[Tuple[int, int, str], int]] = {
    10: {(4, 16, "3/4"): 214330, (4, 32, "3/4"): 849130, (4, 64, "3/4"): 3380170,
         (4, 128, "3/4"): 13488010, (6, 64, "3/4"): 421770},
    100: {(4, 16, "3/4"): 220180, (4, 32, "3/4"): 860740, (4, 64, "3/4"): 3403300,
          (4, 128, "3/4"): 13534180, (6, 64, "3/4"): 444900},
}


def oracle_cells(table: str = "all") -> Iterator[Tuple[str, int, int, int, str, int]]:
    """Yield ``(table, classes, block, init, scale, expected)`` for the selected tables.

    ``table`` is one of ``"sweep10"``, ``"sweep100"``, ``"ecn6"`` or ``"all"``.
    """
    selected = {"sweep10": [("sweep10", BLOCK_SWEEP, 10)],
                "sweep100": [("sweep100", BLOCK_SWEEP, 100)],
                "ecn6": [("ecn6", ECN6_ROWS, 10), ("ecn6", ECN6_ROWS, 100)]}
    if table == "all":
        groups = selected["sweep10"] + selected["sweep100"] + selected["ecn6"]
    else:
        groups = selected[table]
    for name, source, classes in groups:
        for (block, init, scale), expected in source[classes].items():
            yield name, classes, block, init, scale, expected
