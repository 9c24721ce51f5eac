"""Utility functions for deriving image ids from file names.

Dataset files carry their id in front of role suffixes, e.g. ``01_test.tif``,
``01_manual1.gif``, ``21_training_mask.gif`` or ``im0001.ah.ppm``.
"""

import re
from pathlib import Path

_NUMBERED = re.compile(r"^[A-Za-z]*\d+")


def base_stem(path: Path) -> str:
    """
    File name up to its first dot.

    Example:
        >>> base_stem(Path("im0001.ah.ppm"))
        'im0001'
    """
    return Path(path).name.split(".")[0]


def image_id(path: Path) -> str:
    """
    Leading numbered token of the file name, or the whole base stem.

    Example:
        >>> image_id(Path("21_training_mask.gif"))
        '21'
        >>> image_id(Path("vessels_a.png"))
        'vessels_a'
    """
    stem = base_stem(path)
    match = _NUMBERED.match(stem)
    return match.group(0) if match else stem
