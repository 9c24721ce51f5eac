"""Morphological thinning of binary vessel masks into one-pixel centerlines.

Each pass has two sub-iterations. Zhang-Suen neighbourhood conditions select
the candidates of a sub-iteration; candidates are then removed in raster order
while they are still simple points with at least two neighbours, so no
8-connected component can vanish (plain Zhang-Suen erases 2x2 blocks) and
line ends stay put.
"""
from typing import List, Tuple

import numpy as np

# Neighbours P2..P9 clockwise from north; bit k of a code holds P(k+2).
_OFFSETS: List[Tuple[int, int]] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def _bits(code: int) -> List[int]:
    return [(code >> k) & 1 for k in range(8)]


def _transitions(p: List[int]) -> int:
    """0 -> 1 patterns in the cyclic sequence P2, P3, ..., P9, P2."""
    return sum(1 for k in range(8) if p[k] == 0 and p[(k + 1) % 8] == 1)


def _zhang_suen(code: int, first: bool) -> bool:
    p = _bits(code)
    p2, _, p4, _, p6, _, p8, _ = p
    if not 2 <= sum(p) <= 6 or _transitions(p) != 1:
        return False
    if first:
        return p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
    return p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0


def _connectivity_number(code: int) -> int:
    """8-connectivity number; a pixel is simple when it equals 1."""
    p2, p3, p4, p5, p6, p7, p8, p9 = _bits(code)
    # Counter-clockwise from east.
    x = [p4, p3, p2, p9, p8, p7, p6, p5]
    xbar = [1 - v for v in x]
    return sum(xbar[k] - xbar[k] * xbar[(k + 1) % 8] * xbar[(k + 2) % 8] for k in (0, 2, 4, 6))


_CANDIDATE = {
    first: np.array([_zhang_suen(code, first) for code in range(256)], dtype=bool)
    for first in (True, False)
}
_REMOVABLE = np.array(
    [_connectivity_number(code) == 1 and sum(_bits(code)) >= 2 for code in range(256)],
    dtype=bool
)


def _neighbour_codes(frame: np.ndarray) -> np.ndarray:
    """Codes of the interior of a frame padded by one zero pixel."""
    height, width = frame.shape[0] - 2, frame.shape[1] - 2
    codes = np.zeros((height, width), dtype=np.uint8)
    for bit, (dy, dx) in enumerate(_OFFSETS):
        codes |= (frame[1 + dy:1 + dy + height, 1 + dx:1 + dx + width] << bit).astype(np.uint8)
    return codes


def _code_at(frame: np.ndarray, y: int, x: int) -> int:
    code = 0
    for bit, (dy, dx) in enumerate(_OFFSETS):
        code |= int(frame[y + dy, x + dx]) << bit
    return code


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Thin a binary map to convergence; the result is a {0,1} uint8 subset of ``mask``."""
    frame = np.pad(np.asarray(mask) > 0, 1).astype(np.uint8)
    while True:
        removed = 0
        for first in (True, False):
            candidates = (frame[1:-1, 1:-1] == 1) & _CANDIDATE[first][_neighbour_codes(frame)]
            for y, x in zip(*np.nonzero(candidates)):
                if _REMOVABLE[_code_at(frame, y + 1, x + 1)]:
                    frame[y + 1, x + 1] = 0
                    removed += 1
        if removed == 0:
            return frame[1:-1, 1:-1].copy()
