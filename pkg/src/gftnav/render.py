"""Tile rendering for the egocentric view: floor, obstacle texture and procedural sprites."""
from __future__ import annotations

import colorsys
from functools import lru_cache

import numpy as np

TILE = 16
FLOOR = np.array([214, 206, 184], dtype=np.uint8)
GOLDEN = 0.6180339887498949


def _obstacle_tile() -> np.ndarray:
    """Running-bond brick texture."""
    tile = np.empty((TILE, TILE, 3), dtype=np.uint8)
    tile[:] = (120, 72, 48)
    mortar = (70, 60, 55)
    tile[::4, :] = mortar
    for band in range(TILE // 4):
        off = 0 if band % 2 == 0 else TILE // 4
        tile[4 * band:4 * band + 4, off::TILE // 2] = mortar
    return tile


OBSTACLE_TILE = _obstacle_tile()


def class_hue(class_id: int) -> float:
    return (class_id * GOLDEN) % 1.0


def _rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.round(np.array(colorsys.hsv_to_rgb(h, s, v)) * 255).astype(np.uint8)


@lru_cache(maxsize=None)
def base_sprite(class_id: int) -> np.ndarray:
    """Upright, full-size 16x16 RGB sprite for one class.

    A 2-pixel border in the class hue surrounds a 12x12 core of 4x4 blocks
    whose light/dark layout is seeded by the class id.  A pale bar along the
    left half of the top border breaks rotational symmetry.
    """
    h = class_hue(class_id)
    img = np.empty((TILE, TILE, 3), dtype=np.uint8)
    img[:] = _rgb(h, 0.85, 0.9)
    bits = np.random.default_rng([7919, class_id]).integers(0, 2, size=(3, 3))
    light, dark = _rgb(h, 0.35, 1.0), _rgb(h, 0.9, 0.45)
    for i in range(3):
        for j in range(3):
            img[2 + 4 * i:6 + 4 * i, 2 + 4 * j:6 + 4 * j] = light if bits[i, j] else dark
    img[0:2, 0:TILE // 2] = (250, 250, 250)
    return img


def _check_class(class_id: int, n_classes: int) -> None:
    if not 0 <= class_id < n_classes:
        raise KeyError(f"unknown object class {class_id} (have {n_classes})")


@lru_cache(maxsize=8192)
def _sprite_cached(class_id: int, yaw: float, scale: float) -> np.ndarray:
    src = base_sprite(class_id)
    centers = np.arange(TILE) + 0.5 - TILE / 2
    y, x = np.meshgrid(centers, centers, indexing="ij")
    theta = np.deg2rad(yaw)
    c, s = np.cos(theta), np.sin(theta)
    # inverse map: undo the scaling then rotate back by -yaw
    sx = (c * x + s * y) / scale + TILE / 2
    sy = (-s * x + c * y) / scale + TILE / 2
    ix, iy = np.floor(sx).astype(int), np.floor(sy).astype(int)
    inside = (ix >= 0) & (ix < TILE) & (iy >= 0) & (iy < TILE)
    out = np.zeros((TILE, TILE, 4), dtype=np.uint8)
    out[inside, :3] = src[iy[inside], ix[inside]]
    out[inside, 3] = 255
    out.setflags(write=False)
    return out


def sprite_for_class(class_id: int, yaw: float = 0.0, scale: float = 1.0, n_classes: int = 16) -> np.ndarray:
    """16x16 RGBA tile: the class sprite rotated by ``yaw`` degrees and scaled about its centre."""
    _check_class(class_id, n_classes)
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"sprite scale must lie in (0, 1], got {scale}")
    return _sprite_cached(int(class_id), float(yaw) % 360.0, float(scale))


def composite(sprite: np.ndarray, background: np.ndarray = FLOOR) -> np.ndarray:
    tile = np.empty((TILE, TILE, 3), dtype=np.uint8)
    tile[:] = background
    opaque = sprite[:, :, 3] > 0
    tile[opaque] = sprite[opaque, :3]
    return tile


def render_window(cells, n_classes: int) -> np.ndarray:
    """Assemble a 5x5 grid of cell descriptors into an 80x80 RGB image.

    Each descriptor is None (invisible), ("floor",), ("obstacle",) or
    ("object", class_id, yaw, scale).
    """
    rows, cols = len(cells), len(cells[0])
    image = np.zeros((rows * TILE, cols * TILE, 3), dtype=np.uint8)
    for i, row in enumerate(cells):
        for j, cell in enumerate(row):
            if cell is None:
                continue
            block = image[i * TILE:(i + 1) * TILE, j * TILE:(j + 1) * TILE]
            if cell[0] == "floor":
                block[:] = FLOOR
            elif cell[0] == "obstacle":
                block[:] = OBSTACLE_TILE
            else:
                _, cls, yaw, scale = cell
                block[:] = composite(sprite_for_class(cls, yaw, scale, n_classes))
    return image
