"""Image-grid assembly for traversal visualizations (lossless PNG output)."""

from __future__ import annotations

import numpy as np

__all__ = ["assemble_grid", "save_grid_png", "GRID_SEPARATOR"]

GRID_SEPARATOR = 2  # pixels between tiles


def assemble_grid(images, value_range=(0.0, 1.0), separator=GRID_SEPARATOR):
    """Tile images [rows, cols, C, H, W] into one uint8 array.

    Pixel values are mapped affinely from `value_range` to 0..255; separator
    pixels are white. Returns [H', W'] for grayscale or [H', W', 3] for color
    with H' = rows*H + (rows-1)*separator (and likewise for W').
    """
    images = np.asarray(images)
    if images.ndim != 5:
        raise ValueError(f"expected [rows, cols, C, H, W], got shape {images.shape}")
    rows, cols, channels, height, width = images.shape
    lo, hi = value_range
    scaled = np.clip((images - lo) / (hi - lo), 0.0, 1.0)
    tiles = np.round(scaled * 255).astype(np.uint8)

    grid_h = rows * height + (rows - 1) * separator
    grid_w = cols * width + (cols - 1) * separator
    grid = np.full((channels, grid_h, grid_w), 255, dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            top = r * (height + separator)
            left = c * (width + separator)
            grid[:, top:top + height, left:left + width] = tiles[r, c]
    if channels == 1:
        return grid[0]
    return grid.transpose(1, 2, 0)


def save_grid_png(path, images, value_range=(0.0, 1.0), separator=GRID_SEPARATOR):
    from PIL import Image

    grid = assemble_grid(images, value_range=value_range, separator=separator)
    Image.fromarray(grid).save(path, format="PNG")
    return grid.shape
