"""Temporal, spatial, and composite image rendering for activity segments.

Pixels hold intensity (darkness) in [0,1] on a zero background. The
temporal image is sensor-row x event-order with modality color channels;
the spatial image draws floorplan nodes and transition edges in
grayscale; the composite places the (nearest-neighbor resized) temporal
image left of the spatial image.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DataError
from .ingest import CANVAS, Modality, SensorRegistry
from .preprocess import ProcessedSegment

SPATIAL_SIZE = 256
NODE_RADIUS = 4
ACTIVATION_MIN_SIGNAL = 0.5  # continuous sensors count as active above this

# channel intensities per modality: motion=blue, door=yellow, temperature=red
_MODALITY_RGB = {
    Modality.MOTION: (0.0, 0.0, 1.0),
    Modality.DOOR: (1.0, 1.0, 0.0),
    Modality.TEMPERATURE: (1.0, 0.0, 0.0),
    Modality.OTHER: (1.0, 1.0, 1.0),
}


def render_temporal_image(segment: ProcessedSegment, registry: SensorRegistry,
                          bins_per_day: int) -> np.ndarray:
    """(3, S, L) raster; pixel intensity = signal * (tau+1)/bins_per_day."""
    n_sensors = len(registry)
    pixels = np.zeros((3, n_sensors, segment.length), dtype=np.float32)
    for col, (event, real) in enumerate(zip(segment.events, segment.mask)):
        if not real:
            continue
        if event.sensor_index >= n_sensors:
            raise DataError(f"sensor index {event.sensor_index} outside registry of {n_sensors}")
        value = event.signal * (event.tau + 1) / bins_per_day
        rgb = _MODALITY_RGB[registry.by_index(event.sensor_index).modality]
        for channel in range(3):
            pixels[channel, event.sensor_index, col] = rgb[channel] * value
    return np.clip(pixels, 0.0, 1.0)


def _draw_line_aa(canvas: np.ndarray, x0: float, y0: float, x1: float, y1: float,
                  value: float) -> None:
    """Xiaolin Wu anti-aliased line; combines by max so crossings keep the darker edge."""
    h, w = canvas.shape

    def plot(x: int, y: int, coverage: float):
        if 0 <= x < w and 0 <= y < h:
            canvas[y, x] = max(canvas[y, x], value * coverage)

    steep = abs(y1 - y0) > abs(x1 - x0)
    if steep:
        x0, y0, x1, y1 = y0, x0, y1, x1
    if x0 > x1:
        x0, x1 = x1, x0
        y0, y1 = y1, y0
    dx = x1 - x0
    gradient = (y1 - y0) / dx if dx > 1e-12 else 0.0

    def endpoint(x, y):
        xe = round(x)
        ye = y + gradient * (xe - x)
        xgap = 1.0 - (x + 0.5 - math.floor(x + 0.5))
        frac = ye - math.floor(ye)
        px, py = int(xe), int(math.floor(ye))
        if steep:
            plot(py, px, (1 - frac) * xgap)
            plot(py + 1, px, frac * xgap)
        else:
            plot(px, py, (1 - frac) * xgap)
            plot(px, py + 1, frac * xgap)
        return xe, ye

    xe0, ye0 = endpoint(x0, y0)
    intery = ye0 + gradient
    xe1, _ = endpoint(x1, y1)
    for x in range(int(xe0) + 1, int(xe1)):
        frac = intery - math.floor(intery)
        y = int(math.floor(intery))
        if steep:
            plot(y, x, 1 - frac)
            plot(y + 1, x, frac)
        else:
            plot(x, y, 1 - frac)
            plot(x, y + 1, frac)
        intery += gradient


def _draw_disc(canvas: np.ndarray, cx: float, cy: float, radius: int, value: float) -> None:
    """Filled disc; node pixels override whatever is underneath (max among nodes)."""
    h, w = canvas.shape
    x_lo, x_hi = max(0, int(cx) - radius), min(w - 1, int(cx) + radius)
    y_lo, y_hi = max(0, int(cy) - radius), min(h - 1, int(cy) + radius)
    for y in range(y_lo, y_hi + 1):
        for x in range(x_lo, x_hi + 1):
            if (x - cx) ** 2 + (y - cy) ** 2 <= radius * radius:
                canvas[y, x] = value


def render_spatial_image(segment: ProcessedSegment, registry: SensorRegistry) -> np.ndarray:
    """(3, 256, 256) floorplan raster of activation nodes and transition edges.

    Only activation-state events contribute; OFF/CLOSE/ABSENT (signal below
    the activation threshold) leave no trace.
    """
    n_sensors = len(registry)
    active = [e for e, real in zip(segment.events, segment.mask)
              if real and e.sensor_index < n_sensors and e.signal >= ACTIVATION_MIN_SIGNAL]

    counts: dict[int, int] = {}
    transitions: dict[tuple[int, int], int] = {}
    for event in active:
        counts[event.sensor_index] = counts.get(event.sensor_index, 0) + 1
    for prev, cur in zip(active, active[1:]):
        if prev.sensor_index != cur.sensor_index:
            key = (min(prev.sensor_index, cur.sensor_index),
                   max(prev.sensor_index, cur.sensor_index))
            transitions[key] = transitions.get(key, 0) + 1

    canvas = np.zeros((SPATIAL_SIZE, SPATIAL_SIZE), dtype=np.float32)
    scale = SPATIAL_SIZE / CANVAS
    if transitions:
        peak_t = max(transitions.values())
        for (j, k), count in sorted(transitions.items()):
            uj, vj = registry.by_index(j).coord
            uk, vk = registry.by_index(k).coord
            _draw_line_aa(canvas, uj * scale, vj * scale, uk * scale, vk * scale,
                          count / peak_t)
    if counts:
        peak_f = max(counts.values())
        node_layer = np.zeros_like(canvas)
        for index, count in sorted(counts.items()):
            u, v = registry.by_index(index).coord
            _draw_disc(node_layer, u * scale, v * scale, NODE_RADIUS, count / peak_f)
        canvas = np.where(node_layer > 0, node_layer, canvas)

    canvas = np.clip(canvas, 0.0, 1.0)
    return np.repeat(canvas[None, :, :], 3, axis=0)


def _resize_nearest(image: np.ndarray, height: int, width: int) -> np.ndarray:
    _, h, w = image.shape
    rows = np.floor(np.arange(height) * h / height).astype(int)
    cols = np.floor(np.arange(width) * w / width).astype(int)
    return image[:, rows][:, :, cols]


def compose_image(temporal: np.ndarray, spatial: np.ndarray) -> np.ndarray:
    """(3, 256, 512): resized temporal image left, spatial image right."""
    left = _resize_nearest(temporal, SPATIAL_SIZE, SPATIAL_SIZE).astype(np.float32)
    if spatial.shape != (3, SPATIAL_SIZE, SPATIAL_SIZE):
        raise DataError(f"spatial image has shape {spatial.shape}")
    return np.concatenate([left, spatial.astype(np.float32)], axis=2)


def render_composite(segment: ProcessedSegment, registry: SensorRegistry,
                     bins_per_day: int) -> np.ndarray:
    return compose_image(render_temporal_image(segment, registry, bins_per_day),
                         render_spatial_image(segment, registry))


def save_png(image: np.ndarray, path) -> None:
    """8-bit PNG export, value = round(255 * intensity)."""
    from PIL import Image

    array = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(array.transpose(1, 2, 0), mode="RGB").save(path)
