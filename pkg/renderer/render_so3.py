#!/usr/bin/env python3
"""Render SO(3) visualization dumps as Mollweide scatter figures.

Input is JSONL with one record per rotation: {"dir": unit 3-vector,
"tilt": radians, "weight": nonnegative}.  The direction lands on a
Mollweide map, tilt picks the color from a cyclic palette, and point
size grows like log(1 + weight) so sharp density peaks stay visible.
"""

from __future__ import annotations

import argparse
import json
import sys

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

UNIT_TOL = 1e-6
HIST_BINS = 40
PEAK_FLOOR = 0.05


def _valid(rec):
    if not isinstance(rec, dict):
        return "not an object"
    try:
        d = np.asarray(rec["dir"], dtype=np.float64)
        tilt = float(rec["tilt"])
        weight = float(rec["weight"])
    except (KeyError, TypeError, ValueError) as e:
        return f"bad fields: {e}"
    if d.shape != (3,):
        return "dir must be a 3-vector"
    if abs(np.linalg.norm(d) - 1.0) > UNIT_TOL:
        return "dir is not unit length"
    if not np.isfinite(tilt):
        return "tilt is not finite"
    if not weight >= 0.0:
        return "weight must be nonnegative"
    return None


def load_records(path):
    """Parse a dump; returns (dirs, tilts, weights, n_skipped).

    Malformed records are skipped with a warning on stderr.
    """
    dirs, tilts, weights = [], [], []
    skipped = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                problem = _valid(rec)
            except json.JSONDecodeError as e:
                problem = f"invalid JSON: {e.msg}"
            if problem is not None:
                print(f"warning: {path}:{lineno}: skipping record "
                      f"({problem})", file=sys.stderr)
                skipped += 1
                continue
            dirs.append(rec["dir"])
            tilts.append(float(rec["tilt"]))
            weights.append(float(rec["weight"]))
    return (np.array(dirs, dtype=np.float64).reshape(-1, 3),
            np.array(tilts), np.array(weights), skipped)


def subsample(n, max_points):
    """Deterministic index subset: evenly strided over the dump order."""
    if max_points is None or n <= max_points:
        return np.arange(n)
    return np.round(np.linspace(0, n - 1, max_points)).astype(int)


def lonlat(dirs):
    lon = np.arctan2(dirs[:, 1], dirs[:, 0])
    lat = np.arcsin(np.clip(dirs[:, 2], -1.0, 1.0))
    return lon, lat


def mollweide_xy(dirs):
    """Equal-area map coordinates, x in [-2sqrt2, 2sqrt2], y in [-sqrt2, sqrt2]."""
    lon, lat = lonlat(dirs)
    # Newton for 2 theta + sin 2 theta = pi sin(lat); the derivative
    # vanishes at the poles, where theta = lat exactly
    pole = np.abs(lat) > np.pi / 2.0 - 1e-9
    theta = lat.copy()
    for _ in range(50):
        denom = np.where(pole, 1.0, 2.0 + 2.0 * np.cos(2.0 * theta))
        step = (2.0 * theta + np.sin(2.0 * theta)
                - np.pi * np.sin(lat)) / denom
        theta -= np.where(pole, 0.0, step)
    return (2.0 * np.sqrt(2.0) / np.pi * lon * np.cos(theta),
            np.sqrt(2.0) * np.sin(theta))


def histogram_peak_count(dirs, tilts, bins=HIST_BINS, floor=PEAK_FLOOR):
    """Local maxima in a 2D histogram of projected position x tilt.

    The projection x + 3y is a linear functional of the Mollweide map
    that separates the axis directions; pairing it with tilt splits
    clusters that share a direction.  A 3x3 box smooth removes in-bin
    counting noise before strict-neighborhood maxima are counted.
    """
    x, y = mollweide_xy(dirs)
    hist, _, _ = np.histogram2d(x + 3.0 * y, tilts, bins=bins)
    padded = np.pad(hist, 1)
    sm = np.zeros_like(hist)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            sm += padded[1 + di:hist.shape[0] + 1 + di,
                         1 + dj:hist.shape[1] + 1 + dj]
    sm /= 9.0
    core = sm[1:-1, 1:-1]
    neighbors = np.stack([
        sm[1 + di:sm.shape[0] - 1 + di, 1 + dj:sm.shape[1] - 1 + dj]
        for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)])
    peaks = (core > neighbors.max(axis=0)) & (core >= floor * sm.max())
    return int(peaks.sum())


def render(in_path, out_path, title=None, max_points=None):
    """Draw the dump to a raster image; returns the point count drawn.

    Raises RuntimeError when every record in a nonempty dump is bad.
    """
    dirs, tilts, weights, skipped = load_records(in_path)
    if len(dirs) == 0 and skipped > 0:
        raise RuntimeError(f"{in_path}: all {skipped} records malformed")

    idx = subsample(len(dirs), max_points)
    dirs, tilts, weights = dirs[idx], tilts[idx], weights[idx]

    fig = plt.figure(figsize=(9, 5.2))
    ax = fig.add_subplot(projection="mollweide")
    ax.grid(True, alpha=0.3)
    if len(dirs) > 0:
        lon, lat = lonlat(dirs)
        wmax = weights.max()
        if wmax > 0:
            size = 6.0 + 54.0 * np.log1p(weights) / np.log1p(wmax)
        else:
            size = np.full(len(weights), 20.0)
        sc = ax.scatter(lon, lat, c=tilts, s=size, cmap="twilight",
                        vmin=-np.pi, vmax=np.pi, linewidths=0, alpha=0.8)
        cb = fig.colorbar(sc, ax=ax, shrink=0.7, pad=0.02)
        cb.set_label("tilt (rad)")
    if title:
        ax.set_title(title)
    fig.savefig(out_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return len(dirs)


def main(argv=None):
    p = argparse.ArgumentParser(
        description="Mollweide scatter of an SO(3) dir/tilt/weight dump")
    p.add_argument("--in", dest="in_path", required=True,
                   help="input JSONL dump")
    p.add_argument("--out", dest="out_path", required=True,
                   help="output image file")
    p.add_argument("--title", default=None)
    p.add_argument("--max-points", type=int, default=None,
                   help="deterministically subsample to at most N points")
    args = p.parse_args(argv)
    try:
        n = render(args.in_path, args.out_path, title=args.title,
                   max_points=args.max_points)
    except (OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"rendered {n} points to {args.out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
