"""Text and binary-PPM renderings of merge groups over the patch grid."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from .merging import relabel_groups


def palette(n: int) -> np.ndarray:
    """``n`` distinguishable RGB colours, golden-ratio hue stepping."""
    cols = []
    for i in range(n):
        h = (i * 0.618033988749895) % 1.0
        s = 0.55 + 0.35 * ((i // 7) % 2)
        v = 0.95 - 0.25 * ((i // 3) % 2)
        cols.append([round(255 * c) for c in colorsys.hsv_to_rgb(h, s, v)])
    return np.array(cols, dtype=np.uint8).reshape(n, 3)


def group_text(groups: np.ndarray) -> str:
    groups = relabel_groups(np.asarray(groups))
    width = len(str(int(groups.max()))) if groups.size else 1
    return "".join(" ".join(f"{g:>{width}d}" for g in row) + "\n" for row in groups)


def ppm_bytes(groups: np.ndarray, cell: int = 8) -> bytes:
    groups = relabel_groups(np.asarray(groups))
    h, w = groups.shape
    rgb = palette(int(groups.max()) + 1)[groups]
    rgb = rgb.repeat(cell, axis=0).repeat(cell, axis=1)
    header = f"P6\n{w * cell} {h * cell}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(rgb).tobytes()


def read_ppm(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def write_group_map(groups: np.ndarray, out_dir, stem: str, cell: int = 8) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / f"{stem}.txt"
    ppm = out_dir / f"{stem}.ppm"
    txt.write_text(group_text(groups))
    ppm.write_bytes(ppm_bytes(groups, cell))
    return txt, ppm
