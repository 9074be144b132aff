#!/usr/bin/env python3
"""Regenerates tests/data: natural images with SLIC mask stacks and the
64x64 three-shape scene. The flow toy set is produced by the CLI
(`layervec flow make-toy`)."""

import argparse
import json
from pathlib import Path

import numpy as np
from PIL import Image
from skimage import data, segmentation, transform, util

IMAGES = {
    "astronaut": (data.astronaut, "public domain (NASA)"),
    "chelsea": (data.chelsea, "CC0, Stefan van der Walt"),
    "coffee": (data.coffee, "CC0, Rachel Michetti"),
    "rocket": (data.rocket, "public domain (SpaceX)"),
    "hubble": (data.hubble_deep_field, "public domain (NASA)"),
    "ihc": (data.immunohistochemistry, "no known copyright restrictions"),
    "retina": (data.retina, "CC0 1.0"),
    "camera": (data.camera, "CC0, Lav Varshney"),
    "coins": (data.coins, "no known copyright restrictions"),
    "horse": (data.horse, "CC0, Andreas Preuss"),
}

LEVELS = (6, 24, 96)
SIZE = 512
MIN_PIXELS = 64


def to_rgb(img):
    img = util.img_as_float(img)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    return img[..., :3]


def save_mask(path, mask):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path, optimize=True)


def mask_stack(img, out):
    levels = []
    parent_labels = None
    for t, n in enumerate(LEVELS, start=1):
        labels = segmentation.slic(img, n_segments=n, compactness=10, start_label=0, channel_axis=-1)
        files = []
        for k in np.unique(labels):
            m = labels == k
            if parent_labels is not None:
                # clip to the coarse segment holding most of it
                vals, counts = np.unique(parent_labels[m], return_counts=True)
                m &= parent_labels == vals[np.argmax(counts)]
            if m.sum() < MIN_PIXELS:
                continue
            name = f"level_{t}/m_{len(files)}.png"
            save_mask(out / name, m)
            files.append(name)
        levels.append({"t": t, "masks": files})
        parent_labels = labels
    manifest = {"width": img.shape[1], "height": img.shape[0], "levels": levels}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def natural(root):
    lines = []
    for name, (loader, licence) in IMAGES.items():
        img = to_rgb(loader())
        img = transform.resize(img, (SIZE, SIZE), anti_aliasing=True)
        d = root / "natural" / name
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(d / "image.png", optimize=True)
        mask_stack(img, d / "masks")
        lines.append(f"| {name} | skimage.data | {licence} |")
    return lines


def rect(w, h, x0, y0, x1, y1):
    m = np.zeros((h, w), bool)
    m[y0:y1, x0:x1] = True
    return m


def disc(w, h, cx, cy, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r


def three_shapes(root):
    w = h = 64
    d = root / "three_shapes"
    shapes = [
        ("a", rect(w, h, 6, 8, 28, 30), (230, 51, 26)),
        ("b", disc(w, h, 44, 20, 12), (26, 153, 51)),
        ("c", rect(w, h, 16, 40, 52, 58), (51, 77, 230)),
    ]
    img = np.full((h, w, 3), 255, np.uint8)
    files = []
    for i, (_, m, col) in enumerate(shapes):
        img[m] = col
        name = f"level_1/m_{i}.png"
        save_mask(d / "masks" / name, m)
        files.append(name)
    d.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(d / "image.png")
    manifest = {"width": w, "height": h, "levels": [{"t": 1, "masks": files}]}
    (d / "masks" / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")

    k = 0.5522847498307936
    cx, cy, r = 44, 20, 12
    circle = (
        f"M {cx + r} {cy} C {cx + r} {cy + k * r:.6f} {cx + k * r:.6f} {cy + r} {cx} {cy + r} "
        f"C {cx - k * r:.6f} {cy + r} {cx - r} {cy + k * r:.6f} {cx - r} {cy} "
        f"C {cx - r} {cy - k * r:.6f} {cx - k * r:.6f} {cy - r} {cx} {cy - r} "
        f"C {cx + k * r:.6f} {cy - r} {cx + r} {cy - k * r:.6f} {cx + r} {cy} Z"
    )
    svg = f"""<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="64" height="64" viewBox="0 0 64 64" data-layervec="1">
<g data-role="root">
<g id="a" data-layer="1"><path d="M 6 8 H 28 V 30 H 6 Z" fill="#e6331a" fill-rule="evenodd"/></g>
<g id="b" data-layer="1"><path d="{circle}" fill="#1a9933" fill-rule="evenodd"/></g>
<g id="c" data-layer="1"><path d="M 16 40 H 52 V 58 H 16 Z" fill="#334de6" fill-rule="evenodd"/></g>
</g>
</svg>
"""
    (d / "scene.svg").write_text(svg)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "tests" / "data"))
    args = ap.parse_args()
    root = Path(args.out)
    three_shapes(root)
    for line in natural(root):
        print(line)


if __name__ == "__main__":
    main()
