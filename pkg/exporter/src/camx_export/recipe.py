"""Training recipe for the desk-scale fixture classifier.

Builds a deterministic synthetic dataset of four localized shapes (disk,
square, cross, ring) drawn at random positions and colors over noisy solid
backgrounds, trains a small conv net on it, and saves a checkpoint bundle
plus an evaluation corpus of PNG images. The bundle feeds `export`; the
corpus feeds the engine's corpus-level evaluation.

Everything is seeded: the dataset comes from one numpy generator, torch
training from torch.manual_seed, so reruns reproduce the same checkpoint
on the same platform. This script is tooling around the exporter, not part
of its contract.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .export import save_png

CLASSES = ("disk", "square", "cross", "ring")
IMAGE_SIZE = 32
MEAN = (0.5, 0.5, 0.5)
STD = (0.25, 0.25, 0.25)

# conv stack ending in a 128-channel spatial layer, then a dense head
LAYOUT = (
    ("conv2d", {"in": 3, "out": 16, "kernel": 3, "stride": 1, "padding": 1}),
    ("relu", {}),
    ("maxpool", {"kernel": 2, "stride": 2}),
    ("conv2d", {"in": 16, "out": 32, "kernel": 3, "stride": 1, "padding": 1}),
    ("relu", {}),
    ("maxpool", {"kernel": 2, "stride": 2}),
    ("conv2d", {"in": 32, "out": 128, "kernel": 3, "stride": 1, "padding": 1}),
    ("relu", {}),
    ("maxpool", {"kernel": 2, "stride": 2}),
    ("flatten", {}),
    ("dense", {"in": 128 * 4 * 4, "out": 1024}),
    ("relu", {}),
    ("dense", {"in": 1024, "out": len(CLASSES)}),
)


def _shape_mask(rng: np.random.Generator, label: int) -> np.ndarray:
    """Boolean 32x32 mask of one randomly placed, randomly sized shape."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    cy, cx = rng.integers(9, IMAGE_SIZE - 9, size=2)
    dy, dx = yy - cy, xx - cx
    if label == 0:
        r = rng.integers(4, 8)
        return dy * dy + dx * dx <= r * r
    if label == 1:
        s = rng.integers(4, 7)
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if label == 2:
        t = rng.integers(1, 3)
        arm = rng.integers(5, 8)
        return ((np.abs(dy) <= t) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= t) & (np.abs(dy) <= arm))
    r_out = rng.integers(5, 8)
    r_in = r_out - 2
    d2 = dy * dy + dx * dx
    return (d2 <= r_out * r_out) & (d2 >= r_in * r_in)


def make_image(rng: np.random.Generator, label: int) -> np.ndarray:
    """One uint8 HxWx3 image: shape over a noisy solid background."""
    background = rng.uniform(0.15, 0.85, size=3)
    while True:
        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - background).sum() > 1.0:
            break
    mask = _shape_mask(rng, label)[:, :, None]
    image = np.where(mask, color, background)
    image = image + rng.normal(0.0, 0.05, size=image.shape)
    return np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)


def make_dataset(rng: np.random.Generator, per_class: int) -> tuple[np.ndarray, np.ndarray]:
    """Balanced dataset: uint8 images (N, H, W, 3) and int64 labels, shuffled."""
    images, labels = [], []
    for label in range(len(CLASSES)):
        for _ in range(per_class):
            images.append(make_image(rng, label))
            labels.append(label)
    order = rng.permutation(len(images))
    return np.stack(images)[order], np.asarray(labels, dtype=np.int64)[order]


def _to_batch(images: np.ndarray) -> torch.Tensor:
    x = images.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    mean = np.asarray(MEAN, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(STD, dtype=np.float32).reshape(1, -1, 1, 1)
    return torch.from_numpy((x - mean) / std)


def train(
    out_dir: "str | Path",
    seed: int = 7,
    train_per_class: int = 1200,
    val_per_class: int = 100,
    corpus_size: int = 240,
    fixture_count: int = 8,
    epochs: int = 8,
    batch_size: int = 64,
) -> dict:
    """Train the classifier and write checkpoint.pt plus corpus/ into out_dir.

    Returns a small stats dict (val accuracy, loss curve) and writes it to
    recipe_stats.json alongside the checkpoint.
    """
    from .export import build_module

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)

    train_x, train_y = make_dataset(rng, train_per_class)
    val_x, val_y = make_dataset(rng, val_per_class)

    model = build_module(LAYOUT)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    loss_fn = nn.CrossEntropyLoss()
    losses = []
    n = len(train_x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = _to_batch(train_x[idx])
            # speckle augmentation: drop a random pixel fraction to the
            # normalization mean, so scattered mean-fill occlusion is
            # in-distribution and only shape-covering occlusion hurts
            coverage = torch.from_numpy(
                rng.uniform(0.0, 0.35, size=(len(idx), 1, 1, 1)).astype(np.float32))
            speckle = torch.from_numpy(
                rng.uniform(size=(len(idx), 1) + x.shape[2:]).astype(np.float32))
            x = torch.where(speckle < coverage, torch.zeros(()), x)
            y = torch.from_numpy(train_y[idx])
            optimizer.zero_grad()
            loss = loss_fn(model(x), y)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
        losses.append(total / n)

    model.eval()
    with torch.no_grad():
        predictions = model(_to_batch(val_x)).argmax(dim=1).numpy()
    accuracy = float((predictions == val_y).mean())

    corpus_dir = out_dir / "corpus"
    corpus_dir.mkdir(exist_ok=True)
    for i in range(corpus_size):
        save_png(corpus_dir / f"{i:03d}_{CLASSES[val_y[i]]}.png", val_x[i])

    bundle = {
        "format": "camx-export-bundle",
        "layout": LAYOUT,
        "state": model.state_dict(),
        "input_shape": [3, IMAGE_SIZE, IMAGE_SIZE],
        "mean": list(MEAN),
        "std": list(STD),
        "labels": list(CLASSES),
        "fixture_images": val_x[:fixture_count],
    }
    torch.save(bundle, out_dir / "checkpoint.pt")

    stats = {"val_accuracy": accuracy, "epoch_loss": losses, "seed": seed,
             "train_size": int(len(train_x)), "val_size": int(len(val_x))}
    (out_dir / "recipe_stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    return stats
