from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from src.api_client import ROLES, Endpoint

TASK_TEXT = "Classify the main object of the image into one of the toy classes."
SEG_TASK_TEXT = "Label every pixel as road, sidewalk, vehicle or pedestrian."

TOY_COLORS = [
    (200, 40, 40), (40, 70, 200), (50, 160, 60), (230, 210, 50), (130, 50, 160),
    (230, 140, 30), (120, 80, 40), (128, 128, 128), (240, 240, 240), (20, 20, 20),
]


def _toy_image(index: int, size: int = 24) -> np.ndarray:
    rng = np.random.default_rng(index)
    image = np.zeros((size, size, 3), dtype=np.uint8)
    image[:] = TOY_COLORS[index % len(TOY_COLORS)]
    # a bright square gives the edge map something to find
    top = 4 + index % 5
    image[top : top + 10, 6:16] = 255 - np.array(TOY_COLORS[index % len(TOY_COLORS)], dtype=np.uint8)
    noise = rng.integers(0, 6, size=image.shape, dtype=np.uint8)
    return np.clip(image.astype(np.int64) + noise, 0, 255).astype(np.uint8)


def write_jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture
def toy_dataset(tmp_path: Path) -> Path:
    """10 images, 2 classes x 5, as a classification manifest."""
    root = tmp_path / "toy"
    (root / "images").mkdir(parents=True)
    rows = [
        {
            "dataset": "toy",
            "task": "classification",
            "task_text": TASK_TEXT,
            "class_count": 2,
            "class_names": ["cube", "sphere"],
        }
    ]
    for i in range(10):
        label = i % 2
        name = f"img_{i:02d}.png"
        Image.fromarray(_toy_image(i)).save(root / "images" / name)
        rows.append({"id": f"case-{i:02d}", "image": f"images/{name}", "label": label})
    return write_jsonl(root / "manifest.jsonl", rows)


@pytest.fixture
def seg_dataset(tmp_path: Path) -> Path:
    """3 frames with 4-class masks and a palette."""
    root = tmp_path / "shift"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    palette = {"0": "Road", "1": "SideWalk", "2": "Vehicle", "3": "Pedestrian"}
    (root / "palette.json").write_text(json.dumps(palette), encoding="utf-8")

    rows = [{"dataset": "shift-toy", "task": "segmentation", "task_text": SEG_TASK_TEXT, "palette": "palette.json"}]
    for i in range(3):
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[:, :4] = 1
        mask[4 + i : 9 + i, 6:11] = 2
        mask[12:, 12:] = 3
        Image.fromarray(mask).save(root / "masks" / f"frame_{i}.png")
        Image.fromarray(_toy_image(i, size=16)).save(root / "images" / f"frame_{i}.png")
        rows.append({"id": f"frame-{i}", "image": f"images/frame_{i}.png", "mask": f"masks/frame_{i}.png"})
    return write_jsonl(root / "manifest.jsonl", rows)


@pytest.fixture
def mock_endpoints() -> dict[str, Endpoint]:
    return {role: Endpoint(role, f"mock://{role}") for role in ROLES}


@pytest.fixture
def run_json(tmp_path: Path):
    """Write a run config file with the given overrides and return its path."""

    def _write(**values) -> Path:
        data = {
            "output_dir": str(tmp_path / "out"),
            "cache_dir": None,
            "seed": 7,
            "per_class": 5,
            "augmentations": 5,
            "budget": 1,
            "parallelism": 2,
            "endpoints": {role: f"mock://{role}" for role in ROLES},
        }
        data.update(values)
        path = tmp_path / f"run_{len(list(tmp_path.glob('run_*.json')))}.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return _write


@pytest.fixture(autouse=True)
def _no_env_endpoints(monkeypatch):
    """Keep a developer's .env from pointing tests at real services."""
    for role in ROLES:
        for suffix in ("URL", "TOKEN", "TIMEOUT"):
            monkeypatch.delenv(f"DILLEMA_{role.upper()}_{suffix}", raising=False)
