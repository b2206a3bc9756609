import json
import math
import os
import pathlib

import numpy as np
import pytest
from PIL import Image

ACTIONS = ["left", "center", "right"]
FRAMES_PER_ACTION = 40
WIDTH, HEIGHT = 48, 16


def block_frame(t):
    """A bar oscillating inside the horizontal slot of its action block."""
    slot = WIDTH // len(ACTIONS)
    bar = (t // FRAMES_PER_ACTION) * slot + slot // 2 + 4.0 * math.sin(2 * math.pi * t / 10.7)
    x = np.arange(WIDTH)[None, :]
    y = np.arange(HEIGHT)[:, None]
    lit = np.clip(1.0 - np.abs(x - bar) / 2.0, 0.0, None)
    base = 40.0 + (x + y) % 7
    on = np.array([220.0, 180.0, 60.0])
    img = base[..., None] + lit[..., None] * (on - base[..., None])
    return np.rint(img).astype(np.uint8)


def write_project(root, layers=2):
    frames = root / "frames_candle"
    frames.mkdir(parents=True, exist_ok=True)
    for t in range(FRAMES_PER_ACTION * len(ACTIONS)):
        Image.fromarray(block_frame(t)).save(frames / f"{t:06d}.png")
    manifest = {
        "name": "smoke",
        "frame_rate": 25,
        "actors": [{
            "id": "candle",
            "kind": "full_frame",
            "frames": "frames_candle",
            "actions": [{"id": a, "name": a, "key": k} for a, k in zip(ACTIONS, "asd")],
            "examples": {a: [i * FRAMES_PER_ACTION + FRAMES_PER_ACTION // 2] for i, a in enumerate(ACTIONS)},
        }],
        "layers": [{
            "id": f"candle{d}",
            "actor": "candle",
            "default_action": "left",
            "initial_frame": FRAMES_PER_ACTION // 2,
            "anchor": [4 + 8 * d, 8],
        } for d in range(layers)],
        "parameters": {
            "synthesis": {"sigma_a": 0.3},
            "jump_candidates": 16,
            "propagation": {"knn": 10},
        },
        "bynumbers": {
            "colors": [
                {"color": [255, 0, 0], "action": "left"},
                {"color": [0, 0, 255], "action": "right"},
            ],
            "tolerance": 16,
        },
    }
    path = root / "project.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


@pytest.fixture(scope="session")
def manifest_path(tmp_path_factory):
    return write_project(tmp_path_factory.mktemp("project"))


@pytest.fixture(scope="session")
def project(manifest_path):
    import loopstage

    return loopstage.load_project(str(manifest_path))


@pytest.fixture(scope="session")
def cli():
    path = os.environ.get("LOOPSTAGE_CLI")
    if not path or not pathlib.Path(path).exists():
        pytest.skip("loopstage CLI not built")
    return path
