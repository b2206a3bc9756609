import json
import subprocess

import numpy as np
import pytest
from PIL import Image

import loopstage

from conftest import ACTIONS, FRAMES_PER_ACTION, HEIGHT, WIDTH


def test_project_metadata(project):
    assert project.prepared
    assert project.layers == ["candle0", "candle1"]
    assert project.actors == ["candle"]
    assert project.actions("candle") == ACTIONS
    assert project.frame_count("candle") == 120
    assert project.background.shape == (HEIGHT, WIDTH, 3)
    assert len(project.hash) > 0


def test_distance_matrix_is_a_metric_table(project):
    d = project.distance_matrix("candle")
    assert d.shape == (120, 120)
    assert np.allclose(d, d.T)
    assert np.all(np.diag(d) == 0)
    assert np.all(d >= 0)
    # Frames one bar period apart in the same block beat frames in different blocks.
    assert d[20, 31] < d[20, 60]


def test_action_field_follows_blocks(project):
    field = project.action_field("candle")
    assert field.shape == (120, 3)
    assert np.allclose(field.sum(axis=1), 1.0)
    assert list(field.argmax(axis=1)) == [t // FRAMES_PER_ACTION for t in range(120)]


def test_session_plays_and_triggers(project):
    session = loopstage.Session(project)
    for i in range(10):
        column, frames = session.advance()
        assert column == i
        assert len(frames) == 2
    commit = session.trigger("candle1", "right", 400)
    assert commit >= session.playhead + 2
    field = project.action_field("candle")
    reached = False
    for _ in range(200):
        column, frames = session.advance()
        reached = reached or (column >= commit and field[frames[1]].argmax() == 2)
    assert reached
    with pytest.raises(loopstage.InvalidRequest):
        session.trigger("candle1", "jump")
    with pytest.raises(loopstage.InvalidRequest):
        session.set_param("alpha", 3.0)


def test_recording_replays_exactly_and_offline_is_no_worse(project):
    session = loopstage.Session(project)
    for _ in range(30):
        session.advance()
    session.trigger("candle0", "center", 1200)
    session.set_param("alpha", 0.8, 1300)
    for _ in range(90):
        session.advance()
    recording = session.recording()
    assert recording["manifest_hash"] == project.hash
    assert [e["type"] for e in recording["events"]] == ["trigger", "param"]
    played = session.played_timeline()
    assert loopstage.replay_recording(project, recording) == played
    result = loopstage.resynthesize_recording(project, recording)
    assert result["energy"] <= result["live_energy"] + 1e-9
    assert len(result["timeline"]["candle0"]) == recording["columns"]


def test_render_frame_shape(project):
    timeline = {"candle0": [0, 50, 100], "candle1": [10, 60, 110]}
    image = loopstage.render_frame(project, timeline, 1, "live")
    assert image.shape == (HEIGHT, WIDTH, 3)
    assert image.dtype == np.uint8


def test_control_frames_drive_triggers(project):
    red = np.zeros((HEIGHT, WIDTH, 3), np.uint8)
    red[..., 0] = 255
    blue = np.zeros((HEIGHT, WIDTH, 3), np.uint8)
    blue[..., 2] = 255
    recording = loopstage.control_sequence_triggers(project, [red] * 5 + [blue] * 5)
    events = recording["events"]
    assert {e["layer"] for e in events} == {"candle0", "candle1"}
    assert all(e["action"] == "right" and e["column"] == 5 for e in events)


def test_cli_prepare_render_and_tag(cli, project, manifest_path, tmp_path):
    out = subprocess.run([cli, "prepare", str(manifest_path)], capture_output=True, text=True, check=True)
    assert project.hash in out.stdout

    session = loopstage.Session(project)
    for _ in range(20):
        session.advance()
    session.trigger("candle1", "right", 900)
    for _ in range(20):
        session.advance()
    rec_path = tmp_path / "take.json"
    rec_path.write_text(json.dumps(session.recording()))
    frames_dir = tmp_path / "render"
    subprocess.run([cli, "render", str(rec_path), "--manifest", str(manifest_path), "--out", str(frames_dir),
                    "--quality", "live"], check=True, capture_output=True)
    rendered = sorted(frames_dir.glob("*.png"))
    assert len(rendered) == 40
    assert np.asarray(Image.open(rendered[0])).shape == (HEIGHT, WIDTH, 3)

    bad = subprocess.run([cli, "render", str(rec_path), "--manifest", str(manifest_path), "--out",
                          str(frames_dir), "--quality", "ultra"], capture_output=True, text=True)
    assert bad.returncode != 0


def test_cli_bynumbers(cli, manifest_path, tmp_path):
    control = tmp_path / "control"
    control.mkdir()
    for t in range(12):
        img = np.zeros((HEIGHT, WIDTH, 3), np.uint8)
        img[..., 0 if t < 6 else 2] = 255
        Image.fromarray(img).save(control / f"{t:06d}.png")
    out = tmp_path / "out"
    rec = tmp_path / "derived.json"
    subprocess.run([cli, "bynumbers", str(manifest_path), str(control), "--out", str(out), "--recording",
                    str(rec)], check=True, capture_output=True)
    assert len(list(out.glob("*.png"))) == 12
    events = json.loads(rec.read_text())["events"]
    assert all(e["action"] == "right" for e in events)
