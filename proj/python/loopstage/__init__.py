"""Interactive video-loop synthesis."""

from ._loopstage import (
    AssetError,
    Error,
    InvalidRequest,
    Project,
    Session,
    control_sequence_triggers,
    load_project,
    render_frame,
    replay_recording,
    resynthesize_recording,
)

__all__ = [
    "AssetError",
    "Error",
    "InvalidRequest",
    "Project",
    "Session",
    "control_sequence_triggers",
    "load_project",
    "render_frame",
    "replay_recording",
    "resynthesize_recording",
]
