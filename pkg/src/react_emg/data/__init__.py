"""Synthetic corpus, REB1 files, windowing and calibration sampling."""

from .corpus import (EVAL_SPLITS, SPLITS, ClipRef, Corpus, Entry, SplitPlan,
                     available_clips, check_split_hygiene, evaluation_calibration,
                     generate_corpus, plan_splits, read_manifest, resolve_split,
                     sample_calibration, write_manifest)
from .recording import (DataError, Recording, RecordingFormatError, pose_only,
                        read_recording, write_recording)
from .synth import (StageProfile, UserProfile, stage_profile, synth_recording,
                    user_profile)
from .transforms import Window, instance_normalize, rotate_channels, window

__all__ = [
    "EVAL_SPLITS", "SPLITS", "ClipRef", "Corpus", "Entry", "SplitPlan", "available_clips",
    "check_split_hygiene", "evaluation_calibration", "generate_corpus", "plan_splits",
    "read_manifest", "resolve_split", "sample_calibration", "write_manifest", "DataError",
    "Recording", "RecordingFormatError", "pose_only", "read_recording", "write_recording",
    "StageProfile", "UserProfile", "stage_profile", "synth_recording", "user_profile",
    "Window", "instance_normalize", "rotate_channels", "window",
]
