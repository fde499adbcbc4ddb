"""Silhouette sequences, the GSEQ format, normalization and synthetic data."""

from .dataset import DatasetIndex, SequenceEntry, SequenceStore
from .normalize import HEIGHT, WIDTH, EmptySequenceError, normalize, normalize_frame
from .sequence import (
    CONDITIONS,
    SilhouetteSequence,
    decode_gseq,
    encode_gseq,
    load_sequence,
    save_sequence,
    sequence_relpath,
)
from .synth import SubjectParams, SynthConfig, generate_synthetic, motion_dominant, render_frame, subject_params

__all__ = [
    "CONDITIONS", "DatasetIndex", "EmptySequenceError", "HEIGHT", "SequenceEntry", "SequenceStore",
    "SilhouetteSequence", "SubjectParams", "SynthConfig", "WIDTH", "decode_gseq", "encode_gseq",
    "generate_synthetic", "load_sequence", "motion_dominant", "normalize", "normalize_frame",
    "render_frame", "save_sequence", "sequence_relpath", "subject_params",
]
