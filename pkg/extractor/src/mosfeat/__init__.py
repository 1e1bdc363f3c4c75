"""Audio front end: pretrained SSL features out, MOSF files + manifest in hand."""

from .extract import (
    DEFAULT_SAMPLE_RATE,
    ExtractionJob,
    ExtractionResult,
    expected_frames,
    extract,
    load_audio,
    load_model,
    write_mosf,
)

__version__ = "0.1.0"
