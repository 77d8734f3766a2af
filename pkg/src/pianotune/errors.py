"""Exception hierarchy for the pianotune pipeline."""

from __future__ import annotations


class PianotuneError(Exception):
    """Base class for all errors raised by pianotune."""

    error_code = "pianotune_error"

    def to_dict(self) -> dict:
        """Convert the error to a dictionary for structured CLI output."""
        return {"status": "error", "error_code": self.error_code, "message": str(self)}


class ConfigurationError(PianotuneError):
    error_code = "configuration_error"


class LockError(PianotuneError):
    error_code = "output_locked"


class MidiParseError(PianotuneError):
    """Raised when bytes cannot be decoded as a Standard MIDI File."""

    error_code = "parse_error"


class TokenizationError(PianotuneError):
    error_code = "tokenization_error"


class DatasetFormatError(PianotuneError):
    error_code = "dataset_format_error"


class CheckpointError(PianotuneError):
    error_code = "checkpoint_error"


class AudioFormatError(PianotuneError):
    """Raised for malformed or unsupported RIFF WAV data."""

    error_code = "audio_format_error"


class RenderError(PianotuneError):
    """Raised when a renderer fails; carries the captured diagnostics."""

    error_code = "render_error"

    def __init__(self, message: str, diagnostics: str | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics

    def to_dict(self) -> dict:
        data = super().to_dict()
        if self.diagnostics:
            data["details"] = {"diagnostics": self.diagnostics}
        return data


class ScorerError(PianotuneError):
    """Base class for failures of the aesthetic scorer."""

    error_code = "scorer_error"


class ScorerTimeoutError(ScorerError):
    error_code = "scorer_timeout"


class ScorerStatusError(ScorerError):
    """The scorer answered with a non-success HTTP status."""

    error_code = "scorer_status"

    def __init__(self, status_code: int, body: str = "") -> None:
        super().__init__(f"Scorer returned HTTP {status_code}: {body[:200]}")
        self.status_code = status_code
        self.body = body


class MalformedScoreResponse(ScorerError):
    error_code = "malformed_score_response"


class TrainingAborted(PianotuneError):
    """A tuning iteration failed; the state before it was saved for resume."""

    error_code = "training_aborted"

    def __init__(self, message: str, iteration: int, resume_path: str | None = None) -> None:
        super().__init__(message)
        self.iteration = iteration
        self.resume_path = resume_path

    def to_dict(self) -> dict:
        data = super().to_dict()
        data["details"] = {"iteration": self.iteration, "resume_path": self.resume_path}
        return data
