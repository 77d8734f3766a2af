import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

from pydantic import BaseModel, Field

from pianotune.errors import ConfigurationError, MidiParseError, TokenizationError
from pianotune.midi_core import corpus_gate, filter_and_merge_piano, parse_tracks
from pianotune.models import FilterReport, RejectReason
from pianotune.token_dataset import TokenRecord
from pianotune.tokenizer import TokenIds, Vocab, encode

logger = logging.getLogger(__name__)

MIDI_SUFFIXES = (".mid", ".midi")


class FileOutcome(BaseModel):
    file_id: str
    report: FilterReport
    n_tokens: int = 0


class IngestReport(BaseModel):
    """Per-file filter outcomes and counts by rejection reason."""

    files_seen: int
    accepted: int
    rejected: Dict[str, int] = Field(default_factory=dict)
    files: List[FileOutcome] = Field(default_factory=list)


@dataclass
class IngestResult:
    records: List[TokenRecord]
    report: IngestReport


def list_midi_files(directory: Path) -> List[Path]:
    """All MIDI files under `directory`, sorted by relative path."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigurationError(f"Corpus directory does not exist or is not readable: {directory}")
    try:
        return sorted(
            p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in MIDI_SUFFIXES
        )
    except OSError as e:
        raise ConfigurationError(f"Cannot list corpus directory {directory}: {e}")


def ingest_file(data: bytes, vocab: Vocab) -> tuple[FilterReport, TokenIds | None]:
    """Filter, gate and encode one file; the ids are None when it was rejected."""
    try:
        merged = filter_and_merge_piano(parse_tracks(data))
    except MidiParseError as e:
        return FilterReport(accepted=False, reason=RejectReason.PARSE_ERROR, detail=str(e)), None

    if isinstance(merged, FilterReport):
        return merged, None
    gate = corpus_gate(merged)
    if not gate.accepted:
        return gate, None
    try:
        ids = encode(merged, vocab)
    except TokenizationError as e:
        return FilterReport(accepted=False, reason=RejectReason.PARSE_ERROR, detail=str(e)), None
    return gate, ids


def ingest_corpus(corpus_dir: Path, vocab: Vocab) -> IngestResult:
    """Build token records for every accepted file of a corpus directory."""
    corpus_dir = Path(corpus_dir)
    paths = list_midi_files(corpus_dir)
    logger.info("Ingesting %d MIDI files from %s", len(paths), corpus_dir)

    records: List[TokenRecord] = []
    outcomes: List[FileOutcome] = []
    reasons: Counter[str] = Counter()
    for path in paths:
        file_id = path.relative_to(corpus_dir).as_posix()
        try:
            data = path.read_bytes()
        except OSError as e:
            report, ids = FilterReport(accepted=False, reason=RejectReason.PARSE_ERROR, detail=str(e)), None
        else:
            report, ids = ingest_file(data, vocab)

        if ids is not None:
            records.append(TokenRecord(file_id=file_id, ids=ids))
            outcomes.append(FileOutcome(file_id=file_id, report=report, n_tokens=len(ids)))
        else:
            assert report.reason is not None
            reasons[report.reason.value] += 1
            outcomes.append(FileOutcome(file_id=file_id, report=report))
            logger.debug("Rejected %s: %s", file_id, report.reason.value)

    report = IngestReport(
        files_seen=len(paths),
        accepted=len(records),
        rejected=dict(sorted(reasons.items())),
        files=outcomes,
    )
    logger.info("Accepted %d of %d files; rejected %s", report.accepted, report.files_seen, report.rejected)
    return IngestResult(records=records, report=report)
