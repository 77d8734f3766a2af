"""Tests for the corpus, generation, analysis and tuning services."""

import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from pianotune.checkpoint import load_checkpoint, save_checkpoint
from pianotune.config import GrpoConfig, PathsConfig, PipelineConfig, PromptSource, RendererChoice
from pianotune.errors import ConfigurationError, TrainingAborted
from pianotune.midi_core import parse_smf
from pianotune.models import Note, RejectReason, RewardSpec, Score
from pianotune.scorer import ProxyScorer
from pianotune.services.analysis_service import (
    SCALAR_FEATURES,
    analyze_directories,
    analyze_scores,
    diversity_report,
    score_scores,
)
from pianotune.services.corpus_service import ingest_corpus, ingest_file, list_midi_files
from pianotune.services.generation_service import generate_one, generate_samples, load_scores, write_samples
from pianotune.services.tuning_service import read_resume_state, run_tuning
from pianotune.token_dataset import TokenRecord
from pianotune.tokenizer import Vocab, decode
from pianotune.transformer import CausalTransformer
from tests.test_support.synthetic import (
    ONE_NOTE_EVENTS,
    ZERO_NUMERATOR_EVENT,
    ZERO_TEMPO_EVENT,
    dense_score,
    midi_file_bytes,
    piano_file_bytes,
    raw_track_file,
)


def _write_corpus(directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "nested").mkdir()
    (directory / "a_piano.mid").write_bytes(piano_file_bytes(dense_score(n_bars=4)))
    (directory / "nested" / "b_piano.MID").write_bytes(piano_file_bytes(dense_score(n_bars=2, pitches=(48, 52)), program=1))
    (directory / "c_guitar.mid").write_bytes(piano_file_bytes(dense_score(n_bars=2), program=25))
    (directory / "d_broken.mid").write_bytes(b"MThd\x00\x00\x00\x06garbage")
    (directory / "notes.txt").write_text("not midi")


class TestCorpusService:
    def test_lists_midi_files_recursively(self, temp_dir: Path) -> None:
        _write_corpus(temp_dir)
        names = [p.relative_to(temp_dir).as_posix() for p in list_midi_files(temp_dir)]
        assert names == ["a_piano.mid", "c_guitar.mid", "d_broken.mid", "nested/b_piano.MID"]

    def test_missing_corpus_dir(self, temp_dir: Path) -> None:
        with pytest.raises(ConfigurationError):
            list_midi_files(temp_dir / "absent")

    def test_ingest_reports_every_file(self, temp_dir: Path, vocab: Vocab) -> None:
        _write_corpus(temp_dir)

        result = ingest_corpus(temp_dir, vocab)

        assert [r.file_id for r in result.records] == ["a_piano.mid", "nested/b_piano.MID"]
        assert result.report.files_seen == 4
        assert result.report.accepted == 2
        assert result.report.rejected == {"no-piano-program": 1, "parse-error": 1}
        decoded = decode(result.records[0].ids, vocab)
        expected = dense_score(n_bars=4)
        assert [(n.pitch, n.onset, n.duration) for n in decoded.notes] == [
            (n.pitch, n.onset, n.duration) for n in expected.notes
        ]

    def test_malformed_meta_events_are_parse_errors(self, temp_dir: Path, vocab: Vocab) -> None:
        _write_corpus(temp_dir)
        (temp_dir / "e_zero_tempo.mid").write_bytes(raw_track_file(ZERO_TEMPO_EVENT + ONE_NOTE_EVENTS))
        (temp_dir / "f_zero_meter.mid").write_bytes(raw_track_file(ZERO_NUMERATOR_EVENT + ONE_NOTE_EVENTS))

        result = ingest_corpus(temp_dir, vocab)

        assert result.report.files_seen == 6
        assert result.report.accepted == 2
        assert result.report.rejected == {"no-piano-program": 1, "parse-error": 3}

    def test_ingest_file_merges_piano_tracks_only(self, vocab: Vocab) -> None:
        piano = [Note(pitch=60, velocity=80, onset=i * 480, duration=480) for i in range(16)]
        guitar = [Note(pitch=40, velocity=80, onset=i * 480, duration=480) for i in range(16)]
        data = midi_file_bytes([(0, 0, piano), (1, 25, guitar)])

        report, ids = ingest_file(data, vocab)

        assert report.accepted
        assert ids is not None
        assert {n.pitch for n in decode(ids, vocab).notes} == {60}

    def test_ingest_file_gate_rejection(self, vocab: Vocab) -> None:
        sparse = Score.build(
            ticks_per_quarter=480,
            notes=[Note(pitch=60, velocity=80, onset=0, duration=480), Note(pitch=60, velocity=80, onset=480 * 40, duration=480)],
        )
        report, ids = ingest_file(piano_file_bytes(sparse), vocab)
        assert ids is None
        assert report.reason == RejectReason.EMPTY_BAR_RATIO_EXCEEDED


class TestGenerationService:
    def test_same_seed_same_sample(self, tiny_model: CausalTransformer, vocab: Vocab) -> None:
        a = generate_one(tiny_model, vocab, 42, 24, 1.0)
        b = generate_one(tiny_model, vocab, 42, 24, 1.0)
        assert torch.equal(a.tokens, b.tokens)
        assert a.file_name == "sample_000042.mid"
        assert len(a.tokens) == 4 + 24

    def test_samples_use_consecutive_seeds(self, tiny_model: CausalTransformer, vocab: Vocab) -> None:
        batch = generate_samples(tiny_model, vocab, 3, 10, 8, 1.0)
        assert [s.prompt_seed for s in batch] == [10, 11, 12]
        assert torch.equal(batch[1].tokens, generate_one(tiny_model, vocab, 11, 8, 1.0).tokens)

    def test_dataset_prompts(self, tiny_model: CausalTransformer, vocab: Vocab) -> None:
        records = [TokenRecord(file_id="x", ids=np.array([1, 2, 5, 40, 100, 150, 200, 210]))]
        item = generate_one(tiny_model, vocab, 0, 4, 1.0, PromptSource.DATASET, records, prompt_len=6)
        assert item.tokens[:6].tolist() == [1, 2, 5, 40, 100, 150]

    def test_write_and_load(self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path) -> None:
        samples = generate_samples(tiny_model, vocab, 2, 0, 16, 1.0)

        paths = write_samples(samples, temp_dir)

        assert [p.name for p in paths] == ["sample_000000.mid", "sample_000001.mid"]
        loaded = load_scores(temp_dir)
        assert [name for name, _ in loaded] == ["sample_000000.mid", "sample_000001.mid"]
        assert loaded[0][1] == parse_smf(paths[0].read_bytes())

    def test_zero_samples(self, tiny_model: CausalTransformer, vocab: Vocab) -> None:
        with pytest.raises(ValueError):
            generate_samples(tiny_model, vocab, 0, 0, 4, 1.0)


class TestAnalysisService:
    def test_feature_analysis_csvs(self, temp_dir: Path) -> None:
        base = temp_dir / "base"
        tuned = temp_dir / "tuned"
        base.mkdir()
        tuned.mkdir()
        (base / "one.mid").write_bytes(piano_file_bytes(dense_score(n_bars=1, pitches=(60,))))
        (tuned / "one.mid").write_bytes(piano_file_bytes(dense_score(n_bars=1, pitches=(60, 64))))
        (tuned / "two.mid").write_bytes(piano_file_bytes(dense_score(n_bars=1, pitches=(67,))))

        analysis = analyze_directories([("base", base), ("tuned", tuned)])

        assert [d.label for d in analysis.directories] == ["base", "tuned"]
        assert analysis.directories[0].means["n_notes"] == 8
        assert analysis.directories[1].means["n_notes"] == 12

        pitch_rows = list(csv.reader(io.StringIO(analysis.histogram_csv("pitch"))))
        assert pitch_rows[0] == ["pitch", "base_pooled", "base_per_file_mean", "tuned_pooled", "tuned_per_file_mean"]
        assert pitch_rows[61] == ["60", "8", "1", "8", "0.25"]
        assert pitch_rows[68][3:] == ["8", "0.5"]

        velocity_rows = list(csv.reader(io.StringIO(analysis.histogram_csv("velocity"))))
        assert velocity_rows[0][0] == "velocity_bin"
        assert len(velocity_rows) == 21

        summary_rows = list(csv.reader(io.StringIO(analysis.summary_csv())))
        assert [r[0] for r in summary_rows[1:]] == list(SCALAR_FEATURES)

    def test_unknown_histogram_kind(self) -> None:
        analysis = analyze_directories([])
        with pytest.raises(ValueError):
            analysis.histogram_csv("tempo")

    def test_empty_directory_means(self) -> None:
        assert analyze_scores("empty", []).means["n_notes"] == 0.0

    def test_diversity_report(self) -> None:
        report, roll_csv = diversity_report([dense_score(n_bars=1), dense_score(n_bars=1, pitches=(50,))])
        assert report.sample_count == 2
        assert 0 < report.diversity < 1
        assert roll_csv.startswith("pitch,step_0")

    async def test_score_scores(self) -> None:
        scores = [("a.mid", dense_score(n_bars=2)), ("b.mid", dense_score(n_bars=1, pitches=(72,)))]

        report = await score_scores(scores, ProxyScorer(), RendererChoice(), 8000, RewardSpec(), crop_seconds=2.0)

        assert set(report.files) == {"a.mid", "b.mid"}
        assert report.files["a.mid"].reward == report.files["a.mid"].scores["CE"]
        assert report.summary.count == 2

    async def test_score_nothing(self) -> None:
        with pytest.raises(ValueError):
            await score_scores([], ProxyScorer(), RendererChoice(), 8000, RewardSpec())


def _tuning_config(temp_dir: Path, iterations: int) -> PipelineConfig:
    return PipelineConfig(
        paths=PathsConfig(
            base_checkpoint=temp_dir / "base.ckpt",
            tuned_checkpoint=temp_dir / "tuned.ckpt",
            output_dir=temp_dir / "run",
        ),
        grpo=GrpoConfig(
            iterations=iterations,
            prompts_per_iter=2,
            completions_per_prompt=2,
            max_new_tokens=8,
            lr_start=1e-3,
            checkpoint_every=1,
        ),
        sample_rate=8000,
        seed=5,
    )


class TestTuningService:
    async def test_tunes_and_writes_checkpoint(
        self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path
    ) -> None:
        save_checkpoint(temp_dir / "base.ckpt", tiny_model, vocab.fingerprint)
        config = _tuning_config(temp_dir, iterations=2)

        run = await run_tuning(config, vocab)

        assert run.start_iteration == 0
        assert len(run.history) == 2
        tuned, header = load_checkpoint(run.tuned_checkpoint, vocab.fingerprint)
        assert header.metadata["iterations"] == 2
        state = read_resume_state(temp_dir / "run")
        assert state is not None and state.next_iteration == 2
        assert state.reference_checkpoint == str(temp_dir / "base.ckpt")

    async def test_resume_continues_log(self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path) -> None:
        save_checkpoint(temp_dir / "base.ckpt", tiny_model, vocab.fingerprint)
        await run_tuning(_tuning_config(temp_dir, iterations=2), vocab)

        run = await run_tuning(_tuning_config(temp_dir, iterations=3), vocab, resume=True)

        assert run.start_iteration == 2
        assert [s.iter for s in run.history] == [2]
        lines = (temp_dir / "run" / "iterations.jsonl").read_text().splitlines()
        assert [json.loads(line)["iter"] for line in lines] == [0, 1, 2]

    async def test_resume_without_state_starts_over(
        self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path
    ) -> None:
        save_checkpoint(temp_dir / "base.ckpt", tiny_model, vocab.fingerprint)
        run = await run_tuning(_tuning_config(temp_dir, iterations=1), vocab, resume=True)
        assert run.start_iteration == 0

    async def test_remote_scorer_failure_aborts_with_resume_point(
        self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path
    ) -> None:
        save_checkpoint(temp_dir / "base.ckpt", tiny_model, vocab.fingerprint)
        config = _tuning_config(temp_dir, iterations=2).model_copy(
            update={"reward": RewardSpec(scorer="remote")}
        )
        config.remote_scorer.base_url = "http://127.0.0.1:9"
        config.remote_scorer.max_retries = 0
        config.remote_scorer.timeout_ms = 500

        with pytest.raises(TrainingAborted) as excinfo:
            await run_tuning(config, vocab)

        assert excinfo.value.iteration == 0
        assert read_resume_state(temp_dir / "run").next_iteration == 0
