"""Command-line entry point for the pianotune pipeline.

Every command resolves a PipelineConfig (flag > environment > config file >
default), takes the lock of its output directory, writes the resolved config
next to its outputs and reports failures as a one-line JSON object on stderr.
"""

import argparse
import asyncio
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence

import torch
from pydantic import ValidationError

from pianotune.audio import write_wav
from pianotune.checkpoint import load_checkpoint, save_checkpoint
from pianotune.config import (
    PipelineConfig,
    PromptSource,
    RendererChoice,
    RendererKind,
    dump_pipeline_config,
    load_pipeline_config,
    settings,
)
from pianotune.errors import ConfigurationError, PianotuneError
from pianotune.models import ScoreAxis, ScorerKind
from pianotune.pretrain import pretrain, split_dataset
from pianotune.renderer import render
from pianotune.scorer import RemoteScorer, build_scorer
from pianotune.scorer.compare import compare_renderers
from pianotune.services.analysis_service import analyze_directories, diversity_report, score_scores
from pianotune.services.corpus_service import ingest_corpus
from pianotune.services.generation_service import generate_samples, load_scores, write_samples
from pianotune.services.tuning_service import run_tuning
from pianotune.token_dataset import read_token_dataset, write_token_dataset
from pianotune.tokenizer import build_vocab
from pianotune.utils.common import atomic_write_bytes, atomic_write_json, configure_logging, output_lock
from pianotune.version import get_version_info

logger = logging.getLogger(__name__)

RUN_CONFIG_FILE = "run_config.json"


@dataclass(frozen=True)
class Override:
    """A command-line flag mirroring one PipelineConfig field."""

    flag: str
    path: tuple[str, ...]
    type: Callable[[str], Any] = str
    help: str | None = None
    choices: Sequence[str] | None = None


OVERRIDES: tuple[Override, ...] = (
    Override("--corpus-dir", ("paths", "corpus_dir"), help="Directory of .mid files to ingest"),
    Override("--dataset", ("paths", "dataset"), help="Token dataset file"),
    Override("--base-checkpoint", ("paths", "base_checkpoint")),
    Override("--tuned-checkpoint", ("paths", "tuned_checkpoint")),
    Override("--output-dir", ("paths", "output_dir"), help="Directory for logs and reports"),
    Override("--n-layers", ("model", "n_layers"), int),
    Override("--d-model", ("model", "d_model"), int),
    Override("--n-heads", ("model", "n_heads"), int),
    Override("--d-ff", ("model", "d_ff"), int),
    Override("--max-seq-len", ("model", "max_seq_len"), int),
    Override("--epochs", ("pretrain", "epochs"), int),
    Override("--batch-size", ("pretrain", "batch_size"), int),
    Override("--crop-len", ("pretrain", "crop_len"), int),
    Override("--learning-rate", ("pretrain", "learning_rate"), float),
    Override("--iterations", ("grpo", "iterations"), int),
    Override("--prompts-per-iter", ("grpo", "prompts_per_iter"), int),
    Override("--completions-per-prompt", ("grpo", "completions_per_prompt"), int),
    Override("--beta", ("grpo", "beta"), float, help="KL penalty weight"),
    Override("--temperature", ("grpo", "temperature"), float),
    Override("--lr-start", ("grpo", "lr_start"), float),
    Override("--max-new-tokens", ("grpo", "max_new_tokens"), int),
    Override("--prompt-source", ("grpo", "prompt_source"), choices=[p.value for p in PromptSource]),
    Override("--prompt-len", ("grpo", "prompt_len"), int),
    Override("--updates-per-batch", ("grpo", "updates_per_batch"), int),
    Override("--checkpoint-every", ("grpo", "checkpoint_every"), int),
    Override("--reward-axis", ("reward", "axis"), choices=[a.value for a in ScoreAxis]),
    Override("--scorer", ("reward", "scorer"), choices=[k.value for k in ScorerKind]),
    Override("--renderer", ("renderer", "kind"), choices=[k.value for k in RendererKind]),
    Override("--renderer-executable", ("renderer", "executable")),
    Override("--soundfont", ("renderer", "soundfont")),
    Override("--scorer-url", ("remote_scorer", "base_url")),
    Override("--scorer-timeout-ms", ("remote_scorer", "timeout_ms"), int),
    Override("--scorer-max-retries", ("remote_scorer", "max_retries"), int),
    Override("--scorer-max-in-flight", ("remote_scorer", "max_in_flight"), int),
    Override("--sample-rate", ("sample_rate",), int),
    Override("--seed", ("seed",), int),
)


def _dest(flag: str) -> str:
    return "cfg_" + flag.lstrip("-").replace("-", "_")


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested override dict from the config flags that were given."""
    overrides: Dict[str, Any] = {}
    for override in OVERRIDES:
        value = getattr(args, _dest(override.flag), None)
        if value is None:
            continue
        node = overrides
        for key in override.path[:-1]:
            node = node.setdefault(key, {})
        node[override.path[-1]] = value
    if "renderer" in overrides and overrides["renderer"].get("kind") == RendererKind.EXTERNAL.value:
        overrides["renderer"].setdefault("name", "external")
    return overrides


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="JSON config file")
    parent.add_argument("--debug", action="store_true", help="Enable debug logging")
    group = parent.add_argument_group("config overrides")
    for override in OVERRIDES:
        group.add_argument(
            override.flag,
            dest=_dest(override.flag),
            type=override.type,
            choices=override.choices,
            help=override.help,
        )
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(
        prog="pianotune",
        description="Pretrain a piano MIDI language model and tune it against an aesthetic reward",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("ingest", parents=[parent], help="Filter and tokenize a MIDI corpus")
    commands.add_parser("pretrain", parents=[parent], help="Pretrain the base model on the token dataset")

    tune = commands.add_parser("tune", parents=[parent], help="Tune the base model with GRPO")
    tune.add_argument("--resume", action="store_true", help="Continue from resume.json in the output directory")

    generate = commands.add_parser("generate", parents=[parent], help="Sample MIDI files from a checkpoint")
    generate.add_argument("--checkpoint", type=Path, help="Checkpoint to sample from (default: the tuned checkpoint)")
    generate.add_argument("-n", "--count", type=int, default=4, help="Number of files")
    generate.add_argument("--out", type=Path, required=True, help="Directory for the generated files")

    render_cmd = commands.add_parser("render", parents=[parent], help="Render MIDI files to WAV")
    render_cmd.add_argument("--input", type=Path, required=True, help="Directory of MIDI files")
    render_cmd.add_argument("--out", type=Path, required=True, help="Directory for the WAV files")
    render_cmd.add_argument("--max-seconds", type=float, help="Truncate renders to this length")

    score = commands.add_parser("score", parents=[parent], help="Rate MIDI files with the configured scorer")
    score.add_argument("--input", type=Path, required=True, help="Directory of MIDI files")

    analyze = commands.add_parser("analyze", parents=[parent], help="Note-level features of MIDI directories")
    analyze.add_argument(
        "--dir",
        dest="dirs",
        action="append",
        required=True,
        metavar="LABEL=PATH",
        help="Labelled directory of MIDI files; repeat to compare (e.g. base=out/base tuned=out/tuned)",
    )

    diversity = commands.add_parser("diversity", parents=[parent], help="Diversity and average piano roll")
    diversity.add_argument("--input", type=Path, required=True, help="Directory of MIDI files")

    compare = commands.add_parser("compare-renderers", parents=[parent], help="Score the same files per renderer")
    compare.add_argument("--input", type=Path, required=True, help="Directory of MIDI files")
    compare.add_argument(
        "--external",
        nargs=3,
        action="append",
        default=[],
        metavar=("NAME", "EXECUTABLE", "SOUNDFONT"),
        help="Additional external renderer; repeatable",
    )

    commands.add_parser("config-echo", parents=[parent], help="Print the resolved configuration")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    return load_pipeline_config(args.config, collect_overrides(args))


def require(path: Path | None, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise ConfigurationError(f"Missing {what}: {path}")
    return Path(path)


def write_run_config(directory: Path, config: PipelineConfig, command: str) -> None:
    """Resolved config plus provenance, next to a command's outputs."""
    atomic_write_json(
        directory / RUN_CONFIG_FILE,
        {"command": command, "config": dump_pipeline_config(config), "version": get_version_info()},
    )


def cmd_ingest(args: argparse.Namespace, config: PipelineConfig) -> Dict[str, Any]:
    corpus_dir = require(config.paths.corpus_dir, "corpus directory")
    vocab = build_vocab(config.tokenizer)
    result = ingest_corpus(corpus_dir, vocab)
    count = write_token_dataset(config.paths.dataset, result.records, vocab)
    atomic_write_json(config.paths.output_dir / "ingest_report.json", result.report.model_dump(mode="json"))
    return {"dataset": str(config.paths.dataset), "records": count, "accepted": result.report.accepted, "rejected": result.report.rejected}


def cmd_pretrain(args: argparse.Namespace, config: PipelineConfig) -> Dict[str, Any]:
    dataset = require(config.paths.dataset, "token dataset")
    vocab = build_vocab(config.tokenizer)
    model_config = config.model.model_copy(update={"vocab_size": len(vocab)})
    records = read_token_dataset(dataset, vocab)
    result = pretrain(records, model_config, config.pretrain)
    save_checkpoint(
        config.paths.base_checkpoint,
        result.model,
        vocab.fingerprint,
        metadata={"epochs": config.pretrain.epochs, "split_sizes": result.split_sizes},
    )
    atomic_write_json(
        config.paths.output_dir / "pretrain_history.json",
        {
            "history": [s.model_dump() for s in result.history],
            "holdout_loss": result.holdout_loss,
            "split_sizes": result.split_sizes,
        },
    )
    return {"checkpoint": str(config.paths.base_checkpoint), "holdout_loss": result.holdout_loss}


def cmd_tune(args: argparse.Namespace, config: PipelineConfig) -> Dict[str, Any]:
    require(config.paths.base_checkpoint, "base checkpoint")
    if config.grpo.prompt_source == PromptSource.DATASET:
        require(config.paths.dataset, "token dataset")
    vocab = build_vocab(config.tokenizer)
    run = asyncio.run(run_tuning(config, vocab, resume=args.resume))
    last = run.history[-1].model_dump() if run.history else None
    return {"checkpoint": str(run.tuned_checkpoint), "start_iteration": run.start_iteration, "last": last}


def cmd_generate(args: argparse.Namespace, config: PipelineConfig) -> Dict[str, Any]:
    checkpoint = require(args.checkpoint or config.paths.tuned_checkpoint, "checkpoint")
    vocab = build_vocab(config.tokenizer)
    prompt_records: List[Any] = []
    if config.grpo.prompt_source == PromptSource.DATASET:
        records = read_token_dataset(require(config.paths.dataset, "token dataset"), vocab)
        prompt_records = split_dataset(records, config.pretrain.holdout_fraction, config.pretrain.validation_fraction).holdout
    model, _ = load_checkpoint(checkpoint, vocab.fingerprint)
    samples = generate_samples(
        model,
        vocab,
        args.count,
        config.seed,
        config.grpo.max_new_tokens,
        config.grpo.temperature,
        config.grpo.prompt_source,
        prompt_records,
        config.grpo.prompt_len,
    )
    paths = write_samples(samples, args.out)
    return {"files": [p.name for p in paths]}


def cmd_render(args: argparse.Namespace, config: PipelineConfig) -> Dict[str, Any]:
    scores = load_scores(require(args.input, "input directory"))
    written = []
    for name, score in scores:
        clip = render(score, config.renderer, config.sample_rate, args.max_seconds)
        target = args.out / Path(name).with_suffix(".wav")
        atomic_write_bytes(target, write_wav(clip))
        written.append(target.name)
    return {"files": written}


def cmd_score(args: argparse.Namespace, config: PipelineConfig) -> Dict[str, Any]:
    scores = load_scores(require(args.input, "input directory"))

    async def run() -> Dict[str, Any]:
        scorer = build_scorer(config)
        try:
            report = await score_scores(
                scores, scorer, config.renderer, config.sample_rate, config.reward, config.grpo.audio_crop_seconds
            )
        finally:
            if isinstance(scorer, RemoteScorer):
                await scorer.aclose()
        return report.model_dump(mode="json")

    report = asyncio.run(run())
    atomic_write_json(config.paths.output_dir / "scores.json", report)
    return {"files": len(report["files"]), "overall_mean": report["summary"]["overall_mean"]}


def parse_labelled_dirs(values: Sequence[str]) -> List[tuple[str, Path]]:
    dirs = []
    for value in values:
        label, sep, path = value.partition("=")
        if not sep or not label or not path:
            raise ConfigurationError(f"Expected LABEL=PATH, got {value!r}")
        dirs.append((label, require(Path(path), f"directory for {label}")))
    if len({label for label, _ in dirs}) != len(dirs):
        raise ConfigurationError("Directory labels must be unique")
    return dirs


def cmd_analyze(args: argparse.Namespace, config: PipelineConfig) -> Dict[str, Any]:
    analysis = analyze_directories(parse_labelled_dirs(args.dirs))
    out = config.paths.output_dir
    atomic_write_json(out / "features.json", analysis.model_dump(mode="json"))
    atomic_write_bytes(out / "pitch_histogram.csv", analysis.histogram_csv("pitch").encode())
    atomic_write_bytes(out / "velocity_histogram.csv", analysis.histogram_csv("velocity").encode())
    atomic_write_bytes(out / "feature_summary.csv", analysis.summary_csv().encode())
    return {d.label: d.means for d in analysis.directories}


def cmd_diversity(args: argparse.Namespace, config: PipelineConfig) -> Dict[str, Any]:
    scores = [score for _, score in load_scores(require(args.input, "input directory"))]
    if len(scores) < 2:
        raise ConfigurationError(f"Diversity needs at least two MIDI files in {args.input}")
    report, roll_csv = diversity_report(scores)
    atomic_write_json(config.paths.output_dir / "diversity.json", report.model_dump())
    atomic_write_bytes(config.paths.output_dir / "piano_roll.csv", roll_csv.encode())
    return report.model_dump()


def comparison_renderers(args: argparse.Namespace, config: PipelineConfig) -> List[RendererChoice]:
    renderers = [RendererChoice()]
    if config.renderer.kind == RendererKind.EXTERNAL:
        renderers.append(config.renderer)
    for name, executable, soundfont in args.external:
        try:
            renderers.append(
                RendererChoice(kind=RendererKind.EXTERNAL, name=name, executable=executable, soundfont=soundfont)
            )
        except ValidationError as e:
            raise ConfigurationError(f"Invalid renderer {name}: {e}")
    return renderers


def cmd_compare_renderers(args: argparse.Namespace, config: PipelineConfig) -> Dict[str, Any]:
    scores = [score for _, score in load_scores(require(args.input, "input directory"))]
    renderers = comparison_renderers(args, config)

    async def run() -> Any:
        scorer = build_scorer(config)
        try:
            return await compare_renderers(
                scores, renderers, scorer, config.sample_rate, config.grpo.audio_crop_seconds
            )
        finally:
            if isinstance(scorer, RemoteScorer):
                await scorer.aclose()

    comparison = asyncio.run(run())
    atomic_write_json(config.paths.output_dir / "renderer_comparison.json", comparison.model_dump(mode="json"))
    atomic_write_bytes(config.paths.output_dir / "renderer_comparison.csv", comparison.to_csv().encode())
    return {row.renderer: row.overall_mean for row in comparison.rows}


COMMANDS: Dict[str, Callable[[argparse.Namespace, PipelineConfig], Dict[str, Any]]] = {
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "tune": cmd_tune,
    "generate": cmd_generate,
    "render": cmd_render,
    "score": cmd_score,
    "analyze": cmd_analyze,
    "diversity": cmd_diversity,
    "compare-renderers": cmd_compare_renderers,
}


def output_directory(args: argparse.Namespace, config: PipelineConfig) -> Path:
    """Where a command writes its artifacts (and therefore its lock)."""
    out = getattr(args, "out", None)
    return Path(out) if out is not None else config.paths.output_dir


def run_command(args: argparse.Namespace) -> Dict[str, Any]:
    config = resolve_config(args)
    if args.command == "config-echo":
        return dump_pipeline_config(config)

    if settings.torch_threads:
        torch.set_num_threads(settings.torch_threads)
    directory = output_directory(args, config)
    with output_lock(directory):
        write_run_config(directory, config, args.command)
        logger.info("Running %s (sample_rate=%d, seed=%d)", args.command, config.sample_rate, config.seed)
        return COMMANDS[args.command](args, config)


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point for the pianotune command."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.debug or settings.debug)

    try:
        result = run_command(args)
    except PianotuneError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 2 if isinstance(e, ConfigurationError) else 1
    except (OSError, ValueError) as e:
        print(json.dumps({"status": "error", "error_code": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1

    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
