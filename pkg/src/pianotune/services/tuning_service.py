import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List

from pianotune.checkpoint import load_checkpoint, save_checkpoint
from pianotune.config import PipelineConfig, PromptSource
from pianotune.errors import CheckpointError
from pianotune.grpo import RESUME_FILE, GrpoTrainer, IterationStats, ResumeState
from pianotune.pretrain import split_dataset
from pianotune.scorer import RemoteScorer, build_scorer
from pianotune.token_dataset import TokenRecord, read_token_dataset
from pianotune.tokenizer import Vocab

logger = logging.getLogger(__name__)


@dataclass
class TuningRun:
    history: List[IterationStats]
    start_iteration: int
    tuned_checkpoint: Path


def read_resume_state(output_dir: Path) -> ResumeState | None:
    path = Path(output_dir) / RESUME_FILE
    if not path.exists():
        return None
    try:
        return ResumeState.model_validate(json.loads(path.read_text()))
    except (OSError, ValueError) as e:
        raise CheckpointError(f"Unreadable resume state {path}: {e}")


def training_prompts(config: PipelineConfig, vocab: Vocab) -> List[TokenRecord]:
    """Training split of the token dataset, when tuning draws dataset prompts."""
    if config.grpo.prompt_source != PromptSource.DATASET:
        return []
    records = read_token_dataset(config.paths.dataset, vocab)
    return split_dataset(records, config.pretrain.holdout_fraction, config.pretrain.validation_fraction).train


async def run_tuning(config: PipelineConfig, vocab: Vocab, resume: bool = False) -> TuningRun:
    """Tune the base checkpoint and write the tuned checkpoint.

    With `resume`, continues from the resume.json in the output directory; the
    resumed run appends to the same iteration log.
    """
    output_dir = config.paths.output_dir
    state = read_resume_state(output_dir) if resume else None
    if resume and state is None:
        logger.warning("No resume state in %s; starting from the base checkpoint", output_dir)

    reference_path = Path(state.reference_checkpoint) if state and state.reference_checkpoint else config.paths.base_checkpoint
    reference, _ = load_checkpoint(reference_path, vocab.fingerprint)
    if state is not None:
        policy, _ = load_checkpoint(Path(state.checkpoint), vocab.fingerprint)
        start = state.next_iteration
    else:
        policy, _ = load_checkpoint(config.paths.base_checkpoint, vocab.fingerprint)
        start = 0

    scorer = build_scorer(config)
    try:
        trainer = GrpoTrainer(
            policy=policy,
            reference=reference,
            vocab=vocab,
            config=config.grpo,
            reward=config.reward,
            renderer=config.renderer,
            scorer=scorer,
            sample_rate=config.sample_rate,
            output_dir=output_dir,
            prompt_records=training_prompts(config, vocab),
            reference_checkpoint=reference_path,
        )
        if state is not None:
            trainer.load_optimizer(Path(state.optimizer))
            logger.info("Resuming at iteration %d from %s", start, state.checkpoint)
        history = await trainer.train(start_iteration=start)
    finally:
        if isinstance(scorer, RemoteScorer):
            await scorer.aclose()

    save_checkpoint(
        config.paths.tuned_checkpoint,
        trainer.policy,
        vocab.fingerprint,
        metadata={"iterations": config.grpo.iterations, "reward_axis": config.reward.axis.value},
    )
    return TuningRun(history=history, start_iteration=start, tuned_checkpoint=config.paths.tuned_checkpoint)
