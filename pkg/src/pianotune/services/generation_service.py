import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch

from pianotune.config import PromptSource
from pianotune.grpo import dataset_prompt, procedural_prompt
from pianotune.midi_core import parse_smf, write_smf
from pianotune.models import Score
from pianotune.services.corpus_service import list_midi_files
from pianotune.token_dataset import TokenRecord
from pianotune.tokenizer import Vocab, decode
from pianotune.transformer import CausalTransformer, sample
from pianotune.utils.common import atomic_write_bytes

logger = logging.getLogger(__name__)


def sample_file_name(prompt_seed: int) -> str:
    return f"sample_{prompt_seed:06d}.mid"


@dataclass
class GeneratedSample:
    prompt_seed: int
    tokens: torch.Tensor
    score: Score

    @property
    def file_name(self) -> str:
        return sample_file_name(self.prompt_seed)


def generate_one(
    model: CausalTransformer,
    vocab: Vocab,
    prompt_seed: int,
    max_new_tokens: int,
    temperature: float,
    prompt_source: PromptSource = PromptSource.PROCEDURAL,
    prompt_records: Sequence[TokenRecord] = (),
    prompt_len: int = 32,
) -> GeneratedSample:
    """One generation whose prompt and sampling noise depend only on `prompt_seed`."""
    rng = np.random.default_rng(prompt_seed)
    if prompt_source == PromptSource.DATASET:
        prompt = dataset_prompt(prompt_records, rng, prompt_len)
    else:
        prompt = procedural_prompt(rng, vocab)
    generator = torch.Generator().manual_seed(prompt_seed)
    tokens = sample(model, prompt, max_new_tokens, temperature, generator)
    return GeneratedSample(prompt_seed=prompt_seed, tokens=tokens, score=decode(tokens.tolist(), vocab))


def generate_samples(
    model: CausalTransformer,
    vocab: Vocab,
    n: int,
    seed: int,
    max_new_tokens: int,
    temperature: float,
    prompt_source: PromptSource = PromptSource.PROCEDURAL,
    prompt_records: Sequence[TokenRecord] = (),
    prompt_len: int = 32,
) -> List[GeneratedSample]:
    """`n` generations with prompt seeds seed, seed + 1, ..."""
    if n < 1:
        raise ValueError("n must be at least 1")
    logger.info(
        "Generating %d samples: %s prompts, %d new tokens, temperature %g",
        n,
        prompt_source.value,
        max_new_tokens,
        temperature,
    )
    return [
        generate_one(model, vocab, seed + i, max_new_tokens, temperature, prompt_source, prompt_records, prompt_len)
        for i in range(n)
    ]


def write_samples(samples: Sequence[GeneratedSample], output_dir: Path) -> List[Path]:
    output_dir = Path(output_dir)
    paths = []
    for item in samples:
        path = output_dir / item.file_name
        atomic_write_bytes(path, write_smf(item.score))
        paths.append(path)
    return paths


def load_scores(directory: Path) -> List[tuple[str, Score]]:
    """(file name, score) for every MIDI file in `directory`, sorted by name."""
    directory = Path(directory)
    return [(p.relative_to(directory).as_posix(), parse_smf(p.read_bytes())) for p in list_midi_files(directory)]
