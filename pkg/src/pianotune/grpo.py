"""Group relative policy optimization against an aesthetic reward."""

from __future__ import annotations

import asyncio
import copy
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel

from pianotune.checkpoint import save_checkpoint
from pianotune.config import GrpoConfig, PromptSource, RendererChoice, settings
from pianotune.errors import DatasetFormatError, PianotuneError, TrainingAborted
from pianotune.models import RewardSpec, Score
from pianotune.renderer import render
from pianotune.scorer.base import RolloutInput, Scorer, reward_of
from pianotune.token_dataset import TokenRecord
from pianotune.tokenizer import BOS_ID, TokenIds, TokenKind, Vocab, decode
from pianotune.transformer import CausalTransformer, log_probs, sample_batch
from pianotune.utils.common import atomic_write_bytes, atomic_write_json

logger = logging.getLogger(__name__)

RESUME_FILE = "resume.json"
ITERATION_LOG = "iterations.jsonl"


def procedural_prompt(rng: np.random.Generator, vocab: Vocab) -> TokenIds:
    """[BOS, Bar, TimeSig, Tempo] with meter and tempo drawn uniformly."""
    time_sig = vocab.ids_of_kind(TokenKind.TIME_SIG)
    tempo = vocab.ids_of_kind(TokenKind.TEMPO)
    return np.array(
        [BOS_ID, vocab.id("Bar"), time_sig[int(rng.integers(len(time_sig)))], tempo[int(rng.integers(len(tempo)))]],
        dtype=np.int64,
    )


def dataset_prompt(records: Sequence[TokenRecord], rng: np.random.Generator, prompt_len: int) -> TokenIds:
    """Leading `prompt_len` tokens of a uniformly chosen file (which starts with BOS, Bar)."""
    if not records:
        raise DatasetFormatError("Cannot draw dataset prompts from an empty split")
    record = records[int(rng.integers(len(records)))]
    return np.asarray(record.ids[:prompt_len], dtype=np.int64)


def compute_advantages(rewards: Sequence[float], epsilon: float = 1e-4) -> np.ndarray:
    """(r - mean) / (sample std + epsilon); all zeros when every reward is equal."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("A group needs at least two rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std(ddof=1) + epsilon)


def kl_per_token(policy_logprob: torch.Tensor | float, ref_logprob: torch.Tensor | float) -> torch.Tensor | float:
    """exp(ref - pol) - (ref - pol) - 1 per realized token; never negative."""
    if isinstance(policy_logprob, float) and isinstance(ref_logprob, float):
        return float(kl_per_token(torch.tensor(policy_logprob, dtype=torch.float64), torch.tensor(ref_logprob, dtype=torch.float64)))
    diff = torch.as_tensor(ref_logprob) - torch.as_tensor(policy_logprob)
    return (torch.expm1(diff) - diff).clamp_min(0.0)


def grpo_objective(
    policy_logprobs: Sequence[torch.Tensor],
    old_logprobs: Sequence[torch.Tensor],
    ref_logprobs: Sequence[torch.Tensor],
    advantages: Sequence[float],
    beta: float,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Token-normalized GRPO loss and the mean per-token KL, summed over all completions.

    loss = -(1/N_tok) * sum_i sum_t [ratio_it * A_i - beta * k_it], with
    ratio = pi_theta / pi_old.
    """
    total = policy_logprobs[0].new_zeros(())
    kl_total = policy_logprobs[0].new_zeros(())
    n_tokens = 0
    for pol, old, ref, adv in zip(policy_logprobs, old_logprobs, ref_logprobs, advantages, strict=True):
        ratio = torch.exp(pol - old.detach())
        kl = kl_per_token(pol, ref.detach())
        total = total + (ratio * float(adv) - beta * kl).sum()
        kl_total = kl_total + kl.detach().sum()
        n_tokens += pol.numel()
    if n_tokens == 0:
        raise ValueError("GRPO batch contains no completion tokens")
    return -total / n_tokens, kl_total / n_tokens


def lr_at(iteration: int, config: GrpoConfig) -> float:
    if not 0 <= iteration <= config.iterations:
        raise ValueError(f"iteration {iteration} outside [0, {config.iterations}]")
    return config.lr_start * (1 - iteration / config.iterations)


@dataclass
class Rollout:
    rollout_id: str
    prompt: torch.Tensor
    completion: torch.Tensor
    score: Score | None = None
    reward: float = 0.0
    old_logprobs: torch.Tensor | None = None
    ref_logprobs: torch.Tensor | None = None

    @property
    def sequence(self) -> torch.Tensor:
        return torch.cat([self.prompt, self.completion])


@dataclass
class RolloutGroup:
    prompt: torch.Tensor
    rollouts: List[Rollout]
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class GroupBatch:
    groups: List[RolloutGroup]

    @property
    def rollouts(self) -> List[Rollout]:
        return [r for g in self.groups for r in g.rollouts]

    @property
    def advantages(self) -> List[float]:
        return [float(a) for g in self.groups for a in g.advantages]


def _by_prompt_length(rollouts: Sequence[Rollout]) -> Dict[int, List[int]]:
    buckets: Dict[int, List[int]] = {}
    for i, rollout in enumerate(rollouts):
        buckets.setdefault(len(rollout.prompt), []).append(i)
    return buckets


def batch_log_probs(model: CausalTransformer, rollouts: Sequence[Rollout]) -> List[torch.Tensor]:
    """Per-rollout completion log-probs, batching rollouts that share a prompt length."""
    out: List[torch.Tensor | None] = [None] * len(rollouts)
    for prompt_len, indices in _by_prompt_length(rollouts).items():
        lengths = {len(rollouts[i].completion) for i in indices}
        if len(lengths) == 1:
            stacked = torch.stack([rollouts[i].sequence for i in indices])
            values = log_probs(model, stacked, prompt_len)
            for row, i in enumerate(indices):
                out[i] = values[row]
        else:
            for i in indices:
                out[i] = log_probs(model, rollouts[i].sequence, prompt_len)
    return [t for t in out if t is not None]


def grpo_loss(model: CausalTransformer, batch: GroupBatch, beta: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """GRPO loss of `model` on a batch whose old/reference log-probs are filled in."""
    rollouts = batch.rollouts
    policy = batch_log_probs(model, rollouts)
    return grpo_objective(
        policy,
        [r.old_logprobs for r in rollouts],
        [r.ref_logprobs for r in rollouts],
        batch.advantages,
        beta,
    )


class IterationStats(BaseModel):
    iter: int
    mean_reward: float
    std_reward: float
    mean_kl: float
    loss: float
    lr: float
    wall_ms: int


class ResumeState(BaseModel):
    next_iteration: int
    checkpoint: str
    optimizer: str
    reference_checkpoint: str | None = None


class GrpoTrainer:
    """Tunes a policy against rewards from a scorer, anchored to a frozen reference.

    Every iteration derives its randomness from (seed, iteration), so a resumed run
    replays the same prompts and samples as an uninterrupted one.
    """

    def __init__(
        self,
        policy: CausalTransformer,
        vocab: Vocab,
        config: GrpoConfig,
        reward: RewardSpec,
        renderer: RendererChoice,
        scorer: Scorer,
        sample_rate: int,
        output_dir: Path,
        reference: CausalTransformer | None = None,
        prompt_records: Sequence[TokenRecord] = (),
        reference_checkpoint: Path | None = None,
    ) -> None:
        self.policy = policy
        self.reference = reference if reference is not None else copy.deepcopy(policy)
        self.reference.eval()
        for p in self.reference.parameters():
            p.requires_grad_(False)
        self.vocab = vocab
        self.config = config
        self.reward = reward
        self.renderer = renderer
        self.scorer = scorer
        self.sample_rate = sample_rate
        self.output_dir = Path(output_dir)
        self.prompt_records = list(prompt_records)
        self.reference_checkpoint = reference_checkpoint
        self.optimizer = torch.optim.Adam(self.policy.parameters(), lr=config.lr_start)
        if config.prompt_source == PromptSource.DATASET and not self.prompt_records:
            raise DatasetFormatError("prompt_source=dataset needs a non-empty training split")

    @property
    def log_path(self) -> Path:
        return self.output_dir / ITERATION_LOG

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / "policy.ckpt"

    def _iteration_rngs(self, iteration: int) -> Tuple[np.random.Generator, torch.Generator]:
        seed_seq = np.random.SeedSequence([self.config.seed, iteration])
        rng = np.random.default_rng(seed_seq)
        torch_seed = int(seed_seq.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)
        return rng, torch.Generator().manual_seed(torch_seed)

    def draw_prompts(self, rng: np.random.Generator) -> List[TokenIds]:
        if self.config.prompt_source == PromptSource.DATASET:
            return [dataset_prompt(self.prompt_records, rng, self.config.prompt_len) for _ in range(self.config.prompts_per_iter)]
        return [procedural_prompt(rng, self.vocab) for _ in range(self.config.prompts_per_iter)]

    def generate(self, iteration: int) -> GroupBatch:
        """Sample completions_per_prompt completions for each drawn prompt."""
        rng, generator = self._iteration_rngs(iteration)
        prompts = [torch.from_numpy(p) for p in self.draw_prompts(rng)]
        g = self.config.completions_per_prompt

        groups = [RolloutGroup(prompt=p, rollouts=[]) for p in prompts]
        by_length: Dict[int, List[int]] = {}
        for index, prompt in enumerate(prompts):
            by_length.setdefault(len(prompt), []).append(index)
        for length in sorted(by_length):
            indices = by_length[length]
            stacked = torch.stack([prompts[i] for i in indices]).repeat_interleave(g, dim=0)
            sequences = sample_batch(self.policy, stacked, self.config.max_new_tokens, self.config.temperature, generator)
            for row, sequence in enumerate(sequences):
                group_index = indices[row // g]
                groups[group_index].rollouts.append(
                    Rollout(
                        rollout_id=f"{iteration}:{group_index}:{row % g}",
                        prompt=prompts[group_index],
                        completion=sequence[length:].clone(),
                    )
                )
        return GroupBatch(groups=groups)

    async def assign_rewards(self, batch: GroupBatch) -> None:
        """Decode, render, crop and score every rollout, then compute group advantages."""
        loop = asyncio.get_running_loop()
        rollouts = batch.rollouts
        for rollout in rollouts:
            rollout.score = decode(rollout.sequence.tolist(), self.vocab)

        with ThreadPoolExecutor(max_workers=settings.render_workers) as pool:
            clips = await asyncio.gather(
                *(
                    loop.run_in_executor(
                        pool, render, r.score, self.renderer, self.sample_rate, self.config.audio_crop_seconds
                    )
                    for r in rollouts
                )
            )

        inputs = {r.rollout_id: RolloutInput(score=r.score, audio=clip) for r, clip in zip(rollouts, clips)}
        ratings = await self.scorer.score_batch(inputs)
        for rollout in rollouts:
            rollout.reward = reward_of(ratings[rollout.rollout_id], self.reward)
        for group in batch.groups:
            group.advantages = compute_advantages([r.reward for r in group.rollouts], self.config.advantage_epsilon)

    def update(self, batch: GroupBatch, iteration: int) -> Tuple[float, float, float]:
        """Policy updates on one generation batch; returns (loss, mean_kl, lr) of the first pass."""
        rollouts = batch.rollouts
        with torch.no_grad():
            for rollout, old, ref in zip(
                rollouts, batch_log_probs(self.policy, rollouts), batch_log_probs(self.reference, rollouts)
            ):
                rollout.old_logprobs = old
                rollout.ref_logprobs = ref

        lr = lr_at(iteration, self.config)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        no_signal = self.config.beta == 0 and not any(batch.advantages)
        first: Tuple[float, float] | None = None
        self.policy.train()
        for _ in range(self.config.updates_per_batch):
            self.optimizer.zero_grad(set_to_none=True)
            loss, mean_kl = grpo_loss(self.policy, batch, self.config.beta)
            if first is None:
                first = (float(loss.item()), float(mean_kl.item()))
            if no_signal:
                # The gradient is exactly zero; Adam would still move on stale moments.
                break
            loss.backward()
            self.optimizer.step()
        assert first is not None
        return first[0], first[1], lr

    async def step(self, iteration: int) -> IterationStats:
        started = time.monotonic()
        batch = self.generate(iteration)
        await self.assign_rewards(batch)
        loss, mean_kl, lr = self.update(batch, iteration)
        rewards = np.array([r.reward for r in batch.rollouts], dtype=np.float64)
        return IterationStats(
            iter=iteration,
            mean_reward=float(rewards.mean()),
            std_reward=float(rewards.std()),
            mean_kl=mean_kl,
            loss=loss,
            lr=lr,
            wall_ms=int((time.monotonic() - started) * 1000),
        )

    def save_state(self, next_iteration: int) -> Path:
        """Checkpoint the policy and optimizer and point resume.json at them."""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            self.checkpoint_path,
            self.policy,
            self.vocab.fingerprint,
            metadata={"next_iteration": next_iteration, "grpo": self.config.model_dump(mode="json")},
        )
        optimizer_path = self.output_dir / "optimizer.pt"
        tmp = optimizer_path.with_suffix(".pt.tmp")
        torch.save(self.optimizer.state_dict(), tmp)
        tmp.replace(optimizer_path)
        resume_path = self.output_dir / RESUME_FILE
        state = ResumeState(
            next_iteration=next_iteration,
            checkpoint=str(self.checkpoint_path),
            optimizer=str(optimizer_path),
            reference_checkpoint=str(self.reference_checkpoint) if self.reference_checkpoint else None,
        )
        atomic_write_json(resume_path, state.model_dump())
        return resume_path

    def load_optimizer(self, path: Path) -> None:
        self.optimizer.load_state_dict(torch.load(path, weights_only=True))

    def prepare_output(self, start_iteration: int) -> None:
        """Drop log entries at or after `start_iteration`; a fresh run also drops the old resume point."""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        if start_iteration == 0:
            (self.output_dir / RESUME_FILE).unlink(missing_ok=True)
        if not self.log_path.exists():
            return
        kept = [s for s in read_iteration_log(self.log_path) if s.iter < start_iteration]
        if start_iteration and len(kept) != start_iteration:
            logger.warning("Iteration log has %d entries before iteration %d", len(kept), start_iteration)
        atomic_write_bytes(self.log_path, "".join(json.dumps(s.model_dump()) + "\n" for s in kept).encode("utf-8"))

    async def train(self, start_iteration: int = 0) -> List[IterationStats]:
        """Run iterations [start_iteration, iterations), appending to the iteration log."""
        self.prepare_output(start_iteration)
        logger.info(
            "Tuning for %d iterations: %d prompts x %d completions, beta=%g, max_new_tokens=%d, prompts=%s",
            self.config.iterations,
            self.config.prompts_per_iter,
            self.config.completions_per_prompt,
            self.config.beta,
            self.config.max_new_tokens,
            self.config.prompt_source.value,
        )
        history: List[IterationStats] = []
        for iteration in range(start_iteration, self.config.iterations):
            try:
                stats = await self.step(iteration)
            except PianotuneError as e:
                resume_path = self.save_state(iteration)
                raise TrainingAborted(f"Iteration {iteration} failed: {e}", iteration, str(resume_path)) from e

            with open(self.log_path, "a", encoding="utf-8") as log:
                log.write(json.dumps(stats.model_dump()) + "\n")
            history.append(stats)
            logger.info(
                "iter %d: reward %.3f +/- %.3f kl %.5f loss %.5f lr %.2e",
                iteration,
                stats.mean_reward,
                stats.std_reward,
                stats.mean_kl,
                stats.loss,
                stats.lr,
            )
            done = iteration + 1
            if done % self.config.checkpoint_every == 0 or done == self.config.iterations:
                self.save_state(done)
        return history


def read_iteration_log(path: Path) -> List[IterationStats]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [IterationStats.model_validate_json(line) for line in lines if line.strip()]
