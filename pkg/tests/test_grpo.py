"""Tests for GRPO advantages, the KL estimate, the loss and the trainer loop."""

import copy
import json
from pathlib import Path
from typing import Dict, Mapping

import numpy as np
import pytest
import torch

from pianotune.checkpoint import load_checkpoint
from pianotune.config import GrpoConfig, PromptSource, RendererChoice
from pianotune.errors import DatasetFormatError, ScorerError, TrainingAborted
from pianotune.grpo import (
    GrpoTrainer,
    GroupBatch,
    IterationStats,
    Rollout,
    RolloutGroup,
    batch_log_probs,
    compute_advantages,
    dataset_prompt,
    grpo_loss,
    grpo_objective,
    kl_per_token,
    lr_at,
    procedural_prompt,
    read_iteration_log,
)
from pianotune.models import AestheticScores, RewardSpec
from pianotune.scorer import ProxyScorer, RolloutInput
from pianotune.token_dataset import TokenRecord
from pianotune.tokenizer import BOS_ID, TokenKind, Vocab
from pianotune.transformer import CausalTransformer, log_probs


class ConstantScorer:
    """Every rollout gets the same ratings."""

    def __init__(self, value: float = 5.0) -> None:
        self.value = value

    async def score_batch(self, inputs: Mapping[str, RolloutInput]) -> Dict[str, AestheticScores]:
        v = self.value
        return {i: AestheticScores(CE=v, CU=v, PC=v, PQ=v) for i in inputs}


class FailingScorer:
    """Delegates to the proxy until `fail_on_call`, then raises."""

    def __init__(self, fail_on_call: int) -> None:
        self.calls = 0
        self.fail_on_call = fail_on_call

    async def score_batch(self, inputs: Mapping[str, RolloutInput]) -> Dict[str, AestheticScores]:
        self.calls += 1
        if self.calls == self.fail_on_call:
            raise ScorerError("scorer went away")
        return await ProxyScorer().score_batch(inputs)


def _grpo_config(**overrides) -> GrpoConfig:
    values = dict(
        prompts_per_iter=2,
        completions_per_prompt=4,
        max_new_tokens=12,
        iterations=4,
        lr_start=1e-3,
        checkpoint_every=2,
        seed=11,
    )
    values.update(overrides)
    return GrpoConfig(**values)


def _trainer(
    model: CausalTransformer, vocab: Vocab, output_dir: Path, scorer=None, reference=None, **overrides
) -> GrpoTrainer:
    return GrpoTrainer(
        policy=model,
        vocab=vocab,
        config=_grpo_config(**overrides),
        reward=RewardSpec(),
        renderer=RendererChoice(),
        scorer=scorer or ProxyScorer(),
        sample_rate=8000,
        output_dir=output_dir,
        reference=reference,
    )


def _perturbed(model: CausalTransformer, scale: float = 0.05, seed: int = 0) -> CausalTransformer:
    other = copy.deepcopy(model)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in other.parameters():
            p.add_(scale * torch.randn(p.shape, generator=generator, dtype=p.dtype))
    return other


def _fixed_batch(model: CausalTransformer, reference: CausalTransformer, advantages: list[float]) -> GroupBatch:
    generator = torch.Generator().manual_seed(2)
    prompt = torch.tensor([BOS_ID, 5, 6, 7])
    rollouts = []
    for i in range(len(advantages)):
        completion = torch.randint(2, model.config.vocab_size, (6,), generator=generator)
        rollouts.append(Rollout(rollout_id=f"0:0:{i}", prompt=prompt, completion=completion))
    with torch.no_grad():
        for rollout, old, ref in zip(rollouts, batch_log_probs(model, rollouts), batch_log_probs(reference, rollouts)):
            rollout.old_logprobs = old
            rollout.ref_logprobs = ref
    return GroupBatch(groups=[RolloutGroup(prompt=prompt, rollouts=rollouts, advantages=np.array(advantages))])


def _without_wall_clock(history: list[IterationStats]) -> list[dict]:
    return [s.model_dump(exclude={"wall_ms"}) for s in history]


class TestAdvantages:
    def test_standardized_over_many_groups(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(1000):
            size = int(rng.integers(2, 17))
            rewards = rng.normal(5.0, rng.uniform(0.1, 3.0), size=size)
            advantages = compute_advantages(rewards)
            assert abs(advantages.mean()) < 1e-9
            assert advantages.std(ddof=1) == pytest.approx(1.0, abs=1e-3)

    def test_invariant_to_shift_and_scale(self) -> None:
        rewards = np.array([2.0, 5.5, 3.25, 9.0, 1.0, 4.0, 4.0, 7.5])
        base = compute_advantages(rewards, epsilon=0.0)
        np.testing.assert_allclose(compute_advantages(rewards + 3.0, epsilon=0.0), base, atol=1e-12)
        np.testing.assert_allclose(compute_advantages(rewards * 2.5, epsilon=0.0), base, atol=1e-12)

    def test_equal_rewards_give_zeros(self) -> None:
        np.testing.assert_array_equal(compute_advantages([3.0, 3.0, 3.0]), np.zeros(3))

    def test_hand_computed(self) -> None:
        advantages = compute_advantages([1.0, 3.0], epsilon=0.0)
        np.testing.assert_allclose(advantages, [-1 / np.sqrt(2), 1 / np.sqrt(2)])

    def test_needs_two_rewards(self) -> None:
        with pytest.raises(ValueError):
            compute_advantages([1.0])


class TestKl:
    def test_never_negative(self) -> None:
        generator = torch.Generator().manual_seed(0)
        pol = -torch.rand(100_000, generator=generator, dtype=torch.float64) * 20
        ref = -torch.rand(100_000, generator=generator, dtype=torch.float64) * 20
        assert bool((kl_per_token(pol, ref) >= 0).all())

    def test_zero_when_equal(self) -> None:
        assert kl_per_token(-1.5, -1.5) == 0.0

    def test_value(self) -> None:
        assert kl_per_token(-2.0, -1.0) == pytest.approx(np.e - 2.0)

    def test_small_difference_is_quadratic(self) -> None:
        assert kl_per_token(-1.0, -1.0 + 1e-6) == pytest.approx(0.5e-12, rel=1e-3)


class TestObjective:
    def test_on_policy_loss_is_minus_token_weighted_advantage(self) -> None:
        pol = [torch.tensor([-1.0, -2.0]), torch.tensor([-0.5, -0.5, -0.5])]
        loss, kl = grpo_objective(pol, pol, pol, [1.0, -1.0], beta=0.5)
        assert loss.item() == pytest.approx(-(2 * 1.0 + 3 * -1.0) / 5)
        assert kl.item() == 0.0

    def test_kl_penalty_raises_loss(self) -> None:
        pol = [torch.tensor([-1.0, -1.0])]
        ref = [torch.tensor([-2.0, -3.0])]
        without, _ = grpo_objective(pol, pol, ref, [0.0], beta=0.0)
        with_penalty, mean_kl = grpo_objective(pol, pol, ref, [0.0], beta=2.0)
        assert with_penalty.item() == pytest.approx(without.item() + 2.0 * mean_kl.item())
        assert mean_kl.item() > 0

    def test_gradient_matches_finite_differences(self, tiny_model_f64: CausalTransformer) -> None:
        model = tiny_model_f64
        reference = _perturbed(model, scale=0.1)
        batch = _fixed_batch(model, reference, [1.2, -0.4, -0.8])
        # Move off-policy so the ratio term is not trivially 1.
        with torch.no_grad():
            for p in model.parameters():
                p.mul_(1.01)

        model.zero_grad()
        loss, _ = grpo_loss(model, batch, beta=0.3)
        loss.backward()
        analytic = {name: p.grad.clone() for name, p in model.named_parameters()}

        rng = np.random.default_rng(1)
        eps = 1e-6
        with torch.no_grad():
            for name, param in model.named_parameters():
                flat = param.view(-1)
                for index in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                    original = flat[index].item()
                    flat[index] = original + eps
                    plus = grpo_loss(model, batch, 0.3)[0].item()
                    flat[index] = original - eps
                    minus = grpo_loss(model, batch, 0.3)[0].item()
                    flat[index] = original
                    numeric = (plus - minus) / (2 * eps)
                    exact = analytic[name].view(-1)[index].item()
                    assert abs(numeric - exact) <= 1e-4 * max(abs(numeric), abs(exact)) + 1e-7, name


class TestSchedule:
    def test_linear_decay(self) -> None:
        config = GrpoConfig(iterations=200, lr_start=1e-4)
        assert lr_at(0, config) == 1e-4
        assert lr_at(100, config) == pytest.approx(5e-5)
        assert lr_at(200, config) == 0.0

    def test_outside_schedule(self) -> None:
        config = GrpoConfig(iterations=10)
        with pytest.raises(ValueError):
            lr_at(11, config)
        with pytest.raises(ValueError):
            lr_at(-1, config)


class TestPrompts:
    def test_procedural_prompt_shape(self, vocab: Vocab) -> None:
        prompt = procedural_prompt(np.random.default_rng(0), vocab)
        kinds = [vocab.kind(int(t)) for t in prompt[1:]]
        assert prompt[0] == BOS_ID
        assert kinds == [TokenKind.BAR, TokenKind.TIME_SIG, TokenKind.TEMPO]

    def test_procedural_prompts_cover_all_meters(self, vocab: Vocab) -> None:
        rng = np.random.default_rng(0)
        seen = {int(procedural_prompt(rng, vocab)[2]) for _ in range(500)}
        assert seen == set(vocab.ids_of_kind(TokenKind.TIME_SIG))

    def test_procedural_meters_are_uniform(self, vocab: Vocab) -> None:
        rng = np.random.default_rng(21)
        n = 20_000
        meters = vocab.ids_of_kind(TokenKind.TIME_SIG)
        drawn = np.array([procedural_prompt(rng, vocab)[2] for _ in range(n)])
        p = 1 / len(meters)
        se = np.sqrt(p * (1 - p) / n)
        for meter in meters:
            # 3 SE per meter, widened to 3.5 for ten simultaneous checks
            assert abs(np.mean(drawn == meter) - p) <= 3.5 * se

    def test_dataset_prompt(self) -> None:
        records = [TokenRecord(file_id="a", ids=np.arange(1, 50))]
        prompt = dataset_prompt(records, np.random.default_rng(0), 8)
        np.testing.assert_array_equal(prompt, np.arange(1, 9))

    def test_dataset_prompt_from_nothing(self) -> None:
        with pytest.raises(DatasetFormatError):
            dataset_prompt([], np.random.default_rng(0), 8)


class TestTrainer:
    def test_generates_full_groups(self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path) -> None:
        trainer = _trainer(tiny_model, vocab, temp_dir, prompts_per_iter=8, completions_per_prompt=8, max_new_tokens=4)

        batch = trainer.generate(0)

        assert len(batch.groups) == 8
        assert len(batch.rollouts) == 64
        assert len({r.rollout_id for r in batch.rollouts}) == 64
        for group in batch.groups:
            assert len(group.rollouts) == 8
            for rollout in group.rollouts:
                assert torch.equal(rollout.prompt, group.prompt)
                assert len(rollout.completion) == 4

    def test_same_iteration_same_samples(self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path) -> None:
        trainer = _trainer(tiny_model, vocab, temp_dir)
        a = [r.sequence for r in trainer.generate(3).rollouts]
        b = [r.sequence for r in trainer.generate(3).rollouts]
        c = [r.sequence for r in trainer.generate(4).rollouts]
        assert all(torch.equal(x, y) for x, y in zip(a, b))
        assert not all(torch.equal(x, y) for x, y in zip(a, c))

    def test_dataset_source_requires_prompts(self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path) -> None:
        with pytest.raises(DatasetFormatError):
            _trainer(tiny_model, vocab, temp_dir, prompt_source=PromptSource.DATASET)

    async def test_rewards_and_advantages(self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path) -> None:
        trainer = _trainer(tiny_model, vocab, temp_dir)
        batch = trainer.generate(0)

        await trainer.assign_rewards(batch)

        for group in batch.groups:
            assert group.advantages.shape == (4,)
            assert abs(group.advantages.sum()) < 1e-9
        assert all(1.0 <= r.reward <= 10.0 for r in batch.rollouts)
        assert all(r.score is not None for r in batch.rollouts)

    async def test_no_signal_leaves_policy_unchanged(
        self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path
    ) -> None:
        trainer = _trainer(tiny_model, vocab, temp_dir, scorer=ConstantScorer(), beta=0.0)
        before = copy.deepcopy(tiny_model.state_dict())

        stats = await trainer.step(0)

        assert stats.std_reward == 0.0
        for name, tensor in tiny_model.state_dict().items():
            assert torch.equal(tensor, before[name]), name

    def test_kl_penalty_pulls_policy_to_reference(self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path) -> None:
        reference = _perturbed(tiny_model, scale=0.2, seed=5)
        trainer = _trainer(tiny_model, vocab, temp_dir, reference=reference, beta=10.0, lr_start=1e-3, iterations=100)
        batch = _fixed_batch(tiny_model, reference, [0.0, 0.0, 0.0, 0.0])

        kls = [trainer.update(batch, iteration)[1] for iteration in range(20)]

        assert kls[-1] < kls[0]

    async def test_strong_kl_anchor_with_constant_reward(
        self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path
    ) -> None:
        trainer = _trainer(
            tiny_model, vocab, temp_dir, scorer=ConstantScorer(), beta=10.0, iterations=20, max_new_tokens=6
        )

        history = await trainer.train()

        assert len(history) == 20
        assert max(s.mean_kl for s in history) < 0.01

    async def test_train_writes_log_and_checkpoints(
        self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path
    ) -> None:
        trainer = _trainer(tiny_model, vocab, temp_dir, iterations=3, checkpoint_every=2)

        history = await trainer.train()

        assert [s.iter for s in history] == [0, 1, 2]
        assert read_iteration_log(temp_dir / "iterations.jsonl") == history
        assert [s.lr for s in history] == pytest.approx([1e-3, 1e-3 * 2 / 3, 1e-3 / 3])
        resume = json.loads((temp_dir / "resume.json").read_text())
        assert resume["next_iteration"] == 3
        assert (temp_dir / "policy.ckpt").exists()
        assert (temp_dir / "optimizer.pt").exists()

    async def test_fresh_run_replaces_previous_log(
        self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path
    ) -> None:
        initial = copy.deepcopy(tiny_model)
        first = await _trainer(copy.deepcopy(initial), vocab, temp_dir, iterations=3).train()

        second = await _trainer(copy.deepcopy(initial), vocab, temp_dir, iterations=3).train()

        logged = read_iteration_log(temp_dir / "iterations.jsonl")
        assert logged == second
        assert _without_wall_clock(logged) == _without_wall_clock(first)

    async def test_fresh_run_drops_stale_resume_point(
        self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path
    ) -> None:
        trainer = _trainer(tiny_model, vocab, temp_dir, scorer=FailingScorer(fail_on_call=1))
        with pytest.raises(TrainingAborted):
            await trainer.train()
        assert (temp_dir / "resume.json").exists()

        trainer.prepare_output(0)

        assert not (temp_dir / "resume.json").exists()

    async def test_restart_trims_log_past_start(self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path) -> None:
        trainer = _trainer(tiny_model, vocab, temp_dir, iterations=3)
        await trainer.train()

        trainer.prepare_output(2)

        assert [s.iter for s in read_iteration_log(temp_dir / "iterations.jsonl")] == [0, 1]

    async def test_abort_saves_resume_point(self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path) -> None:
        trainer = _trainer(tiny_model, vocab, temp_dir, scorer=FailingScorer(fail_on_call=2))

        with pytest.raises(TrainingAborted) as excinfo:
            await trainer.train()

        assert excinfo.value.iteration == 1
        assert excinfo.value.to_dict()["details"]["resume_path"] == str(temp_dir / "resume.json")
        assert json.loads((temp_dir / "resume.json").read_text())["next_iteration"] == 1
        assert len(read_iteration_log(temp_dir / "iterations.jsonl")) == 1

    async def test_resumed_run_matches_uninterrupted_run(
        self, tiny_model: CausalTransformer, vocab: Vocab, temp_dir: Path
    ) -> None:
        initial = copy.deepcopy(tiny_model)

        straight = _trainer(copy.deepcopy(initial), vocab, temp_dir / "a", reference=copy.deepcopy(initial))
        await straight.train()

        interrupted = _trainer(
            copy.deepcopy(initial), vocab, temp_dir / "b", scorer=FailingScorer(3), reference=copy.deepcopy(initial)
        )
        with pytest.raises(TrainingAborted):
            await interrupted.train()

        policy, _ = load_checkpoint(temp_dir / "b" / "policy.ckpt", vocab.fingerprint)
        resumed = _trainer(policy, vocab, temp_dir / "b", reference=copy.deepcopy(initial))
        resumed.load_optimizer(temp_dir / "b" / "optimizer.pt")
        await resumed.train(start_iteration=2)

        for (name, a), (_, b) in zip(straight.policy.named_parameters(), resumed.policy.named_parameters()):
            torch.testing.assert_close(a, b, msg=name)
        assert [s.iter for s in read_iteration_log(temp_dir / "b" / "iterations.jsonl")] == [0, 1, 2, 3]


def test_log_probs_of_rollout_match_direct_computation(tiny_model: CausalTransformer) -> None:
    prompt = torch.tensor([BOS_ID, 5, 6])
    rollouts = [
        Rollout(rollout_id="a", prompt=prompt, completion=torch.tensor([10, 11, 12])),
        Rollout(rollout_id="b", prompt=torch.tensor([BOS_ID, 5]), completion=torch.tensor([20, 21])),
    ]
    values = batch_log_probs(tiny_model, rollouts)
    torch.testing.assert_close(values[0], log_probs(tiny_model, rollouts[0].sequence, 3))
    torch.testing.assert_close(values[1], log_probs(tiny_model, rollouts[1].sequence, 2))
