"""Mini causal transformer language model over token ids."""

from __future__ import annotations

import logging
import math
from typing import Dict, Sequence, Tuple

import torch
import torch.nn as nn
from torch.nn import functional as F

from pianotune.config import ModelConfig
from pianotune.tokenizer import PAD_ID

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.query = nn.Linear(config.d_model, config.d_model)
        self.key = nn.Linear(config.d_model, config.d_model)
        self.value = nn.Linear(config.d_model, config.d_model)
        self.out = nn.Linear(config.d_model, config.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, width = x.shape

        def heads(t: torch.Tensor) -> torch.Tensor:
            return t.view(batch, length, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        future = torch.triu(torch.ones(length, length, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(future, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        y = (weights @ v).transpose(1, 2).reshape(batch, length, width)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm residual block: attention then MLP."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.attn_norm = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config)
        self.mlp_norm = nn.LayerNorm(config.d_model)
        self.mlp_in = nn.Linear(config.d_model, config.d_ff)
        self.mlp_out = nn.Linear(config.d_ff, config.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.attn_norm(x))
        return x + self.mlp_out(F.gelu(self.mlp_in(self.mlp_norm(x))))


class CausalTransformer(nn.Module):
    """Decoder-only transformer with learned positional embeddings.

    PAD is masked only in the loss; attention is purely causal since PAD only
    ever appears as right padding.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.position_embedding = nn.Embedding(config.max_seq_len, config.d_model)
        self.blocks = nn.ModuleList([Block(config) for _ in range(config.n_layers)])
        self.final_norm = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Logits of shape [..., seq_len, vocab] for ids of shape [..., seq_len]."""
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        length = tokens.shape[-1]
        if length > self.config.max_seq_len:
            raise ValueError(f"Sequence length {length} exceeds max_seq_len {self.config.max_seq_len}")
        if length == 0:
            raise ValueError("Cannot run the model on an empty sequence")

        positions = torch.arange(length, device=tokens.device)
        x = self.token_embedding(tokens) + self.position_embedding(positions)
        for block in self.blocks:
            x = block(x)
        logits = self.head(self.final_norm(x))
        return logits.squeeze(0) if squeeze else logits

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype


def init_model(config: ModelConfig, dtype: torch.dtype = torch.float32) -> CausalTransformer:
    """Build a model with seeded N(0, 0.02) weights, zero biases and unit norm gains.

    The global torch RNG is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = CausalTransformer(config)
        for module in model.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, mean=0.0, std=INIT_STD)
                if isinstance(module, nn.Linear) and module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
    return model.to(dtype)


def _as_batch(batch: torch.Tensor | Sequence[Sequence[int]]) -> torch.Tensor:
    tokens = torch.as_tensor(batch, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    return tokens


def sequence_loss(model: CausalTransformer, batch: torch.Tensor | Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean next-token cross-entropy over non-PAD targets of a [batch, len] id tensor."""
    tokens = _as_batch(batch)
    if tokens.shape[0] == 0 or tokens.shape[1] < 2:
        raise ValueError("Batch must contain sequences of at least two tokens")
    targets = tokens[:, 1:]
    if not bool((targets != PAD_ID).any()):
        raise ValueError("Every target position in the batch is PAD")
    logits = model(tokens[:, :-1])
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        targets.reshape(-1),
        ignore_index=PAD_ID,
    )


def loss_and_grads(
    model: CausalTransformer, batch: torch.Tensor | Sequence[Sequence[int]]
) -> Tuple[float, Dict[str, torch.Tensor]]:
    """Loss value and the exact gradient of every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = sequence_loss(model, batch)
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    return float(loss.item()), grads


def log_probs(model: CausalTransformer, sequence: torch.Tensor, prompt_len: int) -> torch.Tensor:
    """Log-probability of every completion token given all tokens before it.

    `sequence` is [len] or [batch, len]; the result is [len - prompt_len] or
    [batch, len - prompt_len]. Contexts longer than max_seq_len use the most
    recent window, as sampling does.
    """
    squeeze = sequence.dim() == 1
    tokens = sequence.unsqueeze(0) if squeeze else sequence
    length = tokens.shape[1]
    if not 0 < prompt_len < length:
        raise ValueError(f"prompt_len must be in (0, {length}), got {prompt_len}")

    window = model.config.max_seq_len
    if length - 1 <= window:
        logits = model(tokens[:, :-1])[:, prompt_len - 1 :, :]
    else:
        steps = []
        for t in range(prompt_len, length):
            context = tokens[:, max(0, t - window) : t]
            steps.append(model(context)[:, -1, :])
        logits = torch.stack(steps, dim=1)

    logp = torch.log_softmax(logits, dim=-1)
    taken = logp.gather(-1, tokens[:, prompt_len:].unsqueeze(-1)).squeeze(-1)
    return taken.squeeze(0) if squeeze else taken


@torch.no_grad()
def sample_batch(
    model: CausalTransformer,
    prompts: Sequence[Sequence[int]] | torch.Tensor,
    max_new_tokens: int,
    temperature: float,
    generator: torch.Generator,
) -> torch.Tensor:
    """Extend equal-length prompts [batch, prompt_len] by `max_new_tokens` sampled ids.

    Temperature 0 means greedy decoding. Contexts longer than max_seq_len slide
    to the most recent window.
    """
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    seqs = torch.as_tensor(prompts, dtype=torch.long)
    if seqs.dim() != 2 or seqs.shape[1] == 0:
        raise ValueError("prompts must be a non-empty [batch, prompt_len] array")

    was_training = model.training
    model.eval()
    window = model.config.max_seq_len
    for _ in range(max_new_tokens):
        logits = model(seqs[:, -window:])[:, -1, :]
        if temperature == 0:
            next_ids = torch.argmax(logits, dim=-1, keepdim=True)
        else:
            probs = torch.softmax(logits.double() / temperature, dim=-1)
            next_ids = torch.multinomial(probs, 1, generator=generator)
        seqs = torch.cat([seqs, next_ids], dim=1)
    model.train(was_training)
    return seqs


def sample(
    model: CausalTransformer,
    prompt: Sequence[int] | torch.Tensor,
    max_new_tokens: int,
    temperature: float,
    generator: torch.Generator,
) -> torch.Tensor:
    base = torch.as_tensor(prompt, dtype=torch.long).flatten()
    return sample_batch(model, base.unsqueeze(0), max_new_tokens, temperature, generator)[0]
