"""Next-token pretraining of the base model on a token dataset."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import torch
from pydantic import BaseModel

from pianotune.config import ModelConfig, PretrainConfig
from pianotune.errors import DatasetFormatError
from pianotune.token_dataset import TokenRecord
from pianotune.tokenizer import PAD_ID, random_crop
from pianotune.transformer import CausalTransformer, init_model, sequence_loss
from pianotune.utils.common import sha256_hex

logger = logging.getLogger(__name__)


@dataclass
class DatasetSplits:
    train: List[TokenRecord]
    validation: List[TokenRecord]
    holdout: List[TokenRecord]

    def sizes(self) -> Dict[str, int]:
        return {"train": len(self.train), "validation": len(self.validation), "holdout": len(self.holdout)}


def split_dataset(
    records: Sequence[TokenRecord], holdout_fraction: float = 0.1, validation_fraction: float = 0.1
) -> DatasetSplits:
    """Deterministic split by file-id hash.

    Files are ordered by sha256 of their id; the first `holdout_fraction` are the
    holdout set, the next `validation_fraction` of the remainder the validation
    set, and the rest the training set.
    """
    ordered = sorted(records, key=lambda r: (sha256_hex(r.file_id), r.file_id))
    n_holdout = round(len(ordered) * holdout_fraction)
    n_validation = round((len(ordered) - n_holdout) * validation_fraction)
    return DatasetSplits(
        holdout=ordered[:n_holdout],
        validation=ordered[n_holdout : n_holdout + n_validation],
        train=ordered[n_holdout + n_validation :],
    )


class EpochStats(BaseModel):
    epoch: int
    train_loss: float
    validation_loss: float | None
    wall_ms: int


@dataclass
class PretrainResult:
    model: CausalTransformer
    history: List[EpochStats] = field(default_factory=list)
    holdout_loss: float | None = None
    split_sizes: Dict[str, int] = field(default_factory=dict)


def _window(ids: np.ndarray, length: int) -> np.ndarray:
    out = np.full(length, PAD_ID, dtype=np.int64)
    head = ids[:length]
    out[: len(head)] = head
    return out


@torch.no_grad()
def evaluate_loss(
    model: CausalTransformer, records: Sequence[TokenRecord], crop_len: int, batch_size: int = 16
) -> float | None:
    """Token-weighted mean loss over the leading `crop_len` tokens of each record."""
    total = 0.0
    count = 0
    for start in range(0, len(records), batch_size):
        rows = np.stack([_window(r.ids, crop_len) for r in records[start : start + batch_size]])
        batch = torch.from_numpy(rows)
        n_targets = int((batch[:, 1:] != PAD_ID).sum())
        if n_targets == 0:
            continue
        total += float(sequence_loss(model, batch)) * n_targets
        count += n_targets
    return total / count if count else None


def pretrain(
    records: Sequence[TokenRecord],
    model_config: ModelConfig,
    config: PretrainConfig,
    model: CausalTransformer | None = None,
) -> PretrainResult:
    """Adam over random crops of the training split, with per-epoch validation loss."""
    if not records:
        raise DatasetFormatError("Cannot pretrain on an empty dataset")
    if config.crop_len - 1 > model_config.max_seq_len:
        raise ValueError(
            f"crop_len {config.crop_len} needs max_seq_len >= {config.crop_len - 1}, got {model_config.max_seq_len}"
        )

    splits = split_dataset(records, config.holdout_fraction, config.validation_fraction)
    train = [r for r in splits.train if len(r) >= 2]
    if not train:
        raise DatasetFormatError("Training split has no record with at least two tokens")
    logger.info(
        "Pretraining on %d files (validation %d, holdout %d): epochs=%d batch_size=%d crop_len=%d lr=%g",
        len(train),
        len(splits.validation),
        len(splits.holdout),
        config.epochs,
        config.batch_size,
        config.crop_len,
        config.learning_rate,
    )

    model = model or init_model(model_config)
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.eps
    )
    rng = np.random.default_rng(config.seed)
    result = PretrainResult(model=model, split_sizes=splits.sizes())

    for epoch in range(1, config.epochs + 1):
        started = time.monotonic()
        order = rng.permutation(len(train))
        losses: List[float] = []
        for start in range(0, len(order), config.batch_size):
            rows = np.stack([random_crop(train[i].ids, config.crop_len, rng) for i in order[start : start + config.batch_size]])
            batch = torch.from_numpy(rows)
            if not bool((batch[:, 1:] != PAD_ID).any()):
                continue
            optimizer.zero_grad(set_to_none=True)
            loss = sequence_loss(model, batch)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.item()))

        model.eval()
        validation_loss = evaluate_loss(model, splits.validation, config.crop_len, config.batch_size)
        model.train()
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else math.nan,
            validation_loss=validation_loss,
            wall_ms=int((time.monotonic() - started) * 1000),
        )
        result.history.append(stats)
        logger.info(
            "epoch %d: train_loss=%.4f validation_loss=%s", epoch, stats.train_loss, validation_loss
        )

    model.eval()
    result.holdout_loss = evaluate_loss(model, splits.holdout, config.crop_len, config.batch_size)
    return result
