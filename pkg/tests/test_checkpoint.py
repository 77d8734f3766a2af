"""Tests for checkpoint save and load."""

from pathlib import Path

import pytest
import torch

from pianotune.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from pianotune.errors import CheckpointError
from pianotune.tokenizer import Vocab
from pianotune.transformer import CausalTransformer


class TestCheckpoint:
    def test_save_then_load_restores_weights(
        self, temp_dir: Path, vocab: Vocab, tiny_model: CausalTransformer
    ) -> None:
        path = temp_dir / "model.ckpt"
        save_checkpoint(path, tiny_model, vocab.fingerprint, metadata={"epochs": 3})

        model, header = load_checkpoint(path, vocab.fingerprint)

        assert header.model_config == tiny_model.config
        assert header.metadata == {"epochs": 3}
        for name, tensor in tiny_model.state_dict().items():
            torch.testing.assert_close(model.state_dict()[name], tensor)

    def test_loaded_model_gives_same_logits(self, vocab: Vocab, tiny_model: CausalTransformer) -> None:
        model, _ = decode_checkpoint(encode_checkpoint(tiny_model, vocab.fingerprint))
        tokens = torch.tensor([1, 2, 5, 40, 100])
        model.eval()
        tiny_model.eval()
        torch.testing.assert_close(model(tokens), tiny_model(tokens))

    def test_encoding_is_deterministic(self, vocab: Vocab, tiny_model: CausalTransformer) -> None:
        assert encode_checkpoint(tiny_model, vocab.fingerprint) == encode_checkpoint(tiny_model, vocab.fingerprint)

    def test_fingerprint_mismatch(self, temp_dir: Path, vocab: Vocab, tiny_model: CausalTransformer) -> None:
        path = temp_dir / "model.ckpt"
        save_checkpoint(path, tiny_model, vocab.fingerprint)

        with pytest.raises(CheckpointError):
            load_checkpoint(path, "0" * 64)

    def test_truncated_checkpoint(self, vocab: Vocab, tiny_model: CausalTransformer) -> None:
        data = encode_checkpoint(tiny_model, vocab.fingerprint)
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:-8])

    def test_bad_magic(self) -> None:
        with pytest.raises(CheckpointError):
            decode_checkpoint(b"XXXX" + b"\x00" * 16)

    def test_missing_file(self, temp_dir: Path) -> None:
        with pytest.raises(CheckpointError):
            load_checkpoint(temp_dir / "absent.ckpt")

    def test_non_finite_weights_are_refused(self, vocab: Vocab, tiny_model: CausalTransformer) -> None:
        with torch.no_grad():
            tiny_model.head.weight[0, 0] = float("nan")
        with pytest.raises(CheckpointError):
            encode_checkpoint(tiny_model, vocab.fingerprint)
