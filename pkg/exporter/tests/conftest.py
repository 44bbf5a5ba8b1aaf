from __future__ import annotations

import json
from pathlib import Path

import pytest
import torch


def build_tiny_gpt2(target: Path, seed: int = 0, with_eos: bool = True) -> Path:
    """Write a tiny randomly-initialized byte-level GPT-2 checkpoint to disk,
    loadable through the Auto* classes by local path."""
    from transformers import GPT2Config, GPT2LMHeadModel, GPT2Tokenizer
    from transformers.convert_slow_tokenizer import bytes_to_unicode

    target.mkdir(parents=True, exist_ok=True)
    byte_map = bytes_to_unicode()
    vocab = {ch: i for i, (_, ch) in enumerate(sorted(byte_map.items()))}
    if with_eos:
        vocab["<|endoftext|>"] = len(vocab)
    (target / "vocab.json").write_text(json.dumps(vocab))
    (target / "merges.txt").write_text("#version: 0.2\n")
    tokenizer = GPT2Tokenizer(str(target / "vocab.json"), str(target / "merges.txt"))
    tokenizer.save_pretrained(target)
    eos = vocab.get("<|endoftext|>", 0)
    config = GPT2Config(
        vocab_size=len(vocab),
        n_positions=128,
        n_embd=32,
        n_layer=2,
        n_head=2,
        bos_token_id=eos,
        eos_token_id=eos,
    )
    torch.manual_seed(seed)
    GPT2LMHeadModel(config).save_pretrained(target)
    return target


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory) -> Path:
    return build_tiny_gpt2(tmp_path_factory.mktemp("tiny-model"), seed=0)


@pytest.fixture(scope="session")
def tiny_base_model_dir(tmp_path_factory) -> Path:
    return build_tiny_gpt2(tmp_path_factory.mktemp("tiny-base"), seed=1)


def write_inputs(path: Path, records: list[dict]) -> Path:
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return path
