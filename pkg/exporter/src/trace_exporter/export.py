"""Teacher-forced distribution export from transformers checkpoints.

For each input the model is run over prompt (++ forced response, when given);
every position's post-softmax next-token distribution lands in one trace
file. Without a forced response the model first greedy-generates a
continuation, recording each step's distribution, so a replay of the trace
reproduces the model's own continuation exactly.

Position 1 carries a one-hot on the first recorded token: a causal model
defines no distribution for the empty context, and the one-hot keeps greedy
replay consistent from the very first position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .format import write_trace_file


class ExportError(RuntimeError):
    """Raised when a job cannot be exported (model, tokenizer, or inputs)."""


@dataclass(frozen=True)
class ExportInput:
    input_id: str
    prompt: str
    image: str | None = None
    response: str | None = None


@dataclass(frozen=True)
class ExportJob:
    """One batch of inputs against one model (optionally paired with the base
    model it was tuned from, for rank analysis)."""

    model: str
    inputs: tuple[ExportInput, ...]
    out_dir: str
    top_m: int | None = 256
    max_new_tokens: int = 32
    base_model: str | None = None
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.top_m is not None and self.top_m < 1:
            raise ExportError("top_m must be at least 1")
        if self.max_new_tokens < 0:
            raise ExportError("max_new_tokens must be nonnegative")


def load_inputs(path: str | Path) -> tuple[ExportInput, ...]:
    """Parse the JSONL input file: one {id?, prompt, image?, response?} per line."""
    inputs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExportError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if "prompt" not in record:
                raise ExportError(f"{path}:{lineno}: missing field 'prompt'")
            inputs.append(
                ExportInput(
                    input_id=str(record.get("id", lineno - 1)),
                    prompt=str(record["prompt"]),
                    image=record.get("image"),
                    response=record.get("response"),
                )
            )
    if not inputs:
        raise ExportError(f"{path}: no inputs found")
    return tuple(inputs)


class _ModelRunner:
    """One loaded checkpoint plus its tokenizer (and processor for vision
    models)."""

    def __init__(self, identifier: str, device: str):
        from transformers import AutoModelForCausalLM, AutoTokenizer

        self.identifier = identifier
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(identifier)
            self.model = AutoModelForCausalLM.from_pretrained(identifier)
        except Exception as exc:
            raise ExportError(f"cannot load model {identifier!r}: {exc}") from exc
        self.model.eval()
        self.device = torch.device(device)
        self.model.to(self.device)
        self.vocab_size = int(self.model.config.vocab_size)

    def tokenize(self, text: str, what: str) -> list[int]:
        ids = self.tokenizer(text, add_special_tokens=False).input_ids
        if not ids:
            raise ExportError(f"{what} tokenized to zero tokens")
        return [int(t) for t in ids]

    def _pixel_inputs(self, image_path: str) -> dict:
        from transformers import AutoProcessor
        from PIL import Image

        try:
            processor = AutoProcessor.from_pretrained(self.identifier)
            image = Image.open(image_path).convert("RGB")
            return {"pixel_values": processor(images=image, return_tensors="pt").pixel_values.to(self.device)}
        except Exception as exc:
            raise ExportError(
                f"cannot prepare image {image_path!r} for {self.identifier!r}: {exc}"
            ) from exc

    @torch.no_grad()
    def position_distributions(self, tokens: Sequence[int], image: str | None) -> list[np.ndarray]:
        """One distribution per position: position 1 is a one-hot on the first
        token, position j>1 is the model's softmax given tokens[: j - 1]."""
        extra = self._pixel_inputs(image) if image else {}
        ids = torch.tensor([list(tokens)], dtype=torch.long, device=self.device)
        logits = self.model(input_ids=ids, **extra).logits[0]
        probs = torch.softmax(logits.float(), dim=-1).cpu().numpy().astype(np.float64)
        first = np.zeros(self.vocab_size, dtype=np.float64)
        first[int(tokens[0])] = 1.0
        return [first] + [probs[j] for j in range(len(tokens) - 1)]

    @torch.no_grad()
    def greedy_continue(
        self, prompt: Sequence[int], image: str | None, max_new_tokens: int
    ) -> tuple[list[int], list[np.ndarray]]:
        """Greedy continuation without KV cache, recording each step's
        distribution; the recorded argmax path is the continuation itself."""
        extra = self._pixel_inputs(image) if image else {}
        tokens = list(prompt)
        generated: list[int] = []
        step_dists: list[np.ndarray] = []
        for _ in range(max_new_tokens):
            ids = torch.tensor([tokens], dtype=torch.long, device=self.device)
            logits = self.model(input_ids=ids, **extra).logits[0, -1]
            probs = torch.softmax(logits.float(), dim=-1).cpu().numpy().astype(np.float64)
            nxt = int(np.argmax(probs))
            step_dists.append(probs)
            generated.append(nxt)
            tokens.append(nxt)
            if nxt == self.model.config.eos_token_id:
                break
        return generated, step_dists


def export(job: ExportJob) -> list[Path]:
    """Run the job and return the written trace paths, one per input (two per
    input in paired mode)."""
    runner = _ModelRunner(job.model, job.device)
    base_runner = None
    if job.base_model is not None:
        base_runner = _ModelRunner(job.base_model, job.device)
        if base_runner.vocab_size != runner.vocab_size:
            raise ExportError(
                f"vocab mismatch: {job.model!r} has {runner.vocab_size}, "
                f"{job.base_model!r} has {base_runner.vocab_size}"
            )
        if base_runner.tokenizer.get_vocab() != runner.tokenizer.get_vocab():
            raise ExportError("tokenizer vocabularies differ between model and base_model")
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for item in job.inputs:
        prompt_ids = runner.tokenize(item.prompt, f"input {item.input_id!r} prompt")
        if item.response is not None:
            full = prompt_ids + runner.tokenize(item.response, f"input {item.input_id!r} response")
            dists = runner.position_distributions(full, item.image)
        else:
            generated, step_dists = runner.greedy_continue(prompt_ids, item.image, job.max_new_tokens)
            full = prompt_ids + generated
            prompt_dists = runner.position_distributions(prompt_ids, item.image)
            dists = prompt_dists + step_dists
        path = out_dir / f"{item.input_id}.trace"
        write_trace_file(path, full, dists, runner.vocab_size, runner.identifier, job.top_m)
        written.append(path)
        if base_runner is not None:
            base_dists = base_runner.position_distributions(full, None)
            base_path = out_dir / f"{item.input_id}.base.trace"
            write_trace_file(
                base_path, full, base_dists, base_runner.vocab_size, base_runner.identifier, job.top_m
            )
            written.append(base_path)
    return written
