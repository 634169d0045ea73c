"""Synthetic prompt/answer tasks with exactly checkable answers.

Payload tokens live in ``[0, alphabet)``. The top of the vocabulary is
reserved: ``SEP = V - 1`` separates prompt from answer, ``PAD = V - 2`` pads
batches on the right, and ``V - 3 - i`` marks task ``i`` when prompts carry a
task marker (needed when tasks are mixed, otherwise the prompt is ambiguous).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import IGNORE_INDEX, no_grad
from .echo import build_answer_mask, find_boundary
from .errors import ConfigError, DataError

TASKS = ("copy", "reverse", "sorted-selection", "modular-sum")


def sep_id(vocab_size: int) -> int:
    return vocab_size - 1


def pad_id(vocab_size: int) -> int:
    return vocab_size - 2


def marker_id(task: str, vocab_size: int) -> int:
    return vocab_size - 3 - TASKS.index(task)


def solve(task: str, payload: Sequence[int], modulus: int = 10) -> list[int]:
    """The answer each task demands for a payload."""
    payload = list(payload)
    if task == "copy":
        return payload
    if task == "reverse":
        return payload[::-1]
    if task == "sorted-selection":
        return sorted(payload)
    if task == "modular-sum":
        return [sum(payload) % modulus]
    raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")


@dataclass(frozen=True)
class Sample:
    prompt_tokens: tuple[int, ...]
    answer_tokens: tuple[int, ...]
    task_id: str

    def __post_init__(self):
        if not self.prompt_tokens or not self.answer_tokens:
            raise DataError("prompt and answer must both be non-empty")
        if self.task_id not in TASKS:
            raise DataError(f"unknown task {self.task_id!r}")


@dataclass(frozen=True)
class TaskSpec:
    alphabet: int = 10
    min_len: int = 4
    max_len: int = 4
    modulus: int = 10
    marker: bool = True


def _check_task(task: str, spec: TaskSpec, vocab_size: int) -> None:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")
    reserved = 2 + len(TASKS)
    if spec.alphabet < 2 or spec.alphabet > vocab_size - reserved:
        raise ConfigError(f"alphabet {spec.alphabet} does not fit vocab {vocab_size} "
                          f"with {reserved} reserved ids")
    if not 1 <= spec.min_len <= spec.max_len:
        raise ConfigError(f"need 1 <= min_len <= max_len, got {spec.min_len}, {spec.max_len}")
    if task == "modular-sum" and not 2 <= spec.modulus <= spec.alphabet:
        raise ConfigError(f"modulus {spec.modulus} must lie in [2, alphabet={spec.alphabet}]")


def gen_dataset(task: str, n: int, seed: int, spec: TaskSpec = TaskSpec(),
                vocab_size: int = 64) -> list[Sample]:
    """``n`` deterministic samples of one task."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    _check_task(task, spec, vocab_size)
    rng = np.random.default_rng([seed, TASKS.index(task)])
    out = []
    for _ in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        payload = [int(x) for x in rng.integers(0, spec.alphabet, length)]
        answer = solve(task, payload, spec.modulus)
        prompt = ([marker_id(task, vocab_size)] if spec.marker else []) + payload
        out.append(Sample(tuple(prompt), tuple(answer), task))
    return out


def gen_mixture(tasks: Iterable[str], n_per_task: int, seed: int,
                spec: TaskSpec = TaskSpec(), vocab_size: int = 64) -> list[Sample]:
    """Round-robin interleaving of several tasks."""
    per_task = [gen_dataset(t, n_per_task, seed, spec, vocab_size) for t in tasks]
    return [s for group in zip(*per_task) for s in group]


def payload_of(sample: Sample, vocab_size: int) -> list[int]:
    p = list(sample.prompt_tokens)
    return p[1:] if p and p[0] == marker_id(sample.task_id, vocab_size) else p


# -- encoding -------------------------------------------------------------------

@dataclass
class Batch:
    """Right-padded token ids with next-token labels aligned to the tokens.

    ``labels[b, t]`` equals ``tokens[b, t]`` on answer positions and
    ``IGNORE_INDEX`` elsewhere; the loss shifts by one so that logits at
    position ``t - 1`` predict ``labels[b, t]``.
    """

    tokens: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray
    t_star: np.ndarray
    mask: np.ndarray

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def encode(sample: Sample, max_seq_len: int, vocab_size: int = 64,
           pad_to: int | None = None) -> tuple[np.ndarray, np.ndarray, int]:
    """tokens = prompt + SEP + answer + PAD..., labels masked outside the answer.

    Returns (tokens, labels, t_star) where t_star is the SEP index.
    """
    prompt, answer = list(sample.prompt_tokens), list(sample.answer_tokens)
    used = len(prompt) + 1 + len(answer)
    if used > max_seq_len:
        raise DataError(f"sample needs {used} positions, max_seq_len is {max_seq_len}")
    if any(t >= vocab_size or t < 0 for t in prompt + answer):
        raise DataError("token outside vocabulary")
    width = used if pad_to is None else pad_to
    if width < used:
        raise DataError(f"pad_to={pad_to} is shorter than the sample ({used})")
    tokens = np.full(width, pad_id(vocab_size), dtype=np.int64)
    labels = np.full(width, IGNORE_INDEX, dtype=np.int64)
    tokens[:used] = prompt + [sep_id(vocab_size)] + answer
    t_star = len(prompt)
    labels[t_star + 1:used] = answer
    return tokens, labels, t_star


def decode(tokens, labels, task_id: str) -> Sample:
    """Inverse of :func:`encode`."""
    tokens, labels = np.asarray(tokens), np.asarray(labels)
    t_star = int(find_boundary(labels))
    answer_pos = np.flatnonzero(labels != IGNORE_INDEX)
    return Sample(tuple(int(t) for t in tokens[:t_star]),
                  tuple(int(t) for t in tokens[answer_pos]), task_id)


def collate(samples: Sequence[Sample], max_seq_len: int, vocab_size: int = 64) -> Batch:
    width = max(len(s.prompt_tokens) + 1 + len(s.answer_tokens) for s in samples)
    rows = [encode(s, max_seq_len, vocab_size, pad_to=width) for s in samples]
    tokens = np.stack([r[0] for r in rows])
    labels = np.stack([r[1] for r in rows])
    t_star = np.array([r[2] for r in rows], dtype=np.int64)
    lengths = np.array([len(s.prompt_tokens) + 1 + len(s.answer_tokens) for s in samples])
    return Batch(tokens, labels, lengths, t_star, build_answer_mask(labels))


def iterate_batches(samples: Sequence[Sample], batch_size: int, rng: np.random.Generator,
                    max_seq_len: int, vocab_size: int = 64, shuffle: bool = True):
    order = rng.permutation(len(samples)) if shuffle else np.arange(len(samples))
    for start in range(0, len(samples), batch_size):
        idx = order[start:start + batch_size]
        yield collate([samples[i] for i in idx], max_seq_len, vocab_size)


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return -(-n_samples // batch_size)


# -- persistence -------------------------------------------------------------------

def dump_dataset(samples: Iterable[Sample], path) -> None:
    """One JSON record per line: task_id, prompt ids, answer ids."""
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({"task_id": s.task_id, "prompt": list(s.prompt_tokens),
                                 "answer": list(s.answer_tokens)}) + "\n")


def load_dataset(path) -> list[Sample]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(Sample(tuple(rec["prompt"]), tuple(rec["answer"]), rec["task_id"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad record ({exc})") from None
    return out


# -- evaluation ----------------------------------------------------------------------

LogitsFn = Callable[[np.ndarray], np.ndarray]


def greedy_decode(logits_fn: LogitsFn, prompts: np.ndarray, n_new: int,
                  vocab_size: int) -> np.ndarray:
    """Append SEP, then ``n_new`` argmax tokens, for a (B, P) block of equal-length prompts."""
    seq = np.concatenate([prompts, np.full((prompts.shape[0], 1), sep_id(vocab_size))], axis=1)
    for _ in range(n_new):
        nxt = logits_fn(seq)[:, -1].argmax(axis=-1)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return seq[:, -n_new:]


def eval_accuracy(model, samples: Sequence[Sample], vocab_size: int | None = None,
                  batch_size: int = 64) -> float:
    """Exact-match rate of greedy answers, echo path off.

    ``model`` is anything with an ``echo_off_logits(tokens) -> (B, T, V)``
    method, or a plain callable with that signature.
    """
    if not samples:
        return 0.0
    logits_fn = getattr(model, "echo_off_logits", model)
    if vocab_size is None:
        vocab_size = model.vocab_size
    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault((len(s.prompt_tokens), len(s.answer_tokens)), []).append(i)
    correct = 0
    with no_grad():
        for (_, n_ans), idx in sorted(groups.items()):
            for start in range(0, len(idx), batch_size):
                chunk = idx[start:start + batch_size]
                prompts = np.array([samples[i].prompt_tokens for i in chunk])
                answers = np.array([samples[i].answer_tokens for i in chunk])
                pred = greedy_decode(logits_fn, prompts, n_ans, vocab_size)
                correct += int(np.all(pred == answers, axis=1).sum())
    return correct / len(samples)


def eval_by_task(model, samples: Sequence[Sample], vocab_size: int | None = None) -> dict[str, float]:
    tasks = sorted({s.task_id for s in samples}, key=TASKS.index)
    return {t: eval_accuracy(model, [s for s in samples if s.task_id == t], vocab_size)
            for t in tasks}
