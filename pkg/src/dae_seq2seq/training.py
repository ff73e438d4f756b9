"""Objectives, optimizer, schedule, batching, and the pre-train / fine-tune loop."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS, PAD, TokenSequence, Vocabulary, encode_extended
from .model import Seq2Seq, pad_batch
from .noising import NoiseConfig, Unigram, apply_noise
from .seeding import derive_rng

log = logging.getLogger(__name__)

# running tallies of degenerate events (empty masks, skipped steps)
events: Counter = Counter()


class NonFiniteError(FloatingPointError):
    pass


# ----------------------------------------------------------------- objective

def masked_nll_from_logprobs(label_logprobs: Tensor, mask, normalize: bool = True) -> Tensor:
    """-sum(mask * log p(label)), divided by the mask count when ``normalize``."""
    mask = np.asarray(mask, dtype=label_logprobs.dtype)
    if mask.shape != label_logprobs.shape:
        raise ad.ShapeError(f"mask shape {mask.shape} != logprob shape {label_logprobs.shape}")
    total = float(mask.sum())
    if total == 0:
        events["empty_mask"] += 1
        return ad.Tensor(np.zeros((), dtype=label_logprobs.dtype))
    loss = ad.scale(ad.reduce_sum(ad.mul(label_logprobs, mask)), -1.0)
    return ad.scale(loss, 1.0 / total) if normalize else loss


def masked_nll_loss(logprobs: Tensor, labels, mask, normalize: bool = True) -> Tensor:
    """Masked negative log-likelihood over a (..., T, vocab) log-probability tensor."""
    logprobs = ad.as_tensor(logprobs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logprobs.shape[:-1]:
        raise ad.ShapeError(f"labels shape {labels.shape} != logprob rows {logprobs.shape[:-1]}")
    return masked_nll_from_logprobs(ad.take(logprobs, labels), mask, normalize)


# ------------------------------------------------------------------ optimizer

def clip_grad_norm(params: Sequence[Tensor], max_norm: float = 2.0) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the scale applied; 0.0 means the norm was not finite, the
    gradients were zeroed, and the step must be skipped.
    """
    norm = ad.parameters_grad_norm(params)
    if not math.isfinite(norm):
        for p in params:
            if p.grad is not None:
                p.grad[...] = 0
        events["skipped_steps"] += 1
        return 0.0
    if norm <= max_norm:
        return 1.0
    s = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad *= p.grad.dtype.type(s)
    return s


class NAG:
    """Nesterov momentum: v <- mu*v - lr*g; w <- w + mu*v - lr*g."""

    def __init__(self, params: dict, lr: float = 2e-3, momentum: float = 0.99):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in unique_params(params).items()}

    def step(self, params: dict) -> None:
        mu, lr = self.momentum, self.lr
        updates = {}
        for k, p in unique_params(params).items():
            if p.grad is None:
                continue
            g = p.grad
            v = mu * self.velocity[k] - lr * g
            w = p.data + mu * v - lr * g
            if not np.all(np.isfinite(w)):
                raise NonFiniteError(f"parameter {k} became non-finite; update discarded")
            updates[k] = (v.astype(p.data.dtype), w.astype(p.data.dtype))
        for k, (v, w) in updates.items():
            self.velocity[k] = v
            params[k].data[...] = w


class EMA:
    def __init__(self, params: dict, decay: float = 0.9995):
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in unique_params(params).items()}

    def update(self, params: dict) -> None:
        d = self.decay
        for k, p in unique_params(params).items():
            s = self.shadow[k]
            s *= s.dtype.type(d)
            s += s.dtype.type(1.0 - d) * p.data


def unique_params(params: dict) -> dict:
    """Drop aliases so tied storage is updated exactly once."""
    seen, out = set(), {}
    for k, p in params.items():
        if id(p) not in seen:
            seen.add(id(p))
            out[k] = p
    return out


def zero_grad(params: dict) -> None:
    for p in params.values():
        p.grad = None


@dataclass
class LRSchedule:
    """Halve on a validation plateau; stop once the rate falls under the floor."""

    lr_floor: float = 1e-4
    patience: int = 1
    best_val_loss: float = math.inf
    bad_epochs: int = 0
    halvings: int = 0

    def update(self, val_loss: float, optimizer: NAG) -> str:
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.bad_epochs = 0
            return "continue"
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return "continue"
        self.bad_epochs = 0
        self.halvings += 1
        optimizer.lr /= 2.0
        return "stop" if optimizer.lr < self.lr_floor else "halve"


def average_gradients(shards: Sequence[dict], weights: Sequence[float] | None = None) -> dict:
    """Elementwise (optionally weighted) mean of per-worker gradient maps."""
    if not shards:
        raise ValueError("average_gradients needs at least one shard")
    keys = list(shards[0])
    w = np.ones(len(shards)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    out = {}
    for k in keys:
        grads = []
        for i, s in enumerate(shards):
            if k not in s or s[k].shape != shards[0][k].shape:
                got = None if k not in s else s[k].shape
                raise ad.ShapeError(f"average_gradients: shard {i} has {got} for {k}, "
                                    f"expected {shards[0][k].shape}")
            grads.append(s[k])
        acc = np.zeros_like(grads[0])
        for wi, g in zip(w, grads):
            acc += g * g.dtype.type(wi)
        out[k] = acc
    return out


# ------------------------------------------------------------------ batching

def make_batches(sizes: Sequence[int], token_budget: int = 3000, seed: int = 0,
                 epoch: int = 0) -> list[list[int]]:
    """Pack example indices into batches whose padded size stays within budget.

    Examples are sorted by size and packed greedily; the batch order is then
    shuffled with a stream derived from ``(seed, epoch)``.
    """
    for i, n in enumerate(sizes):
        if n > token_budget:
            raise ValueError(f"example {i} has {n} tokens, over the budget of {token_budget}")
    order = sorted(range(len(sizes)), key=lambda i: (sizes[i], i))
    batches, cur, longest = [], [], 0
    for i in order:
        new_longest = max(longest, sizes[i])
        if cur and new_longest * (len(cur) + 1) > token_budget:
            batches.append(cur)
            cur, new_longest = [], sizes[i]
        cur.append(i)
        longest = new_longest
    if cur:
        batches.append(cur)
    perm = derive_rng(seed, "shuffle", epoch).permutation(len(batches))
    return [batches[j] for j in perm]


@dataclass
class Example:
    """One encoded training pair: source ext ids, label ext ids, loss mask."""

    src: list[int]
    labels: list[int]
    mask: list[float]
    n_oov: int
    oov_words: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return max(len(self.src), len(self.labels))


def make_example(source: Sequence[str], target: Sequence[str], vocab: Vocabulary,
                 mask=None) -> Example:
    """Encode a pair; labels get a trailing EOS which is always in the mask."""
    s, t = encode_extended(list(source), list(target), vocab)
    labels = t.ext_ids + [EOS]
    m = [1.0] * len(labels) if mask is None else [float(x) for x in mask] + [1.0]
    return Example(s.ext_ids, labels, m, len(s.oov_words), s.oov_words)


@dataclass
class Batch:
    src: np.ndarray
    src_pad: np.ndarray
    tgt_in: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    n_ext: int

    @property
    def n_tokens(self) -> float:
        return float(self.mask.sum())


def collate(examples: Sequence[Example], vocab_size: int) -> Batch:
    src, src_pad = pad_batch([e.src for e in examples])
    labels, tgt_pad = pad_batch([e.labels for e in examples])
    tgt_in = np.full_like(labels, PAD)
    tgt_in[:, 0] = BOS
    tgt_in[:, 1:] = labels[:, :-1]
    tgt_in[:, 1:][tgt_pad[:, 1:]] = PAD
    mask = np.zeros(labels.shape)
    for i, e in enumerate(examples):
        mask[i, : len(e.mask)] = e.mask
    n_ext = vocab_size + max(e.n_oov for e in examples)
    return Batch(src, src_pad, tgt_in, labels, mask, n_ext)


def batch_loss(model: Seq2Seq, batch: Batch, train: bool = False, rng=None,
               normalize: bool = True) -> Tensor:
    lp = model.label_logprobs(batch.src, batch.tgt_in, batch.labels, batch.n_ext,
                              batch.src_pad, train, rng)
    return masked_nll_from_logprobs(lp, batch.mask, normalize)


def compute_gradients(model: Seq2Seq, batch: Batch, train: bool = False, rng=None,
                      normalize: bool = True) -> tuple[float, dict]:
    zero_grad(model.params)
    loss = batch_loss(model, batch, train, rng, normalize)
    loss.backward()
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for k, p in unique_params(model.params).items()}
    return loss.item(), grads


# --------------------------------------------------------------------- tasks

class DenoisingTask:
    """Clean segments, re-noised on the fly for every iteration."""

    VALID_KEY = 2 ** 31

    def __init__(self, segments: Sequence[Sequence[str]], vocab: Vocabulary,
                 noise: NoiseConfig):
        if not segments:
            raise ValueError("corpus is empty after filtering")
        self.segments = [list(s) for s in segments]
        self.vocab = vocab
        self.noise = noise
        self.unigram = Unigram.from_vocab(vocab)

    def sizes(self) -> list[int]:
        return [len(s) + 1 for s in self.segments]

    def example(self, index: int, *keys: int) -> Example:
        rng = derive_rng(self.noise.seed, "noise", *keys, index)
        ex = apply_noise(self.segments[index], self.noise, self.unigram, rng)
        noisy = ex.noisy or ["<unk>"]
        return make_example(noisy, ex.clean, self.vocab, ex.mask)

    def batch(self, indices: Sequence[int], iteration: int) -> Batch:
        return collate([self.example(i, iteration) for i in indices], len(self.vocab))

    def valid_examples(self, indices: Sequence[int]) -> list[Example]:
        return [self.example(i, self.VALID_KEY) for i in indices]


class PairTask:
    """Fixed (source, target) pairs with an all-ones mask."""

    def __init__(self, pairs: Sequence[tuple[Sequence[str], Sequence[str]]], vocab: Vocabulary):
        if not pairs:
            raise ValueError("paired dataset is empty")
        self.vocab = vocab
        self.pairs = [(list(s), list(t)) for s, t in pairs]
        self.examples = [make_example(s, t, vocab) for s, t in self.pairs]

    def sizes(self) -> list[int]:
        return [e.size for e in self.examples]

    def batch(self, indices: Sequence[int], iteration: int) -> Batch:
        return collate([self.examples[i] for i in indices], len(self.vocab))

    def valid_examples(self, indices: Sequence[int]) -> list[Example]:
        return [self.examples[i] for i in indices]


# ---------------------------------------------------------------- the loop

@dataclass
class TrainConfig:
    lr: float = 2e-3
    momentum: float = 0.99
    clip_norm: float = 2.0
    ema_decay: float = 0.9995
    lr_floor: float = 1e-4
    patience: int = 1
    token_budget: int = 3000
    max_iterations: int = 20000
    max_epochs: int = 1000
    checkpoint_every: int = 0
    normalize_loss: bool = True
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class ValidationRecord:
    epoch: int
    iteration: int
    train_loss: float
    val_loss: float
    lr: float

    @property
    def val_ppl(self) -> float:
        return math.exp(min(self.val_loss, 700.0))

    def log_line(self) -> str:
        return (f"{self.epoch}\t{self.iteration}\t{self.train_loss:.6f}\t{self.val_loss:.6f}"
                f"\t{self.val_ppl:.6f}\t{self.lr:.6g}")


def evaluate_loss(model: Seq2Seq, examples: Sequence[Example], token_budget: int = 3000,
                  params: dict | None = None) -> float:
    """Mean per-masked-token NLL in eval mode, optionally under substitute weights."""
    if not examples:
        raise ValueError("empty evaluation set")
    saved = None
    if params is not None:
        saved = swap_weights(model, params)
    try:
        total, count = 0.0, 0.0
        with ad.no_grad():
            for idx in make_batches([e.size for e in examples], token_budget):
                batch = collate([examples[i] for i in idx], model.cfg.vocab_size)
                loss = batch_loss(model, batch, normalize=False).item()
                total += loss
                count += batch.n_tokens
    finally:
        if saved is not None:
            swap_weights(model, saved)
    return total / max(count, 1.0)


def swap_weights(model: Seq2Seq, arrays: dict) -> dict:
    """Load ``arrays`` into the model's parameters; return the previous values."""
    old = {}
    for k, p in unique_params(model.params).items():
        old[k] = p.data.copy()
        p.data[...] = arrays[k]
    return old


class Trainer:
    """Runs the shared pre-train / fine-tune loop over a task.

    Every random draw is derived from ``cfg.seed`` plus the epoch / iteration
    counters, so a trainer restored from its checkpoint replays the exact
    continuation of an uninterrupted run.
    """

    def __init__(self, model: Seq2Seq, task, cfg: TrainConfig, valid_indices=None,
                 train_indices=None):
        self.model = model
        self.task = task
        self.cfg = cfg
        n = len(task.sizes())
        self.valid_indices = list(valid_indices) if valid_indices is not None else []
        if train_indices is None:
            held = set(self.valid_indices)
            train_indices = [i for i in range(n) if i not in held]
        self.train_indices = list(train_indices)
        if not self.train_indices:
            raise ValueError("no training examples")
        self.opt = NAG(model.params, cfg.lr, cfg.momentum)
        self.ema = EMA(model.params, cfg.ema_decay)
        self.schedule = LRSchedule(cfg.lr_floor, cfg.patience)
        self.iteration = 0
        self.epoch = 0
        self.batch_pos = 0
        self.epoch_loss_sum = 0.0
        self.epoch_loss_count = 0
        self.trace: list[float] = []
        self.history: list[ValidationRecord] = []
        self.stopped = False
        self._valid_cache = None

    def valid_examples(self):
        if self._valid_cache is None:
            self._valid_cache = self.task.valid_examples(self.valid_indices)
        return self._valid_cache

    def epoch_batches(self, epoch: int) -> list[list[int]]:
        sizes = self.task.sizes()
        local = make_batches([sizes[i] for i in self.train_indices], self.cfg.token_budget,
                             self.cfg.seed, epoch)
        return [[self.train_indices[j] for j in b] for b in local]

    def step(self, indices: Sequence[int]) -> float:
        batch = self.task.batch(indices, self.iteration)
        rng = derive_rng(self.cfg.seed, "dropout", self.iteration)
        zero_grad(self.model.params)
        loss = batch_loss(self.model, batch, True, rng, self.cfg.normalize_loss)
        loss.backward()
        params = unique_params(self.model.params)
        if clip_grad_norm(list(params.values()), self.cfg.clip_norm) > 0.0:
            self.opt.step(self.model.params)
            self.ema.update(self.model.params)
        self.iteration += 1
        value = loss.item()
        self.trace.append(value)
        self.epoch_loss_sum += value
        self.epoch_loss_count += 1
        return value

    def validate(self) -> float:
        if not self.valid_indices:
            return self.epoch_loss_sum / max(self.epoch_loss_count, 1)
        return evaluate_loss(self.model, self.valid_examples(), self.cfg.token_budget,
                             self.ema.shadow)

    def end_epoch(self, on_validate: Callable | None = None) -> str:
        train_loss = self.epoch_loss_sum / max(self.epoch_loss_count, 1)
        val = self.validate()
        rec = ValidationRecord(self.epoch, self.iteration, train_loss, val, self.opt.lr)
        self.history.append(rec)
        if on_validate:
            on_validate(rec)
        decision = self.schedule.update(val, self.opt)
        self.epoch += 1
        self.batch_pos = 0
        self.epoch_loss_sum, self.epoch_loss_count = 0.0, 0
        if decision == "stop":
            self.stopped = True
        return decision

    def run(self, until_iteration: int | None = None, on_validate: Callable | None = None,
            on_checkpoint: Callable | None = None, max_epochs: int | None = None) -> "Trainer":
        """Train until a stop condition; ``until_iteration`` pauses mid-run."""
        limit = self.cfg.max_iterations if until_iteration is None else until_iteration
        epochs = self.cfg.max_epochs if max_epochs is None else max_epochs
        while not self.stopped and self.epoch < epochs and self.iteration < limit:
            batches = self.epoch_batches(self.epoch)
            while self.batch_pos < len(batches) and self.iteration < limit:
                self.step(batches[self.batch_pos])
                self.batch_pos += 1
                if on_checkpoint and self.cfg.checkpoint_every and \
                        self.iteration % self.cfg.checkpoint_every == 0:
                    on_checkpoint(self)
            if self.batch_pos >= len(batches):
                self.end_epoch(on_validate)
            if self.iteration >= self.cfg.max_iterations:
                break
        return self


def split_validation(n: int, fraction: float = 0.01, seed: int = 0, min_size: int = 1) -> list[int]:
    """Indices of a held-out slice, at least ``min_size`` when ``n > 1``."""
    if n < 2:
        return []
    k = min(n - 1, max(min_size, int(round(n * fraction))))
    return sorted(derive_rng(seed, "data").permutation(n)[:k].tolist())
