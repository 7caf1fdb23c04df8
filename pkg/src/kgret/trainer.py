"""In-batch-negative softmax training for the shared (Siamese) encoder.

Every mention in a batch is scored against every concept in the batch; the
loss is the mean negative log of the row-softmax mass on the matching
concept. Optimization is Adam under linear warm-up then linear decay.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from kgret.encoder.model import EncoderModel
from kgret.errors import DatasetTooSmall, NonFinite
from kgret.taskgen import TaskDataset, TrainingPair

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr_peak: float = 3e-4
    warmup_ratio: float = 0.02
    max_epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    unique_concepts_per_batch: bool = True
    aux_weight: float = 1.0
    aux_seed: int | None = None
    log_path: str | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0 < self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in (0, 1)")
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    dev_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    aborted: str | None = None

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.steps]


def batch_scores(mentions: np.ndarray, concepts: np.ndarray) -> np.ndarray:
    """S[i, j] = <e_{m_i}, e_{c_j}>."""
    return mentions @ concepts.T


def batch_loss(S: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean row-softmax NLL of the diagonal and its exact gradient dL/dS."""
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"score matrix must be square, got {S.shape}")
    if not np.isfinite(S).all():
        raise NonFinite("score matrix contains non-finite values")
    B = S.shape[0]
    shifted = S - S.max(1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(1, keepdims=True))
    logp = shifted - logz
    loss = -float(np.mean(np.diag(logp)))
    dS = np.exp(logp)
    dS[np.arange(B), np.arange(B)] -= 1.0
    return loss, dS / B


def diagonal_softmax_loss(S: np.ndarray) -> float:
    """The diagonal-only normalizer reading: P_i = exp(S_ii) / sum_j exp(S_jj).

    Kept for comparison; it ignores every off-diagonal score and so provides
    no in-batch negatives. Not used by training.
    """
    d = np.diag(np.asarray(S, dtype=np.float64))
    m = d.max()
    return -float(np.mean(d - m - np.log(np.exp(d - m).sum())))


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return max(1, math.ceil(round(cfg.warmup_ratio * total_steps, 9)))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0 -> lr_peak over the warm-up, then linear lr_peak -> 0."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, cfg)
    if step <= w:
        return cfg.lr_peak * step / w
    return cfg.lr_peak * (total_steps - step) / (total_steps - w)


# -- batching -------------------------------------------------------------------

def make_batches(
    pairs: Sequence[TrainingPair], batch_size: int, rng: np.random.Generator, unique_concepts: bool
) -> list[list[int]]:
    """One epoch of batches (index lists), drop-last.

    With ``unique_concepts`` a batch never holds two pairs with the same
    concept node; a clashing pair waits in a queue and is tried first when the
    next batch opens.
    """
    order = rng.permutation(len(pairs)).tolist()
    if not unique_concepts:
        return [order[i:i + batch_size] for i in range(0, len(order) - batch_size + 1, batch_size)]
    batches = []
    deferred: list[int] = []
    current: list[int] = []
    used: set = set()

    def close():
        nonlocal current, used
        batches.append(current)
        current, used = [], set()

    stream = iter(order)
    while True:
        if not current and deferred:
            still = []
            for idx in deferred:
                c = pairs[idx].concept_node
                if len(current) < batch_size and c not in used:
                    current.append(idx)
                    used.add(c)
                else:
                    still.append(idx)
            deferred = still
            if len(current) == batch_size:
                close()
                continue
        idx = next(stream, None)
        if idx is None:
            break
        c = pairs[idx].concept_node
        if c in used:
            deferred.append(idx)
            continue
        current.append(idx)
        used.add(c)
        if len(current) == batch_size:
            close()
    return batches


class _Cycler:
    """Endless batch stream over one dataset, reshuffled on every pass."""

    def __init__(self, pairs, batch_size, seed, unique):
        self.pairs, self.batch_size, self.unique = pairs, batch_size, unique
        self.rng = np.random.default_rng(seed)

    def __iter__(self) -> Iterator[list[int]]:
        while True:
            batches = make_batches(self.pairs, self.batch_size, self.rng, self.unique)
            if not batches:
                raise DatasetTooSmall("dataset cannot fill a single batch")
            yield from batches


# -- optimisation -----------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            params[k] -= (lr / bc1) * m / (np.sqrt(v / bc2) + c.adam_eps)


def pair_loss_and_grads(
    model: EncoderModel, batch: Sequence[TrainingPair], weight: float = 1.0
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss on one batch and weighted parameter gradients.

    Mentions and concepts go through the same encoder in a single forward
    pass.
    """
    B = len(batch)
    texts = [p.mention_text for p in batch] + [p.concept_text for p in batch]
    emb, cache = model.forward(model.encode_texts(texts))
    em, ec = emb[:B], emb[B:]
    loss, dS = batch_loss(batch_scores(em, ec))
    dS = dS * weight
    upstream = np.concatenate([dS @ ec, dS.T @ em])
    return loss, model.backward(cache, upstream)


def dataset_loss(model: EncoderModel, pairs: Sequence[TrainingPair], batch_size: int) -> float:
    """Mean batch loss over consecutive chunks (last chunk kept if >= 2 pairs)."""
    losses, weights = [], []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        if len(chunk) < 2:
            continue
        B = len(chunk)
        emb = model.forward(model.encode_texts([p.mention_text for p in chunk] + [p.concept_text for p in chunk]))[0]
        losses.append(batch_loss(batch_scores(emb[:B], emb[B:]))[0])
        weights.append(B)
    if not losses:
        return float("nan")
    return float(np.average(losses, weights=weights))


def _finite(params: dict[str, np.ndarray]) -> bool:
    return all(np.isfinite(v).all() for v in params.values())


def _run(
    model: EncoderModel,
    primary: TaskDataset,
    cfg: TrainConfig,
    auxiliary: TaskDataset | None = None,
) -> tuple[EncoderModel, TrainLog]:
    B = cfg.batch_size
    if len(primary.train) < B:
        raise DatasetTooSmall(f"{len(primary.train)} training pairs < batch size {B}")
    if auxiliary is not None and len(auxiliary.train) < B:
        raise DatasetTooSmall(f"{len(auxiliary.train)} auxiliary pairs < batch size {B}")

    rng = np.random.default_rng(cfg.seed)
    epochs = [make_batches(primary.train, B, rng, cfg.unique_concepts_per_batch) for _ in range(cfg.max_epochs)]
    total = sum(len(e) for e in epochs)
    if total == 0:
        raise DatasetTooSmall("no complete batch can be formed")
    aux_iter = None
    if auxiliary is not None and cfg.aux_weight != 0.0:
        aux_seed = cfg.aux_seed if cfg.aux_seed is not None else cfg.seed + 1
        aux_iter = iter(_Cycler(auxiliary.train, B, aux_seed, cfg.unique_concepts_per_batch))

    model = model.copy()
    opt = Adam(model.params, cfg)
    trainlog = TrainLog()
    best = model.copy()
    best_dev = math.inf
    last_finite = model.copy()
    log_fh = open(cfg.log_path, "w", encoding="utf-8", newline="\n") if cfg.log_path else None
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def emit(rec: dict) -> None:
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")

    step = 0
    try:
        for epoch, batches in enumerate(epochs, start=1):
            for idxs in batches:
                lr = lr_at(step, total, cfg)
                loss, grads = pair_loss_and_grads(model, [primary.train[i] for i in idxs])
                if aux_iter is not None:
                    aux_idx = next(aux_iter)
                    aux_loss, aux_grads = pair_loss_and_grads(
                        model, [auxiliary.train[i] for i in aux_idx], cfg.aux_weight
                    )
                    loss += cfg.aux_weight * aux_loss
                    for k in grads:
                        grads[k] += aux_grads[k]
                if not math.isfinite(loss) or not _finite(grads):
                    raise NonFinite(f"non-finite loss or gradient at step {step}")
                opt.step(model.params, grads, lr)
                if not _finite(model.params):
                    raise NonFinite(f"non-finite parameters after step {step}")
                rec = {"step": step, "epoch": epoch, "lr": lr, "loss": loss}
                trainlog.steps.append(rec)
                emit(rec)
                step += 1
            last_finite = model.copy()
            dev = dataset_loss(model, primary.dev, B) if len(primary.dev) >= 2 else float("nan")
            if not math.isfinite(dev):
                # no usable dev split: fall back to the last training loss
                dev = trainlog.steps[-1]["loss"] if trainlog.steps else math.inf
            trainlog.dev_loss.append(dev)
            emit({"epoch": epoch, "dev_loss": dev})
            if dev < best_dev:
                best_dev, best, trainlog.best_epoch = dev, model.copy(), epoch
            if ckpt_dir is not None:
                model.save(ckpt_dir / f"epoch-{epoch}.kgre")
            log.info("epoch %d  train %.4f  dev %.4f", epoch, trainlog.steps[-1]["loss"], dev)
    except NonFinite as exc:
        log.warning("training aborted: %s", exc)
        trainlog.aborted = str(exc)
        if best_dev == math.inf:
            best = last_finite
    finally:
        if log_fh is not None:
            log_fh.close()
    return best, trainlog


def train(model: EncoderModel, ds: TaskDataset, cfg: TrainConfig) -> tuple[EncoderModel, TrainLog]:
    """Train on one task; returns the parameters of the best dev-loss epoch."""
    return _run(model, ds, cfg)


def train_multitask(
    model: EncoderModel, primary: TaskDataset, auxiliary: TaskDataset, cfg: TrainConfig
) -> tuple[EncoderModel, TrainLog]:
    """Sum of primary and auxiliary batch losses, one update per step.

    Epochs and checkpoint selection follow the primary dataset; the auxiliary
    stream cycles independently.
    """
    return _run(model, primary, cfg, auxiliary)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
