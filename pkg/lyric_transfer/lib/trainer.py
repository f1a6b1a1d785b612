"""
Training loops for the three stages.

### Main Functionalities
1. **Contrastive pretraining** (`pretrain`):
   Fits a frozen k-means codebook on the latents of a warmup batch, then minimises the masked-frame
   contrastive loss with Adam.

2. **Supervised training** (`train_epoch`, `train`):
   Minimises L = lambda_a * L_ctc + (1 - lambda_a) * L_s2s with separate learning rates for the encoder
   and the head, Newbob annealing on the dev loss and best-dev checkpoint selection. Training
   utterances longer than the duration cap are skipped; evaluation keeps every utterance.

3. **Consecutive transfer** (`consecutive_transfer`):
   Continues training a checkpoint trained on one corpus on a second corpus.

Gradients of the utterances of a batch are computed on a thread pool and summed in batch order, so
the result does not depend on the worker count.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from lyric_transfer.lib import numerics as nx
from lyric_transfer.lib.config import (
    ANNEAL_ENCODER,
    ANNEAL_HEAD,
    BATCH_SIZE,
    LAMBDA_A,
    LR_ENCODER,
    LR_HEAD,
    MAX_TRAIN_DURATION,
    NEWBOB_THRESHOLD,
    TRANSFER_EPOCHS,
)
from lyric_transfer.lib.ctc_utils import ctc_greedy_decode
from lyric_transfer.lib.data_utils import Manifest, load_record_features
from lyric_transfer.lib.encoder import MaskingPolicy, SpecAugmentPolicy, extract_latents
from lyric_transfer.lib.errors import AllUtterancesFilteredError, NotEnoughFramesError
from lyric_transfer.lib.metrics import corpus_wer
from lyric_transfer.lib.model import ENCODER_PREFIX, HEAD_PREFIX, ModelConfig, TranscriptionModel
from lyric_transfer.lib.numerics import AdamState, make_rng
from lyric_transfer.lib.ssl_objective import (
    CODEBOOK_PARAM,
    Codebook,
    SslConfig,
    codebook_diversity,
    init_ssl_params,
    kmeans_codebook,
    ssl_utterance_loss,
)
from lyric_transfer.lib.text_utils import TokenInventory, decode, encode, strip_control

T = TypeVar("T")


@dataclass(frozen=True)
class TrainUtterance:
    """Features, label ids and reference text of one labelled utterance."""
    utterance_id: str
    features: np.ndarray
    target: Tuple[int, ...]
    transcript: str
    duration: float


def utterances_from_manifest(manifest_path: Path, manifest: Manifest, inventory: TokenInventory) -> List[TrainUtterance]:
    """Loads the features of every record and encodes its transcript."""
    features = load_record_features(manifest_path, manifest)
    return [
        TrainUtterance(r.utterance_id, x, tuple(encode(r.transcript, inventory)), r.transcript, r.duration)
        for r, x in zip(manifest.records, features)
    ]


def _map_ordered(fn: Callable[[T], object], items: Sequence[T], workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _accumulate(total: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        total[name] = total[name] + g if name in total else g.copy()


# Loss and schedule

def joint_loss(ctc_loss_value, s2s_loss_value, lambda_a: float):
    """
    Weighted training objective lambda_a * L_ctc + (1 - lambda_a) * L_s2s.

    Works on floats and on tensors. A missing s2s loss (CTC-only head) leaves the CTC loss unweighted.
    """
    if not 0.0 <= lambda_a <= 1.0:
        raise ValueError(f"lambda_a must lie in [0, 1], got {lambda_a}")
    if s2s_loss_value is None:
        return ctc_loss_value
    if lambda_a == 1.0:
        return ctc_loss_value
    if lambda_a == 0.0:
        return s2s_loss_value
    return ctc_loss_value * lambda_a + s2s_loss_value * (1.0 - lambda_a)


@dataclass(frozen=True)
class NewbobSchedule:
    """
    Learning rates under Newbob annealing.

    Attributes:
        lr_head (float): Current head learning rate.
        lr_encoder (float): Current encoder learning rate.
        anneal_head (float): Factor applied to `lr_head` on a stall.
        anneal_encoder (float): Factor applied to `lr_encoder` on a stall.
        threshold (float): Relative dev-loss improvement below which the rates are annealed.
        previous (Optional[float]): Dev loss of the previous epoch.
        anneals (int): Number of anneals so far.
    """
    lr_head: float = LR_HEAD
    lr_encoder: float = LR_ENCODER
    anneal_head: float = ANNEAL_HEAD
    anneal_encoder: float = ANNEAL_ENCODER
    threshold: float = NEWBOB_THRESHOLD
    previous: Optional[float] = None
    anneals: int = 0


def newbob_update(schedule: NewbobSchedule, dev_loss: float) -> NewbobSchedule:
    """
    Compares `dev_loss` with the previous epoch's and anneals both rates when the relative improvement
    is below the threshold. The first call only records the loss.
    """
    if schedule.previous is None:
        return replace(schedule, previous=dev_loss)
    if math.isfinite(schedule.previous) and schedule.previous != 0.0:
        improvement = (schedule.previous - dev_loss) / abs(schedule.previous)
    else:
        improvement = math.inf if dev_loss < schedule.previous else 0.0
    if improvement < schedule.threshold:
        logging.info(f"Dev loss improved by {improvement:.4%} only; annealing learning rates")
        return replace(
            schedule,
            lr_head=schedule.lr_head * schedule.anneal_head,
            lr_encoder=schedule.lr_encoder * schedule.anneal_encoder,
            previous=dev_loss,
            anneals=schedule.anneals + 1,
        )
    return replace(schedule, previous=dev_loss)


# Configuration and reports

class TrainConfig(BaseModel):
    """
    Settings of the supervised stages.

    Attributes:
        lambda_a (float): CTC weight of the joint loss.
        lr_head (float): Initial head learning rate.
        lr_encoder (float): Initial encoder learning rate.
        anneal_head (float): Newbob factor of the head.
        anneal_encoder (float): Newbob factor of the encoder.
        newbob_threshold (float): Relative dev-loss improvement below which rates are annealed.
        batch_size (int): Utterances per optimiser step.
        epochs (int): Number of epochs.
        max_duration (float): Training utterances longer than this (seconds) are skipped.
        seed (int): Seed of every random stream of the run.
        stage (str): Stage tag recorded in reports and checkpoints.
        s2s_reduction (str): How the sequence loss combines the steps of an utterance.
        workers (int): Threads computing per-utterance gradients.
        augment (Optional[SpecAugmentPolicy]): SpecAugment applied to training utterances.
    """
    lambda_a: float = Field(LAMBDA_A, ge=0.0, le=1.0)
    lr_head: float = Field(LR_HEAD, ge=0.0)
    lr_encoder: float = Field(LR_ENCODER, ge=0.0)
    anneal_head: float = Field(ANNEAL_HEAD, gt=0.0, le=1.0)
    anneal_encoder: float = Field(ANNEAL_ENCODER, gt=0.0, le=1.0)
    newbob_threshold: float = Field(NEWBOB_THRESHOLD, ge=0.0)
    batch_size: int = Field(BATCH_SIZE, ge=1)
    epochs: int = Field(TRANSFER_EPOCHS, ge=0)
    max_duration: float = Field(MAX_TRAIN_DURATION, gt=0.0)
    seed: int = Field(0, ge=0)
    stage: Literal["finetune-speech", "transfer-singing"] = "transfer-singing"
    s2s_reduction: Literal["sum", "mean"] = "mean"
    workers: int = Field(1, ge=1)
    augment: Optional[SpecAugmentPolicy] = None

    def schedule(self) -> NewbobSchedule:
        return NewbobSchedule(self.lr_head, self.lr_encoder, self.anneal_head, self.anneal_encoder, self.newbob_threshold)


@dataclass
class EpochReport:
    """
    One row of the training log.

    Attributes:
        epoch (int): Epoch number, from 1.
        train_loss (float): Mean joint loss over the trained utterances.
        dev_loss (float): Mean joint loss on the dev set.
        dev_wer (float): Utterance-averaged greedy-CTC WER on the dev set.
        lr_head (float): Head learning rate used during the epoch.
        lr_encoder (float): Encoder learning rate used during the epoch.
        skipped (int): Training utterances over the duration cap.
        infeasible (int): Training utterances whose target cannot fit the CTC frames.
        seconds (float): Wall time.
    """
    epoch: int
    train_loss: float
    dev_loss: float
    dev_wer: float
    lr_head: float
    lr_encoder: float
    skipped: int = 0
    infeasible: int = 0
    seconds: float = 0.0

    def to_row(self) -> dict:
        return asdict(self)


@dataclass
class TrainingState:
    """Model, optimiser moments and learning-rate schedule carried across epochs."""
    model: TranscriptionModel
    adam: AdamState = field(default_factory=AdamState)
    schedule: Optional[NewbobSchedule] = None
    epoch: int = 0


@dataclass
class EvalResult:
    loss: float
    wer: float
    feasible: int


@dataclass
class TrainResult:
    """Best-dev model and the per-epoch history."""
    model: TranscriptionModel
    reports: List[EpochReport] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_dev_loss(self) -> float:
        return self.reports[self.best_epoch - 1].dev_loss if self.best_epoch else math.inf


# Supervised training

def learning_rates(params: Dict[str, np.ndarray], schedule: NewbobSchedule) -> Dict[str, float]:
    """Per-parameter rates: the encoder group and the head group; other parameters are not trained."""
    rates = {}
    for name in params:
        if name.startswith(ENCODER_PREFIX):
            rates[name] = schedule.lr_encoder
        elif name.startswith(HEAD_PREFIX):
            rates[name] = schedule.lr_head
    return rates


def make_batches(data: Sequence[TrainUtterance], batch_size: int, rng: np.random.Generator) -> List[List[TrainUtterance]]:
    """
    Buckets utterances of similar length into batches, then shuffles the batch order.
    """
    ordered = sorted(data, key=lambda u: (len(u.features), u.utterance_id))
    batches = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _utterance_step(
    model: TranscriptionModel,
    cfg: TrainConfig,
    utterance: TrainUtterance,
    rng: Optional[np.random.Generator],
) -> Tuple[float, Optional[Dict[str, np.ndarray]]]:
    leaves = model.tensors(trainable=True, frozen=[CODEBOOK_PARAM])
    loss = model.utterance_loss(
        leaves, utterance.features, utterance.target,
        augment=cfg.augment, rng=rng, s2s_reduction=cfg.s2s_reduction, with_s2s=cfg.lambda_a < 1.0,
    )
    if not loss.feasible:
        return math.inf, None
    total = joint_loss(loss.ctc, loss.s2s, cfg.lambda_a)
    grads = nx.gradients_by_name(nx.backward(total))
    trainable = {k: g for k, g in grads.items() if k.startswith(ENCODER_PREFIX) or k.startswith(HEAD_PREFIX)}
    return total.item(), trainable


def train_epoch(state: TrainingState, data: Sequence[TrainUtterance], cfg: TrainConfig,
                dev: Optional[Sequence[TrainUtterance]] = None) -> EpochReport:
    """
    Runs one pass over the training utterances and evaluates on `dev`.

    The model, optimiser state and epoch counter of `state` are updated in place. Learning rates come
    from `state.schedule` (initialised from `cfg` when unset), which this function does not anneal.

    Raises:
        AllUtterancesFilteredError: If no utterance survives the duration cap or none is feasible.
    """
    started = time.perf_counter()
    if state.schedule is None:
        state.schedule = cfg.schedule()
    state.epoch += 1
    epoch = state.epoch
    kept = [u for u in data if u.duration <= cfg.max_duration]
    skipped = len(data) - len(kept)
    if skipped:
        logging.info(f"Epoch {epoch}: {skipped} utterance(s) longer than {cfg.max_duration} s skipped")
    if not kept:
        raise AllUtterancesFilteredError(f"all {len(data)} training utterances exceed {cfg.max_duration} s", key="max_duration")

    batches = make_batches(kept, cfg.batch_size, make_rng(cfg.seed, "batches", cfg.stage, str(epoch)))
    rates = learning_rates(state.model.params, state.schedule)
    total_loss, trained, infeasible = 0.0, 0, 0
    for batch in tqdm(batches, desc=f"Epoch {epoch}", unit="batch", leave=False):
        model = state.model

        def step(u: TrainUtterance):
            rng = make_rng(cfg.seed, "augment", cfg.stage, str(epoch), u.utterance_id) if cfg.augment else None
            return _utterance_step(model, cfg, u, rng)

        results = _map_ordered(step, batch, cfg.workers)
        grads: Dict[str, np.ndarray] = {}
        count = 0
        for utterance, (value, utterance_grads) in zip(batch, results):
            if utterance_grads is None:
                infeasible += 1
                logging.warning(f"{utterance.utterance_id}: CTC target does not fit its frames; excluded")
                continue
            _accumulate(grads, utterance_grads)
            total_loss += value
            count += 1
        if not count:
            continue
        grads = {name: g / count for name, g in grads.items()}
        params, state.adam = nx.adam_step(model.params, grads, state.adam, rates)
        state.model = model.with_params(params)
        trained += count

    if not trained:
        raise AllUtterancesFilteredError("no training utterance has a feasible CTC target")
    evaluation = evaluate(state.model, dev if dev else kept, cfg)
    report = EpochReport(
        epoch=epoch,
        train_loss=total_loss / trained,
        dev_loss=evaluation.loss,
        dev_wer=evaluation.wer,
        lr_head=state.schedule.lr_head,
        lr_encoder=state.schedule.lr_encoder,
        skipped=skipped,
        infeasible=infeasible,
        seconds=time.perf_counter() - started,
    )
    logging.info(
        f"Epoch {epoch}: train loss {report.train_loss:.4f}, dev loss {report.dev_loss:.4f}, "
        f"dev WER {report.dev_wer:.4f}"
    )
    return report


def greedy_transcript(model: TranscriptionModel, x: np.ndarray) -> str:
    """Best-path CTC transcript of one utterance."""
    logp, _ = model.infer(x)
    labels = strip_control(ctc_greedy_decode(logp, model.inventory.blank_id), model.inventory)
    return " ".join(decode(labels, model.inventory).split())


def evaluate(model: TranscriptionModel, data: Sequence[TrainUtterance], cfg: TrainConfig) -> EvalResult:
    """
    Dev loss and greedy-CTC WER without duration filter or augmentation.

    Infeasible utterances are left out of the loss but still count in the WER.
    """
    if not data:
        raise ValueError("evaluation needs at least one utterance")
    params = model.tensors(trainable=False)

    def score(u: TrainUtterance) -> Tuple[float, str]:
        loss = model.utterance_loss(params, u.features, u.target, s2s_reduction=cfg.s2s_reduction,
                                    with_s2s=cfg.lambda_a < 1.0)
        value = joint_loss(loss.ctc, loss.s2s, cfg.lambda_a).item() if loss.feasible else math.inf
        return value, greedy_transcript(model, u.features)

    results = _map_ordered(score, list(data), cfg.workers)
    finite = [value for value, _ in results if math.isfinite(value)]
    loss = sum(finite) / len(finite) if finite else math.inf
    if not finite:
        logging.warning("No evaluation utterance has a feasible CTC target")
    wer = corpus_wer((u.transcript, hyp) for u, (_, hyp) in zip(data, results)).utterance_averaged
    return EvalResult(loss, wer, len(finite))


def train(
    model: TranscriptionModel,
    data: Sequence[TrainUtterance],
    dev: Sequence[TrainUtterance],
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochReport, TranscriptionModel], None]] = None,
) -> TrainResult:
    """
    Trains for `cfg.epochs` epochs with Newbob annealing and returns the epoch with the lowest dev loss.

    Args:
        model (TranscriptionModel): Starting model.
        data (Sequence[TrainUtterance]): Training utterances.
        dev (Sequence[TrainUtterance]): Dev utterances; the training utterances are used when empty.
        cfg (TrainConfig): Settings.
        on_epoch (Optional[Callable]): Called after every epoch with the report and the current model.

    Returns:
        TrainResult: The best-dev model (the starting model when no epoch ran) and every report.
    """
    if not dev:
        logging.warning("No dev utterances given; model selection uses the training set")
    state = TrainingState(model=model, schedule=cfg.schedule())
    result = TrainResult(model=model)
    best = math.inf
    for _ in tqdm(range(cfg.epochs), desc=f"Training ({cfg.stage})", unit="epoch"):
        report = train_epoch(state, data, cfg, dev)
        result.reports.append(report)
        if report.dev_loss < best:
            best = report.dev_loss
            result.model = state.model
            result.best_epoch = report.epoch
        if on_epoch is not None:
            on_epoch(report, state.model)
        state.schedule = newbob_update(state.schedule, report.dev_loss)
    if result.best_epoch:
        logging.info(f"Best dev loss {best:.4f} at epoch {result.best_epoch}")
    return result


def consecutive_transfer(
    checkpoint: Path,
    inventory: TokenInventory,
    expected: ModelConfig,
    data: Sequence[TrainUtterance],
    dev: Sequence[TrainUtterance],
    cfg: TrainConfig,
) -> TrainResult:
    """
    Continues training a model trained on one corpus on a second corpus.

    Raises:
        CheckpointMismatchError: If the checkpoint's inventory or architecture differs from `expected`.
    """
    model = TranscriptionModel.load(checkpoint, inventory, expected)
    logging.info(f"Consecutive training from {checkpoint} for {cfg.epochs} epoch(s)")
    return train(model, data, dev, cfg)


# Contrastive pretraining

class PretrainConfig(BaseModel):
    """Settings of the contrastive pretraining stage."""
    epochs: int = Field(10, ge=0)
    learning_rate: float = Field(5e-4, ge=0.0)
    batch_size: int = Field(BATCH_SIZE, ge=1)
    seed: int = Field(0, ge=0)
    warmup_utterances: int = Field(32, ge=1, description="Utterances whose latents initialise the codebook.")
    workers: int = Field(1, ge=1)
    masking: MaskingPolicy = Field(default_factory=MaskingPolicy)
    ssl: SslConfig = Field(default_factory=SslConfig)


@dataclass
class PretrainResult:
    """
    Outcome of `pretrain`. The counters describe the last epoch.

    Attributes:
        model (TranscriptionModel): Pretrained model, carrying the codebook and the SSL projection.
        losses (List[float]): Mean contrastive loss per epoch.
        skipped (int): Utterances too short to mask two frames.
        clamped (int): Utterances with fewer masked frames than distractors requested.
        min_distractors (Optional[int]): Fewest distractors any utterance was scored with (None if all
            were skipped).
    """
    model: TranscriptionModel
    losses: List[float] = field(default_factory=list)
    skipped: int = 0
    clamped: int = 0
    min_distractors: Optional[int] = None


def fit_codebook(model: TranscriptionModel, inputs: Sequence[np.ndarray], cfg: PretrainConfig) -> Codebook:
    """Cosine k-means over the latents of the first `warmup_utterances` inputs."""
    params = model.tensors(trainable=False)
    warmup = [extract_latents(x, model.cfg.encoder, params).data for x in inputs[:cfg.warmup_utterances]]
    return kmeans_codebook(
        np.concatenate(warmup, axis=0), cfg.ssl.codebook_size,
        make_rng(cfg.seed, "pretrain", "kmeans"), cfg.ssl.kmeans_iterations,
    )


def pretrain(
    model: TranscriptionModel,
    inputs: Sequence[np.ndarray],
    cfg: PretrainConfig,
    ids: Optional[Sequence[str]] = None,
) -> PretrainResult:
    """
    Contrastive pretraining of the encoder on unlabelled inputs.

    The codebook is fitted once, stored as the frozen parameter `ssl.codebook` and reused when the model
    already carries one. Utterances too short to mask two frames are skipped.
    """
    if not inputs:
        raise ValueError("pretraining needs at least one utterance")
    ids = list(ids) if ids is not None else [f"utt{i:06d}" for i in range(len(inputs))]
    params = dict(model.params)
    if "ssl.proj.weight" not in params:
        params.update(init_ssl_params(model.cfg.encoder.model_dim, make_rng(cfg.seed, "init", "ssl")))
    if CODEBOOK_PARAM not in params:
        params[CODEBOOK_PARAM] = fit_codebook(model, inputs, cfg).entries
    model = model.with_params(params)
    codebook = Codebook(params[CODEBOOK_PARAM])
    diversity = codebook_diversity(codebook, cfg.ssl.temperature) if cfg.ssl.diversity_weight > 0 else None

    adam = AdamState()
    result = PretrainResult(model=model)
    order_rng = make_rng(cfg.seed, "pretrain", "order")
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="Pretraining", unit="epoch"):
        order = order_rng.permutation(len(inputs))
        epoch_loss, epoch_count, skipped, clamped = 0.0, 0, 0, 0
        min_distractors: Optional[int] = None
        for start in range(0, len(order), cfg.batch_size):
            batch = [int(i) for i in order[start:start + cfg.batch_size]]
            current = result.model

            def step(index: int):
                rng = make_rng(cfg.seed, "pretrain", str(epoch), ids[index])
                leaves = current.tensors(trainable=True, frozen=[CODEBOOK_PARAM])
                try:
                    out = ssl_utterance_loss(inputs[index], current.cfg.encoder, leaves, codebook, cfg.masking, cfg.ssl, rng,
                                             diversity)
                except NotEnoughFramesError as e:
                    logging.debug(f"{ids[index]} skipped: {e}")
                    return None
                grads = nx.gradients_by_name(nx.backward(out.loss))
                return out.loss.item(), {k: g for k, g in grads.items() if k != CODEBOOK_PARAM}, out.clamped, out.distractors

            grads: Dict[str, np.ndarray] = {}
            count = 0
            for item in _map_ordered(step, batch, cfg.workers):
                if item is None:
                    skipped += 1
                    continue
                loss, utterance_grads, was_clamped, used = item
                _accumulate(grads, utterance_grads)
                clamped += was_clamped
                min_distractors = used if min_distractors is None else min(min_distractors, used)
                epoch_loss += loss
                count += 1
            if count:
                grads = {name: g / count for name, g in grads.items()}
                new_params, adam = nx.adam_step(current.params, grads, adam, cfg.learning_rate)
                result.model = current.with_params(new_params)
            epoch_count += count
        mean = epoch_loss / epoch_count if epoch_count else math.nan
        result.losses.append(mean)
        result.skipped, result.clamped, result.min_distractors = skipped, clamped, min_distractors
        logging.info(f"Pretraining epoch {epoch}: contrastive loss {mean:.4f} ({skipped} skipped, {clamped} clamped)")
        if clamped:
            logging.warning(f"{clamped} utterance(s) had fewer masked frames than the {cfg.ssl.distractors} distractors "
                            f"requested; fewest used: {min_distractors}")
    return result
