"""
Character-level recurrent language model used for shallow fusion during decoding.

An embedding feeds stacked LSTM layers, then an MLP of linear + leaky ReLU layers and an output layer
over the inventory. Blank and bos get `LOG_FLOOR` logits: bos only primes the state, eos is scored.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from lyric_transfer.lib import numerics as nx
from lyric_transfer.lib.config import LM_BATCH_SIZE, LM_EPOCHS, LM_LEARNING_RATE, LOG_FLOOR
from lyric_transfer.lib.errors import CheckpointMismatchError, EmptyCorpusError, InvalidTokenError
from lyric_transfer.lib.numerics import AdamState, Tensor, make_rng, uniform_init
from lyric_transfer.lib.text_utils import TokenInventory, encode

PREFIX = "lm."


class LmConfig(BaseModel):
    """Sizes of the language model."""
    embedding_dim: int = Field(32, gt=0)
    num_layers: int = Field(2, gt=0, description="Stacked LSTM layers.")
    hidden_dim: int = Field(128, gt=0, description="LSTM hidden size.")
    head_layers: int = Field(2, ge=0, description="Linear + leaky ReLU layers after the LSTM.")
    head_dim: int = Field(64, gt=0)


def reference_lm_config() -> LmConfig:
    """Full-scale sizes (3 x 2048 LSTM, 3 x 1024 MLP); shape checks only."""
    return LmConfig(embedding_dim=256, num_layers=3, hidden_dim=2048, head_layers=3, head_dim=1024)


class LmTrainSettings(BaseModel):
    """Optimiser settings of `lm_train`."""
    learning_rate: float = Field(LM_LEARNING_RATE, gt=0.0)
    batch_size: int = Field(LM_BATCH_SIZE, gt=0)
    epochs: int = Field(LM_EPOCHS, ge=1)
    seed: int = Field(0, ge=0)


def init_lm_params(cfg: LmConfig, vocab_size: int, rng: np.random.Generator, prefix: str = PREFIX) -> Dict[str, np.ndarray]:
    p = {f"{prefix}embed": uniform_init(rng, (vocab_size, cfg.embedding_dim), cfg.embedding_dim)}
    size_in = cfg.embedding_dim
    h = cfg.hidden_dim
    for layer in range(cfg.num_layers):
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0
        p[f"{prefix}lstm.{layer}.w_ih"] = uniform_init(rng, (size_in, 4 * h), h)
        p[f"{prefix}lstm.{layer}.w_hh"] = uniform_init(rng, (h, 4 * h), h)
        p[f"{prefix}lstm.{layer}.bias"] = bias
        size_in = h
    for layer in range(cfg.head_layers):
        p[f"{prefix}head.{layer}.weight"] = uniform_init(rng, (size_in, cfg.head_dim), size_in)
        p[f"{prefix}head.{layer}.bias"] = np.zeros(cfg.head_dim)
        size_in = cfg.head_dim
    p[f"{prefix}out.weight"] = uniform_init(rng, (size_in, vocab_size), size_in)
    p[f"{prefix}out.bias"] = np.zeros(vocab_size)
    return p


@dataclass(frozen=True)
class LmState:
    """Per-layer LSTM hidden and cell values after `step` tokens. Immutable."""
    hidden: Tuple[Tensor, ...]
    cell: Tuple[Tensor, ...]
    step: int = 0


class CharLm:
    """
    A language model bound to its parameters.

    Args:
        params (Dict[str, Tensor]): Parameters (tensors, with or without gradients).
        cfg (LmConfig): Sizes.
        inventory (TokenInventory): Token inventory.
    """

    def __init__(self, params: Dict[str, Tensor], cfg: LmConfig, inventory: TokenInventory, prefix: str = PREFIX):
        self.params = params
        self.cfg = cfg
        self.inventory = inventory
        self.prefix = prefix
        self.mask = np.zeros(inventory.size)
        self.mask[[inventory.blank_id, inventory.bos_id]] = LOG_FLOOR

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], cfg: LmConfig, inventory: TokenInventory) -> "CharLm":
        return cls(nx.tensors_from(arrays, requires_grad=False), cfg, inventory)

    def _p(self, name: str) -> Tensor:
        return self.params[self.prefix + name]

    def zero_state(self) -> LmState:
        zeros = tuple(Tensor(np.zeros(self.cfg.hidden_dim)) for _ in range(self.cfg.num_layers))
        return LmState(zeros, zeros, 0)

    def step(self, state: LmState, token: int) -> Tuple[Tensor, LmState]:
        """
        Feeds one token and returns the next-token log-distribution (V,) with the new state.

        Raises:
            InvalidTokenError: On blank or an out-of-range id.
        """
        token = int(token)
        if not 0 <= token < self.inventory.size or token == self.inventory.blank_id:
            raise InvalidTokenError(f"the language model cannot consume token id {token}")
        x = self._p("embed")[token]
        hidden, cell = [], []
        for layer in range(self.cfg.num_layers):
            h, c = nx.lstm_cell(
                x, state.hidden[layer], state.cell[layer],
                self._p(f"lstm.{layer}.w_ih"), self._p(f"lstm.{layer}.w_hh"), self._p(f"lstm.{layer}.bias"),
            )
            hidden.append(h)
            cell.append(c)
            x = h
        for layer in range(self.cfg.head_layers):
            x = nx.leaky_relu(nx.linear(x, self._p(f"head.{layer}.weight"), self._p(f"head.{layer}.bias")))
        logits = nx.linear(x, self._p("out.weight"), self._p("out.bias")) + self.mask
        return nx.log_softmax(logits), LmState(tuple(hidden), tuple(cell), state.step + 1)

    def start(self) -> Tuple[Tensor, LmState]:
        """Primes the model with bos: returns the distribution of the first token."""
        return self.step(self.zero_state(), self.inventory.bos_id)

    def sequence_loss(self, ids: Sequence[int]) -> Tuple[Tensor, int]:
        """
        Negative log-probability of `ids` followed by eos, and the number of scored tokens.
        """
        targets = [int(t) for t in ids] + [self.inventory.eos_id]
        logp, state = self.start()
        picked = []
        for position, token in enumerate(targets):
            picked.append(nx.reshape(logp[token], (1,)))
            if position + 1 < len(targets):
                logp, state = self.step(state, token)
        return -nx.sum(nx.concat(picked, axis=0)), len(targets)

    def score(self, ids: Sequence[int], with_eos: bool = True) -> float:
        """log p_LM of a label sequence, eos included by default."""
        logp, state = self.start()
        total = 0.0
        for token in ids:
            total += float(logp.data[int(token)])
            logp, state = self.step(state, token)
        if with_eos:
            total += float(logp.data[self.inventory.eos_id])
        return total


def lm_score_step(lm: CharLm, state: Optional[LmState], token: int) -> Tuple[np.ndarray, LmState]:
    """
    Functional scoring step: feeds `token` (bos to start) and returns next-token log-probabilities.

    A `None` state starts from the zero state.
    """
    logp, new_state = lm.step(lm.zero_state() if state is None else state, token)
    return logp.data, new_state


@dataclass
class LmEpochReport:
    epoch: int
    train_loss: float
    dev_perplexity: float


@dataclass
class LmTrainResult:
    """Best-dev parameters and the per-epoch history."""
    params: Dict[str, np.ndarray]
    reports: List[LmEpochReport] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_perplexity(self) -> float:
        return self.reports[self.best_epoch - 1].dev_perplexity if self.reports else math.inf


def _encode_corpus(lines: Sequence[str], inventory: TokenInventory) -> List[List[int]]:
    return [encode(line, inventory) for line in lines if line.strip()]


def perplexity(arrays: Dict[str, np.ndarray], cfg: LmConfig, inventory: TokenInventory, corpus: Sequence[Sequence[int]]) -> float:
    """exp of the mean per-character negative log-likelihood, eos included."""
    lm = CharLm.from_arrays(arrays, cfg, inventory)
    total, count = 0.0, 0
    for ids in corpus:
        loss, n = lm.sequence_loss(ids)
        total += loss.item()
        count += n
    return math.exp(total / max(count, 1))


def lm_train(
    lines: Sequence[str],
    cfg: LmConfig,
    settings: LmTrainSettings,
    inventory: TokenInventory,
    dev_lines: Optional[Sequence[str]] = None,
    params: Optional[Dict[str, np.ndarray]] = None,
) -> LmTrainResult:
    """
    Trains the language model on normalized lines with Adam.

    The per-batch loss is the mean per-character negative log-likelihood. Dev perplexity is measured
    after every epoch and the parameters of the best epoch are returned. Without dev lines the
    training lines are used.

    Raises:
        EmptyCorpusError: If no nonempty line is given.
    """
    corpus = _encode_corpus(lines, inventory)
    if not corpus:
        raise EmptyCorpusError("the language-model corpus has no nonempty line")
    dev = _encode_corpus(dev_lines, inventory) if dev_lines else corpus
    dev = dev or corpus

    arrays = params or init_lm_params(cfg, inventory.size, make_rng(settings.seed, "lm", "init"))
    shuffle_rng = make_rng(settings.seed, "lm", "shuffle")
    state = AdamState()
    result = LmTrainResult(params=dict(arrays))
    best = math.inf

    for epoch in tqdm(range(1, settings.epochs + 1), desc="LM epochs", unit="epoch"):
        order = shuffle_rng.permutation(len(corpus))
        epoch_loss, epoch_chars = 0.0, 0
        for start in range(0, len(order), settings.batch_size):
            batch = [corpus[i] for i in order[start:start + settings.batch_size]]
            leaves = nx.tensors_from(arrays)
            lm = CharLm(leaves, cfg, inventory)
            grads: Dict[str, np.ndarray] = {}
            batch_loss, batch_chars = 0.0, 0
            for ids in batch:
                loss, n = lm.sequence_loss(ids)
                for name, g in nx.gradients_by_name(nx.backward(loss)).items():
                    grads[name] = grads[name] + g if name in grads else g
                batch_loss += loss.item()
                batch_chars += n
            grads = {name: g / batch_chars for name, g in grads.items()}
            arrays, state = nx.adam_step(arrays, grads, state, settings.learning_rate)
            epoch_loss += batch_loss
            epoch_chars += batch_chars
        dev_ppl = perplexity(arrays, cfg, inventory, dev)
        report = LmEpochReport(epoch, epoch_loss / max(epoch_chars, 1), dev_ppl)
        result.reports.append(report)
        logging.info(f"LM epoch {epoch}: train loss {report.train_loss:.4f}, dev perplexity {dev_ppl:.4f}")
        if dev_ppl < best:
            best = dev_ppl
            result.params = dict(arrays)
            result.best_epoch = epoch
    return result


def save_lm(path: Path, arrays: Dict[str, np.ndarray], cfg: LmConfig, inventory: TokenInventory) -> None:
    """Writes language-model parameters with their sizes and the inventory hash."""
    nx.save_checkpoint(path, arrays, {
        "kind": "lm",
        "lm_config": cfg.model_dump(),
        "inventory_hash": inventory.fingerprint(),
    })
    logging.info(f"Language model saved to {path}")


def load_lm(path: Path, inventory: TokenInventory) -> CharLm:
    """
    Loads a language model written by `save_lm`.

    Raises:
        CheckpointMismatchError: If the checkpoint is not a language model or uses another inventory.
    """
    arrays, meta = nx.load_checkpoint(path)
    if meta.get("kind") != "lm":
        raise CheckpointMismatchError(f"{path} is not a language-model checkpoint", key="kind")
    if meta.get("inventory_hash") != inventory.fingerprint():
        raise CheckpointMismatchError(f"{path} was trained on another token inventory", key="inventory_hash")
    return CharLm.from_arrays(arrays, LmConfig.model_validate(meta["lm_config"]), inventory)
