"""
This module defines the constants and the logging configuration shared by every stage of the
lyric transcription pipeline.

### Main Functionalities
1. **Training and decoding defaults**:
   The hyper-parameters used by the finetuning, transfer, language-model and decoding stages
   (loss weights, learning rates, annealing factors, beam size, duration cap). Every value can be
   overridden through a configuration file or a CLI flag; the constants are only the defaults.

2. **Numerical constants**:
   The log-domain floor used to keep every log-probability finite, and the checkpoint format version.

3. **Output location**:
   The default output directory, read from the `LYRIC_TRANSFER_OUTPUT_DIR` environment variable
   (a `.env` file is honoured).

4. **Logging configuration**:
   A colour-coded console formatter for humans and a line-delimited JSON formatter for machines,
   selected by `setup_logging`.
"""
import json
import logging
import os
from pathlib import Path
from typing import Dict, Tuple

from colorama import Fore, Style, init
from dotenv import load_dotenv

load_dotenv()

# Constants

LOG_FLOOR = -1e30
"""
float: Smallest value any log-domain quantity is allowed to take.

Log-probabilities of impossible events are clamped here instead of `-inf`, so that weighted sums such
as `0 * log p` stay finite.
"""

FORMAT_VERSION = 1
"""
int: Version of the checkpoint container and of its sidecar metadata file.
"""

CONTRASTIVE_TEMPERATURE = 0.1
"""
float: Temperature applied to cosine similarities in the contrastive objective.
"""

DISTRACTOR_COUNT = 100
"""
int: Number of distractors sampled for every masked frame (clamped to the frames available).
"""

LAMBDA_A = 0.2
"""
float: Weight of the CTC loss in the joint training objective; the attention loss gets `1 - LAMBDA_A`.
"""

LR_HEAD = 3e-4
"""
float: Initial learning rate of the transcription head (CTC linear, projection, attention decoder).
"""

LR_ENCODER = 1e-5
"""
float: Initial learning rate of the pretrained encoder. Kept smaller than `LR_HEAD` to limit forgetting.
"""

ANNEAL_HEAD = 0.8
"""
float: Newbob annealing factor applied to `LR_HEAD` when the dev loss stalls.
"""

ANNEAL_ENCODER = 0.9
"""
float: Newbob annealing factor applied to `LR_ENCODER` when the dev loss stalls.
"""

NEWBOB_THRESHOLD = 0.0025
"""
float: Relative dev-loss improvement under which Newbob anneals the learning rates (0.25 %).
"""

BATCH_SIZE = 4
"""
int: Utterances per optimizer step during finetuning and transfer.
"""

MAX_TRAIN_DURATION = 28.0
"""
float: Utterances longer than this many seconds are skipped during training (never during evaluation).
"""

TRANSFER_EPOCHS = 10
"""
int: Epochs of the first transfer stage on singing data.
"""

CONSECUTIVE_EPOCHS = 4
"""
int: Epochs of the consecutive transfer stage on the second singing corpus.
"""

BEAM_SIZE = 512
"""
int: Default beam size for joint decoding.
"""

MAX_BEAM_SIZE = 4096
"""
int: Ceiling applied to any requested beam size.
"""

DECODE_PROFILES: Dict[str, Tuple[float, float]] = {
    "dsing": (0.4, 0.5),
    "dali": (0.3, 0.2),
}
"""
Dict[str, Tuple[float, float]]: Named `(lambda_b, lambda_c)` pairs for joint decoding.

`lambda_b` weights the CTC prefix score (the attention score gets `1 - lambda_b`) and `lambda_c`
weights the language model.
"""

LM_LEARNING_RATE = 1e-3
"""
float: Adam learning rate of the character language model.
"""

LM_BATCH_SIZE = 20
"""
int: Lines per optimizer step when training the character language model.
"""

LM_EPOCHS = 20
"""
int: Training epochs of the character language model.
"""

MIN_MULTIWORD_DURATION = 0.1
"""
float: Annotated lines with two or more words and a shorter duration (seconds) are discarded as faulty.
"""

FRAME_SHIFT = 0.02
"""
float: Seconds between consecutive feature frames of the synthetic corpora.
"""

DEFAULT_OUTPUT_DIR = Path(os.getenv("LYRIC_TRANSFER_OUTPUT_DIR", "./runs/"))
"""
Path: Default output directory for every subcommand.

Read from the `LYRIC_TRANSFER_OUTPUT_DIR` environment variable, which may come from a `.env` file.
"""

RUN_METADATA_FILE = "run_metadata.json"
"""
str: Name of the file every subcommand writes next to its outputs to make the run reproducible.
"""


# Initialize colorama for cross-platform support
init()


class ColoredFormatter(logging.Formatter):
    """
    Custom formatter to add color coding to log messages based on their severity level.
    """
    COLOR_MAP = {
        logging.DEBUG: Fore.BLUE + Style.BRIGHT,
        logging.INFO: Fore.GREEN + Style.BRIGHT,
        logging.WARNING: Fore.YELLOW + Style.BRIGHT,
        logging.ERROR: Fore.RED + Style.BRIGHT,
        logging.CRITICAL: Fore.RED + Style.BRIGHT + Style.BRIGHT,
    }

    RESET = Style.RESET_ALL

    def format(self, record):
        """
        Formats the log record, applying color based on the severity level.

        Args:
            record (logging.LogRecord): The record containing information to log.

        Returns:
            str: The formatted log message with color coding for the log level.
        """
        record = logging.makeLogRecord(record.__dict__)
        color = self.COLOR_MAP.get(record.levelno, self.RESET)
        record.levelname = f"{color}{record.levelname}{self.RESET}"
        return super().format(record)


_STANDARD_RECORD_FIELDS = set(logging.makeLogRecord({}).__dict__) | {"message", "asctime"}


class JsonLineFormatter(logging.Formatter):
    """
    Renders each log record as one JSON object per line.

    Fields passed through `extra=` are copied into the object next to `ts`, `level`, `logger`
    and `message`.
    """

    def format(self, record):
        payload = {
            "ts": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname,
            "logger": record.name,
            "source": f"{record.filename}:{record.lineno}",
            "message": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key not in _STANDARD_RECORD_FIELDS and not key.startswith("_"):
                payload[key] = value
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def setup_logging(level: str = "INFO", structured: bool = False) -> None:
    """
    Configures logging for the application.

    Args:
        level (str): Name of the minimum level to emit (e.g. "DEBUG", "INFO").
        structured (bool): Emit line-delimited JSON records instead of coloured text.
    """
    if structured:
        formatter = JsonLineFormatter()
    else:
        formatter = ColoredFormatter(
            '%(asctime)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s'
        )
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        handlers=[console_handler],
        force=True,
    )
