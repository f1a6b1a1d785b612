"""
Lyric transcription by transfer learning from speech.

The package re-exports the pipeline defaults so that callers can read them without reaching into
`lyric_transfer.lib.config`.

Constants:
    LAMBDA_A (float):
        Weight of the CTC loss in the joint training objective.
    LR_HEAD, LR_ENCODER (float):
        Initial learning rates of the transcription head and of the encoder.
    ANNEAL_HEAD, ANNEAL_ENCODER (float):
        Newbob annealing factors of the head and of the encoder.
    NEWBOB_THRESHOLD (float):
        Relative dev-loss improvement below which the learning rates are annealed.
    BEAM_SIZE (int):
        Default beam of the joint search.
    DECODE_PROFILES (Dict[str, Tuple[float, float]]):
        Named (lambda_b, lambda_c) decoding weights.
    DEFAULT_OUTPUT_DIR (Path):
        Where subcommands write when no `--output-dir` is given.
"""

from .lib.config import (
    LAMBDA_A,  # float: CTC weight of the joint loss.
    LR_HEAD,  # float: Initial head learning rate.
    LR_ENCODER,  # float: Initial encoder learning rate.
    ANNEAL_HEAD,  # float: Newbob factor of the head.
    ANNEAL_ENCODER,  # float: Newbob factor of the encoder.
    NEWBOB_THRESHOLD,  # float: Relative improvement threshold of Newbob.
    BATCH_SIZE,  # int: Utterances per optimiser step.
    MAX_TRAIN_DURATION,  # float: Training utterances longer than this are skipped.
    BEAM_SIZE,  # int: Default beam size.
    DECODE_PROFILES,  # dict: Named decoding weights.
    LOG_FLOOR,  # float: Floor of every log-domain quantity.
    DEFAULT_OUTPUT_DIR,  # Path: Default output directory.
)
