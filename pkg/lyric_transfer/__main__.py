"""
Command-line entry point of the lyric transcription pipeline.

One binary with one subcommand per pipeline step:

- normalize, segment, stats, subset, dedup: text and manifest preparation.
- pretrain, finetune, transfer: the three training stages.
- lm-train: the character language model.
- decode, eval: joint beam-search transcription and WER scoring.
- synth, ablate: synthetic corpora and the small-scale ablations.

Every subcommand accepts `--config FILE` (a JSON tree, see README) and repeated `--set dotted.key=value`
overrides, writes `run_metadata.json` in `--output-dir`, exits 0 on success and 2 with a JSON error
record on stderr when a configuration or pipeline error occurs.

Functions:
- build_parser: The argparse parser with every subcommand and flag.
- main: Parses arguments, configures logging and dispatches to `lib.process`.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from lyric_transfer.lib.config import BEAM_SIZE, DECODE_PROFILES, DEFAULT_OUTPUT_DIR, setup_logging
from lyric_transfer.lib.errors import LyricTransferError
from lyric_transfer.lib.joint_decode import DecodeWeights
from lyric_transfer.lib.process import (
    ExperimentConfig,
    RunConfig,
    config_error,
    load_experiment_config,
    record_run,
    run_ablation,
    run_decode,
    run_dedup,
    run_eval,
    run_finetune,
    run_lm_train,
    run_normalize,
    run_pretrain,
    run_segment,
    run_stats,
    run_subset,
    run_synth,
    run_transfer,
)
from lyric_transfer.lib.text_utils import TokenInventory, default_inventory
from lyric_transfer.lib.utils import read_transcripts

load_dotenv()

ABLATION_PROFILES = ("stage-removal", "decode-ladder", "low-resource")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON config file (key tree documented in the README).")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key, e.g. --set transfer.epochs=3. Repeatable.")
    common.add_argument("--seed", type=int, default=0, help="Seed of every random stream of the run.")
    common.add_argument("--workers", type=int, default=1, help="Threads for per-utterance work.")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Minimum log level.")
    common.add_argument("--log-format", default="text", choices=["text", "json"],
                        help="Coloured text or line-delimited JSON log records.")
    common.add_argument("--output-dir", type=Path, default=DEFAULT_OUTPUT_DIR,
                        help="Directory for outputs and run metadata (env LYRIC_TRANSFER_OUTPUT_DIR).")
    common.add_argument("--inventory", type=Path, default=None,
                        help="Token inventory file (one symbol per line); the default English inventory otherwise.")
    return common


def build_parser() -> argparse.ArgumentParser:
    """
    Builds the argument parser. Every flag shows its default in `--help`.
    """
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="lyric-transfer",
        description="Lyric transcription by transfer learning from speech, with joint CTC/attention/LM decoding.",
        formatter_class=formatter,
    )
    common = _common_flags()
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help_text, description=help_text, parents=[common], formatter_class=formatter)

    p = add("normalize", "Normalize lyric text lines (stdin to stdout by default); dropped lines go to stderr.")
    p.add_argument("--input", type=Path, default=None, help="Input text file instead of stdin.")
    p.add_argument("--output", type=Path, default=None, help="Output text file instead of stdout.")
    p.add_argument("--mark-dropped", action="store_true", help="Write a DROPPED line for every dropped input line.")

    p = add("segment", "Cut annotated recordings into utterances and write a manifest.")
    p.add_argument("annotations", type=Path, nargs="+", help="Annotation files (start TAB end TAB text), one per recording.")
    p.add_argument("--output", type=Path, default=None, help="Manifest path; <output-dir>/manifest.jsonl otherwise.")
    p.add_argument("--split", default="train", help="Split name written to the records.")
    p.add_argument("--dataset", default="unnamed", help="Dataset name written to the manifest.")
    p.add_argument("--durations", type=Path, default=None, help="Recording durations file (recording-id TAB seconds).")
    p.add_argument("--feature-template", default=None,
                   help="Feature path template with {utterance_id} and {recording_id} placeholders.")

    p = add("stats", "Print utterance counts and durations of manifests.")
    p.add_argument("manifests", type=Path, nargs="+", help="Manifest files.")

    p = add("subset", "Draw a random subset of a manifest with a target total duration.")
    p.add_argument("manifest", type=Path, help="Source manifest.")
    p.add_argument("--seconds", type=float, required=True, help="Target total duration in seconds.")
    p.add_argument("--output", type=Path, default=None, help="Subset manifest path; <output-dir>/subset.jsonl otherwise.")

    p = add("dedup", "Remove training utterances whose recordings appear in test manifests.")
    p.add_argument("train", type=Path, help="Training manifest.")
    p.add_argument("--test", type=Path, nargs="+", required=True, help="Test manifests.")
    p.add_argument("--output", type=Path, default=None, help="Cleaned manifest path; <output-dir>/dedup.jsonl otherwise.")

    p = add("pretrain", "Stage I: contrastive pretraining of the encoder on unlabelled features.")
    p.add_argument("manifests", type=Path, nargs="+", help="Manifests whose features are used (transcripts ignored).")
    p.add_argument("--init", type=Path, default=None, help="Checkpoint to continue from.")

    p = add("finetune", "Stage II: CTC finetuning on labelled speech.")
    p.add_argument("--train", type=Path, required=True, help="Training manifest.")
    p.add_argument("--dev", type=Path, default=None, help="Dev manifest used for model selection and Newbob.")
    p.add_argument("--init", type=Path, default=None, help="Pretrained checkpoint whose encoder is kept.")

    p = add("transfer", "Stage III: hybrid CTC/attention training on singing data.")
    p.add_argument("--train", type=Path, required=True, help="Training manifest.")
    p.add_argument("--dev", type=Path, default=None, help="Dev manifest used for model selection and Newbob.")
    p.add_argument("--init", type=Path, default=None, help="Checkpoint whose encoder is kept (a fresh head is added).")
    p.add_argument("--consecutive", action="store_true",
                   help="Continue training the whole --init model on this corpus (same architecture required).")

    p = add("lm-train", "Train the character language model on lyric text.")
    p.add_argument("texts", type=Path, nargs="+", help="Text files, one line of lyrics per row.")
    p.add_argument("--dev", type=Path, default=None, help="Dev text file for perplexity.")

    p = add("decode", "Transcribe a manifest with joint CTC/attention/LM beam search.")
    p.add_argument("--checkpoint", type=Path, required=True, help="Model checkpoint.")
    p.add_argument("--manifest", type=Path, required=True, help="Manifest to transcribe.")
    p.add_argument("--lm", type=Path, default=None, help="Language-model checkpoint (needed when lambda_c > 0).")
    p.add_argument("--profile", choices=sorted(DECODE_PROFILES), default=None,
                   help=f"Named (lambda_b, lambda_c) weights: {DECODE_PROFILES}.")
    p.add_argument("--beam", type=int, default=None, help=f"Beam size (config default {BEAM_SIZE}).")
    p.add_argument("--lambda-b", type=float, default=None, help="CTC weight; attention gets 1 - lambda_b (config default 0.4).")
    p.add_argument("--lambda-c", type=float, default=None, help="Language-model weight (config default 0.5).")
    p.add_argument("--nbest", type=int, default=None, help="Hypotheses listed per utterance in scores.csv (config default 1).")
    p.add_argument("--no-breakdown", action="store_true", help="Skip the score-breakdown CSV.")

    p = add("eval", "Score hypothesis transcripts against references.")
    p.add_argument("--ref", type=Path, required=True, help="Reference transcripts (utterance-id TAB text).")
    p.add_argument("--hyp", type=Path, required=True, help="Hypothesis transcripts (utterance-id TAB text).")
    p.add_argument("--cer", action="store_true", help="Score characters instead of words.")

    p = add("synth", "Write a synthetic corpus (features, manifests, references, LM text).")
    p.add_argument("--preset", choices=["speechlike", "singlike"], default=None, help="Domain preset (config default speechlike).")
    p.add_argument("--noise", type=float, default=None, help="Noise standard deviation overriding the preset.")
    p.add_argument("--dataset", default=None, help="Dataset name (config default synth).")

    p = add("ablate", "Run a small-scale ablation on synthetic corpora and write its table.")
    p.add_argument("--profile", choices=ABLATION_PROFILES, required=True, help="Ablation to run.")
    p.add_argument("--checkpoint", type=Path, default=None, help="decode-ladder: model to decode instead of training one.")
    p.add_argument("--lm", type=Path, default=None, help="decode-ladder: language model instead of training one.")
    return parser


def _inventory(path: Optional[Path]) -> TokenInventory:
    return TokenInventory.load(path) if path else default_inventory()


def _decode_weights(cfg: ExperimentConfig, args: argparse.Namespace) -> DecodeWeights:
    values = cfg.decode.model_dump()
    if args.profile:
        profile = DecodeWeights.from_profile(args.profile)
        values.update(lambda_b=profile.lambda_b, lambda_c=profile.lambda_c)
    flags = {"beam_size": args.beam, "lambda_b": args.lambda_b, "lambda_c": args.lambda_c, "nbest": args.nbest}
    values.update({k: v for k, v in flags.items() if v is not None})
    return DecodeWeights(**values)


def dispatch(args: argparse.Namespace, run: RunConfig) -> None:
    """Runs one parsed subcommand."""
    out = run.prepare_output()
    cfg = load_experiment_config(args.config, args.overrides, run.seed, run.workers)
    inventory = _inventory(args.inventory)
    command = args.command
    inputs: List[Path] = [p for p in (args.config, args.inventory) if p]

    if command == "normalize":
        source = open(args.input, "r", encoding="utf-8") if args.input else sys.stdin
        sink = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
        try:
            run_normalize(source, sink, sys.stderr, inventory, args.mark_dropped)
        finally:
            if args.input:
                source.close()
            if args.output:
                sink.close()
        record_run(out, command, None, run.seed, inputs + [args.input], mark_dropped=args.mark_dropped)

    elif command == "segment":
        durations = None
        if args.durations:
            durations = {k: float(v) for k, v in read_transcripts(args.durations).items()}
        output = args.output or out / "manifest.jsonl"
        run_segment(args.annotations, output, cfg.segment, args.split, args.dataset, durations,
                    args.feature_template, run.workers, inventory)
        record_run(out, command, cfg.segment, run.seed, inputs + list(args.annotations) + [args.durations],
                   split=args.split, dataset=args.dataset, output=output)

    elif command == "stats":
        print(run_stats(args.manifests))
        record_run(out, command, None, run.seed, inputs + list(args.manifests))

    elif command == "subset":
        output = args.output or out / "subset.jsonl"
        run_subset(args.manifest, args.seconds, run.seed, output)
        record_run(out, command, None, run.seed, inputs + [args.manifest], seconds=args.seconds, output=output)

    elif command == "dedup":
        output = args.output or out / "dedup.jsonl"
        _, removed = run_dedup(args.train, args.test, output)
        logging.info(f"{removed} training utterance(s) removed")
        record_run(out, command, None, run.seed, inputs + [args.train] + list(args.test), output=output)

    elif command == "pretrain":
        run_pretrain(cfg, args.manifests, out, inventory, args.init)
        record_run(out, command, cfg, run.seed, inputs + list(args.manifests) + [args.init])

    elif command == "finetune":
        run_finetune(cfg, args.train, args.dev, out, inventory, args.init)
        record_run(out, command, cfg, run.seed, inputs + [args.train, args.dev, args.init])

    elif command == "transfer":
        run_transfer(cfg, args.train, args.dev, out, inventory, args.init, args.consecutive)
        record_run(out, command, cfg, run.seed, inputs + [args.train, args.dev, args.init], consecutive=args.consecutive)

    elif command == "lm-train":
        run_lm_train(cfg, args.texts, args.dev, out, inventory)
        record_run(out, command, cfg, run.seed, inputs + list(args.texts) + [args.dev])

    elif command == "decode":
        weights = _decode_weights(cfg, args)
        run_decode(weights, args.checkpoint, args.manifest, out, inventory, args.lm, run.workers, not args.no_breakdown)
        record_run(out, command, weights, run.seed, inputs + [args.checkpoint, args.manifest, args.lm])

    elif command == "eval":
        result = run_eval(args.ref, args.hyp, out, args.cer)
        unit = "CER" if args.cer else "WER"
        print(f"{unit} (utterance-averaged): {result.utterance_averaged:.4f}")
        print(f"{unit} (pooled): {result.pooled:.4f}")
        record_run(out, command, None, run.seed, inputs + [args.ref, args.hyp], cer=args.cer)

    elif command == "synth":
        updates = {"preset": args.preset, "noise": args.noise, "dataset": args.dataset}
        spec = cfg.synth.model_validate({**cfg.synth.model_dump(), **{k: v for k, v in updates.items() if v is not None}})
        run_synth(spec, run.seed, out, inventory)
        record_run(out, command, spec, run.seed, inputs)

    elif command == "ablate":
        table = run_ablation(args.profile, cfg, run.seed, out, inventory, args.checkpoint, args.lm)
        print(table)
        record_run(out, command, cfg, run.seed, inputs + [args.checkpoint, args.lm], profile=args.profile)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parses the command line and runs the subcommand.

    Returns:
        int: 0 on success, 2 for configuration and pipeline errors, 1 for anything unexpected.
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, structured=args.log_format == "json")
    try:
        run = RunConfig(
            subcommand=args.command,
            config_path=args.config,
            seed=args.seed,
            workers=args.workers,
            log_level=args.log_level,
            log_format=args.log_format,
            output_dir=args.output_dir,
        )
        dispatch(args, run)
    except (LyricTransferError, ValidationError) as e:
        error = e if isinstance(e, LyricTransferError) else config_error(e)
        logging.error(f"{type(error).__name__}: {error.message}")
        print(json.dumps(error.to_record()), file=sys.stderr)
        return 2
    except Exception as e:
        logging.exception(f"Unexpected failure in {args.command}")
        print(json.dumps({"error": type(e).__name__, "message": str(e), "key": None}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
