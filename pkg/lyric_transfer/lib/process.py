"""
Orchestration of the command-line subcommands.

Every `run_*` function is a pure function of its configuration, its input files and the seed: it reads
inputs, calls the library, writes its outputs into the output directory and returns what it produced.
`record_run` writes the run-metadata record next to them.

Functions:
- load_experiment_config: JSON config file plus `--set` overrides, validated into `ExperimentConfig`.
- run_normalize, run_segment, run_stats, run_subset, run_dedup: data preparation.
- run_pretrain, run_finetune, run_transfer, run_lm_train: the training stages.
- run_decode, run_eval: transcription and scoring.
- run_synth, run_ablation: synthetic corpora and the small-scale ablation protocols.
"""
import json
import logging
import math
import os
from collections import Counter
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, TextIO, Tuple

from pydantic import BaseModel, Field, ValidationError

from lyric_transfer.lib.config import CONSECUTIVE_EPOCHS
from lyric_transfer.lib.data_utils import (
    Manifest,
    SegmentRules,
    load_record_features,
    overlap_filter,
    read_annotations,
    segment_recordings,
    stats,
    stats_table,
    subset_by_duration,
)
from lyric_transfer.lib.errors import ConfigError
from lyric_transfer.lib.joint_decode import DecodeModels, DecodeResult, DecodeWeights, decode_many
from lyric_transfer.lib.lm_utils import CharLm, LmConfig, LmTrainSettings, lm_train, load_lm, save_lm
from lyric_transfer.lib.metrics import CorpusWer, corpus_wer
from lyric_transfer.lib.model import ModelConfig, TranscriptionModel
from lyric_transfer.lib.s2s_decoder import DecoderContext
from lyric_transfer.lib.synth import SynthCorpus, SynthSpec, synth_corpus
from lyric_transfer.lib.text_utils import TokenInventory, decode, normalize_lines, strip_control
from lyric_transfer.lib.trainer import (
    PretrainConfig,
    TrainConfig,
    TrainResult,
    TrainUtterance,
    consecutive_transfer,
    pretrain,
    train,
    utterances_from_manifest,
)
from lyric_transfer.lib.utils import (
    load_json,
    read_transcripts,
    write_csv,
    write_run_metadata,
    write_transcripts,
)

DROPPED_MARKER = "DROPPED"
EPOCH_FIELDS = ["epoch", "train_loss", "dev_loss", "dev_wer", "lr_head", "lr_encoder", "skipped", "infeasible", "seconds"]


# Configuration

class RunConfig(BaseModel):
    """Settings shared by every subcommand."""
    subcommand: str
    config_path: Optional[Path] = None
    seed: int = Field(0, ge=0, description="Seed propagated to every stochastic component.")
    workers: int = Field(1, ge=1, description="Threads for per-utterance work.")
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    log_format: Literal["text", "json"] = "text"
    output_dir: Path

    def prepare_output(self) -> Path:
        """
        Creates the output directory.

        Raises:
            ConfigError: If the directory cannot be created or written to.
        """
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"output directory {self.output_dir} is not writable: {e}", key="output_dir") from e
        if not os.access(self.output_dir, os.W_OK):
            raise ConfigError(f"output directory {self.output_dir} is not writable", key="output_dir")
        return self.output_dir


class AblationConfig(BaseModel):
    """Corpus sizes and sweeps of the small-scale ablations."""
    speech_utterances: int = Field(200, ge=1, description="Speechlike utterances for pretraining and finetuning.")
    singing_utterances: int = Field(50, ge=1, description="Singlike utterances for transfer training.")
    eval_utterances: int = Field(10, ge=1, description="Dev and test utterances per corpus.")
    noise: Optional[float] = Field(None, ge=0.0, description="Overrides the presets' noise level.")
    subset_fractions: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0], min_length=1)


def _finetune_default() -> TrainConfig:
    return TrainConfig(stage="finetune-speech", lambda_a=1.0)


def _consecutive_default() -> TrainConfig:
    return TrainConfig(epochs=CONSECUTIVE_EPOCHS)


class ExperimentConfig(BaseModel):
    """
    Key tree of a config file. Every section is optional and falls back to its defaults.

    Attributes:
        model (ModelConfig): Encoder, head and decoder shapes.
        pretrain (PretrainConfig): Contrastive pretraining.
        finetune (TrainConfig): Speech finetuning (CTC-only head).
        transfer (TrainConfig): Transfer training on singing data (hybrid head).
        consecutive (TrainConfig): Continued training on a second singing corpus.
        lm (LmConfig): Language-model sizes.
        lm_train (LmTrainSettings): Language-model optimiser settings.
        decode (DecodeWeights): Beam-search weights and limits.
        segment (SegmentRules): Faulty-annotation rules.
        synth (SynthSpec): Synthetic corpus generator.
        ablation (AblationConfig): Ablation corpus sizes.
    """
    model: ModelConfig = Field(default_factory=ModelConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    finetune: TrainConfig = Field(default_factory=_finetune_default)
    transfer: TrainConfig = Field(default_factory=TrainConfig)
    consecutive: TrainConfig = Field(default_factory=_consecutive_default)
    lm: LmConfig = Field(default_factory=LmConfig)
    lm_train: LmTrainSettings = Field(default_factory=LmTrainSettings)
    decode: DecodeWeights = Field(default_factory=DecodeWeights)
    segment: SegmentRules = Field(default_factory=SegmentRules)
    synth: SynthSpec = Field(default_factory=SynthSpec)
    ablation: AblationConfig = Field(default_factory=AblationConfig)


def parse_override(item: str) -> Tuple[List[str], object]:
    """
    Splits `dotted.key=value`; the value is parsed as JSON when possible and kept as a string otherwise.
    """
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like dotted.key=value", key=item)
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(tree: dict, overrides: Sequence[str]) -> dict:
    for item in overrides:
        path, value = parse_override(item)
        node = tree
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {'.'.join(path)}: {part} is not a section", key=".".join(path))
        node[path[-1]] = value
    return tree


def config_error(error: ValidationError) -> ConfigError:
    """Converts the first pydantic error into a `ConfigError` naming the dotted key."""
    first = error.errors()[0]
    key = ".".join(str(part) for part in first.get("loc", ())) or None
    return ConfigError(f"{key or 'config'}: {first.get('msg')}", key=key)


def load_experiment_config(
    path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    workers: Optional[int] = None,
) -> ExperimentConfig:
    """
    Reads a JSON config tree, applies `--set` overrides and validates it.

    The seed and worker count, when given, are copied into every section that has one.

    Raises:
        ConfigError: If a key violates its constraint.
    """
    if path and not Path(path).is_file():
        raise ConfigError(f"config file {path} does not exist", key="config")
    tree = load_json(path) if path else {}
    apply_overrides(tree, overrides)
    try:
        cfg = ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        raise config_error(e) from e
    updates = {}
    for section in ("pretrain", "finetune", "transfer", "consecutive", "lm_train"):
        values = {}
        current = getattr(cfg, section)
        if seed is not None:
            values["seed"] = seed
        if workers is not None and "workers" in type(current).model_fields:
            values["workers"] = workers
        updates[section] = current.model_copy(update=values)
    return cfg.model_copy(update=updates)


def _load_utterances(path: Path, inventory: TokenInventory) -> List[TrainUtterance]:
    manifest = Manifest.load(path, check_features=True)
    return utterances_from_manifest(path, manifest, inventory)


def _write_epochs(path: Path, result: TrainResult) -> None:
    write_csv(path, [r.to_row() for r in result.reports], EPOCH_FIELDS)


# Data preparation

def run_normalize(
    source: TextIO,
    sink: TextIO,
    diagnostics: TextIO,
    inventory: Optional[TokenInventory] = None,
    mark_dropped: bool = False,
) -> Counter:
    """
    Normalizes lines from `source` into `sink`; dropped lines go to `diagnostics` with their reason.

    With `mark_dropped`, a dropped line is written as `DROPPED` so output and input stay line-aligned.

    Returns:
        Counter: Lines per reason code.
    """
    counts: Counter = Counter()
    for number, text, reason in normalize_lines(source, inventory):
        counts[reason.value] += 1
        if text is None:
            diagnostics.write(f"{number}\t{reason.value}\n")
            if mark_dropped:
                sink.write(f"{DROPPED_MARKER}\n")
        else:
            sink.write(f"{text}\n")
    logging.info(f"Normalized {sum(counts.values())} lines: {dict(counts)}")
    return counts


def run_segment(
    annotation_paths: Sequence[Path],
    output: Path,
    rules: SegmentRules,
    split: str = "train",
    dataset: str = "unnamed",
    durations: Optional[Dict[str, float]] = None,
    feature_template: Optional[str] = None,
    workers: int = 1,
    inventory: Optional[TokenInventory] = None,
) -> Manifest:
    """
    Segments annotation files (one per recording, the file stem being the recording id) into a
    manifest. Removals are written next to it as `<output>.removed.csv`.
    """
    annotations = {Path(p).stem: read_annotations(Path(p)) for p in annotation_paths}
    results = segment_recordings(annotations, rules, split, durations, workers, feature_template, inventory)
    records, removed, overlaps = [], [], []
    for recording, result in results.items():
        records.extend(result.records)
        removed.extend(
            {"recording_id": recording, "index": i, "start": a.start, "end": a.end, "reason": reason.value, "text": a.text}
            for i, a, reason in result.removed
        )
        overlaps.extend({"recording_id": recording, "first": i, "second": j} for i, j in result.overlaps)
    manifest = Manifest(dataset=dataset, split=split, records=records)
    manifest.save(output)
    output = Path(output)
    write_csv(output.with_name(output.name + ".removed.csv"), removed,
              ["recording_id", "index", "start", "end", "reason", "text"])
    if overlaps:
        write_csv(output.with_name(output.name + ".overlaps.csv"), overlaps, ["recording_id", "first", "second"])
    logging.info(f"{len(records)} utterances kept, {len(removed)} removed, {len(overlaps)} overlapping pairs")
    return manifest


def run_stats(manifest_paths: Sequence[Path]) -> str:
    rows = []
    for path in manifest_paths:
        manifest = Manifest.load(path)
        rows.append((f"{manifest.dataset}/{manifest.split}", stats(manifest)))
    return stats_table(rows)


def run_subset(manifest_path: Path, target_seconds: float, seed: int, output: Path) -> Manifest:
    subset = subset_by_duration(Manifest.load(manifest_path), target_seconds, seed)
    subset.save(output)
    return subset


def run_dedup(train_path: Path, test_paths: Sequence[Path], output: Path) -> Tuple[Manifest, int]:
    cleaned, removed = overlap_filter(Manifest.load(train_path), [Manifest.load(p) for p in test_paths])
    cleaned.save(output)
    return cleaned, removed


# Training stages

def _ctc_only(cfg: ModelConfig) -> ModelConfig:
    return cfg.model_copy(update={"head": cfg.head.model_copy(update={"attention": False})})


def run_pretrain(
    cfg: ExperimentConfig,
    manifest_paths: Sequence[Path],
    output_dir: Path,
    inventory: TokenInventory,
    init: Optional[Path] = None,
) -> Path:
    """Stage I: contrastive pretraining on the features of the given manifests."""
    inputs, ids = [], []
    for path in manifest_paths:
        manifest = Manifest.load(path, check_features=True)
        inputs.extend(load_record_features(path, manifest))
        ids.extend(r.utterance_id for r in manifest.records)
    if init:
        model = TranscriptionModel.load(init, inventory)
    else:
        model = TranscriptionModel.initialize(cfg.model, inventory, cfg.pretrain.seed)
    result = pretrain(model, inputs, cfg.pretrain, ids)
    checkpoint = Path(output_dir) / "pretrained.ckpt"
    result.model.save(checkpoint)
    write_csv(Path(output_dir) / "pretrain_losses.csv",
              [{"epoch": i, "loss": loss} for i, loss in enumerate(result.losses, start=1)], ["epoch", "loss"])
    return checkpoint


def run_finetune(
    cfg: ExperimentConfig,
    train_path: Path,
    dev_path: Optional[Path],
    output_dir: Path,
    inventory: TokenInventory,
    init: Optional[Path] = None,
) -> TrainResult:
    """
    Stage II: CTC finetuning on labelled speech. The head is CTC-only and freshly initialised on top of
    the `init` encoder, or on a random encoder without `init`.
    """
    model_cfg = _ctc_only(cfg.model)
    train_cfg = cfg.finetune
    if init:
        model = TranscriptionModel.load(init, inventory).with_fresh_head(model_cfg, train_cfg.seed)
    else:
        model = TranscriptionModel.initialize(model_cfg, inventory, train_cfg.seed)
    dev = _load_utterances(dev_path, inventory) if dev_path else []
    result = train(model, _load_utterances(train_path, inventory), dev, train_cfg)
    result.model.save(Path(output_dir) / "finetuned.ckpt")
    _write_epochs(Path(output_dir) / "finetune_epochs.csv", result)
    return result


def run_transfer(
    cfg: ExperimentConfig,
    train_path: Path,
    dev_path: Optional[Path],
    output_dir: Path,
    inventory: TokenInventory,
    init: Optional[Path] = None,
    consecutive: bool = False,
) -> TrainResult:
    """
    Stage III: hybrid CTC/attention training on singing data.

    A fresh head of shape `cfg.model` is placed on the `init` encoder. With `consecutive`, the whole
    `init` model (same architecture required) keeps training on the new corpus instead.

    Raises:
        ConfigError: If `consecutive` is set without `init`.
        CheckpointMismatchError: If a consecutive checkpoint has another architecture or inventory.
    """
    data = _load_utterances(train_path, inventory)
    dev = _load_utterances(dev_path, inventory) if dev_path else []
    output_dir = Path(output_dir)
    if consecutive:
        if not init:
            raise ConfigError("consecutive training needs --init", key="init")
        result = consecutive_transfer(init, inventory, cfg.model, data, dev, cfg.consecutive)
        name = "consecutive"
    else:
        seed = cfg.transfer.seed
        if init:
            model = TranscriptionModel.load(init, inventory).with_fresh_head(cfg.model, seed)
        else:
            model = TranscriptionModel.initialize(cfg.model, inventory, seed)
        result = train(model, data, dev, cfg.transfer)
        name = "transfer"
    result.model.save(output_dir / f"{name}.ckpt")
    _write_epochs(output_dir / f"{name}_epochs.csv", result)
    return result


def _read_text_lines(paths: Sequence[Path], inventory: TokenInventory) -> List[str]:
    lines = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as f:
            lines.extend(text for _, text, _ in normalize_lines(f, inventory) if text is not None)
    return lines


def run_lm_train(
    cfg: ExperimentConfig,
    text_paths: Sequence[Path],
    dev_path: Optional[Path],
    output_dir: Path,
    inventory: TokenInventory,
) -> Path:
    """Trains the character language model on normalized text files."""
    lines = _read_text_lines(text_paths, inventory)
    dev_lines = _read_text_lines([dev_path], inventory) if dev_path else None
    result = lm_train(lines, cfg.lm, cfg.lm_train, inventory, dev_lines)
    checkpoint = Path(output_dir) / "lm.ckpt"
    save_lm(checkpoint, result.params, cfg.lm, inventory)
    write_csv(Path(output_dir) / "lm_epochs.csv",
              [{"epoch": r.epoch, "train_loss": r.train_loss, "dev_perplexity": r.dev_perplexity} for r in result.reports],
              ["epoch", "train_loss", "dev_perplexity"])
    return checkpoint


# Decoding and scoring

def decode_utterances(
    model: TranscriptionModel,
    inputs: Sequence,
    weights: DecodeWeights,
    lm: Optional[CharLm] = None,
    workers: int = 1,
) -> List[DecodeResult]:
    """
    Joint beam search over every input, on `workers` threads, results in input order.

    Raises:
        ConfigError: If the weights need an attention branch the model lacks, or a missing LM.
    """
    if weights.lambda_b < 1.0 and not model.cfg.head.attention:
        raise ConfigError("lambda_b < 1 needs a checkpoint with an attention decoder", key="lambda_b")
    if weights.lambda_c > 0.0 and lm is None:
        raise ConfigError("lambda_c > 0 needs a language model (--lm)", key="lambda_c")
    params = model.tensors(trainable=False)

    def build(index: int) -> DecodeModels:
        logp, out = model.infer(inputs[index])
        context = DecoderContext(out.features, params) if weights.lambda_b < 1.0 else None
        return DecodeModels(logp, model.inventory, context, model.cfg.decoder if context else None, lm)

    return decode_many(build, len(inputs), weights, workers)


def hypothesis_text(labels: Sequence[int], inventory: TokenInventory) -> str:
    return " ".join(decode(strip_control(labels, inventory), inventory).split())


def run_decode(
    weights: DecodeWeights,
    checkpoint: Path,
    manifest_path: Path,
    output_dir: Path,
    inventory: TokenInventory,
    lm_path: Optional[Path] = None,
    workers: int = 1,
    breakdown: bool = True,
) -> Path:
    """
    Decodes a manifest into `hyp.txt` (utterance-id TAB text) and, with `breakdown`, `scores.csv` listing
    the component scores of every n-best entry.
    """
    model = TranscriptionModel.load(checkpoint, inventory)
    lm = load_lm(lm_path, inventory) if lm_path else None
    manifest = Manifest.load(manifest_path, check_features=True)
    inputs = load_record_features(manifest_path, manifest)
    logging.info(f"Decoding {len(inputs)} utterances (beam {weights.beam_size}, "
                 f"lambda_b {weights.lambda_b}, lambda_c {weights.lambda_c})")
    results = decode_utterances(model, inputs, weights, lm, workers)
    output_dir = Path(output_dir)
    hyp_path = output_dir / "hyp.txt"
    write_transcripts(hyp_path, (
        (r.utterance_id, hypothesis_text(res.labels, inventory)) for r, res in zip(manifest.records, results)
    ))
    if breakdown:
        rows = []
        for record, res in zip(manifest.records, results):
            entries = res.nbest or []
            if not entries:
                rows.append({"utterance_id": record.utterance_id, "rank": 1, "text": hypothesis_text(res.labels, inventory),
                             "ctc": res.ctc, "s2s": res.s2s, "lm": res.lm, "combined": res.combined, "finished": res.finished})
            for rank, hyp in enumerate(entries, start=1):
                rows.append({"utterance_id": record.utterance_id, "rank": rank, "text": hypothesis_text(hyp.labels, inventory),
                             "ctc": hyp.ctc, "s2s": hyp.s2s, "lm": hyp.lm, "combined": hyp.combined, "finished": hyp.finished})
        write_csv(output_dir / "scores.csv", rows,
                  ["utterance_id", "rank", "text", "ctc", "s2s", "lm", "combined", "finished"])
    return hyp_path


def run_eval(ref_path: Path, hyp_path: Path, output_dir: Optional[Path] = None, character_level: bool = False) -> CorpusWer:
    """
    Scores a hypothesis transcript file against a reference file. Utterances missing from the
    hypotheses count as empty hypotheses.
    """
    refs = read_transcripts(ref_path)
    hyps = read_transcripts(hyp_path)
    missing = [k for k in refs if k not in hyps]
    if missing:
        logging.warning(f"{len(missing)} reference utterance(s) have no hypothesis; scored as empty")
    result = corpus_wer(((refs[k], hyps.get(k, "")) for k in refs), character_level=character_level)
    if output_dir is not None:
        write_csv(Path(output_dir) / "wer.csv", [
            {"utterance_id": k, "substitutions": b.substitutions, "deletions": b.deletions,
             "insertions": b.insertions, "reference_words": b.reference_words, "wer": b.wer,
             "empty_reference": b.empty_reference}
            for k, b in zip(refs, result.per_utterance)
        ])
    return result


# Synthetic corpora and ablations

def run_synth(spec: SynthSpec, seed: int, output_dir: Path, inventory: TokenInventory) -> SynthCorpus:
    return synth_corpus(spec, seed, output_dir, inventory)


AblationProfile = Literal["stage-removal", "decode-ladder", "low-resource"]


def _ablation_corpora(cfg: ExperimentConfig, seed: int, root: Path, inventory: TokenInventory) -> Tuple[SynthCorpus, SynthCorpus]:
    sizes = cfg.ablation
    speech = cfg.synth.model_copy(update={
        "preset": "speechlike", "dataset": "speech", "noise": sizes.noise,
        "splits": {"train": sizes.speech_utterances, "dev": sizes.eval_utterances},
    })
    singing = cfg.synth.model_copy(update={
        "preset": "singlike", "dataset": "singing", "noise": sizes.noise,
        "splits": {"train": sizes.singing_utterances, "dev": sizes.eval_utterances, "test": sizes.eval_utterances},
    })
    return synth_corpus(speech, seed, root / "speech", inventory), synth_corpus(singing, seed, root / "singing", inventory)


def _speech_stages(cfg: ExperimentConfig, speech: SynthCorpus, inventory: TokenInventory, seed: int):
    """Pretrained model and pretrained-then-finetuned model on the speech corpus."""
    train_data = _load_utterances(speech.manifests["train"], inventory)
    dev = _load_utterances(speech.manifests["dev"], inventory)
    base = TranscriptionModel.initialize(cfg.model, inventory, seed)
    pretrained = pretrain(base, [u.features for u in train_data], cfg.pretrain, [u.utterance_id for u in train_data]).model
    finetuned = train(pretrained.with_fresh_head(_ctc_only(cfg.model), seed), train_data, dev, cfg.finetune).model
    return pretrained, finetuned


def _stage_removal(cfg, speech, singing, inventory, seed) -> List[dict]:
    pretrained, finetuned = _speech_stages(cfg, speech, inventory, seed)
    starts = {
        "full": finetuned,
        "no-finetune": pretrained,
        "no-pretrain": TranscriptionModel.initialize(cfg.model, inventory, seed),
    }
    train_data = _load_utterances(singing.manifests["train"], inventory)
    dev = _load_utterances(singing.manifests["dev"], inventory)
    rows = []
    for variant, start in starts.items():
        logging.info(f"Stage-removal variant {variant}")
        result = train(start.with_fresh_head(cfg.model, seed), train_data, dev, cfg.transfer)
        rows.extend({"variant": variant, **r.to_row()} for r in result.reports)
    return rows


def _decode_ladder(cfg, singing, inventory, seed, checkpoint: Optional[Path], lm_path: Optional[Path]) -> List[dict]:
    if checkpoint:
        model = TranscriptionModel.load(checkpoint, inventory)
    else:
        train_data = _load_utterances(singing.manifests["train"], inventory)
        dev = _load_utterances(singing.manifests["dev"], inventory)
        model = train(TranscriptionModel.initialize(cfg.model, inventory, seed), train_data, dev, cfg.transfer).model
    if lm_path:
        lm = load_lm(lm_path, inventory)
    else:
        lines = _read_text_lines([singing.lm_text], inventory)
        lm = CharLm.from_arrays(lm_train(lines, cfg.lm, cfg.lm_train, inventory).params, cfg.lm, inventory)
    test = _load_utterances(singing.manifests["test"], inventory)
    lambda_b, lambda_c = cfg.decode.lambda_b, cfg.decode.lambda_c
    ladder = [("ctc", 1.0, 0.0), ("ctc+s2s", lambda_b, 0.0), ("ctc+s2s+lm", lambda_b, lambda_c)]
    rows = []
    for setting, b, c in ladder:
        weights = cfg.decode.model_copy(update={"lambda_b": b, "lambda_c": c})
        results = decode_utterances(model, [u.features for u in test], weights, lm, cfg.transfer.workers)
        scored = corpus_wer((u.transcript, hypothesis_text(r.labels, inventory)) for u, r in zip(test, results))
        rows.append({"setting": setting, "lambda_b": b, "lambda_c": c,
                     "wer": scored.utterance_averaged, "pooled_wer": scored.pooled})
        logging.info(f"Decode ladder {setting}: WER {scored.utterance_averaged:.4f}")
    return rows


def _low_resource(cfg, speech, singing, inventory, seed) -> List[dict]:
    _, finetuned = _speech_stages(cfg, speech, inventory, seed)
    manifest = Manifest.load(singing.manifests["train"])
    dev = _load_utterances(singing.manifests["dev"], inventory)
    by_id = {u.utterance_id: u for u in _load_utterances(singing.manifests["train"], inventory)}
    rows = []
    for fraction in sorted(cfg.ablation.subset_fractions):
        subset = subset_by_duration(manifest, fraction * manifest.total_duration, seed)
        data = [by_id[r.utterance_id] for r in subset.records]
        result = train(finetuned.with_fresh_head(cfg.model, seed), data, dev, cfg.transfer)
        best = result.reports[result.best_epoch - 1] if result.best_epoch else None
        rows.append({
            "fraction": fraction,
            "seconds": subset.total_duration,
            "utterances": len(subset),
            "dev_loss": best.dev_loss if best else math.inf,
            "dev_wer": best.dev_wer if best else math.inf,
        })
    return rows


def run_ablation(
    profile: AblationProfile,
    cfg: ExperimentConfig,
    seed: int,
    output_dir: Path,
    inventory: TokenInventory,
    checkpoint: Optional[Path] = None,
    lm_path: Optional[Path] = None,
) -> Path:
    """
    Runs one small-scale ablation on freshly synthesized corpora and writes its table as CSV.

    - `stage-removal`: transfer training from the full pipeline, without finetuning and without either
      speech stage; one row per variant and epoch.
    - `decode-ladder`: CTC-only, CTC plus attention, and CTC plus attention plus LM decoding of one model.
    - `low-resource`: transfer training on growing subsets of the singing training set.
    """
    output_dir = Path(output_dir)
    speech, singing = _ablation_corpora(cfg, seed, output_dir / "corpora", inventory)
    if profile == "stage-removal":
        rows = _stage_removal(cfg, speech, singing, inventory, seed)
    elif profile == "decode-ladder":
        rows = _decode_ladder(cfg, singing, inventory, seed, checkpoint, lm_path)
    elif profile == "low-resource":
        rows = _low_resource(cfg, speech, singing, inventory, seed)
    else:
        raise ConfigError(f"unknown ablation profile {profile!r}", key="profile")
    table = output_dir / f"{profile.replace('-', '_')}.csv"
    write_csv(table, rows)
    logging.info(f"Ablation table written to {table}")
    return table


def record_run(output_dir: Path, command: str, cfg: Optional[BaseModel], seed: int, inputs: Sequence[Path] = (), **extra) -> None:
    """Writes the run-metadata file for a subcommand."""
    config = cfg.model_dump(mode="json") if cfg is not None else {}
    config.update({k: (str(v) if isinstance(v, Path) else v) for k, v in extra.items()})
    write_run_metadata(output_dir, command, config, seed, [p for p in inputs if p])
