"""
Synthetic corpora standing in for recorded speech and singing.

Every character of the inventory owns a fixed feature template. An utterance renders its transcript
character by character: each character repeats its template for a number of frames, with a silent
frame between characters so repeated letters stay separable for CTC, then Gaussian noise is added.

Two presets differ in timing and noise. `singlike` holds each character 2.5 times longer than
`speechlike` and is noisier, which gives the transfer experiments a domain gap while keeping the
templates shared.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from lyric_transfer.lib.config import FRAME_SHIFT
from lyric_transfer.lib.data_utils import Manifest, UtteranceRecord
from lyric_transfer.lib.encoder import write_feature_file
from lyric_transfer.lib.errors import ConfigError
from lyric_transfer.lib.numerics import make_rng
from lyric_transfer.lib.text_utils import TokenInventory, default_inventory, normalize_line
from lyric_transfer.lib.utils import write_transcripts

PRESETS: Dict[str, Tuple[int, float]] = {
    "speechlike": (4, 0.05),
    "singlike": (10, 0.1),
}
"""Frames per character and noise standard deviation of each preset."""

DEFAULT_VOCABULARY = (
    "LA", "OH", "LOVE", "YOU", "ME", "BABY", "NIGHT", "HEART", "DANCE", "SING",
    "TONIGHT", "FEEL", "SO", "GOOD", "HOLD", "ON", "DON'T", "GO", "STAY", "RAIN",
)


class SynthSpec(BaseModel):
    """
    Generator parameters.

    Attributes:
        preset (str): `speechlike` or `singlike`.
        dataset (str): Dataset name written to the manifests.
        splits (Dict[str, int]): Utterances per split.
        vocabulary (List[str]): Upper-case words transcripts are drawn from; `synth_split` checks them against
            the inventory.
        min_words (int): Fewest words per utterance.
        max_words (int): Most words per utterance.
        feature_dim (int): Feature bins per frame.
        frames_per_char (Optional[int]): Overrides the preset's character duration.
        noise (Optional[float]): Overrides the preset's noise level.
        jitter (int): Per-character duration jitter in frames (uniform in [-jitter, jitter]).
        lm_lines (int): Extra training-domain sentences written for language-model training.
        template_seed (int): Seed of the character templates, shared across presets and corpus seeds.
    """
    preset: Literal["speechlike", "singlike"] = "speechlike"
    dataset: str = "synth"
    splits: Dict[str, int] = Field(default_factory=lambda: {"train": 20, "dev": 5, "test": 5})
    vocabulary: List[str] = Field(default_factory=lambda: list(DEFAULT_VOCABULARY), min_length=1)
    min_words: int = Field(1, ge=1)
    max_words: int = Field(3, ge=1)
    feature_dim: int = Field(16, gt=0)
    frames_per_char: Optional[int] = Field(None, gt=0)
    noise: Optional[float] = Field(None, ge=0.0)
    jitter: int = Field(0, ge=0)
    lm_lines: int = Field(200, ge=0)
    template_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "SynthSpec":
        if self.max_words < self.min_words:
            raise ValueError("max_words must be at least min_words")
        for word in self.vocabulary:
            if not word or word != word.upper() or any(ch.isspace() for ch in word):
                raise ValueError(f"vocabulary word {word!r} is not a normalized single word")
        return self

    @property
    def char_frames(self) -> int:
        return self.frames_per_char or PRESETS[self.preset][0]

    @property
    def noise_level(self) -> float:
        return PRESETS[self.preset][1] if self.noise is None else self.noise


def character_templates(inventory: TokenInventory, dim: int, seed: int = 0) -> Dict[str, np.ndarray]:
    """One unit-norm template per text character of the inventory, the space included."""
    templates = {}
    for ch in inventory.text_characters + " ":
        vector = make_rng(seed, "template", ch).standard_normal(dim)
        templates[ch] = vector / np.linalg.norm(vector)
    return templates


def sample_sentence(spec: SynthSpec, rng: np.random.Generator) -> str:
    count = int(rng.integers(spec.min_words, spec.max_words + 1))
    return " ".join(spec.vocabulary[int(i)] for i in rng.integers(0, len(spec.vocabulary), size=count))


def render(text: str, spec: SynthSpec, templates: Dict[str, np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Feature matrix (T, feature_dim) of one transcript."""
    frames = []
    silence = np.zeros((1, spec.feature_dim))
    for position, ch in enumerate(text):
        length = spec.char_frames
        if spec.jitter:
            length = max(1, length + int(rng.integers(-spec.jitter, spec.jitter + 1)))
        if position:
            frames.append(silence)
        frames.append(np.tile(templates[ch], (length, 1)))
    matrix = np.concatenate(frames, axis=0)
    if spec.noise_level > 0:
        matrix = matrix + rng.normal(0.0, spec.noise_level, size=matrix.shape)
    return matrix


@dataclass
class SynthUtterance:
    utterance_id: str
    text: str
    features: np.ndarray

    @property
    def duration(self) -> float:
        return round(self.features.shape[0] * FRAME_SHIFT, 3)


def synth_split(spec: SynthSpec, split: str, count: int, seed: int,
                inventory: Optional[TokenInventory] = None) -> List[SynthUtterance]:
    """Generates `count` utterances of one split; the same arguments always give the same output."""
    inventory = inventory or default_inventory()
    for word in spec.vocabulary:
        if normalize_line(word, inventory) != word:
            raise ConfigError(f"vocabulary word {word!r} does not survive normalization with this inventory",
                              key="synth.vocabulary")
    templates = character_templates(inventory, spec.feature_dim, spec.template_seed)
    utterances = []
    for index in range(count):
        rng = make_rng(seed, "synth", spec.preset, split, str(index))
        text = sample_sentence(spec, rng)
        recording = f"{spec.dataset}-{split}-{index:05d}"
        utterances.append(SynthUtterance(f"{recording}-00000", text, render(text, spec, templates, rng)))
    return utterances


@dataclass
class SynthCorpus:
    """Files written by `synth_corpus`."""
    root: Path
    manifests: Dict[str, Path] = field(default_factory=dict)
    references: Dict[str, Path] = field(default_factory=dict)
    lm_text: Optional[Path] = None


def synth_corpus(spec: SynthSpec, seed: int, out_dir: Path, inventory: Optional[TokenInventory] = None) -> SynthCorpus:
    """
    Writes a synthetic corpus: feature files, one manifest and one reference transcript per split, and
    a language-model text made of the training transcripts plus `lm_lines` extra sentences.
    """
    out_dir = Path(out_dir)
    corpus = SynthCorpus(root=out_dir)
    train_texts: List[str] = []
    for split, count in spec.splits.items():
        records = []
        for utterance in tqdm(synth_split(spec, split, count, seed, inventory), desc=f"Synthesizing {split}", unit="utt"):
            relative = Path("features") / f"{utterance.utterance_id}.feat"
            write_feature_file(out_dir / relative, utterance.features)
            records.append(UtteranceRecord(
                utterance_id=utterance.utterance_id,
                recording_id=utterance.utterance_id.rsplit("-", 1)[0],
                start=0.0,
                end=max(utterance.duration, 0.001),
                raw_transcript=utterance.text,
                transcript=utterance.text,
                split=split,
                feature_path=relative.as_posix(),
            ))
        manifest = Manifest(dataset=spec.dataset, split=split, records=records)
        corpus.manifests[split] = out_dir / f"{split}.jsonl"
        manifest.save(corpus.manifests[split])
        corpus.references[split] = out_dir / f"{split}.ref.txt"
        write_transcripts(corpus.references[split], ((r.utterance_id, r.transcript) for r in records))
        if split == "train":
            train_texts = [r.transcript for r in records]

    rng = make_rng(seed, "synth", spec.preset, "lm")
    lines = train_texts + [sample_sentence(spec, rng) for _ in range(spec.lm_lines)]
    corpus.lm_text = out_dir / "lm_text.txt"
    corpus.lm_text.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    logging.info(f"Synthetic {spec.preset} corpus written to {out_dir} ({sum(spec.splits.values())} utterances)")
    return corpus
