"""
Utterance manifests: segmentation of annotated recordings, faulty-annotation filtering, dataset
statistics, low-resource subsets and train/test overlap removal.

A manifest file is line-delimited JSON. The first line is a header object
`{"dataset": ..., "split": ..., "format_version": ...}`; every following line is one utterance record
with the fields of `UtteranceRecord`. Times are seconds rounded to milliseconds.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from lyric_transfer.lib.config import FORMAT_VERSION, MIN_MULTIWORD_DURATION
from lyric_transfer.lib.encoder import load_features
from lyric_transfer.lib.errors import TargetTooLargeError
from lyric_transfer.lib.numerics import make_rng
from lyric_transfer.lib.text_utils import TokenInventory, normalize_line


def _ms(value: float) -> float:
    return round(float(value), 3)


class UtteranceRecord(BaseModel):
    """
    One annotated, time-bounded segment of a recording.

    Attributes:
        utterance_id (str): Unique id within a manifest.
        recording_id (str): Source recording (song) id.
        start (float): Start time in seconds.
        end (float): End time in seconds, strictly after `start`.
        raw_transcript (str): Annotation text as given.
        transcript (str): Normalized transcript.
        split (str): Split tag (train, dev, test...).
        feature_path (Optional[str]): Feature file, relative to the manifest directory or absolute.
    """
    utterance_id: str = Field(..., min_length=1)
    recording_id: str = Field(..., min_length=1)
    start: float = Field(..., ge=0.0)
    end: float
    raw_transcript: str = ""
    transcript: str
    split: str = "train"
    feature_path: Optional[str] = None

    @field_validator("start", "end")
    @classmethod
    def _millisecond_precision(cls, value: float) -> float:
        return _ms(value)

    @model_validator(mode="after")
    def _check(self) -> "UtteranceRecord":
        if self.end <= self.start:
            raise ValueError(f"{self.utterance_id}: end {self.end} must be after start {self.start}")
        # shape only: which characters are allowed depends on the inventory, checked by segment and encode
        text = self.transcript
        if not text or text != " ".join(text.split()) or text != text.upper():
            raise ValueError(f"{self.utterance_id}: transcript {self.transcript!r} is not normalized")
        return self

    @property
    def duration(self) -> float:
        return _ms(self.end - self.start)

    @property
    def word_count(self) -> int:
        return len(self.transcript.split())


class Manifest(BaseModel):
    """An ordered list of utterance records of one dataset split."""
    dataset: str = "unnamed"
    split: str = "train"
    records: List[UtteranceRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_ids(self) -> "Manifest":
        seen = set()
        for record in self.records:
            if record.utterance_id in seen:
                raise ValueError(f"duplicate utterance id {record.utterance_id!r}")
            seen.add(record.utterance_id)
        return self

    def __len__(self) -> int:
        return len(self.records)

    @property
    def total_duration(self) -> float:
        return sum(r.duration for r in self.records)

    @property
    def recording_ids(self) -> set:
        return {r.recording_id for r in self.records}

    def with_records(self, records: Sequence[UtteranceRecord]) -> "Manifest":
        return Manifest(dataset=self.dataset, split=self.split, records=list(records))

    def save(self, path: Path) -> None:
        """Writes the header line and one JSON record per line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"dataset": self.dataset, "split": self.split, "format_version": FORMAT_VERSION}
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for record in self.records:
                f.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")
        logging.debug(f"Manifest with {len(self.records)} records written to {path}")

    @classmethod
    def load(cls, path: Path, check_features: bool = False) -> "Manifest":
        """
        Reads a manifest file.

        Args:
            path (Path): The manifest.
            check_features (bool): Fail when a referenced feature file does not exist.

        Raises:
            FileNotFoundError: If `check_features` is set and a feature file is missing.
        """
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            lines = [line for line in f if line.strip()]
        if not lines:
            raise ValueError(f"{path} is empty; a manifest starts with a header line")
        header = json.loads(lines[0])
        records = [UtteranceRecord.model_validate_json(line) for line in lines[1:]]
        manifest = cls(dataset=header.get("dataset", "unnamed"), split=header.get("split", "train"), records=records)
        if check_features:
            for record in manifest.records:
                if record.feature_path is None or not resolve_feature_path(path, record).exists():
                    raise FileNotFoundError(f"{record.utterance_id}: feature file {record.feature_path!r} not found")
        logging.debug(f"Manifest {path} loaded: {len(records)} records")
        return manifest


def resolve_feature_path(manifest_path: Path, record: UtteranceRecord) -> Path:
    """Feature path of a record, relative paths being taken from the manifest directory."""
    if record.feature_path is None:
        raise FileNotFoundError(f"{record.utterance_id} has no feature file")
    feature = Path(record.feature_path)
    return feature if feature.is_absolute() else Path(manifest_path).parent / feature


def load_record_features(manifest_path: Path, manifest: Manifest) -> List[np.ndarray]:
    """Feature matrices of every record, in manifest order."""
    return [load_features(resolve_feature_path(manifest_path, r)) for r in manifest.records]


# Segmentation

class Annotation(BaseModel):
    """A timed lyric line of one recording."""
    start: float
    end: float
    text: str


class RemovalReason(str, Enum):
    NONPOSITIVE_DURATION = "nonpositive_duration"
    TOO_SHORT_MULTIWORD = "too_short_multiword"
    EMPTY_TRANSCRIPT = "empty_transcript"
    OUTSIDE_RECORDING = "outside_recording"


class SegmentRules(BaseModel):
    """
    Faulty-annotation rules. Nonpositive durations and empty transcripts are always removed because
    a record cannot hold them; the other rules can be switched off.
    """
    min_multiword_duration: float = Field(MIN_MULTIWORD_DURATION, ge=0.0, description="Lines of two or more words shorter than this are removed.")
    check_multiword_duration: bool = True
    check_recording_bounds: bool = True


@dataclass
class SegmentResult:
    """
    Outcome of segmenting one recording.

    Attributes:
        records (List[UtteranceRecord]): Kept utterances.
        removed (List[Tuple[int, Annotation, RemovalReason]]): Removed annotations with their index.
        overlaps (List[Tuple[int, int]]): Index pairs of kept annotations whose time spans overlap.
    """
    records: List[UtteranceRecord] = field(default_factory=list)
    removed: List[Tuple[int, Annotation, RemovalReason]] = field(default_factory=list)
    overlaps: List[Tuple[int, int]] = field(default_factory=list)


def _removal_reason(
    annotation: Annotation,
    text: Optional[str],
    rules: SegmentRules,
    recording_duration: Optional[float],
) -> Optional[RemovalReason]:
    duration = _ms(_ms(annotation.end) - _ms(annotation.start))
    if duration <= 0:
        return RemovalReason.NONPOSITIVE_DURATION
    if rules.check_recording_bounds and (
        annotation.start < 0 or (recording_duration is not None and annotation.end > recording_duration)
    ):
        return RemovalReason.OUTSIDE_RECORDING
    if text is None:
        return RemovalReason.EMPTY_TRANSCRIPT
    if rules.check_multiword_duration and len(text.split()) >= 2 and duration < rules.min_multiword_duration:
        return RemovalReason.TOO_SHORT_MULTIWORD
    return None


def segment(
    recording_id: str,
    annotations: Sequence[Annotation],
    rules: Optional[SegmentRules] = None,
    split: str = "train",
    recording_duration: Optional[float] = None,
    inventory: Optional[TokenInventory] = None,
    feature_template: Optional[str] = None,
) -> SegmentResult:
    """
    Turns the annotated lines of one recording into utterance records.

    Every annotation ends up either as a record or in the removed list. Record ids are
    `<recording_id>-<index:05d>` with the index of the annotation, so they survive removals.

    Args:
        recording_id (str): Source recording id.
        annotations (Sequence[Annotation]): Timed lines, in file order.
        rules (Optional[SegmentRules]): Faulty-annotation rules; defaults apply when None.
        split (str): Split tag of the records.
        recording_duration (Optional[float]): Length of the recording, for the bounds rule.
        inventory (Optional[TokenInventory]): Inventory used for normalization.
        feature_template (Optional[str]): Format string with `{utterance_id}` giving the feature path.

    Returns:
        SegmentResult: Kept records, removals with reasons and overlap diagnostics.
    """
    rules = rules or SegmentRules()
    result = SegmentResult()
    kept: List[Tuple[int, Annotation]] = []
    for index, annotation in enumerate(annotations):
        text = normalize_line(annotation.text, inventory)
        reason = _removal_reason(annotation, text, rules, recording_duration)
        if reason is not None:
            logging.debug(f"{recording_id}: annotation {index} removed ({reason.value})")
            result.removed.append((index, annotation, reason))
            continue
        utterance_id = f"{recording_id}-{index:05d}"
        result.records.append(UtteranceRecord(
            utterance_id=utterance_id,
            recording_id=recording_id,
            start=annotation.start,
            end=annotation.end,
            raw_transcript=annotation.text,
            transcript=text,
            split=split,
            feature_path=feature_template.format(utterance_id=utterance_id) if feature_template else None,
        ))
        kept.append((index, annotation))

    ordered = sorted(kept, key=lambda item: (item[1].start, item[0]))
    for (i, a), (j, b) in zip(ordered, ordered[1:]):
        if b.start < a.end:
            result.overlaps.append((min(i, j), max(i, j)))
    if result.overlaps:
        logging.warning(f"{recording_id}: {len(result.overlaps)} overlapping annotation pair(s)")
    return result


def read_annotations(path: Path) -> List[Annotation]:
    """Reads `start<TAB>end<TAB>text` lines; blank lines are skipped."""
    annotations = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t", 2)
            if len(parts) != 3:
                raise ValueError(f"{path}:{number}: expected 'start<TAB>end<TAB>text'")
            annotations.append(Annotation(start=float(parts[0]), end=float(parts[1]), text=parts[2]))
    return annotations


def segment_recordings(
    annotations: Mapping[str, Sequence[Annotation]],
    rules: Optional[SegmentRules] = None,
    split: str = "train",
    durations: Optional[Mapping[str, float]] = None,
    workers: int = 1,
    feature_template: Optional[str] = None,
    inventory: Optional[TokenInventory] = None,
) -> Dict[str, SegmentResult]:
    """Segments several recordings in parallel; results keep the input key order."""
    durations = durations or {}
    keys = list(annotations)

    def run(key: str) -> SegmentResult:
        return segment(key, annotations[key], rules, split, durations.get(key), inventory, feature_template)

    if workers <= 1:
        results = [run(k) for k in keys]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, keys))
    return dict(zip(keys, results))


# Statistics

@dataclass(frozen=True)
class DatasetStats:
    """Utterance count, total and mean duration in seconds (mean is None for an empty manifest)."""
    utterances: int
    total_duration: float
    mean_duration: Optional[float]


def stats(manifest: Manifest) -> DatasetStats:
    """Counts and durations of a manifest; gaps between utterances are not counted."""
    durations = sorted(r.duration for r in manifest.records)
    total = float(np.sum(durations)) if durations else 0.0
    mean = total / len(durations) if durations else None
    return DatasetStats(len(durations), total, mean)


def stats_table(rows: Sequence[Tuple[str, DatasetStats]]) -> str:
    """Renders dataset statistics with one row per dataset split."""
    header = f"{'Dataset':<24} {'# Utt.':>10} {'Total Dur. (h)':>15} {'Mean Dur. (s)':>14}"
    lines = [header, "-" * len(header)]
    for name, s in rows:
        mean = f"{s.mean_duration:.2f}" if s.mean_duration is not None else "-"
        lines.append(f"{name:<24} {s.utterances:>10,} {s.total_duration / 3600:>15.2f} {mean:>14}")
    return "\n".join(lines)


# Subsets

def subset_by_duration(manifest: Manifest, target: float, seed: int) -> Manifest:
    """
    Draws a random subset whose total duration reaches `target` seconds.

    Records are taken in a seeded random order until the running total reaches the target, so the
    result exceeds the target by less than one utterance. Kept records stay in manifest order.

    Raises:
        TargetTooLargeError: If `target` exceeds the manifest's total duration.
    """
    total = manifest.total_duration
    if target > total + 1e-9:
        raise TargetTooLargeError(f"target {target:.3f} s exceeds the manifest total {total:.3f} s", key="target")
    order = make_rng(seed, "subset", manifest.dataset).permutation(len(manifest.records))
    chosen, running = [], 0.0
    for index in order:
        if running >= target - 1e-9:
            break
        chosen.append(int(index))
        running += manifest.records[index].duration
    subset = manifest.with_records([manifest.records[i] for i in sorted(chosen)])
    logging.info(f"Subset of {len(subset)} utterances, {running:.2f} s for a target of {target:.2f} s")
    return subset


def overlap_filter(train: Manifest, tests: Iterable[Manifest]) -> Tuple[Manifest, int]:
    """
    Removes every training record whose recording also appears in a test manifest.

    Returns:
        Tuple[Manifest, int]: The cleaned manifest and the number of removed records.
    """
    test_recordings = set()
    for test in tests:
        test_recordings |= test.recording_ids
    kept = [r for r in train.records if r.recording_id not in test_recordings]
    removed = len(train.records) - len(kept)
    if removed:
        logging.info(f"{removed} training utterance(s) removed: their recordings appear in a test set")
    return train.with_records(kept), removed
