import json

import pytest
from pydantic import ValidationError

from lyric_transfer.lib.data_utils import (
    Annotation,
    Manifest,
    RemovalReason,
    SegmentRules,
    UtteranceRecord,
    overlap_filter,
    read_annotations,
    segment,
    segment_recordings,
    stats,
    stats_table,
    subset_by_duration,
)
from lyric_transfer.lib.errors import TargetTooLargeError


def record(uid, recording="song", start=0.0, end=1.0, text="LA LA"):
    return UtteranceRecord(utterance_id=uid, recording_id=recording, start=start, end=end, transcript=text)


@pytest.fixture
def annotations():
    return [
        Annotation(start=0.0, end=1.0, text="Hello world"),
        Annotation(start=2.0, end=2.0, text="x"),
        Annotation(start=3.0, end=3.05, text="two words"),
        Annotation(start=4.0, end=4.05, text="oh"),
        Annotation(start=5.0, end=6.0, text="**guitar solo**"),
        Annotation(start=9.0, end=11.0, text="late"),
        Annotation(start=0.5, end=1.5, text="overlap"),
    ]


class TestRecords:
    def test_times_rounded_to_milliseconds(self):
        r = record("a", start=1.23456, end=2.0004)
        assert (r.start, r.end) == (1.235, 2.0)
        assert r.duration == 0.765
        assert r.word_count == 2

    def test_invalid_records(self):
        with pytest.raises(ValidationError):
            record("a", start=2.0, end=2.0)
        with pytest.raises(ValidationError):
            record("a", text="la la")

    def test_duplicate_ids(self):
        with pytest.raises(ValidationError):
            Manifest(records=[record("a"), record("a")])

    def test_save_and_load(self, tmp_path):
        manifest = Manifest(dataset="toy", split="dev", records=[record("a"), record("b", start=1.0, end=2.5)])
        path = tmp_path / "dev.jsonl"
        manifest.save(path)
        header = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
        assert header == {"dataset": "toy", "format_version": 1, "split": "dev"}
        assert Manifest.load(path) == manifest

    def test_missing_feature_files(self, tmp_path):
        path = tmp_path / "m.jsonl"
        Manifest(records=[record("a").model_copy(update={"feature_path": "feats/a.feat"})]).save(path)
        with pytest.raises(FileNotFoundError):
            Manifest.load(path, check_features=True)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ValueError):
            Manifest.load(path)


class TestSegment:
    def test_every_annotation_is_kept_or_removed(self, annotations):
        result = segment("song", annotations, recording_duration=10.0)
        assert [r.utterance_id for r in result.records] == ["song-00000", "song-00003", "song-00006"]
        assert result.records[0].transcript == "HELLO WORLD"
        assert result.records[0].raw_transcript == "Hello world"
        reasons = {index: reason for index, _, reason in result.removed}
        assert reasons == {
            1: RemovalReason.NONPOSITIVE_DURATION,
            2: RemovalReason.TOO_SHORT_MULTIWORD,
            4: RemovalReason.EMPTY_TRANSCRIPT,
            5: RemovalReason.OUTSIDE_RECORDING,
        }
        assert len(result.records) + len(result.removed) == len(annotations)

    def test_overlaps_are_reported_not_removed(self, annotations):
        assert segment("song", annotations, recording_duration=10.0).overlaps == [(0, 6)]

    def test_optional_rules_can_be_switched_off(self, annotations):
        rules = SegmentRules(check_multiword_duration=False, check_recording_bounds=False)
        result = segment("song", annotations, rules, recording_duration=10.0)
        reasons = {index: reason for index, _, reason in result.removed}
        assert reasons == {1: RemovalReason.NONPOSITIVE_DURATION, 4: RemovalReason.EMPTY_TRANSCRIPT}

    def test_feature_template(self, annotations):
        result = segment("song", annotations[:1], feature_template="feats/{utterance_id}.feat")
        assert result.records[0].feature_path == "feats/song-00000.feat"

    def test_parallel_recordings_keep_order(self, annotations):
        inputs = {"b": annotations, "a": annotations[:3]}
        serial = segment_recordings(inputs, workers=1, durations={"b": 10.0})
        parallel = segment_recordings(inputs, workers=3, durations={"b": 10.0})
        assert list(parallel) == ["b", "a"]
        assert {k: v.records for k, v in serial.items()} == {k: v.records for k, v in parallel.items()}

    def test_multiword_line_at_the_duration_floor_is_kept(self):
        result = segment("rec", [Annotation(start=0.2, end=0.3, text="two words")])
        assert [r.transcript for r in result.records] == ["TWO WORDS"]
        assert result.records[0].duration == 0.1
        assert result.removed == []

    def test_custom_inventory_survives_the_manifest(self, nordic_inventory, tmp_path):
        line = [Annotation(start=0.0, end=1.0, text="SØREN sings")]
        assert segment("rec", line).records[0].transcript == "SREN SINGS"
        results = segment_recordings({"rec": line}, inventory=nordic_inventory)
        records = results["rec"].records
        assert [r.transcript for r in records] == ["SØREN SINGS"]
        path = tmp_path / "m.jsonl"
        Manifest(dataset="toy", records=records).save(path)
        assert Manifest.load(path).records == records

    def test_read_annotations(self, tmp_path):
        path = tmp_path / "song.tsv"
        path.write_text("0.0\t1.5\tLa la\tla\n\n2\t3\tOh\n", encoding="utf-8")
        lines = read_annotations(path)
        assert [(a.start, a.end, a.text) for a in lines] == [(0.0, 1.5, "La la\tla"), (2.0, 3.0, "Oh")]
        path.write_text("0.0 1.5 missing tabs\n", encoding="utf-8")
        with pytest.raises(ValueError):
            read_annotations(path)


class TestStatsAndSubsets:
    def test_stats(self):
        manifest = Manifest(dataset="toy", records=[record("a", end=2.0), record("b", start=5.0, end=6.0)])
        s = stats(manifest)
        assert (s.utterances, s.total_duration, s.mean_duration) == (2, 3.0, 1.5)
        assert stats(Manifest()).mean_duration is None
        table = stats_table([("toy train", s)])
        assert "toy train" in table
        assert "1.50" in table

    def test_subset_reaches_target_by_less_than_one_utterance(self):
        records = [record(f"u{i}", recording=f"s{i % 4}", start=0.0, end=1.0 + (i % 5)) for i in range(30)]
        manifest = Manifest(dataset="toy", records=records)
        subset = subset_by_duration(manifest, 20.0, seed=7)
        total = subset.total_duration
        assert total >= 20.0
        assert total - max(r.duration for r in subset.records) < 20.0
        assert subset == subset_by_duration(manifest, 20.0, seed=7)
        ids = [r.utterance_id for r in subset.records]
        assert ids == [r.utterance_id for r in records if r.utterance_id in set(ids)]

    def test_subset_target_too_large(self):
        with pytest.raises(TargetTooLargeError):
            subset_by_duration(Manifest(records=[record("a")]), 5.0, seed=0)

    def test_overlap_filter(self):
        train = Manifest(records=[record("a", "s1"), record("b", "s2"), record("c", "s3")])
        test = Manifest(split="test", records=[record("t", "s2")])
        cleaned, removed = overlap_filter(train, [test])
        assert removed == 1
        assert [r.utterance_id for r in cleaned.records] == ["a", "c"]
