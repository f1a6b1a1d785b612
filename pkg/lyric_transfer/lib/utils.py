"""
File helpers shared by the subcommands: hashing, JSON and CSV files, transcript files and the
run-metadata record written next to every output.
"""
import csv
import hashlib
import json
import logging
import os
import platform
from datetime import datetime, timezone
from importlib import metadata as importlib_metadata
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from lyric_transfer.lib.config import RUN_METADATA_FILE

TRACKED_PACKAGES = ("numpy", "pydantic", "tqdm", "colorama", "python-dotenv")


def compute_sha256(file_path: Path) -> str:
    """
    Computes the SHA-256 hash of a file.

    Args:
        file_path (Path): The path to the file to compute the hash for.

    Returns:
        str: The SHA-256 hash of the file as a hexadecimal string, or "" if it cannot be read.
    """
    sha256_hash = hashlib.sha256()
    try:
        with open(file_path, "rb") as f:
            for byte_block in iter(lambda: f.read(4096), b""):
                sha256_hash.update(byte_block)
        return sha256_hash.hexdigest()
    except OSError as e:
        logging.error(f"Error computing SHA-256 for {file_path}: {e}")
        return ""


def load_json(path: Path) -> dict:
    """
    Loads a JSON object, returning an empty dict when the file does not exist.

    Args:
        path (Path): The JSON file.

    Returns:
        dict: The parsed object.
    """
    path = Path(path)
    if not path.exists():
        logging.debug(f"No file found at '{path}'. Starting from an empty object.")
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_json(path: Path, data: Mapping) -> None:
    """Writes `data` as indented JSON with sorted keys, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    logging.debug(f"JSON written to {path}")


def write_csv(path: Path, rows: Sequence[Mapping], fieldnames: Optional[Sequence[str]] = None) -> None:
    """Writes dict rows as CSV; the header follows `fieldnames` or the keys of the first row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logging.debug(f"{len(rows)} CSV rows written to {path}")


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def read_transcripts(path: Path) -> Dict[str, str]:
    """
    Reads a transcript file of `utterance-id<TAB>text` lines, keeping file order.

    Raises:
        ValueError: On a line without a tab or a repeated utterance id.
    """
    transcripts: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{number}: expected 'utterance-id<TAB>text'")
            utt_id, text = line.split("\t", 1)
            if utt_id in transcripts:
                raise ValueError(f"{path}:{number}: duplicate utterance id {utt_id!r}")
            transcripts[utt_id] = text
    return transcripts


def write_transcripts(path: Path, items: Iterable[Tuple[str, str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, text in items:
            f.write(f"{utt_id}\t{text}\n")


def package_versions() -> Dict[str, str]:
    """Installed versions of the runtime dependencies, "missing" for absent ones."""
    versions = {"python": platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = importlib_metadata.version(name)
        except importlib_metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


def write_run_metadata(
    output_dir: Path,
    command: str,
    config: Mapping,
    seed: int,
    inputs: Sequence[Path] = (),
) -> Path:
    """
    Records what is needed to reproduce a run: command, config echo, seed, versions and the SHA-256
    of every input file.

    Returns:
        Path: The metadata file written inside `output_dir`.
    """
    output_dir = Path(output_dir)
    hashes = {}
    for item in inputs:
        item = Path(item)
        if item.is_file():
            hashes[os.fspath(item)] = compute_sha256(item)
    record = {
        "command": command,
        "config": dict(config),
        "seed": seed,
        "versions": package_versions(),
        "inputs": hashes,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = output_dir / RUN_METADATA_FILE
    save_json(path, record)
    logging.info(f"Run metadata written to {path}")
    return path
