"""Tile score storage and the external scorer gateway.

Scores are pairs (target, rest) per (tile_id, classifier_id), each in
[0, 1] with target + rest = 1 within 1e-4. They come from one of two
sources: an in-process synthetic scorer (deterministic, hash-driven) or an
external process speaking a line protocol over stdin/stdout:

    child -> "READY"
    parent -> {"tile_id": ..., "path": ...}     one JSON object per line
    child -> {"tile_id": ..., "target": ..., "rest": ...}
             or {"tile_id": ..., "error": ...}  for per-tile failures
    parent closes stdin
    child -> "DONE", then exits 0

Per-tile error responses are collected and reported together after the
stream ends; wire-level violations (bad handshake, malformed JSON,
unknown or duplicated tile ids, invalid score values, missing DONE,
nonzero exit) abort immediately.
"""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Collection, Iterable, Mapping, Sequence

from .errors import (
    IncompleteScoresError,
    ProtocolError,
    StageInputError,
    ValidationError,
)

log = logging.getLogger("histotype.scoring")

SCORE_HEADER = "tile_id,classifier_id,target,rest"
PAIR_SUM_TOLERANCE = 1e-4
READY_SENTINEL = "READY"
DONE_SENTINEL = "DONE"


@dataclass(frozen=True)
class ScoreRecord:
    tile_id: str
    classifier_id: str
    target: float
    rest: float


def _check_pair(tile_id, classifier_id, target, rest, strict_pairs):
    if not (0.0 <= target <= 1.0 and 0.0 <= rest <= 1.0):
        raise ValidationError(
            f"score for ({tile_id}, {classifier_id}) outside [0, 1]")
    drift = abs(target + rest - 1.0)
    if drift > PAIR_SUM_TOLERANCE:
        message = (f"score pair for ({tile_id}, {classifier_id}) sums to "
                   f"{target + rest:.6f}, off by {drift:.2e}")
        if strict_pairs:
            raise ValidationError(message)
        log.warning("%s", message)


class ScoreTable:
    """Scores keyed by (tile_id, classifier_id); duplicates are rejected."""

    def __init__(self, strict_pairs: bool = True):
        self.strict_pairs = strict_pairs
        self._records: dict[tuple[str, str], tuple[float, float]] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._records

    def add(self, tile_id: str, classifier_id: str,
            target: float, rest: float) -> None:
        target, rest = float(target), float(rest)
        _check_pair(tile_id, classifier_id, target, rest, self.strict_pairs)
        key = (tile_id, classifier_id)
        if key in self._records:
            raise ValidationError(
                f"duplicate score for ({tile_id}, {classifier_id})")
        self._records[key] = (target, rest)

    def add_record(self, record: ScoreRecord) -> None:
        self.add(record.tile_id, record.classifier_id,
                 record.target, record.rest)

    def target_score(self, tile_id: str, classifier_id: str) -> float:
        try:
            return self._records[(tile_id, classifier_id)][0]
        except KeyError:
            raise StageInputError(
                f"no score for tile {tile_id!r} under classifier "
                f"{classifier_id!r}") from None

    def pair(self, tile_id: str, classifier_id: str) -> tuple[float, float]:
        self.target_score(tile_id, classifier_id)  # presence check
        return self._records[(tile_id, classifier_id)]

    def tile_ids(self, classifier_id: str) -> list[str]:
        return sorted(t for t, c in self._records if c == classifier_id)

    def classifier_ids(self) -> list[str]:
        return sorted({c for _, c in self._records})

    def records(self) -> list[ScoreRecord]:
        return [ScoreRecord(t, c, *pair)
                for (t, c), pair in sorted(self._records.items())]

    def merge(self, other: "ScoreTable") -> None:
        for record in other.records():
            self.add_record(record)


def save_scores(table: ScoreTable, path: str | Path) -> None:
    lines = [SCORE_HEADER]
    for r in table.records():
        lines.append(f"{r.tile_id},{r.classifier_id},"
                     f"{r.target:.17g},{r.rest:.17g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_scores(path: str | Path, strict_pairs: bool = True) -> ScoreTable:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != SCORE_HEADER:
        raise ValidationError(f"{path}: expected header {SCORE_HEADER!r}")
    table = ScoreTable(strict_pairs=strict_pairs)
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValidationError(f"{path}:{number}: expected 4 fields")
        tile_id, classifier_id, target_text, rest_text = parts
        try:
            target, rest = float(target_text), float(rest_text)
        except ValueError:
            raise ValidationError(
                f"{path}:{number}: non-numeric score") from None
        try:
            table.add(tile_id, classifier_id, target, rest)
        except ValidationError as exc:
            raise ValidationError(f"{path}:{number}: {exc}") from None
    return table


# --- scorers ----------------------------------------------------------------

def hash_unit_interval(seed: int, classifier_id: str, tile_id: str) -> float:
    """Deterministic u in [0, 1): first 8 bytes of a SHA-256 digest."""
    digest = hashlib.sha256(
        f"{seed}|{classifier_id}|{tile_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


class SyntheticScorer:
    """Hash-driven stand-in for a real tile scorer.

    target = signal * indicator + (1 - signal) * u, where indicator is 1
    for tiles listed as positives and u is a per-tile hash draw. signal=1
    gives a perfect scorer, signal=0 pure noise; tile paths are ignored.
    """

    def __init__(self, classifier_id: str, positives: Collection[str],
                 signal: float = 1.0, seed: int = 0):
        if not 0.0 <= signal <= 1.0:
            raise ValidationError("signal must be in [0, 1]")
        self.classifier_id = classifier_id
        self.positives = frozenset(positives)
        self.signal = signal
        self.seed = seed

    def score_batch(
        self, requests: Sequence[tuple[str, str | Path]]
    ) -> list[ScoreRecord]:
        out = []
        for tile_id, _path in requests:
            indicator = 1.0 if tile_id in self.positives else 0.0
            u = hash_unit_interval(self.seed, self.classifier_id, tile_id)
            target = self.signal * indicator + (1.0 - self.signal) * u
            out.append(ScoreRecord(tile_id, self.classifier_id,
                                   target, 1.0 - target))
        return out


class SubprocessScorer:
    """Gateway to an external scorer process speaking the line protocol.

    One child is spawned per score_batch call. Requests are streamed from
    a writer thread so neither side can deadlock on a full pipe. The
    gateway trusts the child to terminate once its stdin closes.
    """

    def __init__(self, command: Sequence[str], classifier_id: str,
                 strict_pairs: bool = True):
        if not command:
            raise ValidationError("scorer command must not be empty")
        self.command = list(command)
        self.classifier_id = classifier_id
        self.strict_pairs = strict_pairs

    def score_batch(
        self, requests: Sequence[tuple[str, str | Path]]
    ) -> list[ScoreRecord]:
        requested = [tile_id for tile_id, _ in requests]
        if len(set(requested)) != len(requested):
            raise ValidationError("duplicate tile ids in scorer request")
        try:
            child = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
        except OSError as exc:
            raise ProtocolError(
                f"cannot launch scorer {self.command[0]!r}: {exc}") from None
        try:
            return self._drive(child, requests, requested)
        finally:
            if child.poll() is None:
                child.kill()
                child.wait()

    def _drive(self, child, requests, requested):
        first = child.stdout.readline()
        if first.strip() != READY_SENTINEL:
            raise ProtocolError(
                f"scorer did not announce {READY_SENTINEL!r}; "
                f"got {first.strip()!r}")

        def feed():
            try:
                for tile_id, path in requests:
                    child.stdin.write(json.dumps(
                        {"tile_id": tile_id, "path": str(path)}) + "\n")
                child.stdin.close()
            except BrokenPipeError:
                pass  # child died early; the read loop reports it

        writer = threading.Thread(target=feed, daemon=True)
        writer.start()

        pending = set(requested)
        scored: dict[str, ScoreRecord] = {}
        failed: dict[str, str] = {}
        saw_done = False
        for line in child.stdout:
            if line.strip() == DONE_SENTINEL:
                saw_done = True
                break
            tile_id, record, error = self._parse_response(line)
            if tile_id not in pending:
                kind = "duplicate" if tile_id in scored or tile_id in failed \
                    else "unknown"
                raise ProtocolError(
                    f"scorer answered {kind} tile id {tile_id!r}")
            pending.discard(tile_id)
            if error is not None:
                failed[tile_id] = error
                log.warning("scorer failed on tile %s: %s", tile_id, error)
            else:
                scored[tile_id] = record
        writer.join()
        code = child.wait()
        if not saw_done:
            raise ProtocolError("scorer stream ended without DONE")
        if code != 0:
            raise ProtocolError(f"scorer exited with status {code}")
        unscored = sorted(set(failed) | pending)
        if unscored:
            raise IncompleteScoresError(
                f"scorer left {len(unscored)} of {len(requested)} tiles "
                "unscored", unscored)
        return [scored[tile_id] for tile_id in requested]

    def _parse_response(self, line):
        try:
            payload = json.loads(line)
        except json.JSONDecodeError:
            raise ProtocolError(
                f"scorer sent malformed JSON: {line.strip()!r}") from None
        if not isinstance(payload, dict) or "tile_id" not in payload:
            raise ProtocolError(f"scorer response lacks tile_id: {line.strip()!r}")
        tile_id = str(payload["tile_id"])
        if "error" in payload:
            return tile_id, None, str(payload["error"])
        if "target" not in payload or "rest" not in payload:
            raise ProtocolError(
                f"scorer response for {tile_id!r} lacks target/rest")
        try:
            target = float(payload["target"])
            rest = float(payload["rest"])
        except (TypeError, ValueError):
            raise ProtocolError(
                f"scorer sent non-numeric scores for {tile_id!r}") from None
        try:
            _check_pair(tile_id, self.classifier_id, target, rest,
                        self.strict_pairs)
        except ValidationError as exc:
            raise ProtocolError(str(exc)) from None
        return tile_id, ScoreRecord(tile_id, self.classifier_id,
                                    target, rest), None


def score_tiles(scorer, requests: Sequence[tuple[str, str | Path]],
                table: ScoreTable | None = None) -> ScoreTable:
    """Run a scorer over (tile_id, path) requests and collect the results."""
    if table is None:
        table = ScoreTable()
    for record in scorer.score_batch(requests):
        table.add_record(record)
    return table


def filter_tumor_tiles(table: ScoreTable, tile_ids: Iterable[str],
                       tumor_threshold: float = 0.5,
                       classifier_id: str = "tumor") -> list[str]:
    """Tiles whose tumor target score meets the cutoff (inclusive)."""
    kept = []
    for tile_id in tile_ids:
        if table.target_score(tile_id, classifier_id) >= tumor_threshold:
            kept.append(tile_id)
    return kept
