"""Track CSV input/output.

Two schemas are used:

* raw records ``track_id,timestamp,longitude,latitude,response`` (degrees),
  as supplied by tag data; ``timestamp`` is either a number (model time units)
  or an ISO-8601 string (converted to days since 1970-01-01 UTC);
* projected tracks ``track_id,t,x,y,response`` in model units.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .movement import Track
from .projection import LatitudeRangeError, UTMScaled

log = logging.getLogger(__name__)

RAW_COLUMNS = ("track_id", "timestamp", "longitude", "latitude", "response")
TRACK_COLUMNS = ("track_id", "t", "x", "y", "response")
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class RawRecord:
    track_id: str
    timestamp: float
    longitude: float
    latitude: float
    response: float
    line: int = 0


def parse_timestamp(text: str) -> float:
    """Number as-is, or ISO-8601 date/time as days since the Unix epoch (UTC)."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ValueError(f"unparseable timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return (dt - _EPOCH).total_seconds() / 86400.0


def _check_header(fields, expected, path):
    if fields is None:
        raise DataError(f"{path}: empty file")
    got = [f.strip() for f in fields]
    missing = [c for c in expected if c not in got]
    if missing:
        raise DataError(f"{path}: line 1: missing column(s) {missing}; expected {list(expected)}")


def read_raw_csv(path) -> list[RawRecord]:
    """Read raw records; every problem is reported with its line number."""
    out, errors = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, RAW_COLUMNS, path)
        for row in reader:
            line = reader.line_num
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            try:
                tid = row["track_id"]
                if not tid:
                    raise ValueError("empty track_id")
                ts = parse_timestamp(row["timestamp"])
                vals = [float(row[c]) for c in ("longitude", "latitude", "response")]
                if not all(math.isfinite(v) for v in [ts, *vals]):
                    raise ValueError("non-finite value")
            except (ValueError, KeyError) as exc:
                errors.append(f"line {line}: {exc}")
                continue
            out.append(RawRecord(tid, ts, *vals, line=line))
    if errors:
        shown = "; ".join(errors[:20])
        more = "" if len(errors) <= 20 else f" (+{len(errors) - 20} more)"
        raise DataError(f"{path}: {len(errors)} malformed record(s): {shown}{more}")
    if not out:
        raise DataError(f"{path}: no records")
    return out


def write_raw_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_COLUMNS)
        for r in records:
            w.writerow([r.track_id, repr(float(r.timestamp)), repr(float(r.longitude)),
                        repr(float(r.latitude)), repr(float(r.response))])


def group_records(records) -> dict[str, list[RawRecord]]:
    """Split records by track, requiring each track's rows to be contiguous.

    Within a track, rows are sorted by time and duplicate timestamps are
    dropped (first kept) with a warning.
    """
    groups: dict[str, list[RawRecord]] = {}
    last = None
    for r in records:
        if r.track_id != last and r.track_id in groups:
            raise DataError(
                f"line {r.line}: records of track {r.track_id!r} are not contiguous "
                f"(track resumes after other tracks)"
            )
        groups.setdefault(r.track_id, []).append(r)
        last = r.track_id
    for tid, rows in groups.items():
        rows.sort(key=lambda r: (r.timestamp, r.line))
        kept = [rows[0]]
        for r in rows[1:]:
            if r.timestamp == kept[-1].timestamp:
                log.warning("track %s: duplicate timestamp %g at line %d dropped", tid, r.timestamp, r.line)
                continue
            kept.append(r)
        groups[tid] = kept
    return groups


def records_to_tracks(records, projection: UTMScaled, time_scale: float = 1.0) -> list[Track]:
    """Project raw records into model-unit tracks (one per ``track_id``)."""
    tracks = []
    for tid, rows in group_records(records).items():
        lon = np.array([r.longitude for r in rows])
        lat = np.array([r.latitude for r in rows])
        try:
            e, n = projection.forward(lon, lat)
        except LatitudeRangeError as exc:
            lines = [rows[i].line for i in exc.rows]
            raise DataError(f"track {tid!r}: latitude outside the UTM band at line(s) {lines}") from exc
        t = np.array([r.timestamp for r in rows]) * time_scale
        if len(rows) < 3:
            raise DataError(f"track {tid!r} has {len(rows)} distinct records; at least 3 are needed")
        tracks.append(Track(t, np.column_stack([e, n]), np.array([r.response for r in rows]), track_id=tid))
    return tracks


def tracks_to_records(tracks, projection: UTMScaled, time_scale: float = 1.0) -> list[RawRecord]:
    """Inverse of :func:`records_to_tracks`, for exporting model-unit tracks."""
    out = []
    for tr in tracks:
        lon, lat = projection.inverse(tr.locations[:, 0], tr.locations[:, 1])
        for t, lo, la, y in zip(tr.times / time_scale, lon, lat, tr.responses):
            out.append(RawRecord(str(tr.track_id), float(t), float(lo), float(la), float(y)))
    return out


def write_tracks_csv(tracks, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for tr in tracks:
            for t, (x, y), r in zip(tr.times, tr.locations, tr.responses):
                w.writerow([tr.track_id, repr(float(t)), repr(float(x)), repr(float(y)), repr(float(r))])


def read_tracks_csv(path) -> list[Track]:
    """Read projected tracks; rows of a track must be contiguous and time-ordered."""
    rows: dict[str, list] = {}
    order = []
    last = None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, TRACK_COLUMNS, path)
        for row in reader:
            line = reader.line_num
            tid = (row.get("track_id") or "").strip()
            try:
                vals = [float(row[c]) for c in ("t", "x", "y", "response")]
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: line {line}: {exc}") from exc
            if not tid or not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}: line {line}: empty track_id or non-finite value")
            if tid != last and tid in rows:
                raise DataError(f"{path}: line {line}: records of track {tid!r} are not contiguous")
            if tid not in rows:
                rows[tid] = []
                order.append(tid)
            rows[tid].append(vals)
            last = tid
    if not rows:
        raise DataError(f"{path}: no records")
    tracks = []
    for tid in order:
        a = np.array(rows[tid])
        try:
            tracks.append(Track(a[:, 0], a[:, 1:3], a[:, 3], track_id=tid))
        except ValueError as exc:
            raise DataError(f"{path}: track {tid!r}: {exc}") from exc
    return tracks


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
