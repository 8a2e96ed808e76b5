"""Temporally-linked dataset model.

A manifest is a JSON tree of days, each day an ordered list of events,
each event a frame-feature file plus one or more reference captions.
Days never straddle split boundaries. Feature files use the TMAF binary
format; captions are raw strings tokenized here.

Also provides the synthetic corpus generator used for end-to-end checks:
activities follow a seeded uniform chain and each caption names the
*previous* event's activity, so the cross-event link is the only way to
predict that slot.
"""

from __future__ import annotations

import json
import string
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import named_rng

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

SPLITS = ("train", "val", "test")

FEATURE_MAGIC = b"TMAF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHII")


class ManifestError(ValueError):
    """Schema or invariant violation while loading a manifest."""


class FeatureFileError(ValueError):
    """Malformed TMAF feature file."""


# -----------------------------------------------------------------------------
# Dataset model
# -----------------------------------------------------------------------------


@dataclass
class Event:
    id: str
    frame_file: Path
    captions: list[str]


@dataclass
class Day:
    id: str
    split: str
    events: list[Event]


@dataclass
class Manifest:
    feature_dim: int
    days: list[Day]

    def split_days(self, split: str) -> list[Day]:
        return [d for d in self.days if d.split == split]


@dataclass
class LinkedSample:
    """One (current event, previous event or None, caption index) triple.

    ``previous`` is None for the first event of a day; downstream code
    substitutes the artificial empty event.
    """

    day_id: str
    current: Event
    previous: Event | None
    caption_index: int


# -----------------------------------------------------------------------------
# Feature files (TMAF)
# -----------------------------------------------------------------------------


def write_features(path, frames: np.ndarray) -> None:
    """Write a (J, D) frame-feature matrix as TMAF (little-endian f32)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0 or frames.shape[1] == 0:
        raise ValueError(f"frames must be a non-empty 2-D matrix, got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("frames contain NaN or Inf")
    J, D = frames.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, J, D))
        f.write(frames.astype("<f4").tobytes())


def read_feature_header(path) -> tuple[int, int]:
    """(J, D) from a TMAF header without reading the payload."""
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, version, J, D = _HEADER.unpack(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    if J == 0 or D == 0:
        raise FeatureFileError(f"{path}: empty feature matrix ({J}x{D})")
    return J, D


def read_features(path) -> np.ndarray:
    """Read a TMAF file into a float64 (J, D) matrix."""
    J, D = read_feature_header(path)
    with open(path, "rb") as f:
        f.seek(_HEADER.size)
        payload = f.read()
    expected = J * D * 4
    if len(payload) != expected:
        raise FeatureFileError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    frames = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(J, D)
    if not np.all(np.isfinite(frames)):
        raise FeatureFileError(f"{path}: payload contains NaN or Inf")
    return frames


def subsample_frames(seq: np.ndarray, max_frames: int = 26) -> np.ndarray:
    """Keep at most ``max_frames`` frames, evenly distributed.

    For J > max, selects indices round(i * (J-1) / (max-1)); indices are
    strictly increasing, so no frame repeats. Identity for J <= max.
    """
    J = seq.shape[0]
    if J <= max_frames:
        return seq
    idx = np.rint(np.arange(max_frames) * (J - 1) / (max_frames - 1)).astype(int)
    return seq[idx]


# -----------------------------------------------------------------------------
# Manifest I/O
# -----------------------------------------------------------------------------


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ManifestError(msg)


def load_manifest(path) -> Manifest:
    """Load and fully validate a manifest; feature files are header-checked."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    _require(isinstance(doc, dict), "manifest root must be an object")
    _require(isinstance(doc.get("feature_dim"), int) and doc["feature_dim"] > 0,
             "feature_dim must be a positive integer")
    _require(isinstance(doc.get("days"), list) and doc["days"],
             "days must be a non-empty list")
    feature_dim = doc["feature_dim"]
    base = path.parent
    days: list[Day] = []
    day_ids: set[str] = set()
    event_ids: set[str] = set()
    for d in doc["days"]:
        _require(isinstance(d, dict), "each day must be an object")
        _require(isinstance(d.get("id"), str) and d["id"], "day id must be a string")
        _require(d["id"] not in day_ids, f"duplicate day id {d['id']!r}")
        day_ids.add(d["id"])
        _require(d.get("split") in SPLITS,
                 f"day {d['id']!r}: split must be one of {SPLITS}")
        _require(isinstance(d.get("events"), list) and d["events"],
                 f"day {d['id']!r}: needs at least one event")
        events: list[Event] = []
        for e in d["events"]:
            _require(isinstance(e, dict), "each event must be an object")
            _require(isinstance(e.get("id"), str) and e["id"],
                     "event id must be a string")
            _require(e["id"] not in event_ids, f"duplicate event id {e['id']!r}")
            event_ids.add(e["id"])
            _require(isinstance(e.get("frames"), str) and e["frames"],
                     f"event {e['id']!r}: frames path missing")
            caps = e.get("captions")
            _require(isinstance(caps, list) and caps
                     and all(isinstance(c, str) for c in caps),
                     f"event {e['id']!r}: needs at least one caption string")
            frame_file = (base / e["frames"]).resolve()
            if not frame_file.exists():
                raise ManifestError(f"event {e['id']!r}: missing feature file {frame_file}")
            try:
                _, D = read_feature_header(frame_file)
            except FeatureFileError as exc:
                raise ManifestError(f"event {e['id']!r}: {exc}") from exc
            _require(D == feature_dim,
                     f"event {e['id']!r}: feature dim {D} != manifest feature_dim {feature_dim}")
            events.append(Event(id=e["id"], frame_file=frame_file, captions=list(caps)))
        days.append(Day(id=d["id"], split=d["split"], events=events))
    return Manifest(feature_dim=feature_dim, days=days)


def write_manifest(manifest: Manifest, path) -> None:
    """Write a manifest; frame paths are stored relative to the manifest."""
    path = Path(path)
    doc = {
        "feature_dim": manifest.feature_dim,
        "days": [
            {
                "id": day.id,
                "split": day.split,
                "events": [
                    {
                        "id": ev.id,
                        "frames": _relpath(ev.frame_file, path.parent),
                        "captions": list(ev.captions),
                    }
                    for ev in day.events
                ],
            }
            for day in manifest.days
        ],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")


def _relpath(target: Path, base: Path) -> str:
    import os

    return os.path.relpath(Path(target).resolve(), Path(base).resolve())


def corpus_stats(manifest: Manifest) -> dict[str, dict[str, int]]:
    """Per-split and total counts of days, events, captions and images."""
    stats = {s: {"days": 0, "events": 0, "captions": 0, "images": 0} for s in SPLITS}
    for day in manifest.days:
        st = stats[day.split]
        st["days"] += 1
        for ev in day.events:
            st["events"] += 1
            st["captions"] += len(ev.captions)
            st["images"] += read_feature_header(ev.frame_file)[0]
    stats["total"] = {
        k: sum(stats[s][k] for s in SPLITS) for k in ("days", "events", "captions", "images")
    }
    return stats


# -----------------------------------------------------------------------------
# Tokenization and vocabulary
# -----------------------------------------------------------------------------


def tokenize(raw: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    out = []
    for piece in raw.lower().split():
        tok = piece.strip(string.punctuation)
        if tok:
            out.append(tok)
    return out


class Vocabulary:
    """Token <-> index bijection with reserved indices 0..3 for
    PAD/BOS/EOS/UNK. Regular tokens are ordered by descending frequency,
    ties broken lexicographically, so builds are deterministic."""

    def __init__(self, tokens: list[str]):
        if list(tokens[: len(RESERVED_TOKENS)]) != list(RESERVED_TOKENS):
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: list[str]) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(captions, min_freq: int = 1) -> Vocabulary:
    """Vocabulary over tokenized captions, keeping tokens with frequency
    >= min_freq (training split only by convention)."""
    counts: Counter[str] = Counter()
    n_captions = 0
    for cap in captions:
        n_captions += 1
        counts.update(tokenize(cap))
    if n_captions == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(list(RESERVED_TOKENS) + kept)


def training_captions(manifest: Manifest):
    for day in manifest.split_days("train"):
        for ev in day.events:
            yield from ev.captions


# -----------------------------------------------------------------------------
# Event linking
# -----------------------------------------------------------------------------


def link_events(day: Day) -> list[LinkedSample]:
    """One sample per (event, caption) pair; the first event of the day has
    no previous event."""
    samples = []
    prev: Event | None = None
    for ev in day.events:
        for ci in range(len(ev.captions)):
            samples.append(
                LinkedSample(day_id=day.id, current=ev, previous=prev, caption_index=ci)
            )
        prev = ev
    return samples


# -----------------------------------------------------------------------------
# Synthetic corpus
# -----------------------------------------------------------------------------

ACTIVITY_WORDS = (
    "cooking", "eating", "working", "walking", "shopping", "reading",
    "driving", "cleaning", "talking", "resting", "running", "painting",
    "gardening", "swimming", "studying", "waiting", "cycling", "writing",
    "sleeping", "drawing", "climbing", "dancing", "singing", "fishing",
)


def activity_name(i: int, n_activities: int) -> str:
    if n_activities <= len(ACTIVITY_WORDS):
        return ACTIVITY_WORDS[i]
    return f"act{i}"


def synth_generate(
    out_dir,
    seed: int,
    n_days: int = 20,
    events_per_day: int = 8,
    feature_dim: int = 16,
    n_activities: int = 8,
) -> Manifest:
    """Generate a synthetic corpus with planted cross-event dependencies.

    Per day, activities are drawn from a seeded uniform chain (the next
    activity is independent of the current one, so current-event frames
    carry no information about the previous activity). Event frames are a
    one-hot activity prototype plus N(0, 0.1^2) noise, J uniform in
    [3, 10]. The caption of event s is "after <prev activity> did <cur
    activity>" with "start" standing in for the day's opening. Whole days
    are split 70/15/15.

    Writes manifest.json plus TMAF files under ``out_dir`` and returns the
    loaded manifest. Identical seeds produce byte-identical trees.
    """
    if n_activities < 2:
        raise ValueError("need at least 2 activities")
    if feature_dim < n_activities:
        raise ValueError(
            f"feature_dim {feature_dim} must be >= n_activities {n_activities}"
        )
    if n_days < 3:
        raise ValueError("need at least 3 days to populate all splits")
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = named_rng(seed, "datagen")

    n_train = max(1, int(np.floor(n_days * 0.70)))
    n_val = max(1, int(np.floor(n_days * 0.15)))
    if n_train + n_val >= n_days:
        n_train = n_days - n_val - 1
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n_days - n_train - n_val)

    days: list[Day] = []
    for d in range(n_days):
        day_id = f"day{d:03d}"
        events: list[Event] = []
        prev_name = "start"
        for s in range(events_per_day):
            act = int(rng.integers(n_activities))
            name = activity_name(act, n_activities)
            J = int(rng.integers(3, 11))
            proto = np.zeros(feature_dim)
            proto[act] = 1.0
            frames = proto + rng.normal(0.0, 0.1, size=(J, feature_dim))
            event_id = f"{day_id}_e{s}"
            frame_file = out_dir / "features" / f"{event_id}.tmaf"
            write_features(frame_file, frames)
            caption = f"after {prev_name} did {name}"
            events.append(Event(id=event_id, frame_file=frame_file.resolve(),
                                captions=[caption]))
            prev_name = name
        days.append(Day(id=day_id, split=splits[d], events=events))

    manifest = Manifest(feature_dim=feature_dim, days=days)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
