"""Signature data handling: SVC-2004 files, preprocessing, splits, synthesis.

A raw signature is the pen trajectory as recorded by the tablet.  Before it
reaches the network it is normalized (centroid-shifted, range-scaled, per
axis, over the true frames only) and zero-padded at the end to the model's
fixed input length, giving a 2 x T_max channel matrix.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

__all__ = [
    "Label",
    "SvcParseError",
    "LengthOverflowError",
    "RawSignature",
    "ProcessedSignature",
    "Corpus",
    "parse_svc_file",
    "format_svc",
    "normalize",
    "pad",
    "preprocess",
    "preprocess_corpus",
    "split_train_test",
    "partition_agents",
    "synth_generate",
    "load_corpus",
    "merge_corpora",
]

log = logging.getLogger(__name__)

# SVC-2004 per-user sample convention: indices 1-20 genuine, 21-40 skilled forgeries.
SVC_GENUINE_RANGE = range(1, 21)
SVC_SAMPLES_PER_USER = 40
SVC_USERS_PER_TASK = 40

_SVC_FILE_RE = re.compile(r"^U(\d+)S(\d+)\.txt$", re.IGNORECASE)


class Label(IntEnum):
    """Class order is fixed across the project: forged = 0, genuine = 1."""

    FORGED = 0
    GENUINE = 1


class SvcParseError(ValueError):
    pass


class LengthOverflowError(ValueError):
    pass


@dataclass
class RawSignature:
    """Parsed pen trajectory with per-point channels as parallel int arrays.

    ``azimuth``/``altitude``/``pressure`` are present only for 7-field files
    (SVC task 2 style); they are retained for format fidelity but the model
    consumes x-y coordinates only.
    """

    user_id: int
    sample_index: int
    label: Label
    x: np.ndarray
    y: np.ndarray
    timestamp: np.ndarray
    button_status: np.ndarray
    azimuth: np.ndarray | None = None
    altitude: np.ndarray | None = None
    pressure: np.ndarray | None = None

    def __post_init__(self):
        for name in ("x", "y", "timestamp", "button_status", "azimuth", "altitude", "pressure"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, np.asarray(value, dtype=np.int64))
        if len(self.x) < 2:
            raise SvcParseError(f"signature needs at least 2 points, got {len(self.x)}")
        lengths = {len(self.x), len(self.y), len(self.timestamp), len(self.button_status)}
        if self.azimuth is not None:
            lengths |= {len(self.azimuth), len(self.altitude), len(self.pressure)}
        if len(lengths) != 1:
            raise SvcParseError("per-point channel arrays must share one length")

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class ProcessedSignature:
    """Normalized, zero-padded 2-channel matrix ready for the network."""

    channels: np.ndarray  # (2, t_max) float64
    true_length: int
    label: Label
    user_id: int

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] != 2:
            raise ValueError(f"channels must be (2, t_max), got {self.channels.shape}")


@dataclass
class Corpus:
    """Signatures grouped by user, with a provenance tag."""

    users: dict[int, list[RawSignature]]
    source: str
    missing_files: list[str] = field(default_factory=list)

    @property
    def user_ids(self) -> list[int]:
        return sorted(self.users)

    def all_signatures(self) -> list[RawSignature]:
        return [sig for uid in self.user_ids for sig in self.users[uid]]

    def __len__(self) -> int:
        return sum(len(sigs) for sigs in self.users.values())

    def class_counts(self, user_id: int) -> tuple[int, int]:
        """(genuine, forged) sample counts for one user."""
        sigs = self.users[user_id]
        genuine = sum(1 for s in sigs if s.label == Label.GENUINE)
        return genuine, len(sigs) - genuine

    def manifest(self) -> dict:
        """User/sample/label inventory, JSON-ready."""
        return {
            "source": self.source,
            "num_users": len(self.users),
            "num_signatures": len(self),
            "missing_files": list(self.missing_files),
            "users": {
                str(uid): {
                    "genuine": self.class_counts(uid)[0],
                    "forged": self.class_counts(uid)[1],
                    "samples": [
                        {"sample_index": s.sample_index, "label": s.label.name.lower(), "points": len(s)}
                        for s in self.users[uid]
                    ],
                }
                for uid in self.user_ids
            },
        }


def parse_svc_file(
    text: str | bytes, label: Label, user_id: int, sample_index: int
) -> RawSignature:
    """Parse one SVC-2004 file: a point count line, then one point per line.

    Each point line is whitespace-separated integers, either
    ``X Y Timestamp ButtonStatus`` or with ``Azimuth Altitude Pressure``
    appended; the field count must be consistent within a file.  Raises
    ``SvcParseError`` naming the offending line.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="strict")
    lines = [ln.strip() for ln in text.splitlines()]
    while lines and not lines[-1]:
        lines.pop()
    if not lines:
        raise SvcParseError("empty file")
    try:
        declared = int(lines[0])
    except ValueError:
        raise SvcParseError(f"line 1: point count is not an integer: {lines[0]!r}") from None
    if declared < 2:
        raise SvcParseError(f"line 1: declared point count {declared} is below the 2-point minimum")
    if len(lines) - 1 != declared:
        raise SvcParseError(f"declared {declared} points but file has {len(lines) - 1} point lines")

    rows: list[list[int]] = []
    width = None
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if len(fields) not in (4, 7):
            raise SvcParseError(f"line {lineno}: expected 4 or 7 fields, got {len(fields)}")
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise SvcParseError(f"line {lineno}: inconsistent field count ({len(fields)} vs {width})")
        try:
            rows.append([int(f) for f in fields])
        except ValueError:
            raise SvcParseError(f"line {lineno}: non-integer field in {line!r}") from None

    cols = np.array(rows, dtype=np.int64).T
    extras = {}
    if width == 7:
        extras = {"azimuth": cols[4], "altitude": cols[5], "pressure": cols[6]}
    return RawSignature(
        user_id=user_id,
        sample_index=sample_index,
        label=label,
        x=cols[0],
        y=cols[1],
        timestamp=cols[2],
        button_status=cols[3],
        **extras,
    )


def format_svc(sig: RawSignature) -> str:
    """Serialize back to the SVC-2004 file format (parse round-trip identity)."""
    columns = [sig.x, sig.y, sig.timestamp, sig.button_status]
    if sig.azimuth is not None:
        columns += [sig.azimuth, sig.altitude, sig.pressure]
    lines = [str(len(sig))]
    for row in zip(*columns):
        lines.append(" ".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def normalize(sig: RawSignature) -> tuple[np.ndarray, np.ndarray]:
    """Centroid-shift and range-scale each coordinate axis over the true frames.

    x_t <- (x_t - mean(x)) / (max(x) - min(x)), same for y.  A degenerate axis
    (max == min) divides by 1, leaving all-zero centered values, so every
    signature stays usable.
    """
    xs = sig.x.astype(np.float64)
    ys = sig.y.astype(np.float64)
    out = []
    for v in (xs, ys):
        span = v.max() - v.min()
        out.append((v - v.mean()) / (span if span > 0 else 1.0))
    return out[0], out[1]


def pad(xs: np.ndarray, ys: np.ndarray, t_max: int, label: Label, user_id: int) -> ProcessedSignature:
    """Zero-pad normalized channels at the end to length ``t_max``."""
    length = len(xs)
    if length > t_max:
        raise LengthOverflowError(
            f"signature of user {user_id} has {length} points, exceeding the {t_max}-frame limit"
        )
    channels = np.zeros((2, t_max))
    channels[0, :length] = xs
    channels[1, :length] = ys
    return ProcessedSignature(channels, length, label, user_id)


def preprocess(sig: RawSignature, t_max: int) -> ProcessedSignature:
    xs, ys = normalize(sig)
    return pad(xs, ys, t_max, sig.label, sig.user_id)


def preprocess_corpus(signatures: list[RawSignature], t_max: int) -> list[ProcessedSignature]:
    return [preprocess(s, t_max) for s in signatures]


def split_train_test(
    corpus: Corpus, train_per_user_per_class: int = 16, seed: int = 0
) -> tuple[Corpus, Corpus]:
    """Per user and per class, sample exactly ``train_per_user_per_class``
    signatures for training; the remainder is the test set.

    Deterministic under ``seed``; the split is a disjoint, exhaustive
    partition of the corpus.  With SVC's 20+20 per user and the default 16,
    the ratio is 8:2.
    """
    train_users: dict[int, list[RawSignature]] = {}
    test_users: dict[int, list[RawSignature]] = {}
    for uid in corpus.user_ids:
        train_users[uid] = []
        test_users[uid] = []
        for label in (Label.GENUINE, Label.FORGED):
            group = [s for s in corpus.users[uid] if s.label == label]
            if len(group) < train_per_user_per_class + 1:
                raise ValueError(
                    f"user {uid} has {len(group)} {label.name.lower()} samples; "
                    f"need at least {train_per_user_per_class + 1}"
                )
            rng = np.random.default_rng((seed, uid, int(label)))
            order = rng.permutation(len(group))
            picked = set(order[:train_per_user_per_class].tolist())
            for i, sig in enumerate(group):
                (train_users if i in picked else test_users)[uid].append(sig)
    return (
        Corpus(train_users, source=f"{corpus.source}:train"),
        Corpus(test_users, source=f"{corpus.source}:test"),
    )


def partition_agents(corpus: Corpus, num_agents: int, seed: int = 0) -> list[Corpus]:
    """Partition *users* (never samples) across agents; partition sizes
    differ by at most one user.

    The first ``n_users % num_agents`` agents receive the extra user when the
    count does not divide evenly.  Deterministic under ``seed``.
    """
    uids = corpus.user_ids
    if num_agents < 1:
        raise ValueError("need at least one agent")
    if num_agents > len(uids):
        raise ValueError(f"cannot split {len(uids)} users across {num_agents} agents")
    rng = np.random.default_rng((seed, len(uids)))
    order = [uids[i] for i in rng.permutation(len(uids))]
    base, extra = divmod(len(uids), num_agents)
    partitions = []
    offset = 0
    for k in range(num_agents):
        size = base + (1 if k < extra else 0)
        chunk = sorted(order[offset : offset + size])
        offset += size
        partitions.append(
            Corpus({uid: corpus.users[uid] for uid in chunk}, source=f"{corpus.source}:agent{k}")
        )
    return partitions


# Synthetic corpus generation.  Each user gets a latent "style": a small
# sum-of-sinusoids trajectory model per axis.  Genuine samples realize the
# style with slight jitter; forgeries realize a *different* user's style with
# visibly larger distortion (an imperfect imitation).

_SYNTH_HARMONICS = 4
_GENUINE_JITTER = 0.03
_FORGED_JITTER = 0.30
_GENUINE_NOISE = 0.01
_FORGED_NOISE = 0.25
_COORD_SCALE = 2000.0


def _draw_style(rng) -> dict[str, np.ndarray]:
    return {
        "amp": rng.uniform(0.3, 1.0, size=(2, _SYNTH_HARMONICS)) / np.arange(1, _SYNTH_HARMONICS + 1),
        "freq": rng.uniform(0.8, 3.0, size=(2, _SYNTH_HARMONICS)),
        "phase": rng.uniform(0.0, 2.0 * math.pi, size=(2, _SYNTH_HARMONICS)),
    }


def _render_trajectory(style, length, jitter, noise, rng) -> tuple[np.ndarray, np.ndarray]:
    t = np.linspace(0.0, 1.0, length)
    coords = []
    for axis in range(2):
        value = np.zeros(length)
        for h in range(_SYNTH_HARMONICS):
            amp = style["amp"][axis, h] * (1.0 + jitter * rng.normal())
            freq = style["freq"][axis, h] * (1.0 + jitter * rng.normal())
            phase = style["phase"][axis, h] + jitter * rng.normal()
            value += amp * np.sin(2.0 * math.pi * freq * t + phase)
        value += noise * rng.normal(size=length)
        coords.append(value)
    return coords[0], coords[1]


def _quantize(value: np.ndarray) -> np.ndarray:
    return np.round(value * _COORD_SCALE + 4.0 * _COORD_SCALE).astype(np.int64)


def synth_generate(
    num_users: int,
    genuine_per_user: int,
    forged_per_user: int,
    length_range: tuple[int, int],
    seed: int = 0,
    max_length: int = 800,
) -> Corpus:
    """Generate a synthetic corpus in the SVC sample-index convention.

    Deterministic under ``seed``; sample lengths are drawn uniformly from
    ``length_range`` (inclusive), which must fit within ``max_length``.
    """
    if min(num_users, genuine_per_user, forged_per_user) < 1:
        raise ValueError("user and per-class sample counts must be at least 1")
    lo, hi = length_range
    if lo < 2 or lo > hi:
        raise ValueError(f"invalid length range {length_range}")
    if hi > max_length:
        raise ValueError(f"length range {length_range} exceeds the {max_length}-frame limit")
    if num_users < 2:
        raise ValueError("forgeries imitate another user; need at least 2 users")

    master = np.random.default_rng((seed, 0xFED5))
    styles = {uid: _draw_style(master) for uid in range(1, num_users + 1)}
    users: dict[int, list[RawSignature]] = {uid: [] for uid in styles}
    for uid in styles:
        for j in range(genuine_per_user + forged_per_user):
            sample_index = j + 1
            forged = j >= genuine_per_user
            rng = np.random.default_rng((seed, uid, sample_index))
            length = int(rng.integers(lo, hi + 1))
            if forged:
                victim = int(rng.choice([v for v in styles if v != uid]))
                xs, ys = _render_trajectory(styles[victim], length, _FORGED_JITTER, _FORGED_NOISE, rng)
                label = Label.FORGED
            else:
                xs, ys = _render_trajectory(styles[uid], length, _GENUINE_JITTER, _GENUINE_NOISE, rng)
                label = Label.GENUINE
            users[uid].append(
                RawSignature(
                    user_id=uid,
                    sample_index=sample_index,
                    label=label,
                    x=_quantize(xs),
                    y=_quantize(ys),
                    timestamp=np.arange(length, dtype=np.int64) * 10,
                    button_status=np.ones(length, dtype=np.int64),
                )
            )
    return Corpus(users, source="synthetic")


def load_corpus(directory: str | Path, task: int = 1) -> Corpus:
    """Load an SVC-2004 task directory (files ``U<user>S<sample>.TXT``).

    Sample indices 1-20 are genuine, 21-40 skilled forgeries.  A complete
    task holds 40 users x 40 samples; partial directories load with the
    missing files recorded on the corpus (and a logged warning).
    """
    directory = Path(directory)
    if task not in (1, 2):
        raise ValueError(f"task must be 1 or 2, got {task}")
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")

    found: dict[tuple[int, int], Path] = {}
    for entry in sorted(directory.iterdir()):
        m = _SVC_FILE_RE.match(entry.name)
        if m:
            found[(int(m.group(1)), int(m.group(2)))] = entry
    if not found:
        raise ValueError(f"{directory} contains no SVC signature files (U<user>S<sample>.TXT)")

    users: dict[int, list[RawSignature]] = {}
    for (uid, sample), path in sorted(found.items()):
        label = Label.GENUINE if sample in SVC_GENUINE_RANGE else Label.FORGED
        try:
            sig = parse_svc_file(path.read_text(), label, uid, sample)
        except SvcParseError as exc:
            raise SvcParseError(f"{path}: {exc}") from exc
        users.setdefault(uid, []).append(sig)

    missing = [
        f"U{uid}S{sample}.TXT"
        for uid in range(1, SVC_USERS_PER_TASK + 1)
        for sample in range(1, SVC_SAMPLES_PER_USER + 1)
        if (uid, sample) not in found
    ]
    if missing:
        log.warning("%s: %d of %d expected files missing (see corpus.missing_files)",
                    directory, len(missing), SVC_USERS_PER_TASK * SVC_SAMPLES_PER_USER)
    return Corpus(users, source=f"svc-task{task}", missing_files=missing)


def merge_corpora(first: Corpus, second: Corpus) -> Corpus:
    """Merge two corpora as disjoint user populations.

    The second corpus's user ids are shifted above the first's maximum so
    users never collide (merging SVC task 1 + task 2 yields 80 users).
    """
    offset = max(first.user_ids) if first.users else 0
    users = {uid: list(sigs) for uid, sigs in first.users.items()}
    for uid in second.user_ids:
        users[uid + offset] = [
            RawSignature(
                user_id=sig.user_id + offset,
                sample_index=sig.sample_index,
                label=sig.label,
                x=sig.x, y=sig.y, timestamp=sig.timestamp, button_status=sig.button_status,
                azimuth=sig.azimuth, altitude=sig.altitude, pressure=sig.pressure,
            )
            for sig in second.users[uid]
        ]
    return Corpus(
        users,
        source=f"{first.source}+{second.source}",
        missing_files=first.missing_files + second.missing_files,
    )
