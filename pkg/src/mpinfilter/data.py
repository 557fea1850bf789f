"""Audio ingestion: WAV decoding, resampling, silence trimming, 1-s segmentation,
one-vs-all balancing and seeded train/test splits."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

log = logging.getLogger(__name__)

__all__ = [
    "IngestError",
    "AudioClip",
    "LabeledDataset",
    "IngestOptions",
    "read_wav",
    "to_mono",
    "resample",
    "trim_silence",
    "segment",
    "prepare_clip",
    "discover",
    "one_vs_all",
    "ingest",
    "REFERENCE_SPLITS",
]

TARGET_RATE = 16000

# (train, test) clip counts reported for each one-vs-all task; only the ratio
# is reused, actual counts depend on the trimming.
REFERENCE_SPLITS = {
    "dog": (129, 33),
    "rain": (119, 40),
    "sea_waves": (200, 50),
    "crying_baby": (144, 49),
    "clock_tick": (114, 50),
    "person_sneeze": (101, 44),
    "sneezing": (101, 44),
    "helicopter": (197, 50),
    "chainsaw": (99, 34),
    "rooster": (124, 54),
    "crackling_fire": (152, 66),
    "fire_crackling": (152, 66),
    "theo": (761, 254),
    "nicolas": (889, 297),
}


class IngestError(RuntimeError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    rate: float
    source_id: str
    label: str | None = None

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 1:
            raise ValueError("AudioClip must be mono")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return self.samples.size / self.rate


@dataclass
class LabeledDataset:
    """Binary one-vs-all dataset with a fixed train/test split."""

    clips: list[AudioClip]
    labels: np.ndarray  # 1 = target class
    split: np.ndarray  # "train" / "test"
    positive_class: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        self.split = np.asarray(self.split, dtype="<U5")
        if not (len(self.clips) == self.labels.size == self.split.size):
            raise ValueError("clips, labels and split must have equal length")

    def __len__(self):
        return len(self.clips)

    def indices(self, part: str) -> np.ndarray:
        return np.flatnonzero(self.split == part)

    def subset(self, part: str):
        idx = self.indices(part)
        return [self.clips[i] for i in idx], self.labels[idx]

    def save(self, path) -> None:
        """``.npz`` with samples plus a CSV manifest next to it."""
        path = Path(path)
        n = max((c.samples.size for c in self.clips), default=0)
        X = np.zeros((len(self.clips), n))
        lengths = np.array([c.samples.size for c in self.clips], dtype=int)
        for i, c in enumerate(self.clips):
            X[i, : c.samples.size] = c.samples
        np.savez_compressed(
            path,
            samples=X,
            lengths=lengths,
            rates=np.array([c.rate for c in self.clips]),
            ids=np.array([c.source_id for c in self.clips]),
            classes=np.array([c.label or "" for c in self.clips]),
            labels=self.labels,
            split=self.split,
            positive_class=np.array(self.positive_class),
            meta=np.array(json.dumps(self.meta, sort_keys=True)),
        )
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "clip_id", "class", "label", "split"])
            for i, c in enumerate(self.clips):
                w.writerow([i, c.source_id, c.label or "", int(self.labels[i]), self.split[i]])

    @classmethod
    def load(cls, path) -> "LabeledDataset":
        with np.load(path, allow_pickle=False) as z:
            clips = [
                AudioClip(z["samples"][i, : z["lengths"][i]], float(z["rates"][i]), str(z["ids"][i]), str(z["classes"][i]) or None)
                for i in range(z["labels"].size)
            ]
            return cls(clips, z["labels"], z["split"], str(z["positive_class"]), json.loads(str(z["meta"])))


@dataclass(frozen=True)
class IngestOptions:
    rate: int = TARGET_RATE
    segment_seconds: float = 1.0
    frame_seconds: float = 0.02
    silence_ratio: float = 0.02
    normalize: bool = True
    min_segment_fill: float = 0.5
    test_fraction: float | None = None
    seed: int = 0
    balance: bool = True
    label_from: str = "auto"  # auto | dir | esc50 | fsdd


def read_wav(path) -> tuple[np.ndarray, int]:
    """Decode PCM WAV to float in [-1, 1); shape (n,) or (n, channels)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", wavfile.WavFileWarning)
        rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(float) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        x = data.astype(float)
    else:
        raise IngestError(f"unsupported sample type {data.dtype} in {path}")
    return x, int(rate)


def to_mono(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x if x.ndim == 1 else x.mean(axis=1)


def resample(x, rate_in: float, rate_out: float = TARGET_RATE) -> np.ndarray:
    if rate_in == rate_out:
        return np.asarray(x, dtype=float)
    frac = Fraction(int(round(rate_out)), int(round(rate_in)))
    return resample_poly(x, frac.numerator, frac.denominator)


def _frame_rms(x, frame: int) -> np.ndarray:
    n = math.ceil(x.size / frame)
    padded = np.zeros(n * frame)
    padded[: x.size] = x
    return np.sqrt(np.mean(padded.reshape(n, frame) ** 2, axis=1))


def trim_silence(x, rate: float, frame_seconds=0.02, ratio=0.02) -> np.ndarray:
    """Drop leading/trailing frames whose RMS is below ``ratio * peak``."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x
    peak = np.max(np.abs(x))
    if peak == 0:
        return x[:0]
    frame = max(int(round(frame_seconds * rate)), 1)
    loud = np.flatnonzero(_frame_rms(x, frame) >= ratio * peak)
    if loud.size == 0:
        return x[:0]
    return x[loud[0] * frame : min((loud[-1] + 1) * frame, x.size)]


def segment(x, rate: float, seconds=1.0, min_fill=0.5, frame_seconds=0.02, ratio=0.02, peak=None) -> list[np.ndarray]:
    """Cut into non-overlapping segments of exactly ``seconds``.

    A short tail is zero-padded when it holds at least ``min_fill`` of a
    segment (clips shorter than one segment always are); segments that are
    silent throughout, relative to ``peak``, are dropped.
    """
    x = np.asarray(x, dtype=float)
    n = int(round(seconds * rate))
    if x.size == 0:
        return []
    peak = np.max(np.abs(x)) if peak is None else peak
    frame = max(int(round(frame_seconds * rate)), 1)
    out = []
    for start in range(0, x.size, n):
        seg = x[start : start + n]
        if seg.size < n:
            if seg.size < min_fill * n and out:
                break
            seg = np.concatenate([seg, np.zeros(n - seg.size)])
        if np.any(_frame_rms(seg, frame) >= ratio * peak):
            out.append(seg)
    return out


def prepare_clip(x, rate, opts: IngestOptions = IngestOptions()) -> list[np.ndarray]:
    """Mono, resampled, trimmed and segmented 1-s pieces of one recording."""
    y = resample(to_mono(x), rate, opts.rate)
    y = trim_silence(y, opts.rate, opts.frame_seconds, opts.silence_ratio)
    segs = segment(y, opts.rate, opts.segment_seconds, opts.min_segment_fill, opts.frame_seconds, opts.silence_ratio)
    if opts.normalize:
        segs = [s / np.max(np.abs(s)) * 0.99 for s in segs if np.max(np.abs(s)) > 0]
    return segs


_FSDD = re.compile(r"^(\d)_([A-Za-z]+)_(\d+)\.wav$")


def discover(root, label_from: str = "auto") -> dict[str, list[Path]]:
    """Map class name to WAV paths.

    ``esc50`` reads ``meta/esc50.csv`` (ESC-10 subset only), ``fsdd`` uses the
    speaker field of ``digit_speaker_index.wav`` names and ``dir`` uses the
    parent directory.  ``auto`` picks the first that applies.
    """
    root = Path(root)
    meta = root / "meta" / "esc50.csv"
    if label_from == "auto":
        if meta.exists():
            label_from = "esc50"
        elif any(_FSDD.match(p.name) for p in root.rglob("*.wav")):
            label_from = "fsdd"
        else:
            label_from = "dir"
    classes: dict[str, list[Path]] = {}
    if label_from == "esc50":
        audio = root / "audio"
        with open(meta, newline="") as fh:
            for row in csv.DictReader(fh):
                if str(row.get("esc10", "True")).lower() not in ("true", "1"):
                    continue
                classes.setdefault(row["category"], []).append(audio / row["filename"])
    elif label_from == "fsdd":
        for p in sorted(root.rglob("*.wav")):
            m = _FSDD.match(p.name)
            if m:
                classes.setdefault(m.group(2).lower(), []).append(p)
    elif label_from == "dir":
        for p in sorted(root.rglob("*.wav")):
            if p.parent != root:
                classes.setdefault(p.parent.name, []).append(p)
    else:
        raise IngestError(f"unknown label source {label_from!r}")
    return {k: sorted(v) for k, v in sorted(classes.items())}


def _load_class(paths, name, opts) -> list[AudioClip]:
    clips = []
    for path in paths:
        try:
            x, rate = read_wav(path)
        except (OSError, ValueError, IngestError) as exc:
            log.warning("skipping unreadable %s: %s", path, exc)
            continue
        for i, seg in enumerate(prepare_clip(x, rate, opts)):
            clips.append(AudioClip(seg, opts.rate, f"{Path(path).stem}#{i}", name))
    return clips


def _recording(clip: AudioClip) -> str:
    return clip.source_id.split("#", 1)[0]


def one_vs_all(by_class: dict[str, list[AudioClip]], positive: str, opts: IngestOptions = IngestOptions()) -> LabeledDataset:
    """Balanced target-vs-rest dataset with a seeded split."""
    if positive not in by_class:
        raise IngestError(f"class {positive!r} not found; have {sorted(by_class)}")
    for name, clips in by_class.items():
        if not clips:
            raise IngestError(f"class {name!r} has no usable clips")
    rng = np.random.default_rng(opts.seed)
    pos = list(by_class[positive])
    others = [c for name in sorted(by_class) if name != positive for c in by_class[name]]
    if not others:
        raise IngestError("one-vs-all needs at least one other class")
    if opts.balance:
        n = min(len(pos), len(others))
        pos = [pos[i] for i in sorted(rng.choice(len(pos), n, replace=False))]
        # draw negatives round-robin over the other classes so each is represented
        pools = {name: list(rng.permutation(len(by_class[name]))) for name in sorted(by_class) if name != positive}
        neg = []
        while len(neg) < n:
            for name in pools:
                if pools[name] and len(neg) < n:
                    neg.append(by_class[name][pools[name].pop()])
    else:
        neg = others
    clips = pos + neg
    labels = np.array([1] * len(pos) + [0] * len(neg))
    order = rng.permutation(len(clips))
    clips = [clips[i] for i in order]
    labels = labels[order]

    test_fraction = opts.test_fraction
    if test_fraction is None:
        tr, te = REFERENCE_SPLITS.get(positive.lower(), (4, 1))
        test_fraction = te / (tr + te)
    split = np.full(len(clips), "train", dtype="<U5")
    # Stratified by label; segments of one recording never straddle the split.
    for lab in (0, 1):
        idx = np.flatnonzero(labels == lab)
        n_test = int(round(test_fraction * idx.size))
        taken = 0
        for group in dict.fromkeys(_recording(clips[i]) for i in idx):
            if taken >= n_test:
                break
            members = [i for i in idx if _recording(clips[i]) == group]
            split[members] = "test"
            taken += len(members)
    return LabeledDataset(clips, labels, split, positive, {"test_fraction": test_fraction, "seed": opts.seed})


def ingest(root, positive: str, opts: IngestOptions = IngestOptions()) -> LabeledDataset:
    """Read a class-organized WAV corpus into a one-vs-all dataset."""
    classes = discover(root, opts.label_from)
    if not classes:
        raise IngestError(f"no labelled WAV files under {root}")
    by_class = {}
    for name, paths in classes.items():
        by_class[name] = _load_class(paths, name, opts)
        log.info("%s: %d files -> %d segments", name, len(paths), len(by_class[name]))
    ds = one_vs_all(by_class, positive, opts)
    ds.meta["source"] = str(root)
    return ds
