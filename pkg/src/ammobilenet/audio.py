"""Waveform ingestion, framing, manifests, and a synthetic speaker corpus."""
from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (CoverageError, ManifestError, UnsupportedFormatError, ValidationError,
                     WavParseError)

SPLITS = ("train", "test")
MANIFEST_HEADER = ["path", "speaker", "split"]


@dataclass
class Utterance:
    samples: np.ndarray
    sample_rate: int
    speaker_id: str = ""
    utterance_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be > 0, got {self.sample_rate}")
        if self.samples.size == 0:
            raise ValidationError("utterance must have non-empty samples")


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    speaker: str
    split: str


@dataclass
class FrameBatch:
    frames: np.ndarray       # [B, 1, window_samples]
    labels: np.ndarray       # [B] int
    utterance_ids: list


class TrimWarning(UserWarning):
    pass


# ---------------------------------------------------------------- WAV I/O

def read_wav(path, speaker_id="", utterance_id=None):
    """Read a 16-bit PCM mono RIFF/WAVE file, scaling samples by 1/32768."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise WavParseError("truncated RIFF header", offset=len(raw))
    riff, _size, wave = struct.unpack_from("<4sI4s", raw, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise UnsupportedFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise WavParseError("truncated chunk header", offset=pos)
        cid, csize = struct.unpack_from("<4sI", raw, pos)
        body = pos + 8
        if body + csize > len(raw):
            raise WavParseError(f"chunk {cid!r} declares {csize} bytes past end of file", offset=body)
        if cid == b"fmt ":
            if csize < 16:
                raise WavParseError("fmt chunk shorter than 16 bytes", offset=body)
            fmt = struct.unpack_from("<HHIIHH", raw, body)
        elif cid == b"data":
            data = (body, csize)
        pos = body + csize + (csize & 1)

    if fmt is None:
        raise WavParseError("missing 'fmt ' chunk", offset=len(raw))
    if data is None:
        raise WavParseError("missing 'data' chunk", offset=len(raw))
    audio_format, channels, rate, _byte_rate, _align, bits = fmt
    if audio_format != 1:
        raise UnsupportedFormatError(f"{path}: audio_format={audio_format} (only PCM=1 supported)")
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: channels={channels} (only mono supported)")
    if bits != 16:
        raise UnsupportedFormatError(f"{path}: bits_per_sample={bits} (only 16 supported)")
    start, nbytes = data
    if nbytes % 2:
        raise WavParseError("data chunk length is not a whole number of samples", offset=start + nbytes)
    pcm = np.frombuffer(raw, dtype="<i2", count=nbytes // 2, offset=start)
    if pcm.size == 0:
        raise ValidationError(f"{path}: data chunk holds no samples; utterance must have non-empty samples")
    return Utterance(pcm.astype(np.float64) / 32768.0, rate, speaker_id,
                     path.stem if utterance_id is None else utterance_id)


def write_wav(path, samples, sample_rate):
    """Write float samples in [-1, 1] as 16-bit PCM mono."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767)
    payload = pcm.astype("<i2").tobytes()
    header = struct.pack("<4sI4s", b"RIFF", 36 + len(payload), b"WAVE")
    fmt = struct.pack("<4sIHHIIHH", b"fmt ", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    data = struct.pack("<4sI", b"data", len(payload))
    Path(path).write_bytes(header + fmt + data + payload)


# ---------------------------------------------------------------- preprocessing

def normalize_amplitude(u):
    peak = float(np.max(np.abs(u.samples)))
    if peak == 0.0:
        return u
    return replace(u, samples=u.samples / peak)


def frame_signal(u, window_ms=200.0, hop_ms=10.0):
    """Slice ``u`` into overlapping windows; returns an array [n_frames, window]."""
    if window_ms <= 0 or hop_ms <= 0:
        raise ValidationError(f"window_ms and hop_ms must be > 0, got {window_ms}, {hop_ms}")
    window = int(round(window_ms * u.sample_rate / 1000.0))
    hop = int(round(hop_ms * u.sample_rate / 1000.0))
    if window < 1 or hop < 1:
        raise ValidationError("window/hop shorter than one sample at this rate")
    L = u.samples.size
    if L < window:
        return np.empty((0, window))
    count = (L - window) // hop + 1
    view = np.lib.stride_tricks.sliding_window_view(u.samples, window)[::hop][:count]
    return np.array(view)


def frame_offsets(u, window_ms=200.0, hop_ms=10.0):
    window = int(round(window_ms * u.sample_rate / 1000.0))
    hop = int(round(hop_ms * u.sample_rate / 1000.0))
    L = u.samples.size
    count = (L - window) // hop + 1 if L >= window else 0
    return np.arange(count) * hop


def energy_trim(u, threshold_ratio=0.05, block_ms=10.0):
    """Drop leading and trailing 10 ms blocks whose RMS is below ratio * peak block RMS."""
    if not 0.0 < threshold_ratio < 1.0:
        raise ValidationError(f"threshold_ratio must lie in (0, 1), got {threshold_ratio}")
    block = max(1, int(round(block_ms * u.sample_rate / 1000.0)))
    x = u.samples
    nblocks = -(-x.size // block)
    padded = np.zeros(nblocks * block)
    padded[:x.size] = x
    counts = np.full(nblocks, block)
    counts[-1] = x.size - (nblocks - 1) * block
    rms = np.sqrt(np.sum(padded.reshape(nblocks, block) ** 2, axis=1) / counts)
    peak = rms.max()
    if peak == 0.0:
        warnings.warn(f"energy_trim: utterance {u.utterance_id!r} is entirely below threshold; "
                      "returned unmodified", TrimWarning, stacklevel=2)
        return u
    keep = np.flatnonzero(rms >= threshold_ratio * peak)
    start = keep[0] * block
    stop = min(x.size, (keep[-1] + 1) * block)
    if start == 0 and stop == x.size:
        return u
    return replace(u, samples=x[start:stop].copy())


# ---------------------------------------------------------------- manifests

def load_manifest(path):
    """Parse a ``path,speaker,split`` CSV. Returns (entries, label_map)."""
    path = Path(path)
    entries = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"header must be exactly {','.join(MANIFEST_HEADER)}", line=1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ManifestError(f"expected 3 fields, got {len(row)}", line=line)
            p, speaker, split = (c.strip() for c in row)
            if split not in SPLITS:
                raise ManifestError(f"unknown split {split!r} (expected train or test)", line=line)
            if not speaker:
                raise ManifestError("empty speaker field", line=line)
            resolved = Path(p) if Path(p).is_absolute() else path.parent / p
            entries.append(ManifestEntry(resolved, speaker, split))

    train = {e.speaker for e in entries if e.split == "train"}
    test = {e.speaker for e in entries if e.split == "test"}
    if test - train:
        raise CoverageError(f"speaker(s) in test split but not train: {sorted(test - train)}")
    if test and train - test:
        raise CoverageError(f"speaker(s) in train split but not test: {sorted(train - test)}")
    label_map = {s: i for i, s in enumerate(sorted(train | test))}
    return entries, label_map


def write_manifest(path, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------- synthetic corpus

F0_RANGE = (80.0, 300.0)
MIN_F0_GAP = 2.0


@dataclass(frozen=True)
class SpeakerProfile:
    name: str
    f0: float
    harmonic_amps: tuple
    am_rate: float
    am_depth: float


def speaker_profiles(num_speakers, seed):
    """Per-speaker timbre signatures; fundamentals sit on a grid >= 2 Hz apart."""
    if num_speakers < 2:
        raise ValidationError(f"need at least 2 speakers, got {num_speakers}")
    lo, hi = F0_RANGE
    step = (hi - lo) / (num_speakers - 1)
    if step < MIN_F0_GAP:
        raise ValidationError(
            f"{num_speakers} speakers cannot keep fundamentals {MIN_F0_GAP} Hz apart in {F0_RANGE} Hz")
    rng = np.random.default_rng(seed)
    grid = lo + step * np.arange(num_speakers)
    order = rng.permutation(num_speakers)
    profiles = []
    for i in range(num_speakers):
        amps = rng.dirichlet(np.ones(3))
        profiles.append(SpeakerProfile(
            name=f"spk{i:03d}",
            f0=float(grid[order[i]]),
            harmonic_amps=tuple(float(a) for a in amps),
            am_rate=float(rng.uniform(2.0, 6.0)),
            am_depth=float(rng.uniform(0.2, 0.6)),
        ))
    return profiles


def synth_utterance(profile, seconds, rate, rng):
    n = int(round(seconds * rate))
    t = np.arange(n) / rate
    signal = np.zeros(n)
    for h, amp in enumerate(profile.harmonic_amps, start=1):
        signal += amp * np.sin(2 * np.pi * h * profile.f0 * t + rng.uniform(0, 2 * np.pi))
    envelope = 1.0 - profile.am_depth * 0.5 * (
        1.0 + np.sin(2 * np.pi * profile.am_rate * t + rng.uniform(0, 2 * np.pi)))
    signal *= envelope
    signal /= np.max(np.abs(signal))
    signal += 0.1 * rng.standard_normal(n)
    return 0.9 * signal / np.max(np.abs(signal))


def make_synthetic_corpus(num_speakers, utterances_per_speaker, seconds, rate, seed, out_dir,
                          test_fraction=0.3):
    """Write a seeded speaker corpus (WAV files + manifest.csv); returns the manifest path.

    The last ``test_fraction`` of each speaker's utterances go to the test split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    profiles = speaker_profiles(num_speakers, seed)
    n_test = int(round(utterances_per_speaker * test_fraction))
    rows = []
    for si, prof in enumerate(profiles):
        rng = np.random.default_rng([seed, si])
        for ui in range(utterances_per_speaker):
            name = f"{prof.name}_utt{ui:03d}.wav"
            write_wav(out_dir / name, synth_utterance(prof, seconds, rate, rng), rate)
            split = "test" if ui >= utterances_per_speaker - n_test else "train"
            rows.append((name, prof.name, split))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


# ---------------------------------------------------------------- batching

def load_split(entries, label_map, split, window_ms=200.0, hop_ms=10.0, normalize=True,
               trim=False, trim_ratio=0.05):
    """Read and frame every utterance of one split.

    Returns (utterances, skipped) where utterances is a list of
    ``(utterance_id, label, frames[n, window])`` in manifest order.
    """
    out, skipped = [], []
    for e in entries:
        if e.split != split:
            continue
        u = read_wav(e.path, speaker_id=e.speaker)
        if trim:
            u = energy_trim(u, trim_ratio)
        if normalize:
            u = normalize_amplitude(u)
        frames = frame_signal(u, window_ms, hop_ms)
        uid = str(e.path.name)
        if frames.shape[0] == 0:
            skipped.append(uid)
            continue
        out.append((uid, label_map[e.speaker], frames))
    return out, skipped


def flatten_utterances(utterances):
    frames = np.concatenate([f for _, _, f in utterances], axis=0)
    labels = np.concatenate([np.full(f.shape[0], lab, dtype=np.int64) for _, lab, f in utterances])
    ids = [uid for uid, _, f in utterances for _ in range(f.shape[0])]
    return frames, labels, ids


def batch_frames(frames, labels, batch_size, shuffle_seed=None, utterance_ids=None, rng=None):
    """Yield :class:`FrameBatch` objects; the last batch may be partial.

    Passing ``rng`` (a numpy Generator) instead of ``shuffle_seed`` lets a
    training loop draw a fresh permutation each epoch from one stream.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    frames = np.asarray(frames, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = frames.shape[0]
    if utterance_ids is None:
        utterance_ids = [""] * n
    if rng is None and shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield FrameBatch(frames[idx][:, None, :], labels[idx], [utterance_ids[i] for i in idx])
