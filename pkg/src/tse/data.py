"""Two-speaker mixture construction and a synthetic-speaker generator.

Synthetic speakers are harmonic sources with speaker-specific fundamental
ranges, formant-like resonances, and amplitude modulation; distinct
speakers get disjoint fundamental bands. Utterances are snapped to the
16-bit PCM grid before mixing so that mixture = target + interferer holds
sample-exactly both in memory and through WAV round trips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import dsp

MANIFEST_FORMAT = 1


class DataError(ValueError):
    """Invalid dataset request or manifest contents."""


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    index: int
    f0_range: tuple[float, float]          # Hz, disjoint across speakers
    formants: tuple[tuple[float, float], ...]  # (center Hz, bandwidth Hz)
    am_rate: float                         # amplitude-modulation rate, Hz


@dataclass
class MixtureSample:
    sample_id: str
    mixture: np.ndarray
    target: np.ndarray
    reference: np.ndarray
    target_speaker_id: str
    interferer_speaker_id: str


@dataclass
class Dataset:
    sample_rate: int
    duration: float
    train: list[MixtureSample] = field(default_factory=list)
    val: list[MixtureSample] = field(default_factory=list)
    test: list[MixtureSample] = field(default_factory=list)

    def split(self, name: str) -> list[MixtureSample]:
        try:
            return getattr(self, name)
        except AttributeError:
            raise DataError(f"unknown split {name!r}") from None


def make_speakers(count: int, seed: int, sample_rate: int = 8000) -> list[SyntheticSpeaker]:
    """Deterministic speaker population with disjoint fundamental bands."""
    if count < 2:
        raise DataError("need at least 2 speakers")
    rng = np.random.default_rng([seed, 0xA11CE])
    lo_hz, hi_hz = 90.0, 300.0
    band = (hi_hz - lo_hz) / count
    nyquist = sample_rate / 2.0
    speakers = []
    for i in range(count):
        f0_lo = lo_hz + i * band
        f0_hi = f0_lo + 0.7 * band  # gap between neighboring bands
        f1 = rng.uniform(350.0, min(900.0, 0.35 * nyquist))
        f2 = rng.uniform(1100.0, 0.7 * nyquist)
        formants = ((f1, rng.uniform(60.0, 140.0)), (f2, rng.uniform(120.0, 260.0)))
        speakers.append(SyntheticSpeaker(
            speaker_id=f"spk{i:02d}", index=i, f0_range=(f0_lo, f0_hi),
            formants=formants, am_rate=rng.uniform(2.0, 7.0)))
    return speakers


def _resonator(signal: np.ndarray, center: float, bandwidth: float,
               sample_rate: int, gain: float) -> np.ndarray:
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2.0 * np.pi * center / sample_rate
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    # normalize to unit magnitude response at the resonance
    response = abs(1.0 / np.polyval(a[::-1], np.exp(-1j * theta)))
    return lfilter([gain / response], a, signal)


def synth_utterance(speaker: SyntheticSpeaker, duration: float,
                    sample_rate: int, seed: int) -> np.ndarray:
    """Harmonic utterance for one speaker; deterministic in (speaker, seed).

    Fundamental glides within the speaker's band, harmonics roll off as
    1/h, formant resonators and slow amplitude modulation are applied, and
    the result is peak-normalized to 0.5.
    """
    if duration <= 0:
        raise DataError("duration must be positive")
    rng = np.random.default_rng([speaker.index, seed, 0x5EED])
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    f0_lo, f0_hi = speaker.f0_range
    f0 = np.linspace(rng.uniform(f0_lo, f0_hi), rng.uniform(f0_lo, f0_hi), n)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate

    n_harmonics = max(3, int(0.9 * (sample_rate / 2.0) / f0_hi))
    source = np.zeros(n)
    for h in range(1, n_harmonics + 1):
        source += (1.0 / h) * np.sin(h * phase + rng.uniform(0.0, 2.0 * np.pi))

    voiced = 0.8 * source
    for center, bandwidth in speaker.formants:
        voiced += _resonator(source, center, bandwidth, sample_rate, gain=1.2)

    am = 1.0 - 0.5 * (0.5 + 0.5 * np.sin(2.0 * np.pi * speaker.am_rate * t
                                         + rng.uniform(0.0, 2.0 * np.pi)))
    voiced *= am
    ramp = min(n // 8, int(0.01 * sample_rate) + 1)
    voiced[:ramp] *= np.linspace(0.0, 1.0, ramp)
    voiced[-ramp:] *= np.linspace(1.0, 0.0, ramp)

    return 0.5 * voiced / np.max(np.abs(voiced))


def snap_to_pcm_grid(x: np.ndarray) -> np.ndarray:
    """Quantize onto the 16-bit grid (i / 32768) used by WAV files.

    Truncation keeps every |x| <= 0.5 source within +/-16383 steps, so
    summing two sources never leaves the representable grid.
    """
    return np.trunc(x * 32767.0) / dsp.PCM_SCALE


def mix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sample-wise sum of two equal-length waveforms, no rescaling."""
    if a.shape != b.shape:
        raise DataError(f"length mismatch: {a.shape} vs {b.shape}")
    return a + b


def build_dataset(num_speakers: int = 12, utterances_per_speaker: int = 20,
                  seed: int = 0, duration: float = 2.0, sample_rate: int = 8000,
                  train_count: int = 96, val_count: int = 16,
                  test_count: int = 24) -> Dataset:
    """Generate train/val/test mixtures from disjoint speaker populations.

    Train and val mixtures use one speaker set; test mixtures use a
    disjoint set (unseen-speaker evaluation). The reference is always an
    utterance of the target speaker distinct from both mixture utterances.
    The whole dataset is a pure function of the arguments.
    """
    if num_speakers < 2:
        raise DataError("need at least 2 speakers")
    if utterances_per_speaker < 2:
        raise DataError("need at least 2 utterances per speaker for references")
    speakers = make_speakers(num_speakers, seed, sample_rate)
    n_test_speakers = max(2, num_speakers // 3)
    if num_speakers - n_test_speakers < 2:
        raise DataError("too few speakers to split train and test populations")
    train_speakers = speakers[:-n_test_speakers]
    test_speakers = speakers[-n_test_speakers:]

    utts = {
        spk.speaker_id: [snap_to_pcm_grid(synth_utterance(spk, duration, sample_rate,
                                                          seed=seed * 1000 + u))
                         for u in range(utterances_per_speaker)]
        for spk in speakers
    }

    rng = np.random.default_rng([seed, 0xD47A])

    def draw_samples(pool: list[SyntheticSpeaker], count: int, tag: str) -> list[MixtureSample]:
        samples = []
        for i in range(count):
            tgt_spk, int_spk = rng.choice(len(pool), size=2, replace=False)
            tgt_spk, int_spk = pool[tgt_spk], pool[int_spk]
            u_tgt = int(rng.integers(utterances_per_speaker))
            u_int = int(rng.integers(utterances_per_speaker))
            u_ref = int(rng.integers(utterances_per_speaker - 1))
            if u_ref >= u_tgt:
                u_ref += 1  # reference differs from the target utterance
            target = utts[tgt_spk.speaker_id][u_tgt]
            interferer = utts[int_spk.speaker_id][u_int]
            samples.append(MixtureSample(
                sample_id=f"{tag}_{i:04d}",
                mixture=mix(target, interferer),
                target=target.copy(),
                reference=utts[tgt_spk.speaker_id][u_ref].copy(),
                target_speaker_id=tgt_spk.speaker_id,
                interferer_speaker_id=int_spk.speaker_id))
        return samples

    return Dataset(
        sample_rate=sample_rate, duration=duration,
        train=draw_samples(train_speakers, train_count, "train"),
        val=draw_samples(train_speakers, val_count, "val"),
        test=draw_samples(test_speakers, test_count, "test"))


def build_dataset_from_dirs(root, seed: int = 0, duration: float = 4.0,
                            sample_rate: int = 16000, train_count: int = 96,
                            val_count: int = 16, test_count: int = 24) -> Dataset:
    """Build mixtures from a real corpus laid out as one directory per
    speaker containing mono 16-bit WAV files at the expected rate."""
    root = Path(root)
    speaker_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if len(speaker_dirs) < 4:
        raise DataError(f"need at least 4 speaker directories under {root}")
    n_samples = int(round(duration * sample_rate))

    utts: dict[str, list[np.ndarray]] = {}
    for d in speaker_dirs:
        clips = []
        for wav_path in sorted(d.glob("*.wav")):
            rate, samples = dsp.read_wav(wav_path)
            if rate != sample_rate:
                raise DataError(f"{wav_path}: expected {sample_rate} Hz, got {rate}")
            if samples.size >= n_samples:
                clips.append(samples[:n_samples])
        if len(clips) >= 2:
            utts[d.name] = clips
    names = sorted(utts)
    if len(names) < 4:
        raise DataError("need at least 4 speakers with 2+ usable utterances")

    n_test = max(2, len(names) // 3)
    rng = np.random.default_rng([seed, 0xD47A])

    def draw(pool: list[str], count: int, tag: str) -> list[MixtureSample]:
        samples = []
        for i in range(count):
            a, b = rng.choice(len(pool), size=2, replace=False)
            tgt, other = pool[a], pool[b]
            u_tgt = int(rng.integers(len(utts[tgt])))
            u_int = int(rng.integers(len(utts[other])))
            u_ref = int(rng.integers(len(utts[tgt]) - 1))
            if u_ref >= u_tgt:
                u_ref += 1
            target = snap_to_pcm_grid(utts[tgt][u_tgt])
            interferer = snap_to_pcm_grid(utts[other][u_int])
            samples.append(MixtureSample(
                sample_id=f"{tag}_{i:04d}", mixture=mix(target, interferer),
                target=target, reference=snap_to_pcm_grid(utts[tgt][u_ref]),
                target_speaker_id=tgt, interferer_speaker_id=other))
        return samples

    return Dataset(
        sample_rate=sample_rate, duration=duration,
        train=draw(names[:-n_test], train_count, "train"),
        val=draw(names[:-n_test], val_count, "val"),
        test=draw(names[-n_test:], test_count, "test"))


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write WAVs plus a JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    manifest = {"format": MANIFEST_FORMAT, "sample_rate": dataset.sample_rate,
                "duration": dataset.duration, "splits": {}}
    for split in ("train", "val", "test"):
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for sample in dataset.split(split):
            paths = {}
            for role in ("mixture", "target", "reference"):
                rel = f"{split}/{sample.sample_id}_{role}.wav"
                dsp.write_wav(out_dir / rel, dataset.sample_rate, getattr(sample, role))
                paths[role] = rel
            entries.append({"id": sample.sample_id,
                            "target_speaker": sample.target_speaker_id,
                            "interferer_speaker": sample.interferer_speaker_id,
                            **paths})
        manifest["splits"][split] = entries
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def load_manifest(manifest_path) -> dict:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"unsupported manifest format {manifest.get('format')!r}")
    manifest["root"] = str(manifest_path.parent)
    return manifest


def load_split(manifest: dict, split: str) -> list[MixtureSample]:
    root = Path(manifest["root"])
    rate = manifest["sample_rate"]
    samples = []
    for entry in manifest["splits"].get(split, []):
        waves = {}
        for role in ("mixture", "target", "reference"):
            wav_rate, wave = dsp.read_wav(root / entry[role])
            if wav_rate != rate:
                raise DataError(f"{entry[role]}: rate {wav_rate} != manifest rate {rate}")
            waves[role] = wave
        samples.append(MixtureSample(
            sample_id=entry["id"], target_speaker_id=entry["target_speaker"],
            interferer_speaker_id=entry["interferer_speaker"], **waves))
    return samples
