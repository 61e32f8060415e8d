"""Audio ingestion and synthetic binaural scene generation.

Scenes are built from a bank of mono 16 kHz source WAVs: a speech and a
noise source are convolved with synthetic binaural room impulse
responses (spherical-head direct path plus exponentially decaying
diffuse tail) and mixed at a target better-ear SNR.  Every generator is
deterministic under its seed.  The six per-scene WAVs (noisy, clean,
noise, per ear) satisfy noisy = clean + noise sample-exactly.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve

SAMPLE_RATE = 16000
SPEED_OF_SOUND = 343.0
EAR_SPACING = 0.18      # m, spherical-head approximation
MAX_ILD_DB = 6.0


@dataclass
class AudioBuffer:
    samples: np.ndarray   # (n,) mono or (n, 2) stereo
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim not in (1, 2):
            raise ValueError("samples must be 1-D (mono) or 2-D (stereo)")
        if self.samples.ndim == 2 and self.samples.shape[1] not in (1, 2):
            raise ValueError("only 1 or 2 channels supported")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")
        if np.max(np.abs(self.samples), initial=0.0) > 4.0:
            raise ValueError("samples exceed the +-4 headroom bound")

    @property
    def num_channels(self):
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    def channel(self, i):
        return self.samples if self.samples.ndim == 1 else self.samples[:, i]


def load_wav(path):
    """Read a 16 kHz PCM16 or float32 WAV into an AudioBuffer."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as e:
        raise ValueError(f"{path}: unsupported WAV encoding ({e})") from e
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: unsupported sample rate {rate} (expected {SAMPLE_RATE})")
    if data.ndim == 2 and data.shape[1] > 2:
        raise ValueError(f"{path}: unsupported channel count {data.shape[1]}")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype} "
                         "(expected pcm16 or float32)")
    return AudioBuffer(samples, rate)


def save_wav(path, buffer, fmt="float32"):
    """Write an AudioBuffer as PCM16 (rounded, no dithering) or float32."""
    samples = buffer.samples
    if fmt == "float32":
        wavfile.write(path, buffer.sample_rate_hz, samples.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(samples, -1.0, 1.0)
        wavfile.write(path, buffer.sample_rate_hz,
                      np.round(clipped * 32767.0).astype(np.int16))
    else:
        raise ValueError(f"unsupported format {fmt!r} (pcm16 or float32)")


def woodworth_itd(azimuth_deg):
    """Interaural time difference (s), positive when the right ear leads."""
    theta = np.deg2rad(azimuth_deg)
    # fold rear hemisphere onto the front (symmetric head)
    lateral = np.arcsin(np.clip(np.sin(theta), -1.0, 1.0))
    radius = EAR_SPACING / 2.0
    return radius / SPEED_OF_SOUND * (lateral + np.sin(lateral))


def _fractional_delay_kernel(delay_samples, length=81):
    """Hann-windowed sinc kernel placing a unit impulse at a fractional delay."""
    center = (length - 1) // 2
    n = np.arange(length)
    x = n - center - (delay_samples - np.floor(delay_samples))
    kernel = np.sinc(x) * (0.5 + 0.5 * np.cos(np.pi * (n - center) / center))
    return kernel, int(np.floor(delay_samples)) - center


def synth_brir(seed, rt60_s, source_azimuth_deg, distance_m,
               sample_rate_hz=SAMPLE_RATE):
    """Synthetic binaural room impulse response pair (left, right).

    Direct path: fractional-delay impulse with Woodworth ITD and an
    azimuth-dependent level difference up to 6 dB; tail: per-ear
    independent exponentially decaying noise reaching -60 dB at rt60.
    Normalized so the better-ear direct-path peak is 1.
    """
    if not (0.2 <= rt60_s <= 0.4):
        raise ValueError(f"rt60 {rt60_s} outside [0.2, 0.4]")
    if not (-180.0 <= source_azimuth_deg <= 180.0):
        raise ValueError("azimuth must lie in [-180, 180] degrees")
    if distance_m < 0.2:
        raise ValueError("distance must be at least 0.2 m")

    rng = np.random.default_rng(seed)
    itd = woodworth_itd(source_azimuth_deg)
    base_delay = distance_m / SPEED_OF_SOUND
    delays = {
        "left": (base_delay + itd / 2.0) * sample_rate_hz,
        "right": (base_delay - itd / 2.0) * sample_rate_hz,
    }
    lateral = np.sin(np.deg2rad(source_azimuth_deg))
    ild_gain = {
        "left": 10.0 ** (-MAX_ILD_DB / 2.0 * lateral / 20.0),
        "right": 10.0 ** (+MAX_ILD_DB / 2.0 * lateral / 20.0),
    }

    length = int((base_delay + rt60_s + 0.05) * sample_rate_hz)
    direct_amp = 1.0 / max(distance_m, 0.2)
    tail_t0 = base_delay + 0.002
    decay = np.exp(-6.9077552789821 * np.maximum(
        np.arange(length) / sample_rate_hz - tail_t0, 0.0) / rt60_s)

    out = {}
    peaks = {}
    for ear in ("left", "right"):
        h = np.zeros(length)
        kernel, offset = _fractional_delay_kernel(delays[ear])
        start = offset
        seg = kernel * direct_amp * ild_gain[ear]
        lo = max(0, start)
        hi = min(length, start + len(kernel))
        h[lo:hi] += seg[lo - start:hi - start]
        peaks[ear] = np.max(np.abs(h))
        # tail level independent of source distance: direct-to-reverberant
        # ratio falls with distance, ~0.6 dB at 1 m for rt60 = 0.3 s
        tail = rng.standard_normal(length) * 0.05 * ild_gain[ear]
        tail *= decay * (np.arange(length) / sample_rate_hz >= tail_t0)
        h += tail
        out[ear] = h
    scale = 1.0 / max(peaks["left"], peaks["right"])
    return (AudioBuffer(out["left"] * scale, sample_rate_hz),
            AudioBuffer(out["right"] * scale, sample_rate_hz))


def convolve_brir(dry, brir_left, brir_right):
    """Full linear convolution of a mono source with a BRIR pair -> stereo."""
    if dry.num_channels != 1:
        raise ValueError("dry source must be mono")
    for brir in (brir_left, brir_right):
        if brir.sample_rate_hz != dry.sample_rate_hz:
            raise ValueError("sample rate mismatch between source and BRIR")
    x = dry.channel(0)
    left = fftconvolve(x, brir_left.channel(0))
    right = fftconvolve(x, brir_right.channel(0))
    n = len(x) + len(brir_left.channel(0)) - 1
    return AudioBuffer(np.stack([left[:n], right[:n]], axis=1), dry.sample_rate_hz)


def mix_at_better_ear_snr(speech, noise, snr_db):
    """Scale the noise so the better (higher-SNR) ear hits the target SNR.

    Returns (noisy stereo buffer, noise gain).
    """
    if speech.samples.shape != noise.samples.shape:
        raise ValueError("speech and noise must have equal shapes")
    if speech.num_channels != 2:
        raise ValueError("better-ear mixing expects stereo buffers")
    ratios = []
    for ch in range(2):
        es = float(np.sum(speech.channel(ch) ** 2, dtype=np.float64))
        en = float(np.sum(noise.channel(ch) ** 2, dtype=np.float64))
        if es <= 0.0 or en <= 0.0:
            raise ValueError(f"zero-energy {'speech' if es <= 0 else 'noise'} in channel {ch}")
        ratios.append(es / en)
    # the ear with the larger speech-to-noise energy ratio sets the gain
    gain = float(np.sqrt(max(ratios) * 10.0 ** (-snr_db / 10.0)))
    noisy = speech.samples + gain * noise.samples
    return AudioBuffer(noisy, speech.sample_rate_hz), gain


def _segment(source, length, rng):
    """Seeded fixed-length crop (looped if the source is shorter)."""
    x = source.channel(0)
    if len(x) < length:
        reps = int(np.ceil(length / len(x)))
        x = np.tile(x, reps)
    start = int(rng.integers(0, len(x) - length + 1))
    return AudioBuffer(x[start:start + length], source.sample_rate_hz)


def build_dataset(count, snr_range_db, seed, sources_dir, out_dir,
                  duration_s=2.0):
    """Generate ``count`` scenes and write WAVs plus a JSONL manifest.

    Sources are drawn from ``sources_dir``/speech and ``sources_dir``/noise.
    Speech sits within +-30 degrees azimuth; the noise source is at least
    1 m away at any azimuth; rt60 is uniform in [0.2, 0.4] s.  Returns
    the manifest path.
    """
    sources_dir = Path(sources_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    speech_files = sorted((sources_dir / "speech").glob("*.wav"))
    noise_files = sorted((sources_dir / "noise").glob("*.wav"))
    if count > 0 and (not speech_files or not noise_files):
        raise FileNotFoundError(
            f"no source WAVs under {sources_dir}/speech and {sources_dir}/noise")

    snr_lo, snr_hi = snr_range_db
    length = int(round(duration_s * SAMPLE_RATE))
    manifest_path = out_dir / "manifest.jsonl"
    records = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        speech_src = load_wav(speech_files[int(rng.integers(len(speech_files)))])
        noise_src = load_wav(noise_files[int(rng.integers(len(noise_files)))])
        snr_db = float(rng.uniform(snr_lo, snr_hi))
        speech_brirs = synth_brir(int(rng.integers(2 ** 31)),
                                  float(rng.uniform(0.2, 0.4)),
                                  float(rng.uniform(-30.0, 30.0)),
                                  float(rng.uniform(0.8, 2.0)))
        noise_brirs = synth_brir(int(rng.integers(2 ** 31)),
                                 float(rng.uniform(0.2, 0.4)),
                                 float(rng.uniform(-180.0, 180.0)),
                                 float(rng.uniform(1.0, 3.0)))

        dry_speech = _segment(speech_src, length, rng)
        dry_noise = _segment(noise_src, length, rng)
        wet_speech = convolve_brir(dry_speech, *speech_brirs)
        wet_noise = convolve_brir(dry_noise, *noise_brirs)
        clean = AudioBuffer(wet_speech.samples[:length], SAMPLE_RATE)
        noise = AudioBuffer(wet_noise.samples[:length], SAMPLE_RATE)

        # keep headroom: scale the scene so the clean peak is modest
        peak = float(np.max(np.abs(clean.samples)))
        norm = 0.25 / max(peak, 1e-9)
        clean = AudioBuffer(clean.samples * norm, SAMPLE_RATE)
        noise = AudioBuffer(noise.samples * norm, SAMPLE_RATE)
        _, gain = mix_at_better_ear_snr(clean, noise, snr_db)
        # quantize components first so noisy = clean + noise holds exactly
        # in the stored float32 streams
        clean = AudioBuffer(clean.samples.astype(np.float32), SAMPLE_RATE)
        scaled_noise = AudioBuffer((gain * noise.samples).astype(np.float32),
                                   SAMPLE_RATE)
        noisy = AudioBuffer(clean.samples + scaled_noise.samples, SAMPLE_RATE)

        scene_id = f"scene{i:05d}"
        paths = {}
        for stem, buf, ch in (("noisy_l", noisy, 0), ("noisy_r", noisy, 1),
                              ("clean_l", clean, 0), ("clean_r", clean, 1),
                              ("noise_l", scaled_noise, 0), ("noise_r", scaled_noise, 1)):
            path = out_dir / f"{scene_id}_{stem}.wav"
            try:
                save_wav(path, AudioBuffer(buf.channel(ch).astype(np.float32),
                                           SAMPLE_RATE))
            except OSError as e:
                raise OSError(f"scene {scene_id}: cannot write {path}: {e}") from e
            paths[stem] = str(path)
        records.append({"id": scene_id, **paths, "snr_db": snr_db, "seed": seed})

    with open(manifest_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path


def synth_source_library(out_dir, n_speech=8, n_noise=6, seed=0, duration_s=4.0):
    """Generate a deterministic bank of speech-like and noise-like sources.

    Speech-like: harmonic complexes with drifting pitch, formant-style
    spectral shaping, and syllabic amplitude modulation with pauses.
    Noise-like: white, pink, and slowly modulated variants.
    """
    out_dir = Path(out_dir)
    (out_dir / "speech").mkdir(parents=True, exist_ok=True)
    (out_dir / "noise").mkdir(parents=True, exist_ok=True)
    n = int(duration_s * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE

    for i in range(n_speech):
        rng = np.random.default_rng([seed, 1000 + i])
        f0 = rng.uniform(100.0, 220.0)
        drift = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t
                                    + rng.uniform(0, 2 * np.pi))
        phase = np.cumsum(f0 * drift) / SAMPLE_RATE
        sig = np.zeros(n)
        for k in range(1, 14):
            formant = np.exp(-((k * f0 - 500.0) / 700.0) ** 2) \
                + 0.6 * np.exp(-((k * f0 - 1500.0) / 900.0) ** 2)
            sig += (formant / k) * np.sin(2 * np.pi * k * phase
                                          + rng.uniform(0, 2 * np.pi))
        syllable = 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(2.5, 4.5) * t
                                     + rng.uniform(0, 2 * np.pi)))
        gaps = (np.sin(2 * np.pi * rng.uniform(0.4, 0.9) * t
                       + rng.uniform(0, 2 * np.pi)) > -0.7).astype(float)
        sig *= syllable * gaps
        sig += 0.01 * rng.standard_normal(n) * syllable
        sig *= 0.5 / max(np.max(np.abs(sig)), 1e-9)
        save_wav(out_dir / "speech" / f"speech{i:03d}.wav",
                 AudioBuffer(sig.astype(np.float32)))

    for i in range(n_noise):
        rng = np.random.default_rng([seed, 2000 + i])
        white = rng.standard_normal(n)
        kind = i % 3
        if kind == 0:
            sig = white
        elif kind == 1:
            spec = np.fft.rfft(white)
            freq = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
            spec[1:] /= np.sqrt(freq[1:] / freq[1])
            sig = np.fft.irfft(spec, n)
        else:
            mod = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t
                                     + rng.uniform(0, 2 * np.pi))
            sig = white * mod
        sig *= 0.5 / max(np.max(np.abs(sig)), 1e-9)
        save_wav(out_dir / "noise" / f"noise{i:03d}.wav",
                 AudioBuffer(sig.astype(np.float32)))
    return out_dir
