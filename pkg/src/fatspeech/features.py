"""Waveform framing, log-mel spectrograms, and the FATF feature container.

Frames are 25 ms Hann windows hopped every 10 ms. The filterbank uses the
standard mel scale mel(f) = 2595*log10(1 + f/700) with triangular filters from
0 Hz to Nyquist, and log compression floors the filter outputs at 1e-10 so
silence maps to ln(1e-10) instead of -inf.

FATF files are little-endian: 4-byte magic "FATF", u32 version (currently 1),
u32 frame count, u32 feature dim, then frame-major float32 payload. Round
trips are bit-exact for float32 input.
"""

import struct
import wave as wave_mod

import numpy as np

from .errors import DataError, FormatError, ShapeError

FATF_MAGIC = b"FATF"
FATF_VERSION = 1
LOG_FLOOR = 1e-10
WIN_MS = 25
HOP_MS = 10


def frame_signal(signal, sample_rate, win_ms=WIN_MS, hop_ms=HOP_MS):
    """Slice a mono waveform into Hann-windowed frames.

    Returns an array of shape (n_frames, win) with
    n_frames = 1 + floor((len - win) / hop); a signal shorter than one window
    yields zero frames.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise ShapeError("frame_signal", signal.shape, detail="expected mono 1-D signal")
    win = int(round(sample_rate * win_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if len(signal) < win:
        return np.zeros((0, win))
    n = 1 + (len(signal) - win) // hop
    window = np.hanning(win)
    frames = np.empty((n, win))
    for i in range(n):
        frames[i] = signal[i * hop:i * hop + win] * window
    return frames


def mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def inverse_mel_scale(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate):
    """Triangular filters (n_mels, n_fft//2 + 1) spanning 0 Hz to Nyquist."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(mel_scale(0.0), mel_scale(nyquist), n_mels + 2)
    hz_points = inverse_mel_scale(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    bank = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, mid, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        bank[m] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def filter_centers(n_mels, sample_rate):
    """Center frequency (Hz) of each mel filter; monotonically increasing."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(mel_scale(0.0), mel_scale(nyquist), n_mels + 2)
    return inverse_mel_scale(mel_points[1:-1])


def log_mel_spectrogram(signal, sample_rate, n_mels=80):
    """Log-mel features (T, n_mels) from a mono waveform."""
    frames = frame_signal(signal, sample_rate)
    win = frames.shape[1] if frames.size else int(round(sample_rate * WIN_MS / 1000.0))
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    if frames.shape[0] == 0:
        return np.zeros((0, n_mels))
    spectrum = np.fft.rfft(frames, n=n_fft, axis=1)
    power = np.abs(spectrum) ** 2
    bank = mel_filterbank(n_mels, n_fft, sample_rate)
    mel_power = power @ bank.T
    return np.log(np.maximum(mel_power, LOG_FLOOR))


def read_wav(path):
    """Load a 16-bit PCM mono WAV file as (float waveform in [-1, 1), rate)."""
    try:
        with wave_mod.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio, got "
                                f"{f.getnchannels()} channels")
            if f.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM, got "
                                f"{8 * f.getsampwidth()}-bit")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave_mod.Error, EOFError) as e:
        raise FormatError(f"{path}: not a readable WAV file ({e})") from e
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def write_wav(path, signal, sample_rate):
    """Write a float waveform in [-1, 1] as 16-bit PCM mono (test fixture aid)."""
    pcm = np.clip(np.asarray(signal) * 32768.0, -32768, 32767).astype("<i2")
    with wave_mod.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def save_features(path, feats):
    feats = np.asarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise ShapeError("save_features", feats.shape, detail="expected (T, d)")
    t, d = feats.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", FATF_MAGIC, FATF_VERSION, t, d))
        f.write(feats.tobytes())


def load_features(path):
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise FormatError(f"{path}: truncated header")
        magic, version, t, d = struct.unpack("<4sIII", header)
        if magic != FATF_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != FATF_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = f.read(4 * t * d)
        if len(payload) != 4 * t * d:
            raise FormatError(f"{path}: truncated payload "
                              f"({len(payload)} of {4 * t * d} bytes)")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d).copy()


def compute_cmvn(feature_arrays):
    """Per-dimension mean and standard deviation over a list of (T, d) arrays."""
    stacked = np.concatenate([np.asarray(a, dtype=np.float64) for a in feature_arrays])
    if stacked.size == 0:
        raise DataError("compute_cmvn: no frames to normalize over")
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return mean, std


def apply_cmvn(feats, mean, std):
    return (np.asarray(feats) - mean) / std


def save_cmvn(path, mean, std):
    save_features(path, np.stack([mean, std]))


def load_cmvn(path):
    stats = load_features(path)
    if stats.shape[0] != 2:
        raise FormatError(f"{path}: expected 2 rows (mean, std), got {stats.shape[0]}")
    return stats[0].astype(np.float64), stats[1].astype(np.float64)
