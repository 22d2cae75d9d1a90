"""Feature frontend: log-mel filterbank, context stacking, mouth-ROI
pixel tracks, speaker one-hots, and model-input assembly.

Conventions (pinned so independent oracles can reproduce them):
  - 25 ms Hamming window, 10 ms hop, FFT = next power of two >= window.
  - Power spectrum |rfft|^2; triangular mel filters with corners mel-spaced
    over [mel_low, mel_high], triangles linear in Hz, area-unnormalized.
  - log(max(energy, log_floor)) with log_floor 1e-10.
  - Per-utterance mean/variance normalization is applied to log-mel before
    context stacking; ROI pixels are scaled to [0, 1] and left alone.
  - Context stacking replicates edge frames.
  - Video-to-audio mapping picks the video frame whose center timestamp is
    nearest the audio frame's center, ties toward the lower index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

ROI_ROWS = 60
ROI_COLS = 30
ROI_DIM = ROI_ROWS * ROI_COLS

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1

MODALITIES = ("A", "AV", "AI", "AVI")
VARIANTS = (None, "A", "B", "C")


@dataclass
class LogMelConfig:
    sample_rate: int = 8000
    window_length: float = 0.025
    hop_length: float = 0.010
    num_bins: int = 40
    fft_size: int | None = None  # None: next power of two >= window samples
    log_floor: float = 1e-10
    mel_low: float = 0.0
    mel_high: float | None = None  # None: Nyquist

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise DataError("sample_rate must be positive")
        if self.window_length <= 0 or self.hop_length <= 0:
            raise DataError("window_length and hop_length must be positive")
        if self.num_bins < 1:
            raise DataError("num_bins must be >= 1")
        if self.log_floor <= 0:
            raise DataError("log_floor must be positive")
        if self.fft_size is None:
            self.fft_size = 1 << (self.window_samples - 1).bit_length()
        if self.fft_size < self.window_samples:
            raise DataError(
                f"fft_size {self.fft_size} smaller than window "
                f"({self.window_samples} samples)"
            )
        if self.mel_high is None:
            self.mel_high = self.sample_rate / 2.0
        if not 0 <= self.mel_low < self.mel_high <= self.sample_rate / 2.0:
            raise DataError(
                f"mel band [{self.mel_low}, {self.mel_high}] outside "
                f"[0, {self.sample_rate / 2.0}]"
            )

    @property
    def window_samples(self) -> int:
        return int(round(self.window_length * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_length * self.sample_rate))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: LogMelConfig) -> np.ndarray:
    """num_bins x (fft_size//2 + 1) triangular weights."""
    corners = mel_to_hz(
        np.linspace(hz_to_mel(cfg.mel_low), hz_to_mel(cfg.mel_high), cfg.num_bins + 2)
    )
    bin_freqs = np.arange(cfg.fft_size // 2 + 1) * (cfg.sample_rate / cfg.fft_size)
    weights = np.zeros((cfg.num_bins, bin_freqs.size), dtype=np.float64)
    for m in range(cfg.num_bins):
        left, center, right = corners[m], corners[m + 1], corners[m + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        weights[m] = np.maximum(0.0, np.minimum(rising, falling))
    return weights


def mel_bin_centers(cfg: LogMelConfig) -> np.ndarray:
    """Apex frequency (Hz) of each triangular filter."""
    corners = mel_to_hz(
        np.linspace(hz_to_mel(cfg.mel_low), hz_to_mel(cfg.mel_high), cfg.num_bins + 2)
    )
    return corners[1:-1]


def frame_count(num_samples: int, cfg: LogMelConfig) -> int:
    if num_samples < cfg.window_samples:
        raise DataError(
            f"waveform of {num_samples} samples shorter than one window "
            f"({cfg.window_samples} samples)"
        )
    return 1 + (num_samples - cfg.window_samples) // cfg.hop_samples


def compute_logmel(samples, cfg: LogMelConfig) -> np.ndarray:
    """T x num_bins log mel-filterbank energies of a waveform."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise DataError("expected a 1-D waveform")
    T = frame_count(samples.shape[0], cfg)
    win, hop = cfg.window_samples, cfg.hop_samples
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    frames = samples[idx] * np.hamming(win)[None, :]
    spectrum = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    energies = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor))


def normalize_features(feat) -> np.ndarray:
    """Per-dimension zero mean, unit variance across the utterance.

    Dimensions with variance below 1e-10 are mapped to 0.
    """
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 2 or feat.shape[0] < 2:
        raise DataError("normalize_features needs a T x D matrix with T >= 2")
    mean = feat.mean(axis=0)
    var = feat.var(axis=0)
    out = np.zeros_like(feat)
    live = var >= 1e-10
    out[:, live] = (feat[:, live] - mean[live]) / np.sqrt(var[live])
    return out


def stack_context(feat, radius: int = 5) -> np.ndarray:
    """Row t becomes the concatenation of rows t-radius..t+radius, with
    edge rows replicated past the boundaries."""
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 2 or feat.shape[0] < 1:
        raise DataError("stack_context needs a nonempty T x D matrix")
    if radius < 0:
        raise DataError("radius must be >= 0")
    T = feat.shape[0]
    offsets = np.arange(-radius, radius + 1)
    idx = np.clip(np.arange(T)[:, None] + offsets[None, :], 0, T - 1)
    return feat[idx].reshape(T, -1)


@dataclass
class VisualTrack:
    frames: np.ndarray  # V x 60 x 30, values in [0, 1]
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (ROI_ROWS, ROI_COLS):
            raise DataError(
                f"visual track must be V x {ROI_ROWS} x {ROI_COLS}, "
                f"got {self.frames.shape}"
            )
        if self.frames.shape[0] < 1:
            raise DataError("visual track is empty")
        if self.fps <= 0:
            raise DataError("fps must be positive")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise DataError("visual track values must lie in [0, 1]")


def align_visual(track: VisualTrack, num_audio_frames: int, hop_length: float) -> np.ndarray:
    """num_audio_frames x 1800 matrix of flattened ROI pixels.

    Audio frame t (center (t+0.5)*hop) takes the video frame whose center
    (v+0.5)/fps is nearest; ties go to the lower index.
    """
    if num_audio_frames < 1:
        raise DataError("need at least one audio frame")
    if hop_length <= 0:
        raise DataError("hop_length must be positive")
    centers = (np.arange(num_audio_frames) + 0.5) * hop_length
    # nearest-with-ties-low is ceil(v* - 1/2) for real-valued v*
    v = np.ceil(centers * track.fps - 1.0).astype(np.int64)
    v = np.clip(v, 0, track.frames.shape[0] - 1)
    return track.frames[v].reshape(num_audio_frames, ROI_DIM)


def speaker_onehot(speaker_id: int, num_speakers: int) -> np.ndarray:
    if not 0 <= speaker_id < num_speakers:
        raise DataError(
            f"speaker_id {speaker_id} outside [0, {num_speakers})"
        )
    z = np.zeros(num_speakers, dtype=np.float64)
    z[speaker_id] = 1.0
    return z


@dataclass
class AssembledExample:
    input: np.ndarray  # acoustic [+ visual] [+ identity for variant A]
    identity: np.ndarray | None  # variant B/C: carried beside the trunk input
    modality: str
    variant: str | None
    label: int | None = None


def assemble_example(modality, variant, x, w=None, z=None, label=None) -> AssembledExample:
    """Concatenate per-branch features into one model input.

    Variant A fuses the identity at the input, so it lands inside
    ``input``; variants B and C keep it in ``identity`` for the network
    to fuse internally (embedding sublayer or late injection).
    """
    if modality not in MODALITIES:
        raise DataError(f"unknown modality {modality!r}")
    if variant not in VARIANTS:
        raise DataError(f"unknown variant {variant!r}")
    has_visual = "V" in modality
    has_identity = "I" in modality
    if (variant is not None) != has_identity:
        raise DataError(f"variant {variant!r} inconsistent with modality {modality!r}")
    x = np.asarray(x, dtype=np.float64).ravel()
    if has_visual:
        if w is None:
            raise DataError(f"modality {modality} requires visual features")
        w = np.asarray(w, dtype=np.float64).ravel()
        trunk = np.concatenate([x, w])
    else:
        if w is not None:
            raise DataError(f"modality {modality} takes no visual features")
        trunk = x
    if has_identity:
        if z is None:
            raise DataError(f"modality {modality} requires an identity vector")
        z = np.asarray(z, dtype=np.float64).ravel()
    elif z is not None:
        raise DataError(f"modality {modality} takes no identity vector")
    if variant == "A":
        return AssembledExample(
            input=np.concatenate([trunk, z]),
            identity=None,
            modality=modality,
            variant=variant,
            label=label,
        )
    return AssembledExample(
        input=trunk,
        identity=z if has_identity else None,
        modality=modality,
        variant=variant,
        label=label,
    )


def write_feat(path, matrix) -> None:
    """FEAT container: magic, u32 version, u32 rows, u32 cols, f32 LE
    row-major payload. Bit-exact round-trip for float32 data."""
    matrix = np.ascontiguousarray(np.asarray(matrix), dtype="<f4")
    if matrix.ndim != 2:
        raise DataError("FEAT files hold 2-D matrices")
    with Path(path).open("wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<III", FEAT_VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes())


def read_feat(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated FEAT header")
    if blob[:4] != FEAT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {FEAT_MAGIC!r}")
    version, rows, cols = struct.unpack("<III", blob[4:16])
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: unsupported FEAT version {version}")
    expected = 16 + 4 * rows * cols
    if len(blob) != expected:
        raise FormatError(
            f"{path}: size {len(blob)} does not match header "
            f"({rows}x{cols} floats, {expected} bytes)"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    return data.reshape(rows, cols).astype(np.float32)


def write_roi_track(path, frames) -> None:
    """Single-file ROI track: u32 LE frame count, then per frame 1800
    raw grayscale bytes, row-major."""
    frames = np.ascontiguousarray(np.asarray(frames, dtype=np.uint8))
    if frames.ndim != 3 or frames.shape[1:] != (ROI_ROWS, ROI_COLS):
        raise DataError(
            f"ROI frames must be V x {ROI_ROWS} x {ROI_COLS}, got {frames.shape}"
        )
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<I", frames.shape[0]))
        fh.write(frames.tobytes())


def read_roi_track(path) -> np.ndarray:
    """Load a single-file or directory ROI track as V x 60 x 30 uint8."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.is_file())
        if not files:
            raise DataError(f"{path}: empty ROI directory")
        frames = []
        for p in files:
            raw = p.read_bytes()
            if len(raw) != ROI_DIM:
                raise FormatError(
                    f"{p}: ROI frame is {len(raw)} bytes, expected {ROI_DIM}"
                )
            frames.append(np.frombuffer(raw, dtype=np.uint8).reshape(ROI_ROWS, ROI_COLS))
        return np.stack(frames)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read ROI track {path}: {exc}") from exc
    if len(blob) < 4:
        raise FormatError(f"{path}: truncated ROI header")
    (count,) = struct.unpack("<I", blob[:4])
    if len(blob) != 4 + count * ROI_DIM:
        raise FormatError(
            f"{path}: size {len(blob)} does not match {count} frames of {ROI_DIM} bytes"
        )
    if count < 1:
        raise FormatError(f"{path}: ROI track has no frames")
    data = np.frombuffer(blob, dtype=np.uint8, offset=4)
    return data.reshape(count, ROI_ROWS, ROI_COLS).copy()


def load_visual_track(path, fps: float) -> VisualTrack:
    return VisualTrack(frames=read_roi_track(path).astype(np.float64) / 255.0, fps=fps)
