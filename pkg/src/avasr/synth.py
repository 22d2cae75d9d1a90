"""Synthetic corpus generator.

Renders grammar-legal word sequences as concatenated per-phoneme tones so
the whole pipeline (features, training, decoding, scoring) can be
exercised end to end without any external corpus. Each speaker gets a
distinct base frequency plus a constant high-band signature tone, so
speakers are acoustically separable and speaker identity is learnable
from mixed audio. Mouth images are gaussian blobs whose position encodes
the current phoneme.

Alignments are exact by construction: an utterance with T frames is
rendered with win + (T-1)*hop samples, so the feature frontend recovers
exactly T frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import write_wav
from .corpus import Manifest, Utterance, save_alignment, write_manifest
from .decoder import Grammar, Lexicon, save_grammar, save_lexicon
from .errors import ConfigError, DataError
from .features import ROI_COLS, ROI_ROWS, write_roi_track

DEFAULT_GRAMMAR = Grammar(
    slots=[
        ("action", ["go", "stop", "turn", "wait"]),
        ("color", ["red", "blue", "green"]),
        ("digit", ["one", "two", "three", "four"]),
    ]
)

# Two phonemes per word keeps slot segmentations unambiguous; ids cover
# the full 10-phoneme inventory.
DEFAULT_LEXICON = Lexicon(
    pron={
        "go": (0, 1),
        "stop": (2, 3),
        "turn": (4, 5),
        "wait": (6, 7),
        "red": (8, 9),
        "blue": (1, 4),
        "green": (3, 6),
        "one": (5, 0),
        "two": (7, 2),
        "three": (9, 8),
        "four": (2, 6),
    }
)


@dataclass
class SyntheticSpec:
    """Parameters of the generated corpus.

    Speaker timbre is (base_freqs[s], formant_freqs[s]); phoneme p of
    speaker s is a tone at base_freqs[s] + phoneme_step * p overlaid with
    the speaker's constant signature tone.
    """

    num_speakers: int = 4
    utterances_per_speaker: int = 130
    sample_rate: int = 8000
    window_length: float = 0.025
    hop_length: float = 0.010
    video_fps: float = 25.0
    frames_per_phoneme: tuple[int, int] = (6, 12)
    phoneme_step: float = 300.0
    base_freqs: list[float] = field(default_factory=list)
    formant_freqs: list[float] = field(default_factory=list)
    tone_amplitude: float = 0.3
    formant_amplitude: float = 0.12
    grammar: Grammar = field(default_factory=lambda: DEFAULT_GRAMMAR)
    lexicon: Lexicon = field(default_factory=lambda: DEFAULT_LEXICON)
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ConfigError("num_speakers must be >= 1")
        if self.utterances_per_speaker < 1:
            raise ConfigError("utterances_per_speaker must be >= 1")
        if not self.base_freqs:
            # Offsets spread evenly inside one phoneme step so no two
            # speakers ever share a tone frequency for any phoneme pair.
            spread = self.phoneme_step / self.num_speakers
            self.base_freqs = [250.0 + spread * s for s in range(self.num_speakers)]
        if not self.formant_freqs:
            self.formant_freqs = [3300.0 + 80.0 * s for s in range(self.num_speakers)]
        if len(self.base_freqs) != self.num_speakers:
            raise ConfigError(
                f"base_freqs has {len(self.base_freqs)} entries for "
                f"{self.num_speakers} speakers"
            )
        if len(self.formant_freqs) != self.num_speakers:
            raise ConfigError(
                f"formant_freqs has {len(self.formant_freqs)} entries for "
                f"{self.num_speakers} speakers"
            )
        if len(set(self.base_freqs)) != self.num_speakers:
            raise ConfigError("speaker base frequencies must be distinct")
        tones: dict[int, int] = {}
        for s, base in enumerate(self.base_freqs):
            for p in range(self.num_phonemes):
                key = round((base + self.phoneme_step * p) * 1e6)
                other = tones.setdefault(key, s)
                if other != s:
                    raise ConfigError(
                        f"speakers {other} and {s} share the tone at "
                        f"{key / 1e6:.1f} Hz; identity would not resolve it"
                    )
        lo, hi = self.frames_per_phoneme
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad frames_per_phoneme range ({lo}, {hi})")
        positive = [
            self.sample_rate,
            self.window_length,
            self.hop_length,
            self.video_fps,
            self.phoneme_step,
            self.tone_amplitude,
            self.formant_amplitude,
            *self.base_freqs,
            *self.formant_freqs,
        ]
        if any(v <= 0 for v in positive):
            raise ConfigError("all timbre and timing parameters must be positive")
        nyquist = self.sample_rate / 2.0
        top = max(self.base_freqs) + self.phoneme_step * (self.num_phonemes - 1)
        if top >= nyquist or max(self.formant_freqs) >= nyquist:
            raise ConfigError(
                f"tone frequencies reach {max(top, max(self.formant_freqs)):.0f} Hz, "
                f"at or above Nyquist ({nyquist:.0f} Hz)"
            )
        _check_lexicon_covers(self.grammar, self.lexicon)

    @property
    def num_phonemes(self) -> int:
        return self.lexicon.num_phonemes

    @property
    def window_samples(self) -> int:
        return int(round(self.window_length * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_length * self.sample_rate))


def _check_lexicon_covers(grammar: Grammar, lexicon: Lexicon) -> None:
    for slot_name, words in grammar.slots:
        for word in words:
            if word not in lexicon.pron:
                raise DataError(
                    f"grammar/lexicon inconsistency: slot {slot_name!r} word "
                    f"{word!r} has no pronunciation"
                )


def sample_transcript(grammar: Grammar, rng: np.random.Generator) -> list[str]:
    """One uniform word choice per slot, in slot order."""
    return [words[int(rng.integers(len(words)))] for _, words in grammar.slots]


def render_utterance(spec: SyntheticSpec, speaker_id: int, words: list[str], rng):
    """Render one utterance.

    Returns (samples, alignment, roi_frames) where alignment is a list of
    (phoneme_id, start_frame, end_frame) tiling [0, T) and roi_frames is
    a (V, 60, 30) uint8 array at spec.video_fps.
    """
    phones: list[int] = []
    for word in words:
        phones.extend(spec.lexicon.pron[word])
    lo, hi = spec.frames_per_phoneme
    durations = [int(rng.integers(lo, hi + 1)) for _ in phones]
    alignment = []
    start = 0
    for phone, dur in zip(phones, durations):
        alignment.append((phone, start, start + dur))
        start += dur
    total_frames = start
    win, hop = spec.window_samples, spec.hop_samples
    num_samples = win + (total_frames - 1) * hop

    samples = np.zeros(num_samples, dtype=np.float64)
    t_axis = np.arange(num_samples, dtype=np.float64) / spec.sample_rate
    base = spec.base_freqs[speaker_id]
    for idx, (phone, fstart, fend) in enumerate(alignment):
        s0 = fstart * hop
        s1 = num_samples if idx == len(alignment) - 1 else fend * hop
        freq = base + spec.phoneme_step * phone
        seg = spec.tone_amplitude * np.sin(2.0 * math.pi * freq * t_axis[s0:s1])
        fade = min(32, (s1 - s0) // 4)
        if fade > 0:
            ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, math.pi, fade))
            seg[:fade] *= ramp
            seg[-fade:] *= ramp[::-1]
        samples[s0:s1] += seg
    samples += spec.formant_amplitude * np.sin(
        2.0 * math.pi * spec.formant_freqs[speaker_id] * t_axis
    )

    roi = _render_roi(spec, alignment, total_frames)
    return samples, alignment, roi


def _render_roi(spec: SyntheticSpec, alignment, total_frames: int) -> np.ndarray:
    labels = np.empty(total_frames, dtype=np.int64)
    for phone, fstart, fend in alignment:
        labels[fstart:fend] = phone
    audio_fps = 1.0 / spec.hop_length
    num_video = max(1, int(math.ceil(total_frames / audio_fps * spec.video_fps)))
    frames = np.empty((num_video, ROI_ROWS, ROI_COLS), dtype=np.uint8)
    rows = np.arange(ROI_ROWS, dtype=np.float64)[:, None]
    cols = np.arange(ROI_COLS, dtype=np.float64)[None, :]
    for v in range(num_video):
        # phoneme active at the audio frame nearest this video frame's center
        t_center = (v + 0.5) / spec.video_fps
        t_audio = min(total_frames - 1, max(0, int(round(t_center / spec.hop_length - 0.5))))
        phone = labels[t_audio]
        r0 = 6.0 + 5.0 * phone
        blob = np.exp(-(((rows - r0) ** 2) + ((cols - 15.0) ** 2)) / (2.0 * 2.5**2))
        frames[v] = np.round(255.0 * blob).astype(np.uint8)
    return frames


def synthesize_corpus(spec: SyntheticSpec, out_dir) -> Manifest:
    """Generate the corpus under out_dir and return its manifest.

    Layout: wav/, roi/, align/ file trees plus manifest.jsonl,
    grammar.txt and lexicon.txt. Deterministic per spec.seed, and
    per-utterance seeding keeps any single utterance reproducible in
    isolation.
    """
    out_dir = Path(out_dir)
    for sub in ("wav", "roi", "align"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for speaker in range(spec.num_speakers):
        for idx in range(spec.utterances_per_speaker):
            rng = np.random.default_rng(np.random.SeedSequence((spec.seed, speaker, idx)))
            words = sample_transcript(spec.grammar, rng)
            samples, alignment, roi = render_utterance(spec, speaker, words, rng)
            utt_id = f"s{speaker:02d}_u{idx:04d}"
            wav_rel = f"wav/{utt_id}.wav"
            roi_rel = f"roi/{utt_id}.roi"
            ali_rel = f"align/{utt_id}.ali"
            write_wav(out_dir / wav_rel, samples, spec.sample_rate)
            write_roi_track(out_dir / roi_rel, roi)
            save_alignment(alignment, out_dir / ali_rel)
            entries.append(
                Utterance(
                    utt_id=utt_id,
                    speaker_id=speaker,
                    wav=wav_rel,
                    transcript=words,
                    roi=roi_rel,
                    align=ali_rel,
                )
            )
    manifest = Manifest(entries=entries, num_speakers=spec.num_speakers, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    save_grammar(spec.grammar, out_dir / "grammar.txt")
    save_lexicon(spec.lexicon, out_dir / "lexicon.txt")
    return manifest
