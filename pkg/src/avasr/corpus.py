"""Corpus manifests, split construction, background pairing and mixing.

A manifest is a JSON-lines file, one utterance record per line:

    {"utt_id": "s00_u0001", "speaker_id": 0, "wav": "wav/s00_u0001.wav",
     "transcript": "bin blue now", "roi": "roi/s00_u0001.roi",
     "align": "align/s00_u0001.ali"}

Mixture manifests carry two extra fields, ``background`` (the utt_id of
the interfering utterance) and ``seed``, which make every mixture
re-creatable bit-exactly.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

DEFAULT_MIX_GAIN = 0.5


@dataclass
class Utterance:
    """One speaker's recording, described by manifest fields.

    ``samples`` is populated lazily by loaders; manifest entries only
    carry file references.
    """

    utt_id: str
    speaker_id: int
    wav: str = ""
    transcript: list[str] = field(default_factory=list)
    roi: str | None = None
    align: str | None = None
    background: str | None = None  # mixture entries only
    seed: int | None = None  # mixture entries only

    def to_record(self) -> dict:
        rec = {
            "utt_id": self.utt_id,
            "speaker_id": self.speaker_id,
            "wav": self.wav,
            "transcript": " ".join(self.transcript),
        }
        if self.roi is not None:
            rec["roi"] = self.roi
        if self.align is not None:
            rec["align"] = self.align
        if self.background is not None:
            rec["background"] = self.background
            rec["seed"] = self.seed
        return rec


@dataclass
class Manifest:
    entries: list[Utterance]
    num_speakers: int
    root: Path | None = None

    def __post_init__(self):
        seen = set()
        for utt in self.entries:
            if utt.utt_id in seen:
                raise DataError(f"duplicate utt_id {utt.utt_id!r} in manifest")
            seen.add(utt.utt_id)
            if not 0 <= utt.speaker_id < self.num_speakers:
                raise DataError(
                    f"utt {utt.utt_id!r}: speaker_id {utt.speaker_id} outside "
                    f"[0, {self.num_speakers})"
                )
        self._by_id = {utt.utt_id: utt for utt in self.entries}

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, utt_id: str) -> Utterance:
        try:
            return self._by_id[utt_id]
        except KeyError:
            raise DataError(f"unknown utt_id {utt_id!r}") from None

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._by_id

    def resolve(self, relpath: str) -> Path:
        """Resolve a manifest-relative file reference."""
        return Path(relpath) if self.root is None else self.root / relpath


@dataclass
class SplitSet:
    """Disjoint utt_id lists; ``background`` is the pool left over after
    train/valid/test allocation."""

    train: list[str]
    valid: list[str]
    test: list[str]
    background: list[str]

    def as_dict(self) -> dict:
        return {
            "train": self.train,
            "valid": self.valid,
            "test": self.test,
            "background": self.background,
        }


@dataclass(frozen=True)
class MixturePair:
    target: str
    background: str
    seed: int


def load_manifest(path, num_speakers: int | None = None) -> Manifest:
    """Load and validate a JSON-lines manifest.

    When ``num_speakers`` is None it is inferred as max(speaker_id) + 1.
    Errors are reported with the offending line number.
    """
    path = Path(path)
    entries: list[Utterance] = []
    seen: dict[str, int] = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
        try:
            utt = Utterance(
                utt_id=str(rec["utt_id"]),
                speaker_id=int(rec["speaker_id"]),
                wav=rec.get("wav", ""),
                transcript=str(rec.get("transcript", "")).split(),
                roi=rec.get("roi"),
                align=rec.get("align"),
                background=rec.get("background"),
                seed=int(rec["seed"]) if "background" in rec else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: missing or invalid field ({exc})") from exc
        if utt.utt_id in seen:
            raise DataError(
                f"{path}:{lineno}: duplicate utt_id {utt.utt_id!r} "
                f"(first seen on line {seen[utt.utt_id]})"
            )
        seen[utt.utt_id] = lineno
        entries.append(utt)
    if not entries:
        raise DataError(f"{path}: manifest has no records")
    inferred = 1 + max(utt.speaker_id for utt in entries)
    if num_speakers is None:
        num_speakers = inferred
    for lineno, utt in enumerate(entries, start=1):
        if not 0 <= utt.speaker_id < num_speakers:
            raise DataError(
                f"{path}: utt {utt.utt_id!r}: speaker_id {utt.speaker_id} "
                f"outside [0, {num_speakers})"
            )
    return Manifest(entries=entries, num_speakers=num_speakers, root=path.parent)


def write_manifest(manifest: Manifest, path) -> None:
    """Write a manifest as JSON lines, one record per entry, in entry order."""
    path = Path(path)
    with path.open("w") as fh:
        for utt in manifest.entries:
            fh.write(json.dumps(utt.to_record()) + "\n")


def _stable_id_hash(utt_id: str) -> int:
    return zlib.crc32(utt_id.encode("utf-8"))


def make_splits(manifest: Manifest, ratios, seed: int) -> SplitSet:
    """Partition a manifest into train/valid/test plus a background pool.

    ``ratios`` is (train, valid, test) with sum <= 1; the remainder of each
    speaker's utterances becomes the background pool. Allocation is
    per-speaker stratified (every speaker lands in every nonzero split)
    and deterministic for a given seed.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise DataError("ratios must be a (train, valid, test) triple")
    if any(r < 0 for r in ratios):
        raise DataError("split ratios must be nonnegative")
    if sum(ratios) > 1.0 + 1e-12:
        raise DataError(f"split ratios sum to {sum(ratios):.6f} > 1")

    by_speaker: dict[int, list[str]] = {}
    for utt in manifest.entries:
        by_speaker.setdefault(utt.speaker_id, []).append(utt.utt_id)

    out: list[list[str]] = [[], [], [], []]
    bg_ratio = max(0.0, 1.0 - sum(ratios))
    shares = ratios + (bg_ratio,)
    positive_splits = sum(1 for r in ratios if r > 0)
    for speaker in sorted(by_speaker):
        ids = sorted(by_speaker[speaker])
        n = len(ids)
        if n < positive_splits:
            raise DataError(
                f"speaker {speaker} has {n} utterances, fewer than the "
                f"{positive_splits} nonzero split slots"
            )
        counts = _apportion(n, shares)
        # guarantee at least one utterance per nonzero train/valid/test slot
        for i in range(3):
            if shares[i] > 0 and counts[i] == 0:
                donor = max(range(4), key=lambda j: counts[j])
                counts[donor] -= 1
                counts[i] += 1
        rng = np.random.default_rng(np.random.SeedSequence((seed, speaker)))
        order = rng.permutation(n)
        shuffled = [ids[i] for i in order]
        pos = 0
        for i in range(4):
            out[i].extend(shuffled[pos : pos + counts[i]])
            pos += counts[i]
    return SplitSet(train=out[0], valid=out[1], test=out[2], background=out[3])


def _apportion(n: int, shares) -> list[int]:
    """Largest-remainder apportionment of n items over fractional shares."""
    exact = [n * s for s in shares]
    counts = [int(x) for x in exact]
    remainder = n - sum(counts)
    order = sorted(range(len(shares)), key=lambda i: (exact[i] - counts[i], -i), reverse=True)
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def save_splits(splits: SplitSet, path) -> None:
    Path(path).write_text(json.dumps(splits.as_dict(), indent=2, sort_keys=True) + "\n")


def load_splits(path) -> SplitSet:
    try:
        data = json.loads(Path(path).read_text())
        return SplitSet(
            train=list(data["train"]),
            valid=list(data["valid"]),
            test=list(data["test"]),
            background=list(data["background"]),
        )
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load splits from {path}: {exc}") from exc


def pair_background(target: Utterance, pool: list[Utterance], seed: int) -> MixturePair:
    """Pick a background utterance uniformly from ``pool``, excluding the
    target speaker's own utterances. Deterministic per (target, seed)."""
    eligible = sorted(
        (utt.utt_id for utt in pool if utt.speaker_id != target.speaker_id)
    )
    if not eligible:
        raise DataError(
            f"no eligible background utterance for target {target.utt_id!r} "
            f"(pool has no other speaker)"
        )
    rng = np.random.default_rng(np.random.SeedSequence((seed, _stable_id_hash(target.utt_id))))
    choice = eligible[int(rng.integers(len(eligible)))]
    return MixturePair(target=target.utt_id, background=choice, seed=seed)


def mix_waveforms(
    target,
    background,
    gain: float = DEFAULT_MIX_GAIN,
    target_rate: int | None = None,
    background_rate: int | None = None,
):
    """Overlap two signals on a single channel.

    The background is truncated or zero-padded to the target's length and
    the sum is scaled by ``gain`` (default 0.5, which keeps equal-weight
    mixtures of in-range signals inside [-1, 1]). Output length always
    equals the target length.
    """
    target = np.asarray(target, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if target.size == 0 or background.size == 0:
        raise DataError("cannot mix empty signals")
    if (
        target_rate is not None
        and background_rate is not None
        and target_rate != background_rate
    ):
        raise DataError(
            f"sample-rate mismatch: target {target_rate} Hz vs background {background_rate} Hz"
        )
    n = target.shape[0]
    if background.shape[0] >= n:
        aligned = background[:n]
    else:
        aligned = np.zeros(n, dtype=np.float64)
        aligned[: background.shape[0]] = background
    return gain * (target + aligned)


def make_mixture_manifest(
    manifest: Manifest,
    target_ids: list[str],
    background_pool_ids: list[str],
    seed: int,
) -> Manifest:
    """Pair every target utterance with one background utterance.

    Entries keep the target's fields (labels and visuals belong to the
    target speaker) plus the background reference and the pairing seed.
    """
    pool = [manifest[uid] for uid in background_pool_ids]
    entries = []
    for uid in target_ids:
        target = manifest[uid]
        pair = pair_background(target, pool, seed)
        entries.append(
            Utterance(
                utt_id=f"{target.utt_id}+{pair.background}",
                speaker_id=target.speaker_id,
                wav=target.wav,
                transcript=list(target.transcript),
                roi=target.roi,
                align=target.align,
                background=pair.background,
                seed=seed,
            )
        )
    return Manifest(entries=entries, num_speakers=manifest.num_speakers, root=manifest.root)


def load_mixture_samples(
    manifest: Manifest,
    entry: Utterance,
    expected_rate: int | None = None,
    gain: float = DEFAULT_MIX_GAIN,
):
    """Reconstruct one mixture's samples from its manifest record."""
    from .audio_io import read_wav

    target_samples, rate = read_wav(manifest.resolve(entry.wav), expected_rate)
    if entry.background is None:
        return target_samples, rate
    bg_entry = manifest[entry.background] if entry.background in manifest else None
    if bg_entry is None:
        raise DataError(
            f"mixture {entry.utt_id!r}: background {entry.background!r} not in manifest"
        )
    bg_samples, bg_rate = read_wav(manifest.resolve(bg_entry.wav), expected_rate)
    mixed = mix_waveforms(
        target_samples, bg_samples, gain=gain, target_rate=rate, background_rate=bg_rate
    )
    return mixed, rate


def load_alignment(path, num_frames: int | None = None) -> list[tuple[int, int, int]]:
    """Read "phoneme_id start_frame end_frame" lines (end exclusive).

    Segments must start at 0, be contiguous and non-overlapping; when
    ``num_frames`` is given they must cover exactly [0, num_frames).
    """
    path = Path(path)
    segments: list[tuple[int, int, int]] = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read alignment {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, found {len(parts)}")
        try:
            seg = (int(parts[0]), int(parts[1]), int(parts[2]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-integer field ({exc})") from exc
        segments.append(seg)
    validate_alignment(segments, num_frames, name=str(path))
    return segments


def validate_alignment(segments, num_frames: int | None = None, name: str = "alignment"):
    if not segments:
        raise DataError(f"{name}: empty alignment")
    expected_start = 0
    for phone, start, end in segments:
        if start != expected_start:
            raise DataError(
                f"{name}: segment starting at frame {start} leaves a gap or overlap "
                f"(expected start {expected_start})"
            )
        if end <= start:
            raise DataError(f"{name}: empty or inverted segment [{start}, {end})")
        if phone < 0:
            raise DataError(f"{name}: negative phoneme id {phone}")
        expected_start = end
    if num_frames is not None and expected_start != num_frames:
        raise DataError(
            f"{name}: segments cover [0, {expected_start}) but feature axis has "
            f"{num_frames} frames"
        )


def save_alignment(segments, path) -> None:
    with Path(path).open("w") as fh:
        for phone, start, end in segments:
            fh.write(f"{phone} {start} {end}\n")


def alignment_labels(segments, num_frames: int) -> np.ndarray:
    """Expand segments into a per-frame label vector of length num_frames."""
    validate_alignment(segments, num_frames)
    labels = np.empty(num_frames, dtype=np.int64)
    for phone, start, end in segments:
        labels[start:end] = phone
    return labels
