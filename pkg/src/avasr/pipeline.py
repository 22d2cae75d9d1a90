"""Experiment orchestration: corpus resolution, feature preparation with
caching, speaker-independent training, speaker-targeted and
speaker-dependent adaptation, grammar decoding, and report generation.

A matrix run is described by a YAML config and produces, under its
output directory:

    resolved_config.yaml   config with all defaults materialized
    splits.json            utt_id partition used
    models/*.dnnm          every trained checkpoint (+ .meta.json sidecar)
    hyp/<cell>.txt         decoded words per test utterance
    ref/<cond>.txt         reference words per test utterance
    report.json            machine-readable per-cell results
    report.txt             human-readable table

Reports carry no timestamps or machine-local paths, so a rerun with the
same config and seeds is byte-identical. Checkpoints are reused only
when their sidecar records the same config hash.

Cell naming: "<row>.<modality>.<condition>" with row one of
si / st_a / st_b / st_c / sd, modality a / av, condition one / two
(one = clean target audio, two = target mixed with a background
speaker). Adaptation rows derive from the SI parent with the same
modality and condition.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import corpus as corpus_mod
from . import decoder as decoder_mod
from . import features as feat_mod
from . import nnet
from .errors import ConfigError, DataError
from .synth import SyntheticSpec, synthesize_corpus

log = logging.getLogger("avasr")

CACHE_ENV_VAR = "AVASR_CACHE_DIR"

VALID_ROWS = ("si", "st_a", "st_b", "st_c", "sd")
VALID_MODALITIES = ("a", "av")
VALID_CONDITIONS = ("one", "two")

DEFAULT_CELLS = [
    "si.a.one",
    "si.av.one",
    "si.a.two",
    "si.av.two",
    "st_a.a.two",
    "st_a.av.two",
    "st_b.a.two",
    "st_b.av.two",
    "st_c.a.two",
    "st_c.av.two",
    "sd.a.two",
    "sd.av.two",
]


def parse_cell(name: str):
    parts = name.split(".")
    if len(parts) != 3:
        raise ConfigError(f"cells: bad cell name {name!r}, want row.modality.condition")
    row, modality, cond = parts
    if row not in VALID_ROWS:
        raise ConfigError(f"cells: unknown row {row!r} in {name!r}")
    if modality not in VALID_MODALITIES:
        raise ConfigError(f"cells: unknown modality {modality!r} in {name!r}")
    if cond not in VALID_CONDITIONS:
        raise ConfigError(f"cells: unknown condition {cond!r} in {name!r}")
    return row, modality, cond


def _section(data: dict, name: str) -> dict:
    value = data.pop(name, None)
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: expected a mapping")
    return dict(value)


def _scalar(section: dict, path: str, key: str, default, kind):
    value = section.pop(key, default)
    if value is None:
        return None
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.{key}: cannot interpret {value!r}") from None


def _reject_unknown(section: dict, path: str) -> None:
    if section:
        raise ConfigError(f"{path}: unknown field {sorted(section)[0]!r}")


@dataclass
class CorpusConfig:
    synth: dict | None = None  # SyntheticSpec overrides; None when paths given
    manifest: str | None = None
    grammar: str | None = None
    lexicon: str | None = None
    splits: str | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    cache_dir: str | None = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    split_ratios: tuple = (0.40, 0.06, 0.385)
    split_seed: int | None = None  # default: seed
    mixture_seed: int | None = None  # default: seed
    mixture_gain: float = corpus_mod.DEFAULT_MIX_GAIN
    logmel: feat_mod.LogMelConfig = field(default_factory=feat_mod.LogMelConfig)
    context_radius: int = 5
    video_fps: float = 25.0
    hidden_width: int = 64
    num_hidden_layers: int = 4
    identity_embed_dim: int = 8
    injection_layer: int = 1
    freeze_copied_layers: bool = False
    self_loop_prob: float = 0.5
    use_priors: bool = True
    train: nnet.TrainConfig = field(default_factory=nnet.TrainConfig)
    adapt: nnet.TrainConfig = field(default_factory=nnet.TrainConfig)
    adapt_warmup_epochs: int = 0
    adapt_warmup_lr: float | None = None  # default: adapt learning rate
    cells: list = field(default_factory=lambda: list(DEFAULT_CELLS))
    sd_speakers: list | None = None  # None: adapt every speaker

    def __post_init__(self):
        if len(self.split_ratios) != 3:
            raise ConfigError("splits.ratios: expected three fractions")
        if not self.cells:
            raise ConfigError("cells: empty cell list")
        for cell in self.cells:
            parse_cell(cell)
        if len(set(self.cells)) != len(self.cells):
            raise ConfigError("cells: duplicate cell names")
        if not 1 <= self.context_radius <= 50:
            raise ConfigError(f"features.context_radius: bad value {self.context_radius}")
        if self.video_fps <= 0:
            raise ConfigError("features.video_fps: must be positive")
        if not 0.0 < self.self_loop_prob < 1.0:
            raise ConfigError("decoder.self_loop_prob: must lie in (0, 1)")
        if self.adapt_warmup_epochs < 0:
            raise ConfigError("adapt.warmup_epochs: must not be negative")
        if self.adapt_warmup_lr is None:
            self.adapt_warmup_lr = self.adapt.learning_rate
        if self.adapt_warmup_lr <= 0:
            raise ConfigError("adapt.warmup_learning_rate: must be positive")
        if self.split_seed is None:
            self.split_seed = self.seed
        if self.mixture_seed is None:
            self.mixture_seed = self.seed

    def resolved_dict(self) -> dict:
        """Everything needed to reproduce the run, defaults materialized.

        Deliberately excludes output locations and cache paths so the
        snapshot (and its hash) is identical wherever the run lands.
        """
        lm = self.logmel
        return {
            "seed": self.seed,
            "corpus": {
                "synth": self.corpus.synth,
                "manifest": self.corpus.manifest,
                "grammar": self.corpus.grammar,
                "lexicon": self.corpus.lexicon,
                "splits": self.corpus.splits,
            },
            "splits": {
                "ratios": list(self.split_ratios),
                "seed": self.split_seed,
            },
            "mixtures": {"seed": self.mixture_seed, "gain": self.mixture_gain},
            "features": {
                "sample_rate": lm.sample_rate,
                "window_length": lm.window_length,
                "hop_length": lm.hop_length,
                "num_bins": lm.num_bins,
                "fft_size": lm.fft_size,
                "log_floor": lm.log_floor,
                "mel_low": lm.mel_low,
                "mel_high": lm.mel_high,
                "context_radius": self.context_radius,
                "video_fps": self.video_fps,
            },
            "model": {
                "hidden_width": self.hidden_width,
                "num_hidden_layers": self.num_hidden_layers,
                "identity_embed_dim": self.identity_embed_dim,
                "injection_layer": self.injection_layer,
                "freeze_copied_layers": self.freeze_copied_layers,
            },
            "decoder": {
                "self_loop_prob": self.self_loop_prob,
                "use_priors": self.use_priors,
            },
            "train": _train_dict(self.train),
            "adapt": {
                **_train_dict(self.adapt),
                "warmup_epochs": self.adapt_warmup_epochs,
                "warmup_learning_rate": self.adapt_warmup_lr,
            },
            "cells": list(self.cells),
            "sd_speakers": self.sd_speakers,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(snapshot_yaml(self).encode("utf-8")).hexdigest()


def _train_dict(tc: nnet.TrainConfig) -> dict:
    return {
        "learning_rate": tc.learning_rate,
        "batch_size": tc.batch_size,
        "max_epochs": tc.max_epochs,
        "patience": tc.patience,
        "seed": tc.seed,
    }


def _merge_histories(warm: dict, main: dict) -> dict:
    """Join warmup and main-phase training curves into one timeline.

    Epoch indices count from the warmup start; best_epoch 0 in the main
    phase means the warmup result itself was never improved on.
    """
    offset = warm["epochs_run"]
    return {
        "train_loss": warm["train_loss"] + main["train_loss"],
        "valid_loss": warm["valid_loss"] + main["valid_loss"],
        "best_epoch": (
            warm["best_epoch"] if main["best_epoch"] == 0 else offset + main["best_epoch"]
        ),
        "epochs_run": offset + main["epochs_run"],
        "warmup_epochs": offset,
    }


def snapshot_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.resolved_dict(), sort_keys=True, default_flow_style=False)


def _parse_train_section(data: dict, path: str, seed_default: int) -> nnet.TrainConfig:
    tc = nnet.TrainConfig(
        learning_rate=_scalar(data, path, "learning_rate", 0.01, float),
        batch_size=_scalar(data, path, "batch_size", 128, int),
        max_epochs=_scalar(data, path, "max_epochs", 20, int),
        patience=_scalar(data, path, "patience", 5, int),
        seed=_scalar(data, path, "seed", seed_default, int),
    )
    _reject_unknown(data, path)
    return tc


def parse_experiment_config(data: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a parsed YAML mapping."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    seed = _scalar(data, "", "seed", 0, int)
    cache_dir = data.pop("cache_dir", None)

    corpus_sec = _section(data, "corpus")
    synth = corpus_sec.pop("synth", None)
    if synth is not None:
        if not isinstance(synth, dict):
            raise ConfigError("corpus.synth: expected a mapping")
        unknown = set(synth) - SYNTH_OVERRIDE_KEYS
        if unknown:
            raise ConfigError(f"corpus.synth: unknown field {sorted(unknown)[0]!r}")
    cc = CorpusConfig(
        synth=synth,
        manifest=corpus_sec.pop("manifest", None),
        grammar=corpus_sec.pop("grammar", None),
        lexicon=corpus_sec.pop("lexicon", None),
        splits=corpus_sec.pop("splits", None),
    )
    _reject_unknown(corpus_sec, "corpus")
    if (cc.synth is None) == (cc.manifest is None):
        raise ConfigError("corpus: give exactly one of 'synth' or 'manifest'")
    if cc.manifest is not None and (cc.grammar is None or cc.lexicon is None):
        raise ConfigError("corpus: manifest corpora also need 'grammar' and 'lexicon'")

    splits_sec = _section(data, "splits")
    ratios = splits_sec.pop("ratios", [0.40, 0.06, 0.385])
    if not isinstance(ratios, (list, tuple)):
        raise ConfigError("splits.ratios: expected a list")
    split_seed = _scalar(splits_sec, "splits", "seed", None, int)
    _reject_unknown(splits_sec, "splits")

    mix_sec = _section(data, "mixtures")
    mixture_seed = _scalar(mix_sec, "mixtures", "seed", None, int)
    mixture_gain = _scalar(mix_sec, "mixtures", "gain", corpus_mod.DEFAULT_MIX_GAIN, float)
    _reject_unknown(mix_sec, "mixtures")

    feat_sec = _section(data, "features")
    logmel = feat_mod.LogMelConfig(
        sample_rate=_scalar(feat_sec, "features", "sample_rate", 8000, int),
        window_length=_scalar(feat_sec, "features", "window_length", 0.025, float),
        hop_length=_scalar(feat_sec, "features", "hop_length", 0.010, float),
        num_bins=_scalar(feat_sec, "features", "num_bins", 40, int),
        fft_size=_scalar(feat_sec, "features", "fft_size", None, int),
        log_floor=_scalar(feat_sec, "features", "log_floor", 1e-10, float),
        mel_low=_scalar(feat_sec, "features", "mel_low", 0.0, float),
        mel_high=_scalar(feat_sec, "features", "mel_high", None, float),
    )
    context_radius = _scalar(feat_sec, "features", "context_radius", 5, int)
    video_fps = _scalar(feat_sec, "features", "video_fps", 25.0, float)
    _reject_unknown(feat_sec, "features")

    model_sec = _section(data, "model")
    hidden_width = _scalar(model_sec, "model", "hidden_width", 64, int)
    num_hidden = _scalar(model_sec, "model", "num_hidden_layers", 4, int)
    embed_dim = _scalar(model_sec, "model", "identity_embed_dim", 8, int)
    injection = _scalar(model_sec, "model", "injection_layer", 1, int)
    freeze_copied = bool(model_sec.pop("freeze_copied_layers", False))
    _reject_unknown(model_sec, "model")

    dec_sec = _section(data, "decoder")
    self_loop = _scalar(dec_sec, "decoder", "self_loop_prob", 0.5, float)
    use_priors = bool(dec_sec.pop("use_priors", True))
    _reject_unknown(dec_sec, "decoder")

    train_cfg = _parse_train_section(_section(data, "train"), "train", seed)
    warmup_epochs, warmup_lr = 0, None
    if "adapt" in data:
        adapt_sec = _section(data, "adapt")
        warmup_epochs = _scalar(adapt_sec, "adapt", "warmup_epochs", 0, int)
        warmup_lr = _scalar(adapt_sec, "adapt", "warmup_learning_rate", None, float)
        adapt_cfg = _parse_train_section(adapt_sec, "adapt", seed)
    else:
        adapt_cfg = nnet.TrainConfig(**_train_dict(train_cfg))

    cells = data.pop("cells", None)
    if cells is None:
        cells = list(DEFAULT_CELLS)
    if not isinstance(cells, (list, tuple)):
        raise ConfigError("cells: expected a list")
    sd_speakers = data.pop("sd_speakers", None)
    if sd_speakers is not None:
        if not isinstance(sd_speakers, (list, tuple)):
            raise ConfigError("sd_speakers: expected a list of speaker ids")
        sd_speakers = [int(s) for s in sd_speakers]
    _reject_unknown(data, "config")

    return ExperimentConfig(
        seed=seed,
        cache_dir=cache_dir,
        corpus=cc,
        split_ratios=tuple(float(r) for r in ratios),
        split_seed=split_seed,
        mixture_seed=mixture_seed,
        mixture_gain=mixture_gain,
        logmel=logmel,
        context_radius=context_radius,
        video_fps=video_fps,
        hidden_width=hidden_width,
        num_hidden_layers=num_hidden,
        identity_embed_dim=embed_dim,
        injection_layer=injection,
        freeze_copied_layers=freeze_copied,
        self_loop_prob=self_loop,
        use_priors=use_priors,
        train=train_cfg,
        adapt=adapt_cfg,
        adapt_warmup_epochs=warmup_epochs,
        adapt_warmup_lr=warmup_lr,
        cells=[str(c) for c in cells],
        sd_speakers=sd_speakers,
    )


def load_experiment_config(path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    data = data if data is not None else {}
    if seed_override is not None:
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        data["seed"] = seed_override
    return parse_experiment_config(data)


SYNTH_OVERRIDE_KEYS = frozenset(
    {
        "num_speakers",
        "utterances_per_speaker",
        "seed",
        "frames_per_phoneme",
        "phoneme_step",
        "base_freqs",
        "formant_freqs",
        "tone_amplitude",
        "formant_amplitude",
    }
)


def synth_spec_from_config(cfg: ExperimentConfig) -> SyntheticSpec:
    """SyntheticSpec for a config's built-in corpus; timing and rate
    parameters always come from the features section so alignments stay
    frame-exact."""
    if cfg.corpus.synth is None:
        raise DataError("config does not describe a synthetic corpus")
    params = dict(cfg.corpus.synth)
    unknown = set(params) - SYNTH_OVERRIDE_KEYS
    if unknown:
        raise ConfigError(f"corpus.synth: unknown field {sorted(unknown)[0]!r}")
    if "frames_per_phoneme" in params:
        params["frames_per_phoneme"] = tuple(params["frames_per_phoneme"])
    return SyntheticSpec(
        sample_rate=cfg.logmel.sample_rate,
        window_length=cfg.logmel.window_length,
        hop_length=cfg.logmel.hop_length,
        video_fps=cfg.video_fps,
        **params,
    )


def compute_trunk(manifest, entry, modality: str, cfg: ExperimentConfig) -> np.ndarray:
    """T x D float32 model input (stacked log-mel, plus ROI pixels for
    modality 'av') for one utterance or mixture entry."""
    lm = cfg.logmel
    samples, _ = corpus_mod.load_mixture_samples(
        manifest, entry, expected_rate=lm.sample_rate, gain=cfg.mixture_gain
    )
    logmel = feat_mod.compute_logmel(samples, lm)
    acoustic = feat_mod.stack_context(
        feat_mod.normalize_features(logmel), cfg.context_radius
    )
    if modality == "av":
        if entry.roi is None:
            raise DataError(f"utt {entry.utt_id!r} has no visual track")
        track = feat_mod.load_visual_track(manifest.resolve(entry.roi), cfg.video_fps)
        pixels = feat_mod.align_visual(track, acoustic.shape[0], lm.hop_length)
        trunk = np.concatenate([acoustic, pixels], axis=1)
    else:
        trunk = acoustic
    return trunk.astype(np.float32)


class FeatureStore:
    """Computes trunk feature matrices, memoized as FEAT files.

    Values are float32 in both the cached and the freshly-computed path,
    so enabling or clearing the cache cannot change any downstream
    number.
    """

    def __init__(self, manifest, cfg: ExperimentConfig, cache_dir: Path):
        self.manifest = manifest
        self.cfg = cfg
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _cache_path(self, entry, modality: str) -> Path:
        lm = self.cfg.logmel
        key = json.dumps(
            {
                "utt": entry.utt_id,
                "background": entry.background,
                "mix_seed": entry.seed,
                "gain": self.cfg.mixture_gain,
                "modality": modality,
                "radius": self.cfg.context_radius,
                "fps": self.cfg.video_fps,
                "logmel": [
                    lm.sample_rate,
                    lm.window_length,
                    lm.hop_length,
                    lm.num_bins,
                    lm.fft_size,
                    lm.log_floor,
                    lm.mel_low,
                    lm.mel_high,
                ],
            },
            sort_keys=True,
        )
        digest = hashlib.sha256(key.encode("utf-8")).hexdigest()[:32]
        return self.cache_dir / f"{digest}.feat"

    def trunk(self, entry, modality: str) -> np.ndarray:
        """T x D float32 model input for one utterance or mixture."""
        path = self._cache_path(entry, modality)
        if path.exists():
            return feat_mod.read_feat(path)
        trunk32 = compute_trunk(self.manifest, entry, modality, self.cfg)
        feat_mod.write_feat(path, trunk32)
        return trunk32

    def labels(self, entry, num_frames: int) -> np.ndarray:
        if entry.align is None:
            raise DataError(f"utt {entry.utt_id!r} has no alignment")
        segments = corpus_mod.load_alignment(
            self.manifest.resolve(entry.align), num_frames
        )
        return corpus_mod.alignment_labels(segments, num_frames)


@dataclass
class CellResult:
    wer: decoder_mod.WerReport
    correct_frames: int
    total_frames: int
    utterances: int
    per_speaker: dict

    @property
    def frame_accuracy(self) -> float:
        return self.correct_frames / self.total_frames

    def as_dict(self) -> dict:
        return {
            "wer": self.wer.wer,
            "wer_percent": decoder_mod.wer_percent(self.wer.wer),
            "substitutions": self.wer.substitutions,
            "deletions": self.wer.deletions,
            "insertions": self.wer.insertions,
            "ref_words": self.wer.ref_words,
            "frame_accuracy": self.frame_accuracy,
            "correct_frames": self.correct_frames,
            "total_frames": self.total_frames,
            "utterances": self.utterances,
            "per_speaker": self.per_speaker,
        }


@dataclass
class ExperimentReport:
    seed: int
    config_hash: str
    cells: dict  # cell name -> CellResult
    models: dict  # model name -> training history

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "cells": {name: res.as_dict() for name, res in self.cells.items()},
            "models": self.models,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            f"{'cell':<14} {'WER':>7} {'FrAcc':>7} {'S':>5} {'D':>5} {'I':>5} {'N':>7} {'utts':>5}"
        ]
        for name in sorted(self.cells):
            r = self.cells[name]
            lines.append(
                f"{name:<14} {decoder_mod.wer_percent(r.wer.wer):>7} "
                f"{r.frame_accuracy:>7.3f} {r.wer.substitutions:>5} "
                f"{r.wer.deletions:>5} {r.wer.insertions:>5} "
                f"{r.wer.ref_words:>7} {r.utterances:>5}"
            )
        return "\n".join(lines) + "\n"


class ExperimentRunner:
    """Materializes corpus assets and runs training/evaluation cells."""

    def __init__(self, cfg: ExperimentConfig, run_dir):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if cfg.cache_dir:
            self.cache_dir = Path(cfg.cache_dir)
        elif os.environ.get(CACHE_ENV_VAR):
            self.cache_dir = Path(os.environ[CACHE_ENV_VAR])
        else:
            self.cache_dir = self.run_dir / "cache"
        self._prepare_assets()

    # ----- assets -------------------------------------------------------

    def _prepare_assets(self):
        cfg = self.cfg
        if cfg.corpus.synth is not None:
            spec = synth_spec_from_config(cfg)
            corpus_dir = self.cache_dir / f"corpus_{self._synth_hash()[:16]}"
            if not (corpus_dir / "manifest.jsonl").exists():
                log.info("synthesizing corpus under %s", corpus_dir)
                synthesize_corpus(spec, corpus_dir)
            self.manifest = corpus_mod.load_manifest(
                corpus_dir / "manifest.jsonl", spec.num_speakers
            )
            self.grammar = spec.grammar
            self.lexicon = spec.lexicon
        else:
            self.manifest = corpus_mod.load_manifest(cfg.corpus.manifest)
            self.grammar = decoder_mod.load_grammar(cfg.corpus.grammar)
            self.lexicon = decoder_mod.load_lexicon(cfg.corpus.lexicon)
        if cfg.corpus.splits is not None:
            self.splits = corpus_mod.load_splits(cfg.corpus.splits)
        else:
            self.splits = corpus_mod.make_splits(
                self.manifest, cfg.split_ratios, cfg.split_seed
            )
        self.store = FeatureStore(self.manifest, cfg, self.cache_dir / "feats")
        self.graph = decoder_mod.build_graph(
            self.grammar, self.lexicon, cfg.self_loop_prob
        )
        self.num_labels = self.lexicon.num_phonemes
        self._mixtures: dict = {}

    def _synth_hash(self) -> str:
        spec_desc = json.dumps(
            {
                "synth": self.cfg.corpus.synth,
                "sample_rate": self.cfg.logmel.sample_rate,
                "window": self.cfg.logmel.window_length,
                "hop": self.cfg.logmel.hop_length,
                "fps": self.cfg.video_fps,
            },
            sort_keys=True,
        )
        return hashlib.sha256(spec_desc.encode("utf-8")).hexdigest()

    def entries_for(self, cond: str, split: str) -> list:
        """Utterances (cond 'one') or mixtures (cond 'two') of a split."""
        ids = getattr(self.splits, split)
        if not ids:
            raise DataError(f"split {split!r} is empty")
        if cond == "one":
            return [self.manifest[uid] for uid in ids]
        key = (split,)
        if key not in self._mixtures:
            if not self.splits.background:
                raise DataError(
                    "background pool is empty; lower the split ratios so "
                    "some utterances remain for mixing"
                )
            self._mixtures[key] = corpus_mod.make_mixture_manifest(
                self.manifest, ids, self.splits.background, self.cfg.mixture_seed
            )
        return self._mixtures[key].entries

    # ----- data assembly ------------------------------------------------

    def frames_for(self, entries, modality: str, with_identity: bool):
        """Stack per-utterance features into flat frame arrays.

        Returns (x float64, z float64 or None, labels, speaker_per_frame).
        """
        xs, zs, ys, spk = [], [], [], []
        n_speakers = self.manifest.num_speakers
        for entry in entries:
            trunk = self.store.trunk(entry, modality).astype(np.float64)
            labels = self.store.labels(entry, trunk.shape[0])
            xs.append(trunk)
            ys.append(labels)
            spk.append(np.full(trunk.shape[0], entry.speaker_id, dtype=np.int64))
            if with_identity:
                z = feat_mod.speaker_onehot(entry.speaker_id, n_speakers)
                zs.append(np.repeat(z[None, :], trunk.shape[0], axis=0))
        x = np.concatenate(xs, axis=0)
        y = np.concatenate(ys, axis=0)
        speakers = np.concatenate(spk, axis=0)
        z = np.concatenate(zs, axis=0) if with_identity else None
        return x, z, y, speakers

    def _priors(self, labels: np.ndarray) -> np.ndarray:
        counts = np.bincount(labels, minlength=self.num_labels).astype(np.float64)
        return (counts + 1.0) / (labels.shape[0] + self.num_labels)

    def _arch_spec(self, modality: str) -> nnet.ArchitectureSpec:
        cfg = self.cfg
        return nnet.ArchitectureSpec(
            modality="AV" if modality == "av" else "A",
            variant=None,
            num_hidden_layers=cfg.num_hidden_layers,
            hidden_width=cfg.hidden_width,
            output_labels=self.num_labels,
            acoustic_dim=cfg.logmel.num_bins * (2 * cfg.context_radius + 1),
            visual_dim=feat_mod.ROI_DIM if modality == "av" else 0,
        )

    # ----- training -----------------------------------------------------

    def train_speaker_independent(self, modality: str, cond: str):
        """SGD-train an SI model on the split's (possibly mixed) audio."""
        cfg = self.cfg
        x, _, y, _ = self.frames_for(self.entries_for(cond, "train"), modality, False)
        xv, _, yv, _ = self.frames_for(self.entries_for(cond, "valid"), modality, False)
        model = nnet.init_model(self._arch_spec(modality), cfg.train.seed)
        model.priors = self._priors(y)
        log.info(
            "training si.%s.%s on %d frames (%d valid)", modality, cond, len(y), len(yv)
        )
        model, history = nnet.fit(
            model, nnet.Batch(x=x, labels=y), nnet.Batch(x=xv, labels=yv), cfg.train
        )
        return model, history

    def adapt_speaker_targeted(self, si_model, variant: str, modality: str, cond: str):
        """Extend the SI parent with an identity pathway and keep training
        on the same data, every frame carrying its target speaker."""
        cfg = self.cfg
        x, z, y, _ = self.frames_for(self.entries_for(cond, "train"), modality, True)
        xv, zv, yv, _ = self.frames_for(self.entries_for(cond, "valid"), modality, True)
        model = nnet.extend_for_identity(
            si_model,
            variant.upper(),
            self.manifest.num_speakers,
            cfg.adapt.seed,
            identity_embed_dim=cfg.identity_embed_dim,
            injection_layer=cfg.injection_layer,
        )
        new_params = frozenset(model.params) - frozenset(si_model.params)
        trainable = new_params if cfg.freeze_copied_layers else None
        train_b = nnet.Batch(x=x, z=z, labels=y)
        valid_b = nnet.Batch(x=xv, z=zv, labels=yv)
        log.info("adapting st_%s.%s.%s on %d frames", variant, modality, cond, len(y))
        warm_history = None
        if cfg.adapt_warmup_epochs > 0:
            # Settle the fresh identity weights against a frozen parent first;
            # patience = max_epochs so the warmup never stops early.
            warm_cfg = nnet.TrainConfig(
                learning_rate=cfg.adapt_warmup_lr,
                batch_size=cfg.adapt.batch_size,
                max_epochs=cfg.adapt_warmup_epochs,
                patience=cfg.adapt_warmup_epochs,
                seed=cfg.adapt.seed,
            )
            model, warm_history = nnet.fit(
                model, train_b, valid_b, warm_cfg, trainable=new_params
            )
        model, history = nnet.fit(
            model, train_b, valid_b, cfg.adapt, trainable=trainable
        )
        if warm_history is not None:
            history = _merge_histories(warm_history, history)
        return model, history

    def adapt_speaker_dependent(self, si_model, speaker_id: int, modality: str, cond: str):
        """Keep training the SI parent on one speaker's data only."""
        cfg = self.cfg
        if not 0 <= speaker_id < self.manifest.num_speakers:
            raise DataError(f"unknown speaker {speaker_id}")
        x, _, y, spk = self.frames_for(self.entries_for(cond, "train"), modality, False)
        xv, _, yv, spkv = self.frames_for(self.entries_for(cond, "valid"), modality, False)
        sel, selv = spk == speaker_id, spkv == speaker_id
        if not sel.any():
            raise DataError(f"speaker {speaker_id} has no training utterances")
        if not selv.any():
            raise DataError(f"speaker {speaker_id} has no validation utterances")
        model = si_model.copy()
        log.info(
            "adapting sd(speaker %d).%s.%s on %d frames",
            speaker_id, modality, cond, int(sel.sum()),
        )
        model, history = nnet.fit(
            model,
            nnet.Batch(x=x[sel], labels=y[sel]),
            nnet.Batch(x=xv[selv], labels=yv[selv]),
            cfg.adapt,
        )
        return model, history

    # ----- evaluation ---------------------------------------------------

    def evaluate_model(self, model, modality: str, cond: str, speakers=None):
        """Decode the test split; returns (CellResult, hyp lines)."""
        entries = self.entries_for(cond, "test")
        if speakers is not None:
            entries = [e for e in entries if e.speaker_id in speakers]
            if not entries:
                raise DataError(f"no test utterances for speakers {sorted(speakers)}")
        reports, hyp_lines = [], []
        by_speaker: dict = {}
        correct_frames = 0
        total_frames = 0
        priors = model.priors if self.cfg.use_priors else None
        for entry in entries:
            trunk = self.store.trunk(entry, modality).astype(np.float64)
            z = None
            if model.spec.has_identity:
                z = feat_mod.speaker_onehot(
                    entry.speaker_id, self.manifest.num_speakers
                )[None, :]
            post = nnet.predict_posteriors(model, trunk, z)
            result = decoder_mod.viterbi_decode(post, self.graph, priors)
            rep = decoder_mod.compute_wer(entry.transcript, result.words)
            reports.append(rep)
            by_speaker.setdefault(entry.speaker_id, []).append(rep)
            hyp_lines.append(f"{entry.utt_id} {' '.join(result.words)}")
            labels = self.store.labels(entry, trunk.shape[0])
            correct_frames += int((np.argmax(post, axis=1) == labels).sum())
            total_frames += trunk.shape[0]
        total = decoder_mod.aggregate_wer(reports)
        per_speaker = {}
        for spk in sorted(by_speaker):
            agg = decoder_mod.aggregate_wer(by_speaker[spk])
            per_speaker[str(spk)] = {
                "wer": agg.wer,
                "errors": agg.errors,
                "ref_words": agg.ref_words,
                "utterances": len(by_speaker[spk]),
            }
        cell = CellResult(
            wer=total,
            correct_frames=correct_frames,
            total_frames=total_frames,
            utterances=len(entries),
            per_speaker=per_speaker,
        )
        return cell, hyp_lines

    def reference_lines(self, cond: str) -> list:
        return [
            f"{e.utt_id} {' '.join(e.transcript)}" for e in self.entries_for(cond, "test")
        ]

    # ----- checkpointing --------------------------------------------------

    def _checkpointed(self, name: str, builder):
        """Train via builder() or reload a checkpoint recorded under the
        same config hash. Returns (model, history)."""
        models_dir = self.run_dir / "models"
        models_dir.mkdir(exist_ok=True)
        model_path = models_dir / f"{name}.dnnm"
        meta_path = models_dir / f"{name}.meta.json"
        chash = self.cfg.config_hash()
        if model_path.exists() and meta_path.exists():
            try:
                meta = json.loads(meta_path.read_text())
            except ValueError:
                meta = {}
            if meta.get("config_hash") == chash:
                log.info("reusing checkpoint %s", model_path)
                return nnet.load_model(model_path), meta["history"]
        model, history = builder()
        nnet.save_model(model, model_path)
        meta_path.write_text(
            json.dumps(
                {"config_hash": chash, "history": history}, indent=2, sort_keys=True
            )
            + "\n"
        )
        return model, history

    # ----- the matrix -----------------------------------------------------

    def run_matrix(self) -> ExperimentReport:
        cfg = self.cfg
        requested = [parse_cell(c) for c in cfg.cells]
        si_needed = sorted({(m, c) for _, m, c in requested})
        si_models: dict = {}
        histories: dict = {}
        for modality, cond in si_needed:
            name = f"si_{modality}_{cond}"
            si_models[(modality, cond)], histories[name] = self._checkpointed(
                name, lambda m=modality, c=cond: self.train_speaker_independent(m, c)
            )
        adapted: dict = {}
        for row, modality, cond in requested:
            if row == "si":
                continue
            parent = si_models[(modality, cond)]
            if row.startswith("st_"):
                variant = row[-1]
                name = f"st_{variant}_{modality}_{cond}"
                adapted[(row, modality, cond)], histories[name] = self._checkpointed(
                    name,
                    lambda p=parent, v=variant, m=modality, c=cond: (
                        self.adapt_speaker_targeted(p, v, m, c)
                    ),
                )
            else:  # sd: one model per adapted speaker
                speakers = cfg.sd_speakers
                if speakers is None:
                    speakers = list(range(self.manifest.num_speakers))
                per_spk = {}
                for spk in speakers:
                    name = f"sd_s{spk:02d}_{modality}_{cond}"
                    per_spk[spk], histories[name] = self._checkpointed(
                        name,
                        lambda p=parent, s=spk, m=modality, c=cond: (
                            self.adapt_speaker_dependent(p, s, m, c)
                        ),
                    )
                adapted[(row, modality, cond)] = per_spk

        cells: dict = {}
        hyp_dir = self.run_dir / "hyp"
        ref_dir = self.run_dir / "ref"
        hyp_dir.mkdir(exist_ok=True)
        ref_dir.mkdir(exist_ok=True)
        for cell_name in cfg.cells:
            row, modality, cond = parse_cell(cell_name)
            if row == "si":
                result, hyp = self.evaluate_model(si_models[(modality, cond)], modality, cond)
            elif row.startswith("st_"):
                result, hyp = self.evaluate_model(adapted[(row, modality, cond)], modality, cond)
            else:
                result, hyp = self._evaluate_sd(adapted[(row, modality, cond)], modality, cond)
            cells[cell_name] = result
            (hyp_dir / f"{cell_name}.txt").write_text("\n".join(hyp) + "\n")
            log.info(
                "cell %s: WER %s over %d utterances",
                cell_name, decoder_mod.wer_percent(result.wer.wer), result.utterances,
            )
        for cond in sorted({c for _, _, c in requested}):
            (ref_dir / f"{cond}.txt").write_text(
                "\n".join(self.reference_lines(cond)) + "\n"
            )

        report = ExperimentReport(
            seed=cfg.seed,
            config_hash=cfg.config_hash(),
            cells=cells,
            models=histories,
        )
        (self.run_dir / "report.json").write_text(report.to_json())
        (self.run_dir / "report.txt").write_text(report.to_text())
        (self.run_dir / "resolved_config.yaml").write_text(snapshot_yaml(cfg))
        corpus_mod.save_splits(self.splits, self.run_dir / "splits.json")
        return report

    def _evaluate_sd(self, per_speaker_models: dict, modality: str, cond: str):
        """Each adapted speaker's model scores that speaker's test set;
        the cell aggregates their counts."""
        results = []
        all_hyp: list = []
        per_speaker: dict = {}
        total_utts = 0
        correct = 0
        frames = 0
        for spk in sorted(per_speaker_models):
            cell, hyp = self.evaluate_model(
                per_speaker_models[spk], modality, cond, speakers={spk}
            )
            results.append(cell.wer)
            all_hyp.extend(hyp)
            per_speaker[str(spk)] = {
                "wer": cell.wer.wer,
                "errors": cell.wer.errors,
                "ref_words": cell.wer.ref_words,
                "utterances": cell.utterances,
            }
            total_utts += cell.utterances
            correct += cell.correct_frames
            frames += cell.total_frames
        return (
            CellResult(
                wer=decoder_mod.aggregate_wer(results),
                correct_frames=correct,
                total_frames=frames,
                utterances=total_utts,
                per_speaker=per_speaker,
            ),
            all_hyp,
        )


def run_matrix(cfg: ExperimentConfig, run_dir) -> ExperimentReport:
    return ExperimentRunner(cfg, run_dir).run_matrix()
