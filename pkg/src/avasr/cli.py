"""Command-line surface.

Subcommands: synth, mix, features, train-si, adapt-st, adapt-sd, decode,
score, matrix. Logging goes to standard error; data goes only to paths
named by flags. Exit codes: 0 success, 1 usage, 2 data/config/format
error, 3 numeric failure. The cache directory can be pinned with the
AVASR_CACHE_DIR environment variable.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import decoder as decoder_mod
from . import features as feat_mod
from . import nnet, pipeline
from .errors import AvasrError, DataError, NumericError
from .synth import synthesize_corpus

log = logging.getLogger("avasr")


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, not argparse's default 2 (2 means data error here)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="avasr",
        description=(
            "Speaker-targeted audio-visual speech recognition workbench "
            "on simulated two-speaker mixtures"
        ),
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic corpus and splits")
    p.add_argument("--config", help="experiment config (defaults used when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="corpus output directory")

    p = sub.add_parser("mix", help="write a mixture manifest for one split")
    p.add_argument("--manifest", required=True, help="corpus manifest")
    p.add_argument("--splits", required=True, help="splits file")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--seed", type=int, default=0, help="background pairing seed")
    p.add_argument("--out", required=True, help="mixture manifest output path")

    p = sub.add_parser("features", help="dump model-input feature matrices")
    p.add_argument("--config", help="experiment config for frontend settings")
    p.add_argument("--manifest", required=True, help="corpus manifest")
    p.add_argument("--mixtures", help="mixture manifest (defaults to the corpus itself)")
    p.add_argument("--modality", default="a", choices=("a", "av"))
    p.add_argument("--out", required=True, help="output directory for .feat files")

    for name, extra in (
        ("train-si", ()),
        ("adapt-st", ("model", "variant")),
        ("adapt-sd", ("model", "speaker")),
    ):
        p = sub.add_parser(
            name,
            help={
                "train-si": "train a speaker-independent model",
                "adapt-st": "adapt an SI model into a speaker-targeted one",
                "adapt-sd": "adapt an SI model to a single speaker",
            }[name],
        )
        p.add_argument("--config", required=True, help="experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--modality", default="a", choices=("a", "av"))
        p.add_argument("--condition", default="two", choices=("one", "two"))
        p.add_argument("--out", required=True, help="model output path")
        if "model" in extra:
            p.add_argument("--model", required=True, help="speaker-independent model file")
        if "variant" in extra:
            p.add_argument("--variant", required=True, choices=("a", "b", "c"))
        if "speaker" in extra:
            p.add_argument("--speaker", required=True, type=int, help="target speaker id")

    p = sub.add_parser("decode", help="decode the test split with a trained model")
    p.add_argument("--config", required=True, help="experiment config")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--modality", default="a", choices=("a", "av"))
    p.add_argument("--condition", default="two", choices=("one", "two"))
    p.add_argument("--out", required=True, help="hypothesis output file")

    p = sub.add_parser("score", help="word error rate of a hypothesis file")
    p.add_argument("--ref", required=True, help="reference transcript file")
    p.add_argument("--hyp", required=True, help="hypothesis transcript file")
    p.add_argument("--out", help="write the per-utterance report here")

    p = sub.add_parser("matrix", help="run the configured experiment matrix")
    p.add_argument("--config", required=True, help="experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="run output directory")

    return parser


def _load_cfg(args) -> pipeline.ExperimentConfig:
    seed = getattr(args, "seed", None)
    if getattr(args, "config", None):
        return pipeline.load_experiment_config(args.config, seed_override=seed)
    data: dict = {"corpus": {"synth": {}}}
    if seed is not None:
        data["seed"] = seed
    return pipeline.parse_experiment_config(data)


def _cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    spec = pipeline.synth_spec_from_config(cfg)
    out = Path(args.out)
    manifest = synthesize_corpus(spec, out)
    splits = corpus_mod.make_splits(manifest, cfg.split_ratios, cfg.split_seed)
    corpus_mod.save_splits(splits, out / "splits.json")
    log.info(
        "wrote %d utterances for %d speakers under %s",
        len(manifest), manifest.num_speakers, out,
    )
    return 0


def _cmd_mix(args) -> int:
    manifest = corpus_mod.load_manifest(args.manifest)
    splits = corpus_mod.load_splits(args.splits)
    ids = getattr(splits, args.split)
    mixtures = corpus_mod.make_mixture_manifest(
        manifest, ids, splits.background, args.seed
    )
    corpus_mod.write_manifest(mixtures, args.out)
    log.info("wrote %d mixtures to %s", len(mixtures), args.out)
    return 0


def _cmd_features(args) -> int:
    cfg = _load_cfg(args)
    manifest = corpus_mod.load_manifest(args.manifest)
    entries = manifest.entries
    if args.mixtures:
        entries = corpus_mod.load_manifest(
            args.mixtures, manifest.num_speakers
        ).entries
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry in entries:
        trunk = pipeline.compute_trunk(manifest, entry, args.modality, cfg)
        feat_mod.write_feat(out / f"{entry.utt_id}.feat", trunk)
    log.info("wrote %d feature matrices to %s", len(entries), out)
    return 0


def _runner_for(args, cfg) -> pipeline.ExperimentRunner:
    return pipeline.ExperimentRunner(cfg, Path(args.out).resolve().parent)


def _cmd_train_si(args) -> int:
    cfg = _load_cfg(args)
    runner = _runner_for(args, cfg)
    model, _ = runner.train_speaker_independent(args.modality, args.condition)
    nnet.save_model(model, args.out)
    log.info("saved %s", args.out)
    return 0


def _cmd_adapt_st(args) -> int:
    cfg = _load_cfg(args)
    runner = _runner_for(args, cfg)
    si_model = nnet.load_model(args.model)
    model, _ = runner.adapt_speaker_targeted(
        si_model, args.variant, args.modality, args.condition
    )
    nnet.save_model(model, args.out)
    log.info("saved %s", args.out)
    return 0


def _cmd_adapt_sd(args) -> int:
    cfg = _load_cfg(args)
    runner = _runner_for(args, cfg)
    si_model = nnet.load_model(args.model)
    model, _ = runner.adapt_speaker_dependent(
        si_model, args.speaker, args.modality, args.condition
    )
    nnet.save_model(model, args.out)
    log.info("saved %s", args.out)
    return 0


def _cmd_decode(args) -> int:
    cfg = _load_cfg(args)
    runner = _runner_for(args, cfg)
    model = nnet.load_model(args.model)
    _, hyp_lines = runner.evaluate_model(model, args.modality, args.condition)
    Path(args.out).write_text("\n".join(hyp_lines) + "\n")
    log.info("wrote %d hypotheses to %s", len(hyp_lines), args.out)
    return 0


def _read_trans(path) -> dict:
    out: dict = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read transcript file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split()
        if parts[0] in out:
            raise DataError(f"{path}:{lineno}: duplicate utt_id {parts[0]!r}")
        out[parts[0]] = parts[1:]
    if not out:
        raise DataError(f"{path}: no transcripts")
    return out


def _cmd_score(args) -> int:
    refs = _read_trans(args.ref)
    hyps = _read_trans(args.hyp)
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if missing:
        raise DataError(f"hypothesis file lacks utt_id {missing[0]!r}")
    if extra:
        raise DataError(f"hypothesis file has unknown utt_id {extra[0]!r}")
    items = [
        (utt_id, decoder_mod.compute_wer(refs[utt_id], hyps[utt_id]))
        for utt_id in sorted(refs)
    ]
    total = decoder_mod.aggregate_wer(rep for _, rep in items)
    if args.out:
        Path(args.out).write_text(decoder_mod.render_score_report(items))
    print(decoder_mod.wer_percent(total.wer))
    return 0


def _cmd_matrix(args) -> int:
    cfg = _load_cfg(args)
    runner = pipeline.ExperimentRunner(cfg, args.out)
    report = runner.run_matrix()
    log.info("report written to %s", Path(args.out) / "report.json")
    for name in sorted(report.cells):
        log.info(
            "%s WER %s", name, decoder_mod.wer_percent(report.cells[name].wer.wer)
        )
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "mix": _cmd_mix,
    "features": _cmd_features,
    "train-si": _cmd_train_si,
    "adapt-st": _cmd_adapt_st,
    "adapt-sd": _cmd_adapt_sd,
    "decode": _cmd_decode,
    "score": _cmd_score,
    "matrix": _cmd_matrix,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s avasr: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 3
    except AvasrError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
