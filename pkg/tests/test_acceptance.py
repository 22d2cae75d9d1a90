"""End-to-end acceptance checks.

Eight checks, each printing one PASS/FAIL line directly to the terminal.
The two-speaker benchmark (check 6) trains the full experiment matrix at
4 speakers x 600 utterances for three seeds and takes most of the time;
its 30-minute runtime target is reported, not asserted.
"""

import itertools
import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from avasr import features as feat_mod
from avasr import nnet
from avasr.corpus import mix_waveforms
from avasr.decoder import (
    Grammar,
    Lexicon,
    build_graph,
    compute_wer,
    viterbi_decode,
    wer_percent,
)
from avasr.pipeline import ExperimentRunner, parse_experiment_config
from avasr.synth import SyntheticSpec, synthesize_corpus

DATA = Path(__file__).parent / "data"


def _report(capsys, num: int, desc: str, ok: bool, detail: str = ""):
    with capsys.disabled():
        print(f"\nCRITERION {num}: {'PASS' if ok else 'FAIL'} - {desc}")
    assert ok, f"criterion {num} failed: {desc} {detail}"


# ------------------------------------------------------------- criterion 1


def _arch(modality, variant):
    return nnet.ArchitectureSpec(
        modality=modality,
        variant=variant,
        num_hidden_layers=4,
        hidden_width=8,
        output_labels=5,
        acoustic_dim=440,
        visual_dim=1800 if "V" in modality else 0,
        identity_dim=34 if variant else 0,
        identity_embed_dim=8,
        injection_layer=1,
    )


def _one_hot_batch(spec, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, spec.acoustic_dim + spec.visual_dim))
    z = None
    if spec.variant is not None:
        ids = rng.integers(0, spec.identity_dim, size=n)
        z = np.zeros((n, spec.identity_dim))
        z[np.arange(n), ids] = 1.0
    labels = rng.integers(0, spec.output_labels, size=n)
    return nnet.Batch(x=x, z=z, labels=labels)


def test_criterion_1_gradients_all_architectures(capsys):
    """Backprop vs central finite differences, every parameter entry,
    all eight (modality, variant) pairs, relative error < 1e-4."""
    combos = [
        ("A", None), ("AV", None),
        ("AI", "A"), ("AI", "B"), ("AI", "C"),
        ("AVI", "A"), ("AVI", "B"), ("AVI", "C"),
    ]
    # Seeds chosen so every pre-activation sits > 0.01 from the ReLU kink:
    # central differences are only valid where the loss is differentiable,
    # and eps-sized perturbations must not cross an activation boundary.
    eps, start, worst, worst_at = 1e-4, time.monotonic(), 0.0, ""
    for modality, variant in combos:
        spec = _arch(modality, variant)
        model = nnet.init_model(spec, seed=5)
        batch = _one_hot_batch(spec, n=3, seed=17)
        _, grads = nnet.loss_and_gradients(model, batch)
        for name, p in model.params.items():
            flat = p.ravel()
            g = grads[name].ravel()
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                up = nnet.forward_loss(model, batch)
                flat[i] = keep - eps
                down = nnet.forward_loss(model, batch)
                flat[i] = keep
                numeric = (up - down) / (2 * eps)
                scale = max(abs(numeric), abs(g[i]))
                if scale < 1e-6:  # dead-unit zero gradient vs difference noise
                    continue
                rel = abs(numeric - g[i]) / scale
                if rel > worst:
                    worst, worst_at = rel, f"{modality}/{variant}:{name}[{i}]"
    elapsed = time.monotonic() - start
    ok = worst < 1e-4 and elapsed < 60.0
    _report(
        capsys, 1,
        f"gradient check, 8 architectures, worst rel err {worst:.2e} "
        f"at {worst_at or 'n/a'}, {elapsed:.1f}s (< 60s)",
        ok,
    )


# ------------------------------------------------------------- criterion 2


def test_criterion_2_adaptation_identity(capsys):
    """Zero-init identity pathway: bitwise-equal outputs (4-layer case);
    near-identity extra layer: >= 99% argmax agreement (5-layer AV)."""
    rng = np.random.default_rng(21)
    spec = nnet.ArchitectureSpec(
        modality="A", num_hidden_layers=4, hidden_width=16,
        output_labels=10, acoustic_dim=440,
    )
    parent = nnet.init_model(spec, seed=3)
    x = rng.normal(size=(1000, 440))
    ids = rng.integers(0, 6, size=1000)
    z = np.zeros((1000, 6))
    z[np.arange(1000), ids] = 1.0
    base = nnet.predict_posteriors(parent, x)
    max_diff = 0.0
    for variant in ("A", "B", "C"):
        ext = nnet.extend_for_identity(parent, variant, 6, seed=5)
        out = nnet.predict_posteriors(ext, x, z)
        max_diff = max(max_diff, float(np.max(np.abs(out - base))))

    av_spec = nnet.ArchitectureSpec(
        modality="AV", num_hidden_layers=4, hidden_width=16,
        output_labels=10, acoustic_dim=440, visual_dim=1800,
    )
    av_parent = nnet.init_model(av_spec, seed=4)
    xav = rng.normal(size=(1000, 2240))
    av_base = nnet.predict_posteriors(av_parent, xav)
    av_ext = nnet.extend_for_identity(av_parent, "A", 6, seed=5)
    av_out = nnet.predict_posteriors(av_ext, xav, z)
    agree = float(np.mean(av_base.argmax(axis=1) == av_out.argmax(axis=1)))
    ok = max_diff == 0.0 and av_ext.spec.num_hidden_layers == 5 and agree >= 0.99
    _report(
        capsys, 2,
        f"adaptation identity: max abs diff {max_diff} (exactly 0 required), "
        f"5-layer AV argmax agreement {agree:.3f} (>= 0.99)",
        ok,
    )


# ------------------------------------------------------------- criterion 3


def _enumerate_decode(post, graph, lexicon, priors=None):
    """Independent oracle: score every grammar sentence by forced alignment."""
    em = np.log(np.maximum(np.asarray(post, dtype=np.float64), 1e-300))
    if priors is not None:
        em = em - np.log(np.asarray(priors, dtype=np.float64))[None, :]
    T = em.shape[0]
    best = None
    for sentence in itertools.product(*(w for _, w in graph.grammar.slots)):
        phones = [p for word in sentence for p in lexicon.pron[word]]
        S = len(phones)
        if S > T:
            continue
        prev = np.full(S, -np.inf)
        prev[0] = em[0, phones[0]]
        for t in range(1, T):
            cur = np.full(S, -np.inf)
            for s in range(S):
                stay = prev[s] + graph.log_self
                enter = prev[s - 1] + graph.log_adv if s > 0 else -np.inf
                cur[s] = max(stay, enter) + em[t, phones[s]]
            prev = cur
        ranks = tuple(
            sorted(words).index(word)
            for (_, words), word in zip(graph.grammar.slots, sentence)
        )
        key = (-prev[S - 1], ranks)
        if best is None or key < best[0]:
            best = (key, list(sentence), prev[S - 1])
    return best[1], best[2]


def test_criterion_3_decoder_matches_brute_force(capsys):
    grammars = [
        (Grammar(slots=[("a", ["go", "stop"]), ("b", ["red", "blue", "tan"])]),
         Lexicon(pron={"go": (0, 1), "stop": (2,), "red": (3, 0),
                       "blue": (1, 2, 3), "tan": (4,)}), 5, 40),
        (Grammar(slots=[("a", [f"w{i}" for i in range(6)]),
                        ("b", [f"v{i}" for i in range(7)]),
                        ("c", [f"u{i}" for i in range(4)])]),
         Lexicon(pron={**{f"w{i}": (i % 8, (i + 3) % 8) for i in range(6)},
                       **{f"v{i}": ((i + 1) % 8,) for i in range(7)},
                       **{f"u{i}": (i % 8, (i + 5) % 8, (i + 2) % 8)
                          for i in range(4)}}), 8, 40),
        (Grammar(slots=[("a", [f"x{i}" for i in range(25)]),
                        ("b", [f"y{i}" for i in range(20)])]),
         Lexicon(pron={**{f"x{i}": (i % 9, (i + 4) % 9) for i in range(25)},
                       **{f"y{i}": ((i + 2) % 9, i % 9) for i in range(20)}}),
         9, 25),
    ]
    rng = np.random.default_rng(33)
    start, checked, mismatches = time.monotonic(), 0, []
    for grammar, lexicon, K, per in grammars:
        assert grammar.num_sentences <= 10_000
        graph = build_graph(grammar, lexicon, self_loop_prob=0.5)
        for trial in range(per):
            T = int(rng.integers(graph.min_path_states, graph.min_path_states + 18))
            post = rng.uniform(0.01, 1.0, size=(T, K))
            if trial % 3 == 0:  # force score ties with duplicated columns
                post[:, : K // 2] = post[:, K - K // 2:]
            post /= post.sum(axis=1, keepdims=True)
            priors = None
            if trial % 2:
                priors = rng.uniform(0.05, 1.0, size=K)
                priors /= priors.sum()
            got = viterbi_decode(post, graph, priors=priors)
            want_words, want_score = _enumerate_decode(post, graph, lexicon, priors)
            checked += 1
            if got.words != want_words or abs(got.score - want_score) > 1e-9:
                mismatches.append((grammar.num_sentences, trial))
    elapsed = time.monotonic() - start
    ok = not mismatches and checked >= 100 and elapsed < 60.0
    _report(
        capsys, 3,
        f"Viterbi equals sentence enumeration on {checked} random matrices "
        f"(scores within 1e-9, ties identical), {elapsed:.1f}s (< 60s)",
        ok, detail=f"mismatches={mismatches[:5]}",
    )


# ------------------------------------------------------------- criterion 4


def test_criterion_4_dsp_oracles(capsys):
    problems = []
    rng = np.random.default_rng(44)

    feat = rng.normal(size=(17, 40))
    stacked = feat_mod.stack_context(feat, radius=5)
    if stacked.shape != (17, 440):
        problems.append(f"stack_context shape {stacked.shape}")

    cfg = feat_mod.LogMelConfig(sample_rate=8000, window_length=0.025,
                                hop_length=0.010, num_bins=40)
    fb = feat_mod.mel_filterbank(cfg)  # num_bins x (fft/2 + 1)
    n_fft = fb.shape[1] * 2 - 2
    win = np.hamming(int(round(cfg.sample_rate * cfg.window_length)))
    for tone in rng.uniform(300.0, 3500.0, size=8):
        t = np.arange(8000) / cfg.sample_rate
        wave = 0.4 * np.sin(2 * np.pi * tone * t)
        logmel = feat_mod.compute_logmel(wave, cfg)
        seg = wave[: len(win)] * win
        spec = np.abs(np.fft.rfft(seg, n=n_fft)) ** 2
        oracle = np.array(
            [sum(fb[b, k] * spec[k] for k in range(len(spec)))
             for b in range(40)]
        )
        if int(logmel[0].argmax()) != int(oracle.argmax()):
            problems.append(f"mel argmax at {tone:.0f}Hz")

    a = rng.integers(-20000, 20000, size=300).astype(np.float64) / 32768.0
    b = rng.integers(-20000, 20000, size=220).astype(np.float64) / 32768.0
    mixed = mix_waveforms(a, b, gain=0.5)
    want = np.array(
        [0.5 * (a[i] + (b[i] if i < len(b) else 0.0)) for i in range(len(a))]
    )
    if not np.array_equal(mixed, want):
        problems.append("mix_waveforms not sample-exact")

    dims = {}
    x, w = np.zeros(440), np.zeros(1800)
    z = np.zeros(34)
    z[3] = 1.0
    dims["A"] = feat_mod.assemble_example("A", None, x).input.size
    dims["AV"] = feat_mod.assemble_example("AV", None, x, w=w).input.size
    dims["AI-A"] = feat_mod.assemble_example("AI", "A", x, z=z).input.size
    dims["AVI-A"] = feat_mod.assemble_example("AVI", "A", x, w=w, z=z).input.size
    if dims != {"A": 440, "AV": 2240, "AI-A": 474, "AVI-A": 2274}:
        problems.append(f"assembled dims {dims}")

    _report(
        capsys, 4,
        "DSP oracles: 440-dim stacking, sine-tone mel argmax vs direct DFT, "
        "sample-exact mixing, assembled dims {440, 2240, 474, 2274}",
        not problems, detail=str(problems),
    )


# ------------------------------------------------------------- criterion 5


def test_criterion_5_overfit_sanity(capsys, tmp_path):
    start = time.monotonic()
    manifest = synthesize_corpus(
        SyntheticSpec(num_speakers=2, utterances_per_speaker=3, seed=9), tmp_path
    )
    cfg = parse_experiment_config({"corpus": {"synth": {}}})
    xs, ys = [], []
    from avasr.pipeline import FeatureStore

    store = FeatureStore(manifest, cfg, tmp_path / "cache")
    for entry in manifest.entries:
        trunk = store.trunk(entry, "a")
        xs.append(trunk)
        ys.append(store.labels(entry, trunk.shape[0]))
    x = np.concatenate(xs)[:100]
    y = np.concatenate(ys)[:100]
    assert x.shape == (100, 440)

    spec = nnet.ArchitectureSpec(
        modality="A", num_hidden_layers=4, hidden_width=64,
        output_labels=int(y.max()) + 1, acoustic_dim=440,
    )
    model = nnet.init_model(spec, seed=1)
    batch = nnet.Batch(x=x, labels=y)
    train_cfg = nnet.TrainConfig(
        learning_rate=0.01, batch_size=128, max_epochs=200, patience=200, seed=1
    )
    model, history = nnet.fit(model, batch, batch, train_cfg)
    acc = float(np.mean(nnet.predict_posteriors(model, x).argmax(axis=1) == y))
    elapsed = time.monotonic() - start
    ok = acc > 0.99 and elapsed < 120.0
    _report(
        capsys, 5,
        f"overfit sanity: {acc:.1%} frame accuracy on 100 frames after "
        f"{history['epochs_run']} epochs (lr 0.01, batch 128), "
        f"{elapsed:.1f}s (< 120s)",
        ok,
    )


# ------------------------------------------------------------- criterion 6


BENCH_CONFIG = {
    "corpus": {"synth": {"num_speakers": 4, "utterances_per_speaker": 600}},
    "train": {"learning_rate": 0.01, "batch_size": 128,
              "max_epochs": 150, "patience": 15},
    "adapt": {"learning_rate": 0.005, "batch_size": 128,
              "max_epochs": 300, "patience": 40,
              "warmup_epochs": 300, "warmup_learning_rate": 0.05},
    "cells": ["si.a.one", "si.a.two", "si.av.two", "st_a.a.two", "sd.a.two"],
}


def test_criterion_6_two_speaker_benchmark(capsys, tmp_path):
    """Mixed-speech degradation and its three recoveries, 3 seeds,
    every inequality with a >= 10% relative margin."""
    start = time.monotonic()
    failures, lines = [], []
    for seed in (101, 102, 103):
        data = {**{k: v for k, v in BENCH_CONFIG.items()}, "seed": seed,
                "cache_dir": str(tmp_path / f"cache_{seed}")}
        cfg = parse_experiment_config(json.loads(json.dumps(data)))
        report = ExperimentRunner(cfg, tmp_path / f"run_{seed}").run_matrix()
        cells = {name: res.wer.wer for name, res in report.cells.items()}
        n_test = report.cells["si.a.two"].utterances
        if n_test < 200:
            failures.append(f"seed {seed}: only {n_test} mixed test utterances")

        si_one, si_two = cells["si.a.one"], cells["si.a.two"]
        if not si_two >= 3.0 * si_one * 1.1 or si_two <= 0.0:
            failures.append(f"seed {seed}: (a) {si_two:.4f} !> 3x{si_one:.4f}")
        if not cells["si.av.two"] <= 0.9 * si_two:
            failures.append(f"seed {seed}: (b) av {cells['si.av.two']:.4f}")
        if not cells["st_a.a.two"] <= 0.9 * si_two:
            failures.append(f"seed {seed}: (c) st {cells['st_a.a.two']:.4f}")
        si_spk = report.cells["si.a.two"].per_speaker
        sd_spk = report.cells["sd.a.two"].per_speaker
        for spk in sorted(si_spk):
            if not sd_spk[spk]["wer"] <= 0.9 * si_spk[spk]["wer"]:
                failures.append(
                    f"seed {seed}: (d) speaker {spk} sd {sd_spk[spk]['wer']:.4f} "
                    f"vs si {si_spk[spk]['wer']:.4f}"
                )
        lines.append(
            f"seed {seed}: si.one={wer_percent(si_one)} si.two={wer_percent(si_two)} "
            f"av={wer_percent(cells['si.av.two'])} st={wer_percent(cells['st_a.a.two'])} "
            f"sd={wer_percent(cells['sd.a.two'])} ({n_test} test utts)"
        )
        shutil.rmtree(tmp_path / f"cache_{seed}")  # ~2 GB per seed

    elapsed = time.monotonic() - start
    with capsys.disabled():
        for line in lines:
            print(f"\n  {line}")
        print(f"\n  benchmark runtime {elapsed / 60.0:.1f} min (target < 30 min)")
    _report(
        capsys, 6,
        "two-speaker benchmark: mixing degrades SI >3x; visual, targeted, "
        "and dependent models each recover >= 10% relative, 3 seeds",
        not failures, detail="; ".join(failures),
    )


# ------------------------------------------------------------- criterion 7


def test_criterion_7_wer_golden_file(capsys):
    records = json.loads((DATA / "wer_golden.json").read_text())
    assert len(records) == 50
    bad = []
    for i, rec in enumerate(records):
        rep = compute_wer(rec["reference"], rec["hypothesis"])
        got = (rep.substitutions, rep.deletions, rep.insertions)
        want = (rec["substitutions"], rec["deletions"], rec["insertions"])
        if got != want:
            bad.append((i, got, want))
    pins = [
        wer_percent(compute_wer(rec["reference"], rec["hypothesis"]).wer)
        for rec in records[:3]
    ]
    if pins != ["0.0%", "100.0%", "16.7%"]:
        bad.append(("forced-cases", pins))
    _report(
        capsys, 7,
        "WER scorer: exact S/D/I on all 50 golden pairs "
        "(identity 0.0%, empty hypothesis 100.0%, one sub in six 16.7%)",
        not bad, detail=str(bad[:3]),
    )


# ------------------------------------------------------------- criterion 8


def test_criterion_8_matrix_determinism(capsys, tmp_path):
    data = {
        "seed": 13,
        "corpus": {"synth": {"num_speakers": 2, "utterances_per_speaker": 10}},
        "model": {"hidden_width": 16},
        "train": {"max_epochs": 3, "patience": 3},
        "adapt": {"max_epochs": 2, "patience": 2, "warmup_epochs": 1},
        "cells": ["si.a.two", "st_a.a.two"],
    }
    outputs = []
    for run in ("first", "second"):
        cfg = parse_experiment_config(json.loads(json.dumps(data)))
        cfg.cache_dir = str(tmp_path / f"cache_{run}")
        out = tmp_path / run
        ExperimentRunner(cfg, out).run_matrix()
        blob = {
            name: (out / name).read_bytes()
            for name in ("report.json", "report.txt", "resolved_config.yaml")
        }
        for hyp in sorted((out / "hyp").glob("*.txt")):
            blob[f"hyp/{hyp.name}"] = hyp.read_bytes()
        outputs.append(blob)
    same = outputs[0] == outputs[1]
    _report(
        capsys, 8,
        "matrix rerun with identical config and seed is byte-identical "
        f"across {len(outputs[0])} report and hypothesis files",
        same,
    )
