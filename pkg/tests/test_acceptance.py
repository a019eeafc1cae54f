"""Acceptance criteria, one test each.  Every test records a PASS/FAIL line
that is printed in the terminal summary."""

import time
from pathlib import Path

import numpy as np

from headprune import autodiff as ad
from headprune.analysis import (ALL_SPECS, OFFSETS, build_profiles, classify_syntactic, collect_records, confidence,
                                dependency_accuracy, positional_baseline, positional_score, rare_word_score)
from headprune.cli import EXIT_OK, main
from headprune.data import generate_task
from headprune.gates import GateSet, expected_gate, prob_one, prob_zero
from headprune.lrp import conservation_check, propagate_graph
from headprune.model import ATTENTION_TYPES, HeadId, ModelConfig, Transformer
from headprune.training import batch_arrays, cross_entropy, make_batches, token_accuracy
from oracles import (all_paths, bf_baseline, bf_confidence, bf_dependency, bf_positional, bf_rare, mc_gates,
                     random_dag, relation_pairs)


def test_c01_gradients_of_full_gated_objective(criterion):
    t0 = time.time()
    corpus = generate_task("copy", 20, seed=5, n_symbols=8, min_len=4, max_len=6)
    idx = make_batches(corpus, 40)[0]
    lam = 0.05

    def build(rng):
        cfg = ModelConfig(num_layers=2, num_heads=4, d_model=16, d_ff=32,
                          src_vocab=len(corpus.src_vocab), tgt_vocab=len(corpus.tgt_vocab))
        model = Transformer(cfg, seed=int(rng.integers(1000)))
        gates = GateSet.create(2, 4, ATTENTION_TYPES)
        for k in gates.keys():
            gates.log_alpha[k].data[...] = rng.uniform(-1.0, 2.0, size=4)
        noise = {k: rng.uniform(0.05, 0.95, size=4) for k in gates.keys()}
        src, tgt_in, tgt = batch_arrays(corpus, idx, cfg.bos_id)
        leaves = list(model.params.values()) + gates.params()

        def objective(_):
            g = gates.sample_with_noise(noise)
            xent = cross_entropy(model.forward(src, tgt_in, g).logits, tgt)
            return ad.add(xent, ad.scale(gates.l_c(), lam))

        return leaves, objective

    worst = ad.gradcheck(build, seed=0, h=1e-5, max_entries=100)
    secs = time.time() - t0
    ok = worst < 1e-4 and secs < 60
    criterion("C1 gradient check", ok, f"max rel error {worst:.2e} over 100 entries, {secs:.1f}s")
    assert ok


def test_c02_lrp_conservation_on_trained_copy_model(copy_setup, criterion):
    m, held = copy_setup.model, copy_setup.heldout
    worst = degenerate = 0.0
    slowest = 0.0
    for idx in make_batches(held, 256)[:4]:
        t = time.time()
        src, tgt_in, _ = batch_arrays(held, idx, m.config.bos_id)
        for rep in conservation_check(m, src, tgt_in):
            worst = max(worst, rep.max_rel_error)
            degenerate = max(degenerate, rep.max_degenerate)
        slowest = max(slowest, time.time() - t)
    ok = worst < 1e-4 and slowest < 60
    criterion("C2 LRP conservation", ok, f"max rel error {worst:.2e}, degenerate mass up to {degenerate:.2e} "
                                         f"(reported separately), slowest batch {slowest:.1f}s")
    assert ok


def test_c03_lrp_matches_all_paths_oracle(criterion):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        g = random_dag(rng, int(rng.integers(4, 13)))
        target = len(g) - 1
        got = propagate_graph(g, target, 1.0).relevance
        want = all_paths(g, target, 1.0)
        for v in set(want) | set(got):
            worst = max(worst, abs(got.get(v, 0.0) - want.get(v, 0.0)))
    ok = worst <= 1e-9
    criterion("C3 LRP oracle", ok, f"50 DAGs of <= 12 nodes, max |diff| {worst:.2e}")
    assert ok


def test_c04_hard_concrete_against_monte_carlo(criterion):
    worst = 0.0
    for i, la in enumerate([-4.0, -1.0, 0.0, 1.0, 4.0]):
        g = mc_gates(la, n=1_000_000, seed=100 + i)
        worst = max(worst, abs(np.mean(g == 0) - prob_zero(la)), abs(np.mean(g == 1) - prob_one(la)),
                    abs(g.mean() - expected_gate(la)))
    ok = worst <= 0.005
    criterion("C4 Hard Concrete closed forms", ok, f"max |closed form - MC| {worst:.4f} at 10^6 samples")
    assert ok


def test_c05_gates_binarize(copy_sweep, criterion):
    report, _ = copy_sweep
    fracs = []
    for run in report.runs:
        p = np.concatenate([np.maximum(run.gates.prob_zero()[k], run.gates.prob_one()[k]) for k in run.gates.keys()])
        fracs.append(float(np.mean(p > 0.9)))
    ok = min(fracs) >= 0.9
    criterion("C5 gate binarization", ok, "binarized fraction per lambda " + " ".join(f"{f:.2f}" for f in fracs))
    assert ok


def test_c06_pruning_keeps_copy_quality(copy_setup, copy_sweep, criterion):
    report, secs = copy_sweep
    base = token_accuracy(copy_setup.model, copy_setup.heldout)
    total = copy_setup.model.config.num_layers * copy_setup.model.config.num_heads
    good = [r for r in report.runs if r.retained["encoder-self"] <= total / 2 and base - r.metric <= 0.01]
    elapsed = copy_setup.seconds + secs
    ok = base > 0.99 and bool(good) and elapsed < 30 * 60
    best = min(good, key=lambda r: r.retained["encoder-self"]) if good else None
    detail = f"base accuracy {base:.4f}; "
    detail += (f"lambda={best.lam:.4g} keeps {best.retained['encoder-self']}/{total} encoder heads at {best.metric:.4f}"
               if best else "no lambda prunes half the encoder heads within 1 point")
    criterion("C6 pruning preserves quality", ok, detail + f"; train+sweep {elapsed / 60:.1f} min")
    assert ok


def test_c07_positional_heads_survive_pruning(dep_setup, dep_sweep, criterion):
    report, _ = dep_sweep
    m = dep_setup.model
    profiles = build_profiles(m, dep_setup.heldout, rarity_cutoff=20)
    positional = {p.head for p in profiles
                  if "positional(-1)" in p.labels or "positional(+1)" in p.labels}
    lines, ok = [], bool(positional)
    checked = 0
    for run in report.runs:
        disc = run.gates.discretize()
        kept = {HeadId("encoder-self", l, h) for l in range(m.config.num_layers)
                for h in range(m.config.num_heads) if disc[("encoder-self", l)][h] > 0}
        survives = bool(kept & positional)
        if len(kept) >= 4:
            checked += 1
            ok &= survives
        lines.append(f"{run.lam:.3g}:{len(kept)}{'+' if survives else '-'}")
    ok &= checked > 0
    names = ",".join(f"{h.layer}/{h.head}" for h in sorted(positional))
    criterion("C7 positional heads retained", ok,
              f"positional heads [{names}]; lambda:kept(+ if one survives) " + " ".join(lines))
    assert ok


def test_c08_classifiers_equal_brute_force(dep_setup, criterion):
    held, _ = dep_setup.heldout.split(50)
    records = collect_records(dep_setup.model, held)
    ann = [p.arcs for p in held.pairs]
    ranks = held.ranks
    cutoff = 20
    mismatches, compared = [], 0
    for hid, rec in records.items():
        checks = [("confidence", confidence(rec), bf_confidence(rec)),
                  ("rare", rare_word_score(rec, ranks, cutoff), bf_rare(rec, ranks, cutoff))]
        checks += [(f"pos{o:+d}", positional_score(rec, o), bf_positional(rec, o)) for o in OFFSETS]
        for spec in ALL_SPECS:
            if any(relation_pairs(a, spec) for a in ann):
                checks.append((spec.label(), dependency_accuracy(rec, ann, spec), bf_dependency(rec, ann, spec)))
        for name, got, want in checks:
            compared += 1
            if got != want:
                mismatches.append(f"{hid.label()} {name}")
    for spec in ALL_SPECS:
        if any(relation_pairs(a, spec) for a in ann):
            compared += 1
            if positional_baseline(ann, spec) != bf_baseline(ann, spec):
                mismatches.append(f"baseline {spec.label()}")
    ok = not mismatches and compared > 100
    criterion("C8 classifier oracles", ok, f"{compared} exact comparisons on 50 sentences, "
                                           f"{len(mismatches)} mismatches {mismatches[:3]}")
    assert ok


def test_c09_threshold_fixtures(criterion):
    a, b = classify_syntactic(0.45, 0.35), classify_syntactic(0.74, 0.72)
    ok = a and not b
    criterion("C9 syntactic thresholds", ok, f"(0.45, 0.35) -> {a}, (0.74, 0.72) -> {b}")
    assert ok


def test_c10_frozen_decoder_is_bitwise_unchanged(copy_setup, copy_sweep, criterion):
    report, _ = copy_sweep
    base = copy_setup.model
    changed = []
    for run in report.runs:
        for name in base.decoder_params():
            if run.model.params[name].data.tobytes() != base.params[name].data.tobytes():
                changed.append((run.lam, name))
    n = len(base.decoder_params())
    ok = not changed
    criterion("C10 frozen decoder", ok, f"{n} decoder tensors x {len(report.runs)} runs, {len(changed)} changed")
    assert ok


TINY = """\
task: {kind: dep-grammar, size: 80, heldout_size: 16}
model: {d_model: 16, d_ff: 32}
train: {max_steps: 10, batch_tokens: 96, warmup_steps: 5}
prune: {max_steps: 6, freeze_decoder: true}
analysis: {relevance_sentences: 8, rarity_cutoff: 20}
"""


def _outputs(d: Path):
    return sorted(p.relative_to(d) for p in d.rglob("*") if p.suffix in (".csv", ".tsv"))


def test_c11_rerun_from_manifest_is_byte_identical(tmp_path, criterion):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(TINY)
    first = tmp_path / "first"
    runs = {
        "train": ["train", "--config", str(cfg), "--seed", "4", "--out", str(first / "train")],
        "prune": ["prune", "--config", str(cfg), "--checkpoint", str(first / "train" / "checkpoint.npz"),
                  "--lambda", "0.02,0.3", "--out", str(first / "prune")],
        "analyze": ["analyze", "--config", str(cfg), "--checkpoint", str(first / "train" / "checkpoint.npz"),
                    "--pruned", str(first / "prune" / "lambda_00" / "checkpoint.npz"),
                    str(first / "prune" / "lambda_01" / "checkpoint.npz"), "--out", str(first / "analyze")],
        "report": ["report", "--sweep", str(first / "prune"), "--profiles", str(first / "analyze" / "profiles.json"),
                   "--out", str(first / "report")],
    }
    for argv in runs.values():
        assert main(argv) == EXIT_OK
    compared, differ = 0, []
    for name in runs:
        again = tmp_path / "again" / name
        assert main(["rerun", "--manifest", str(first / name / "manifest.json"), "--out", str(again)]) == EXIT_OK
        files = _outputs(first / name)
        assert files == _outputs(again)
        for rel in files:
            compared += 1
            if (first / name / rel).read_bytes() != (again / rel).read_bytes():
                differ.append(f"{name}/{rel}")
    ok = not differ and compared >= 8
    criterion("C11 reproducible reruns", ok, f"{compared} CSV/TSV files across 4 commands, {len(differ)} differ {differ}")
    assert ok

