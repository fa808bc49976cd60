"""Acceptance gate: one test per release criterion, each printing a
single PASS/FAIL line (emitted with capture suspended so the verdicts
show up in plain `pytest -v` output).

Criteria 5-7 share one training-matrix fixture (3 seeds x 3 arms on the
frozen toy language pair); its budgets and the dev-BLEU target were
calibrated once on that corpus and are pinned here as constants.
"""

import hashlib
import json
import math
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from test_metrics import naive_bleu, naive_prec, _rand_corpus
from test_samples import reconstruct

from bdlm.dictionary import BilingualDictionary, DictEntry, InfoKind, \
    load_dictionary
from bdlm.metrics import EvalReport, corpus_bleu, prec_info
from bdlm.model import Model, ModelConfig, load_checkpoint, save_checkpoint
from bdlm.samples import Objective, PretrainConfig, TypeTable, \
    build_dataset, make_mlm, make_rlm, select_spans, write_shard
from bdlm.errors import MissingPayload, NoMappableWords, SampleTooLong
from bdlm.synth import read_tsv, synth_toy
from bdlm.trainer import Batch, TrainConfig, _forward_loss, collate, \
    evaluate_batches, finetune, make_nmt_batch, pretrain, translate_corpus
from bdlm.vocab import Vocabulary, build_vocab


_CAPMAN = None


@pytest.fixture(autouse=True)
def _find_capture_manager(request):
    global _CAPMAN
    _CAPMAN = request.config.pluginmanager.getplugin("capturemanager")


def report(criterion, passed, detail):
    line = f"[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}"
    if _CAPMAN is not None:
        # pytest captures at the fd level, so even the real stdout is
        # swallowed on success; suspend capture so every verdict is visible
        with _CAPMAN.global_and_fixture_disabled():
            print(line, flush=True)
    else:
        print(line, file=sys.__stdout__, flush=True)
    assert passed, line


# ---------------------------------------------------------------- helpers

def _pair_dictionary(words, cipher):
    entries = []
    for w in words:
        entries.append(DictEntry(w, "xx", {
            InfoKind.TRANSLATION: [cipher[w]],
            InfoKind.POS: ["noun"],
            InfoKind.SYNONYM: [w],
        }))
        entries.append(DictEntry(cipher[w], "yy", {
            InfoKind.TRANSLATION: [w],
        }))
    return BilingualDictionary(entries)


def _micro_task(seed=0):
    """Tiny two-language world with full dictionary coverage."""
    rng = np.random.default_rng(seed)
    src_words = ["".join(chr(97 + c) for c in rng.integers(0, 13, size=3))
                 for _ in range(20)]
    src_words = sorted(set(src_words))
    cipher = {w: w[::-1] + "o" for w in src_words}
    dico = _pair_dictionary(src_words, cipher)
    vocab_lines = [" ".join(src_words), " ".join(cipher.values()), "noun"]
    vocab = build_vocab(vocab_lines, target_size=400)
    return src_words, cipher, dico, vocab


# ------------------------------------------------------- criterion 1

def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    src_words, cipher, dico, vocab = _micro_task(3)
    corpus = [(" ".join(w for w in src_words[i:i + 4]), "xx")
              for i in range(6)]
    config = PretrainConfig(("xx", "yy"), mask_ratio=0.5, sample_rate=2.0,
                            seed=1)
    samples, _ = build_dataset(corpus, dico, config, vocab)
    objectives = {s.objective for s in samples[:6]}
    assert len(objectives) >= 2  # the probe batch mixes objectives
    batch = collate(samples[:6])

    cfg = ModelConfig(vocab_size=len(vocab.subwords), n_types=7, d_model=8,
                      n_heads=2, enc_layers=1, dec_layers=1, ffn_dim=32,
                      dropout=0.0, max_len=64, label_smoothing=0.1)
    model = Model.init(cfg, seed=20, dtype=np.float64)

    # central differences are invalid across a relu kink; this probe point
    # (model seed chosen by a one-off scan) keeps every ffn pre-activation
    # at least 10*h away from zero, asserted via a recording relu
    from bdlm import autodiff as ad
    clearances = []
    real_relu = ad.relu
    ad.relu = lambda x: (clearances.append(float(np.abs(x.data).min())),
                         real_relu(x))[1]
    try:
        loss, _ = _forward_loss(model, batch, True, False, None)
    finally:
        ad.relu = real_relu
    assert min(clearances) > 1e-3
    loss.backward()
    analytic = {k: t.grad.copy() for k, t in model.params.items()}

    h = 1e-4
    worst = 0.0
    worst_name = ""
    for name, t in model.params.items():
        fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up, _ = _forward_loss(model, batch, True, False, None)
            flat[i] = keep - h
            dn, _ = _forward_loss(model, batch, True, False, None)
            flat[i] = keep
            fd_flat[i] = (float(up.data) - float(dn.data)) / (2 * h)
        scale = max(np.abs(analytic[name]).max(), np.abs(fd).max())
        # attention key biases are softmax-invariant: analytic and numeric
        # are both pure roundoff there, so tiny scales match by definition
        rel = 0.0 if scale < 1e-8 else np.abs(analytic[name] - fd).max() / scale
        if rel > worst:
            worst, worst_name = rel, name
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-5 and elapsed < 120,
           f"max tensor rel err {worst:.2e} ({worst_name}), "
           f"{elapsed:.0f}s for {sum(t.data.size for t in model.params.values())} params")


# ------------------------------------------------------- criterion 2

def test_criterion_2_sample_soundness():
    start = time.perf_counter()
    types = TypeTable(("xx", "yy"))
    rng = np.random.default_rng(202)
    n_checked = failures = 0
    rounds = 0
    while n_checked < 10_000:
        rounds += 1
        src_words, cipher, dico, vocab = _micro_task(rng.integers(1 << 30))
        kinds = (InfoKind.TRANSLATION, InfoKind.POS, InfoKind.SYNONYM)
        for _ in range(900):
            if n_checked >= 10_000:
                break
            n = int(rng.integers(1, 12))
            words = [src_words[i] for i in rng.integers(len(src_words), size=n)]
            want = vocab.encode_words(words).ids
            try:
                spans = select_spans(words, dico, "xx", 0.3, rng)
                if rng.random() < 0.5:
                    s = make_mlm(words, "xx", spans, vocab, types)
                else:
                    kind = kinds[int(rng.integers(len(kinds)))]
                    s = make_rlm(words, "xx", spans, vocab, types, kind, rng)
            except (NoMappableWords, MissingPayload, SampleTooLong):
                continue
            s.validate()
            if reconstruct(s, types.lang_id("xx")) != want:
                failures += 1
            n_checked += 1
    elapsed = time.perf_counter() - start
    report(2, failures == 0 and n_checked >= 10_000,
           f"{n_checked} fuzzed MLM/RLM samples over {rounds} worlds, "
           f"{failures} reconstruction failures, {elapsed:.0f}s")


# ------------------------------------------------------- criterion 3

def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(303)
    vocab_words = [f"w{i}" for i in range(12)]
    worst_bleu = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 30))
        hyps = _rand_corpus(rng, n, vocab_words)
        refs = _rand_corpus(rng, n, vocab_words, allow_empty=False)
        worst_bleu = max(worst_bleu,
                         abs(corpus_bleu(hyps, refs) - naive_bleu(hyps, refs)))
    prec_exact = 0
    for _ in range(100):
        n = int(rng.integers(1, 12))
        hyps = _rand_corpus(rng, n, vocab_words)
        refs = _rand_corpus(rng, n, vocab_words, allow_empty=False)
        eligible = set(rng.choice(vocab_words,
                                  size=int(rng.integers(1, 8)),
                                  replace=False))
        if prec_info(hyps, refs, eligible) == naive_prec(hyps, refs, eligible):
            prec_exact += 1
    identity = ["the cat sat on the mat", "a b c d e"]
    id_bleu = corpus_bleu(identity, identity)
    id_prec = prec_info(identity, identity, {"cat", "b"})
    passed = (worst_bleu <= 1e-6 and prec_exact == 100
              and id_bleu == 100.0 and id_prec == 1.0)
    report(3, passed,
           f"bleu max |delta| {worst_bleu:.2e} over 50 corpora, "
           f"prec exact {prec_exact}/100, identity bleu {id_bleu}, "
           f"identity prec {id_prec}")


# ------------------------------------------------------- criterion 4

def test_criterion_4_memorization():
    start = time.perf_counter()
    pool = ["ba", "be", "bi", "bo", "bu", "da", "de", "di",
            "do", "du", "ka", "ke", "ki", "ko", "ku", "la"]
    sub = {w: pool[(i + 8) % len(pool)] for i, w in enumerate(pool)}
    rng = np.random.default_rng(44)
    pairs = []
    seen = set()
    while len(pairs) < 32:
        n = int(rng.integers(2, 5))
        src = " ".join(pool[i] for i in rng.integers(len(pool), size=n))
        if src in seen:
            continue
        seen.add(src)
        pairs.append((src, " ".join(sub[w] for w in src.split())))
    vocab = build_vocab([" ".join(pool)], target_size=200)

    cfg = ModelConfig(vocab_size=len(vocab.subwords), n_types=7, d_model=32,
                      n_heads=2, enc_layers=1, dec_layers=1, ffn_dim=64,
                      dropout=0.0, max_len=64)
    model = Model.init(cfg, seed=0)
    log = finetune(model, pairs, pairs, vocab, "xx", "yy",
                   TrainConfig(lr=3e-3, batch_size=16, max_epochs=500,
                               patience=30, seed=0))

    types = TypeTable(("xx", "yy"))
    src_t, tgt_t = types.lang_id("xx"), types.lang_id("yy")
    ids = [(vocab.encode(s).ids, vocab.encode(t).ids) for s, t in pairs]
    acc = evaluate_batches(model, [make_nmt_batch(ids, src_t, tgt_t)])["acc"]
    hyps = translate_corpus(model, [s for s, _ in pairs], vocab, src_t, tgt_t)
    n_exact = sum(h == t for h, (_, t) in zip(hyps, pairs))
    elapsed = time.perf_counter() - start
    passed = (acc >= 0.99 and n_exact == 32 and log.steps <= 1000
              and elapsed < 300)
    report(4, passed,
           f"token acc {acc:.4f}, exact greedy {n_exact}/32, "
           f"{log.steps} steps, {elapsed:.0f}s")


# -------------------------------------------- criteria 5-7: shared matrix
#
# One training matrix feeds the three directional checks: 3 seeds x
# {vanilla, rate-10 pretrain, rate-1 pretrain} on the toy language pair.
# Pretraining sees all 4000 monolingual sides plus the full-coverage
# dictionary; fine-tuning deliberately sees only 400 of the 2000 pairs, the
# low-resource regime the pretraining is for (a scratch model cannot learn
# word mappings its 400 pairs never show, so both the convergence-speed and
# the rare-word comparisons measure what pretraining contributed). Budgets,
# mix, and the dev-BLEU target were calibrated once against this corpus and
# are pinned; the toy text has no sequential structure, so the mix drops
# the context-only masking objective, which carries no signal here, and
# keeps the two payload objectives.

EXP = {
    "seeds": (0, 1, 2),
    "ft_pairs": 400,        # low-resource fine-tune subset of the 2000
    "d_model": 64,          # narrower models pretrain but do not transfer
    "pre_steps": 12000,
    "pre_lr": 1e-3,
    "pre_batch": 16,
    "ft_epochs": 24,
    "ft_lr": 1e-3,
    "ft_batch": 8,
    "mask_ratio": 0.3,
    "mix": (0.0, 1.0, 1.0),
    "shard_seed": 5,
    "target_bleu": 30.0,    # fixed dev-BLEU target for epochs-to-target
}

LOG_PATH = Path(__file__).parent / "artifacts" / "experiment_log.json"


def _epochs_to(curve, target):
    """1-based first epoch reaching target; budget+1 if never reached."""
    for epoch, bleu in enumerate(curve, 1):
        if bleu >= target:
            return epoch
    return len(curve) + 1


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    start = time.perf_counter()
    root = tmp_path_factory.mktemp("toy")
    synth_toy(root, n_train=2000, n_dev=200, n_test=200, seed=1,
              n_common=220, n_rare=40, n_phrases=15)
    train_pairs = read_tsv(root / "train.tsv")
    dev_pairs = read_tsv(root / "dev.tsv")
    ft_pairs = train_pairs[:EXP["ft_pairs"]]
    lines = [s for pair in train_pairs for s in pair]
    lines += (root / "tags.txt").read_text().splitlines()
    vocab = build_vocab(lines, target_size=3000)
    dico = load_dictionary(root / "dict.jsonl")
    mono = [(s, "src") for s, _ in train_pairs]
    mono += [(t, "tgt") for _, t in train_pairs]

    shards = {}
    for rate in (10.0, 1.0):
        config = PretrainConfig(("src", "tgt"), mask_ratio=EXP["mask_ratio"],
                                sample_rate=rate, mix_ratio=EXP["mix"],
                                info_kind=InfoKind.TRANSLATION,
                                seed=EXP["shard_seed"])
        shards[rate], _ = build_dataset(mono, dico, config, vocab)

    types = TypeTable(("src", "tgt"))
    src_t, tgt_t = types.lang_id("src"), types.lang_id("tgt")
    dev_src = [s for s, _ in dev_pairs]
    dev_ref = [t for _, t in dev_pairs]
    freq = Counter(w for _, t in train_pairs for w in t.split())
    rare = {w for w, n in freq.items() if n < 10}

    def dev_scores(model):
        hyp = translate_corpus(model, dev_src, vocab, src_t, tgt_t,
                               batch_size=100)
        return corpus_bleu(hyp, dev_ref), prec_info(hyp, dev_ref, rare)

    def hook(model, epoch):
        bleu, prec = dev_scores(model)
        return {"dev_bleu": bleu, "prec_rare": prec}

    def run_arm(seed, rate, want_curve):
        cfg = ModelConfig(vocab_size=len(vocab.subwords),
                          n_types=types.n_types, d_model=EXP["d_model"],
                          n_heads=2, enc_layers=1, dec_layers=1,
                          ffn_dim=2 * EXP["d_model"], dropout=0.1, max_len=64)
        model = Model.init(cfg, seed=seed)
        arm = {}
        if rate is not None:
            plog = pretrain(model, shards[rate],
                            TrainConfig(lr=EXP["pre_lr"],
                                        batch_size=EXP["pre_batch"],
                                        max_steps=EXP["pre_steps"],
                                        patience=999, seed=seed))
            arm["pretrain_best_acc"] = plog.best_metric
        flog = finetune(model, ft_pairs, dev_pairs, vocab, "src", "tgt",
                        TrainConfig(lr=EXP["ft_lr"],
                                    batch_size=EXP["ft_batch"],
                                    max_epochs=EXP["ft_epochs"],
                                    patience=999, seed=seed),
                        epoch_hook=hook if want_curve else None)
        arm["finetune_entries"] = flog.entries
        if want_curve:
            arm["curve"] = [e["dev_bleu"] for e in flog.entries]
        arm["bleu"], arm["prec_rare"] = dev_scores(model)
        return arm

    results = {}
    for seed in EXP["seeds"]:
        results[seed] = {
            "vanilla": run_arm(seed, None, want_curve=True),
            "bdlm10": run_arm(seed, 10.0, want_curve=True),
            "bdlm1": run_arm(seed, 1.0, want_curve=False),
        }
    elapsed = time.perf_counter() - start

    LOG_PATH.parent.mkdir(exist_ok=True)
    LOG_PATH.write_text(json.dumps(
        {"config": {k: list(v) if isinstance(v, tuple) else v
                    for k, v in EXP.items()},
         "elapsed_seconds": elapsed,
         "results": {f"seed{s}": arms for s, arms in results.items()}},
        indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return results, elapsed


def test_criterion_5_pretraining_convergence(experiment):
    results, elapsed = experiment
    target = EXP["target_bleu"]
    wins = 0
    parts = []
    for seed, arms in results.items():
        e_van = _epochs_to(arms["vanilla"]["curve"], target)
        e_pre = _epochs_to(arms["bdlm10"]["curve"], target)
        wins += e_pre <= 0.7 * e_van
        parts.append(f"seed{seed} {e_pre} vs {e_van}")
    report(5, wins >= 2 and elapsed < 1800,
           f"epochs to dev-BLEU {target:.0f}, pretrained vs scratch: "
           f"{', '.join(parts)}; {wins}/{len(results)} seeds at <=0.7x, "
           f"matrix {elapsed / 60:.1f} min")


def test_criterion_6_sample_rate_direction(experiment):
    results, _ = experiment
    wins = 0
    parts = []
    for seed, arms in results.items():
        b10, b1 = arms["bdlm10"]["bleu"], arms["bdlm1"]["bleu"]
        wins += b10 >= b1
        parts.append(f"seed{seed} {b10:.1f} vs {b1:.1f}")
    report(6, wins >= 2 and LOG_PATH.exists(),
           f"dev BLEU rate-10 vs rate-1: {', '.join(parts)}; "
           f"{wins}/{len(results)} seeds, "
           f"log archived at {LOG_PATH.relative_to(LOG_PATH.parents[2])}")


def test_criterion_7_rare_word_gain(experiment):
    results, _ = experiment
    wins = 0
    parts = []
    for seed, arms in results.items():
        p_pre = arms["bdlm10"]["prec_rare"]
        p_van = arms["vanilla"]["prec_rare"]
        wins += p_pre > p_van
        parts.append(f"seed{seed} {p_pre:.3f} vs {p_van:.3f}")
    report(7, wins >= 2,
           f"dev prec_rare pretrained vs scratch: {', '.join(parts)}; "
           f"{wins}/{len(results)} seeds")


# ------------------------------------------------------- criterion 8

def test_criterion_8_reproducibility(tmp_path):
    src_words, cipher, dico, vocab = _micro_task(8)
    rng = np.random.default_rng(88)
    corpus = [(" ".join(src_words[i] for i in rng.integers(len(src_words),
                                                           size=5)), "xx")
              for _ in range(120)]
    config = PretrainConfig(("xx", "yy"), sample_rate=2.0, seed=9)

    def shard_bytes(path):
        samples, _ = build_dataset(corpus, dico, config, vocab)
        write_shard(path, samples)
        return path.read_bytes(), samples

    bytes_a, samples = shard_bytes(tmp_path / "a.bin")
    bytes_b, _ = shard_bytes(tmp_path / "b.bin")
    shards_ok = bytes_a == bytes_b

    cfg = ModelConfig(vocab_size=len(vocab.subwords), n_types=7, d_model=16,
                      n_heads=2, enc_layers=1, dec_layers=1, ffn_dim=32,
                      dropout=0.1, max_len=64)
    tcfg = TrainConfig(batch_size=8, max_steps=20, seed=5)

    def ckpt_bytes(path):
        model = Model.init(cfg, seed=4)
        pretrain(model, samples, tcfg)
        save_checkpoint(path, model)
        return path.read_bytes()

    ckpt_ok = ckpt_bytes(tmp_path / "m1.ckpt") == ckpt_bytes(tmp_path / "m2.ckpt")
    # checkpoint and vocabulary round-trip bit-exactly
    save_checkpoint(tmp_path / "m3.ckpt", load_checkpoint(tmp_path / "m1.ckpt"))
    rt_ok = (tmp_path / "m3.ckpt").read_bytes() == (tmp_path / "m1.ckpt").read_bytes()
    vocab.save(tmp_path / "v1.json")
    Vocabulary.load(tmp_path / "v1.json").save(tmp_path / "v2.json")
    vocab_ok = (tmp_path / "v1.json").read_bytes() == (tmp_path / "v2.json").read_bytes()

    hyps = [" ".join(src_words[:5]), " ".join(src_words[5:8])]
    refs = [" ".join(src_words[:5]), " ".join(src_words[4:8])]
    freq = Counter(w for w in src_words for _ in range(3))

    def report_bytes(path):
        from bdlm.metrics import freq_bucket_precision
        r = EvalReport(bleu=corpus_bleu(hyps, refs),
                       prec_rare=prec_info(hyps, refs, set(src_words[:6])),
                       buckets=freq_bucket_precision(hyps, refs, freq))
        r.save(path)
        return path.read_bytes()

    eval_ok = report_bytes(tmp_path / "r1.json") == report_bytes(tmp_path / "r2.json")
    loaded = EvalReport.load(tmp_path / "r1.json")
    eval_rt_ok = loaded.to_dict() == EvalReport.load(tmp_path / "r2.json").to_dict()

    passed = shards_ok and ckpt_ok and rt_ok and vocab_ok and eval_ok and eval_rt_ok
    report(8, passed,
           f"shards identical {shards_ok}, checkpoints identical {ckpt_ok}, "
           f"ckpt round-trip {rt_ok}, vocab round-trip {vocab_ok}, "
           f"eval reports identical {eval_ok and eval_rt_ok}")


# ------------------------------------------------------- criterion 9

def test_criterion_9_objective_mixing():
    src_words, cipher, dico, vocab = _micro_task(9)
    rng = np.random.default_rng(99)
    corpus = [(" ".join(src_words[i] for i in rng.integers(len(src_words),
                                                           size=4)), "xx")
              for _ in range(1500)]
    config = PretrainConfig(("xx", "yy"), sample_rate=8.0, seed=10,
                            mix_ratio=(1.0, 1.0, 1.0))
    _, stats = build_dataset(corpus, dico, config, vocab)
    total = stats["samples"]
    counts = stats["objective_counts"]
    max_dev = max(abs(counts[o.name.lower()] / total - 1 / 3)
                  for o in Objective)
    mix_ok = total >= 10_000 and max_dev <= 0.02

    skew = PretrainConfig(("xx", "yy"), sample_rate=8.0, seed=11,
                          mix_ratio=(2.0, 1.0, 1.0))
    _, skew_stats = build_dataset(corpus, dico, skew, vocab)
    skew_total = skew_stats["samples"]
    expected = {"mlm": 0.5, "rlm": 0.25, "iplm": 0.25}
    skew_dev = max(abs(skew_stats["objective_counts"][k] / skew_total - p)
                   for k, p in expected.items())
    skew_ok = skew_dev <= 0.02

    half = PretrainConfig(("xx", "yy"), sample_rate=0.5, seed=12,
                          mix_ratio=(1.0, 0.0, 0.0))
    _, half_stats = build_dataset(corpus, dico, half, vocab)
    n = len(corpus)
    sigma = math.sqrt(n * 0.25)
    half_dev = abs(half_stats["samples"] - 0.5 * n)
    half_ok = half_dev <= 3 * sigma

    report(9, mix_ok and skew_ok and half_ok,
           f"uniform mix max deviation {max_dev:.4f} over {total} samples, "
           f"2:1:1 mix deviation {skew_dev:.4f}, rate-0.5 count "
           f"{half_stats['samples']} vs {n // 2} (|dev| {half_dev:.0f} "
           f"<= 3 sigma {3 * sigma:.0f})")
