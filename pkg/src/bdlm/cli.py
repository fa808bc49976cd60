"""Command-line front end wiring the modules into reproducible runs.

Every subcommand writes a flat key=value manifest beside its outputs:
the resolved configuration plus a sha256 per input file, enough to
re-run the step byte-for-byte. A previous manifest can seed the next
run via --manifest; explicit flags win over manifest values, which win
over built-in defaults.

Exit codes: 0 success, 1 runtime failure (bad files, diverged training,
domain errors), 2 usage.
"""

import argparse
import hashlib
import json
import os
import sys
from collections import Counter

from .dictionary import InfoKind, clean, coverage, load_dictionary
from .errors import BdlmError
from .metrics import EvalReport, corpus_bleu, export_attention, \
    freq_bucket_precision, prec_info
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .samples import PretrainConfig, TypeTable, build_dataset, read_shards, \
    write_shard
from .synth import read_tsv, synth_toy
from .trainer import TrainConfig, finetune, pretrain, translate_corpus
from .vocab import Vocabulary, build_vocab

S = argparse.SUPPRESS


# ---------------------------------------------------------------- plumbing

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(path):
    """key=value lines; later keys win, blanks and # comments skipped."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key] = value
    return out


def write_manifest(path, subcommand, values, inputs=()):
    """inputs: (flag_name, file_path) pairs hashed into sha256.* keys."""
    lines = [f"subcommand={subcommand}"]
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    for name, p in inputs:
        lines.append(f"sha256.{name}={sha256_file(p)}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _coerce(default, raw):
    # manifests hold strings; recover the type from the default value
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, (list, tuple)):
        return raw.split(",") if raw else []
    return raw


def resolve(ns, defaults, required=()):
    """Merge built-in defaults, --manifest values, then explicit flags."""
    vals = dict(defaults)
    provided = {k: v for k, v in vars(ns).items()
                if k not in ("func", "subcommand")}
    mpath = provided.pop("manifest", None)
    if mpath:
        saved = read_manifest(mpath)
        for k in vals:
            if k in saved:
                vals[k] = _coerce(vals[k], saved[k])
        for k in required:
            if k not in vals and k in saved:
                vals[k] = saved[k]
    vals.update(provided)
    missing = [k for k in required if not vals.get(k)]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        print(f"error: missing required flags: {flags}", file=sys.stderr)
        raise SystemExit(2)
    return vals


def _usage_error(msg):
    print(f"error: {msg}", file=sys.stderr)
    raise SystemExit(2)


def read_lines(path):
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def corpus_lines(path):
    """Text lines for vocab/dictionary work; .tsv contributes both columns."""
    if str(path).endswith(".tsv"):
        lines = []
        for src, tgt in read_tsv(path):
            lines.extend((src, tgt))
        return lines
    return [line for line in read_lines(path) if line.strip()]


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ------------------------------------------------------------- subcommands

def cmd_synth_toy(ns):
    vals = resolve(ns, {"n": 2000, "n_dev": 200, "n_test": 200, "seed": 1,
                        "n_common": 220, "n_rare": 40, "n_phrases": 15},
                   required=("out",))
    out = _out_dir(vals["out"])
    stats = synth_toy(out, n_train=vals["n"], n_dev=vals["n_dev"],
                      n_test=vals["n_test"], seed=vals["seed"],
                      n_common=vals["n_common"], n_rare=vals["n_rare"],
                      n_phrases=vals["n_phrases"])
    write_manifest(os.path.join(out, "manifest.txt"), "synth-toy", vals)
    _emit(stats)
    return 0


def cmd_build_vocab(ns):
    vals = resolve(ns, {"input": (), "target_size": 0},
                   required=("input", "target_size", "out"))
    lines = []
    for path in vals["input"]:
        lines.extend(corpus_lines(path))
    vocab = build_vocab(lines, target_size=int(vals["target_size"]))
    vocab.save(vals["out"])
    write_manifest(vals["out"] + ".manifest", "build-vocab", vals,
                   [("input", p) for p in vals["input"]])
    _emit({"pieces": len(vocab.subwords), "lines": len(lines)})
    return 0


def cmd_clean_dict(ns):
    vals = resolve(ns, {"corpus": ()}, required=("dict", "corpus", "out"))
    dico = load_dictionary(vals["dict"])
    lines = []
    for path in vals["corpus"]:
        lines.extend(corpus_lines(path))
    kept = clean(dico, lines)
    kept.save(vals["out"])
    write_manifest(vals["out"] + ".manifest", "clean-dict", vals,
                   [("dict", vals["dict"])]
                   + [("corpus", p) for p in vals["corpus"]])
    _emit({"kept": len(kept), "dropped": len(dico) - len(kept)})
    return 0


def cmd_coverage(ns):
    vals = resolve(ns, {"corpus": (), "language": (), "out": ""},
                   required=("dict", "corpus", "language"))
    dico = load_dictionary(vals["dict"])
    lines = []
    for path in vals["corpus"]:
        lines.extend(corpus_lines(path))
    report = {lang: coverage(dico, lines, lang) for lang in vals["language"]}
    if vals["out"]:
        with open(vals["out"], "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        write_manifest(vals["out"] + ".manifest", "coverage", vals,
                       [("dict", vals["dict"])]
                       + [("corpus", p) for p in vals["corpus"]])
    _emit(report)
    return 0


def cmd_gen_pretrain(ns):
    vals = resolve(ns, {"corpus": (), "mono": (), "kind": "translation",
                        "mask_ratio": 0.15, "sample_rate": 1.0,
                        "mix": "1,1,1", "seed": 0},
                   required=("dict", "vocab", "languages", "out"))
    if not vals["corpus"] and not vals["mono"]:
        _usage_error("need --corpus and/or --mono")
    pair = tuple(vals["languages"].split(","))
    if len(pair) != 2:
        _usage_error("--languages takes exactly two comma-separated names")
    sentences = []
    for path in vals["corpus"]:
        for src, tgt in read_tsv(path):
            sentences.append((src, pair[0]))
            sentences.append((tgt, pair[1]))
    for spec in vals["mono"]:
        lang, sep, path = spec.partition(":")
        if not sep or lang not in pair:
            _usage_error(f"--mono wants LANG:PATH with LANG in {pair}: {spec!r}")
        sentences.extend((line, lang) for line in corpus_lines(path))
    config = PretrainConfig(
        pair, mask_ratio=float(vals["mask_ratio"]),
        sample_rate=float(vals["sample_rate"]),
        mix_ratio=tuple(float(w) for w in str(vals["mix"]).split(",")),
        info_kind=InfoKind(vals["kind"]), seed=int(vals["seed"]))
    vocab = Vocabulary.load(vals["vocab"])
    dico = load_dictionary(vals["dict"])
    samples, stats = build_dataset(sentences, dico, config, vocab)
    write_shard(vals["out"], samples)
    write_manifest(vals["out"] + ".manifest", "gen-pretrain", vals,
                   [("dict", vals["dict"]), ("vocab", vals["vocab"])]
                   + [("corpus", p) for p in vals["corpus"]])
    _emit(stats)
    return 0


_MODEL_DEFAULTS = {"n_types": 7, "d_model": 128, "n_heads": 8,
                   "enc_layers": 6, "dec_layers": 6, "ffn_dim": 0,
                   "dropout": 0.1, "max_len": 64, "label_smoothing": 0.1}
_TRAIN_DEFAULTS = {"lr": 1e-4, "batch_size": 16, "patience": 5,
                   "val_fraction": 0.1, "seed": 0}


def _model_config(vals, vocab):
    return ModelConfig(
        vocab_size=len(vocab.subwords), n_types=int(vals["n_types"]),
        d_model=int(vals["d_model"]), n_heads=int(vals["n_heads"]),
        enc_layers=int(vals["enc_layers"]), dec_layers=int(vals["dec_layers"]),
        ffn_dim=int(vals["ffn_dim"]), dropout=float(vals["dropout"]),
        max_len=int(vals["max_len"]),
        label_smoothing=float(vals["label_smoothing"]))


def _train_config(vals, **budget):
    return TrainConfig(
        lr=float(vals["lr"]), batch_size=int(vals["batch_size"]),
        patience=int(vals["patience"]),
        val_fraction=float(vals["val_fraction"]), seed=int(vals["seed"]),
        **budget)


def _finish_training(sub, out, model, log, vals, inputs):
    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(ckpt, model)
    log.save(os.path.join(out, "train_log.jsonl"))
    write_manifest(os.path.join(out, "manifest.txt"), sub, vals, inputs)
    _emit({"checkpoint": ckpt, "steps": log.steps,
           "best_metric": log.best_metric, "best_step": log.best_step,
           "stopped_early": log.stopped_early})
    return 0


def cmd_pretrain(ns):
    defaults = {"shards": (), "max_steps": 0,
                **_MODEL_DEFAULTS, **_TRAIN_DEFAULTS}
    vals = resolve(ns, defaults, required=("shards", "vocab", "out",
                                           "max_steps"))
    vocab = Vocabulary.load(vals["vocab"])
    samples = read_shards(vals["shards"])
    model = Model.init(_model_config(vals, vocab), seed=int(vals["seed"]))
    log = pretrain(model, samples,
                   _train_config(vals, max_steps=int(vals["max_steps"])))
    out = _out_dir(vals["out"])
    return _finish_training("pretrain", out, model, log, vals,
                            [("vocab", vals["vocab"])]
                            + [("shards", p) for p in vals["shards"]])


def cmd_finetune(ns):
    defaults = {"init": "", "max_epochs": 0,
                **_MODEL_DEFAULTS, **_TRAIN_DEFAULTS}
    vals = resolve(ns, defaults,
                   required=("train", "dev", "vocab", "src_lang", "tgt_lang",
                             "out", "max_epochs"))
    vocab = Vocabulary.load(vals["vocab"])
    if vals["init"]:
        model = load_checkpoint(vals["init"])
    else:
        model = Model.init(_model_config(vals, vocab), seed=int(vals["seed"]))
    log = finetune(model, read_tsv(vals["train"]), read_tsv(vals["dev"]),
                   vocab, vals["src_lang"], vals["tgt_lang"],
                   _train_config(vals, max_epochs=int(vals["max_epochs"])))
    out = _out_dir(vals["out"])
    inputs = [("train", vals["train"]), ("dev", vals["dev"]),
              ("vocab", vals["vocab"])]
    if vals["init"]:
        inputs.append(("init", vals["init"]))
    return _finish_training("finetune", out, model, log, vals, inputs)


def cmd_translate(ns):
    vals = resolve(ns, {"batch_size": 32, "max_len": 0},
                   required=("model", "vocab", "input", "out",
                             "src_lang", "tgt_lang"))
    model = load_checkpoint(vals["model"])
    vocab = Vocabulary.load(vals["vocab"])
    types = TypeTable((vals["src_lang"], vals["tgt_lang"]))
    if str(vals["input"]).endswith(".tsv"):
        sentences = [src for src, _ in read_tsv(vals["input"])]
    else:
        sentences = read_lines(vals["input"])
    hyps = translate_corpus(model, sentences, vocab,
                            types.lang_id(vals["src_lang"]),
                            types.lang_id(vals["tgt_lang"]),
                            batch_size=int(vals["batch_size"]),
                            max_len=int(vals["max_len"]) or None)
    with open(vals["out"], "w", encoding="utf-8", newline="\n") as f:
        f.writelines(h + "\n" for h in hyps)
    write_manifest(vals["out"] + ".manifest", "translate", vals,
                   [("model", vals["model"]), ("vocab", vals["vocab"]),
                    ("input", vals["input"])])
    _emit({"sentences": len(hyps), "out": vals["out"]})
    return 0


def _train_ref_lines(path):
    # frequency source: target side of a .tsv, else plain text lines
    if str(path).endswith(".tsv"):
        return [tgt for _, tgt in read_tsv(path)]
    return [line for line in read_lines(path) if line.strip()]


def cmd_evaluate(ns):
    vals = resolve(ns, {"train_ref": "", "rare_threshold": 10, "dict": "",
                        "dict_lang": "", "n_buckets": 5, "buckets_csv": ""},
                   required=("hyp", "ref", "out"))
    hyps = read_lines(vals["hyp"])
    refs = read_lines(vals["ref"])
    prec_rare = prec_dict = None
    buckets = []
    if vals["train_ref"]:
        freq = Counter(w for line in _train_ref_lines(vals["train_ref"])
                       for w in line.lower().split())
        rare = {w for w, n in freq.items() if n < int(vals["rare_threshold"])}
        prec_rare = prec_info(hyps, refs, rare)
        buckets = freq_bucket_precision(hyps, refs, freq,
                                        n_buckets=int(vals["n_buckets"]))
    if vals["dict"]:
        if not vals["dict_lang"]:
            _usage_error("--dict needs --dict-lang (the reference language)")
        dico = load_dictionary(vals["dict"])
        known = {e.headword for e in dico
                 if e.language == vals["dict_lang"] and len(e.words) == 1}
        prec_dict = prec_info(hyps, refs, known)
    report = EvalReport(bleu=corpus_bleu(hyps, refs), prec_rare=prec_rare,
                        prec_dict=prec_dict, buckets=buckets)
    report.save(vals["out"])
    if buckets and vals["buckets_csv"]:
        with open(vals["buckets_csv"], "w", encoding="utf-8",
                  newline="\n") as f:
            f.write("lo,hi,precision,word_count\n")
            for b in buckets:
                p = "" if b["precision"] is None else repr(b["precision"])
                f.write(f"{b['lo']!r},{b['hi']!r},{p},{b['word_count']}\n")
    inputs = [("hyp", vals["hyp"]), ("ref", vals["ref"])]
    if vals["train_ref"]:
        inputs.append(("train_ref", vals["train_ref"]))
    if vals["dict"]:
        inputs.append(("dict", vals["dict"]))
    write_manifest(vals["out"] + ".manifest", "evaluate", vals, inputs)
    _emit(report.to_dict())
    return 0


def cmd_export_attention(ns):
    vals = resolve(ns, {"layer": 0, "head": 0},
                   required=("model", "vocab", "sentence", "src_lang",
                             "tgt_lang", "out"))
    model = load_checkpoint(vals["model"])
    vocab = Vocabulary.load(vals["vocab"])
    types = TypeTable((vals["src_lang"], vals["tgt_lang"]))
    matrix = export_attention(vals["out"], model, vocab, vals["sentence"],
                              types.lang_id(vals["src_lang"]),
                              types.lang_id(vals["tgt_lang"]),
                              layer=int(vals["layer"]),
                              head=int(vals["head"]))
    write_manifest(vals["out"] + ".manifest", "export-attention", vals,
                   [("model", vals["model"]), ("vocab", vals["vocab"])])
    _emit({"rows": matrix.shape[0], "cols": matrix.shape[1],
           "out": vals["out"]})
    return 0


# -------------------------------------------------------------- the parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="bdlm",
        description="dictionary-driven pretraining for small NMT models")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    def sub(name, func, **kwargs):
        p = subs.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--manifest", default=S,
                       help="seed flag defaults from a previous manifest")
        return p

    p = sub("synth-toy", cmd_synth_toy,
            help="generate the deterministic toy language pair")
    p.add_argument("--out", default=S)
    p.add_argument("--n", type=int, default=S, help="training pairs")
    p.add_argument("--n-dev", type=int, default=S)
    p.add_argument("--n-test", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--n-common", type=int, default=S)
    p.add_argument("--n-rare", type=int, default=S)
    p.add_argument("--n-phrases", type=int, default=S)

    p = sub("build-vocab", cmd_build_vocab, help="learn a subword vocabulary")
    p.add_argument("--input", action="append", default=S,
                   help="text file, or .tsv contributing both columns; repeatable")
    p.add_argument("--target-size", type=int, default=S)
    p.add_argument("--out", default=S)

    p = sub("clean-dict", cmd_clean_dict,
            help="drop entries whose translations never occur in the corpus")
    p.add_argument("--dict", default=S)
    p.add_argument("--corpus", action="append", default=S)
    p.add_argument("--out", default=S)

    p = sub("coverage", cmd_coverage,
            help="fraction of corpus tokens covered by dictionary matches")
    p.add_argument("--dict", default=S)
    p.add_argument("--corpus", action="append", default=S)
    p.add_argument("--language", action="append", default=S)
    p.add_argument("--out", default=S, help="optional JSON report path")

    p = sub("gen-pretrain", cmd_gen_pretrain,
            help="synthesize pretraining samples into a shard")
    p.add_argument("--corpus", action="append", default=S,
                   help="parallel .tsv, both sides used; repeatable")
    p.add_argument("--mono", action="append", default=S, metavar="LANG:PATH",
                   help="monolingual text file; repeatable")
    p.add_argument("--dict", default=S)
    p.add_argument("--vocab", default=S)
    p.add_argument("--languages", default=S, metavar="A,B")
    p.add_argument("--kind", default=S,
                   choices=[k.value for k in InfoKind])
    p.add_argument("--mask-ratio", type=float, default=S)
    p.add_argument("--sample-rate", type=float, default=S)
    p.add_argument("--mix", default=S, metavar="MLM,RLM,IPLM")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S)

    def train_flags(p, budget, budget_help):
        p.add_argument("--vocab", default=S)
        p.add_argument("--out", default=S, help="output directory")
        p.add_argument(budget, type=int, default=S, help=budget_help)
        for flag, d in (("--lr", 1e-4), ("--batch-size", 16),
                        ("--patience", 5), ("--val-fraction", 0.1),
                        ("--seed", 0)):
            p.add_argument(flag, type=type(d), default=S)
        for flag, d in sorted(_MODEL_DEFAULTS.items()):
            p.add_argument("--" + flag.replace("_", "-"), type=type(d),
                           default=S)

    p = sub("pretrain", cmd_pretrain, help="train on synthesized shards")
    p.add_argument("--shards", action="append", default=S)
    train_flags(p, "--max-steps", "optimizer-step budget")

    p = sub("finetune", cmd_finetune, help="supervised translation training")
    p.add_argument("--train", default=S, help="parallel .tsv")
    p.add_argument("--dev", default=S, help="parallel .tsv")
    p.add_argument("--init", default=S, help="checkpoint to start from")
    p.add_argument("--src-lang", default=S)
    p.add_argument("--tgt-lang", default=S)
    train_flags(p, "--max-epochs", "epoch budget")

    p = sub("translate", cmd_translate, help="greedy-decode a file")
    p.add_argument("--model", default=S)
    p.add_argument("--vocab", default=S)
    p.add_argument("--input", default=S,
                   help="text file, or .tsv (source column used)")
    p.add_argument("--out", default=S)
    p.add_argument("--src-lang", default=S)
    p.add_argument("--tgt-lang", default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--max-len", type=int, default=S,
                   help="decode cap, 0 = model limit")

    p = sub("evaluate", cmd_evaluate, help="score hypotheses against references")
    p.add_argument("--hyp", default=S)
    p.add_argument("--ref", default=S)
    p.add_argument("--out", default=S, help="JSON report path")
    p.add_argument("--train-ref", default=S,
                   help="training text for word frequencies "
                        "(.tsv: target side)")
    p.add_argument("--rare-threshold", type=int, default=S)
    p.add_argument("--dict", default=S)
    p.add_argument("--dict-lang", default=S)
    p.add_argument("--n-buckets", type=int, default=S)
    p.add_argument("--buckets-csv", default=S)

    p = sub("export-attention", cmd_export_attention,
            help="cross-attention heatmap data as CSV")
    p.add_argument("--model", default=S)
    p.add_argument("--vocab", default=S)
    p.add_argument("--sentence", default=S)
    p.add_argument("--src-lang", default=S)
    p.add_argument("--tgt-lang", default=S)
    p.add_argument("--layer", type=int, default=S)
    p.add_argument("--head", type=int, default=S)
    p.add_argument("--out", default=S)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (BdlmError, OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
