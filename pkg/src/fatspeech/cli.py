"""Command line driving the full workflow.

Subcommands cover vocabulary training, masked pretraining, translation
finetuning, decoding, BLEU scoring, attention dumps, and checkpoint
utilities. Exit codes: 0 success, 1 usage, 2 data or format problems,
3 numeric divergence during training.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import features
from .config import SEED_ENV_VAR, Config, parse_config_file, resolve_seed, set_key
from .corpus import (build_finetune_streams, build_pretrain_streams,
                     filter_long, load_manifest, read_manifest_records,
                     read_manifest_texts)
from .errors import (DataError, DivergenceError, FatSpeechError, UsageError)
from .inference import corpus_bleu, translate_ids
from .model import (FATModel, average_checkpoints, build_model,
                    init_from_pretrained, load_checkpoint,
                    write_raw_checkpoint)
from .report import (dump_attention_stage, render_loss_curve,
                     render_timing_figure, write_attention_summary,
                     write_timing_csv)
from .subword import BOS, load_vocabulary, train_bpe
from .trainer import resume_state, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_options(p):
    p.add_argument("--config", help="key = value file applied before --set")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=None,
                   help=f"training seed; falls back to ${SEED_ENV_VAR}, then 0")
    p.add_argument("--hierarchical", action="store_true",
                   help="fold the private acoustic layers into the shared "
                        "stack (same depth, every layer sees fused input)")


def _build_config(args, kind):
    cfg = Config()
    if args.config:
        parse_config_file(args.config, cfg)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), value)
    cfg.train.seed = resolve_seed(args.seed)
    cfg.model.kind = kind
    if args.hierarchical:
        cfg.model.shared_layers += cfg.model.acoustic_layers
        cfg.model.acoustic_layers = 0
    return cfg


def _cmvn_path(vocab_path):
    return Path(f"{vocab_path}.cmvn")


def _load_examples(manifest, vocab, cfg, vocab_path, create_stats):
    """Manifest -> normalized Examples, managing the stats file by the vocab.

    The first training run computes feature mean/variance over its own
    manifest and stores them beside the vocabulary; every later stage reuses
    that file so train and test see the same normalization.
    """
    stats_path = _cmvn_path(vocab_path)
    if stats_path.exists():
        mean, std = features.load_cmvn(stats_path)
        return load_manifest(manifest, vocab, cfg.model.d_s,
                             cmvn=(mean, std))
    examples = load_manifest(manifest, vocab, cfg.model.d_s)
    speech = [ex.feats for ex in examples if ex.feats is not None]
    if not create_stats or not speech:
        return examples
    mean, std = features.compute_cmvn(speech)
    features.save_cmvn(stats_path, mean, std)
    # the stats file rounds to float32; apply the rounded values here so the
    # run that created the file sees bit-identical features to later runs
    mean, std = features.load_cmvn(stats_path)
    for ex in examples:
        if ex.feats is not None:
            ex.feats = features.apply_cmvn(ex.feats, mean, std).astype(
                np.float32)
    print(f"wrote feature stats to {stats_path}")
    return examples


def _check_vocab(ck_hash, vocab):
    if ck_hash != vocab.content_hash:
        raise DataError("checkpoint was trained with a different vocabulary "
                        f"(hash {ck_hash} != {vocab.content_hash})")


def _finish_training(summary, out_dir):
    curve = Path(out_dir) / "loss_curve.png"
    render_loss_curve(curve, summary.log_path)
    print(f"loss curve: {curve}")
    print(f"final checkpoint: {summary.final_path}")


def cmd_vocab(args):
    texts = []
    for manifest in args.manifest:
        texts.extend(read_manifest_texts(manifest))
    if not texts:
        raise DataError("no text fields found in the given manifests")
    vocab = train_bpe(texts, args.size)
    vocab.save(args.out)
    print(f"trained {vocab.size}-piece vocabulary from {len(texts)} lines")
    print(f"content hash: {vocab.content_hash}")
    return EXIT_OK


def cmd_pretrain(args):
    vocab = load_vocabulary(args.vocab)
    cfg = _build_config(args, "fat_mlm")
    cfg.model.vocab_size = vocab.size
    if args.resume:
        model, adam, start_step, ck_hash = resume_state(args.resume)
        _check_vocab(ck_hash, vocab)
        cfg.model = model.config
        print(f"resuming from step {start_step}")
    else:
        model = FATModel(cfg.model, seed=cfg.train.seed)
        adam, start_step = None, 0
    examples = _load_examples(args.manifest, vocab, cfg, args.vocab,
                              create_stats=True)
    examples, dropped = filter_long(examples, cfg.data.max_frames)
    if dropped:
        print(f"dropped {dropped} over-long utterances")
    streams = build_pretrain_streams(examples, cfg.data, seed=cfg.train.seed)
    dev_streams = None
    if args.dev:
        dev_examples = _load_examples(args.dev, vocab, cfg, args.vocab,
                                      create_stats=False)
        dev_streams = build_pretrain_streams(dev_examples, cfg.data, seed=0)
    summary = run_training(model, streams, cfg, args.out,
                           vocab.content_hash, "pretrain",
                           start_step=start_step, adam=adam,
                           dev_streams=dev_streams)
    _finish_training(summary, args.out)
    return EXIT_OK


def cmd_finetune(args):
    if args.resume and args.init_from:
        raise UsageError("--resume and --init-from are mutually exclusive")
    vocab = load_vocabulary(args.vocab)
    cfg = _build_config(args, "fat_st")
    cfg.model.vocab_size = vocab.size
    adam, start_step = None, 0
    if args.resume:
        model, adam, start_step, ck_hash = resume_state(args.resume)
        _check_vocab(ck_hash, vocab)
        cfg.model = model.config
        print(f"resuming from step {start_step}")
    elif args.init_from:
        pretrained = load_checkpoint(args.init_from)
        _check_vocab(pretrained.vocab_hash, vocab)
        model, copied = init_from_pretrained(pretrained, cfg.model,
                                             seed=cfg.train.seed)
        print(f"warm start: {len(copied)} tensors copied from "
              f"{args.init_from}")
    else:
        model = FATModel(cfg.model, seed=cfg.train.seed)
    st_examples = _load_examples(args.manifest, vocab, cfg, args.vocab,
                                 create_stats=True)
    st_examples, dropped = filter_long(st_examples, cfg.data.max_frames)
    if dropped:
        print(f"dropped {dropped} over-long utterances")
    mt_examples = (_load_examples(args.mt_manifest, vocab, cfg, args.vocab,
                                  create_stats=False)
                   if args.mt_manifest else [])
    mlm_examples = (_load_examples(args.mlm_manifest, vocab, cfg, args.vocab,
                                   create_stats=False)
                    if args.mlm_manifest else [])
    streams = build_finetune_streams(st_examples, mt_examples, mlm_examples,
                                     cfg.data, seed=cfg.train.seed)
    dev_streams = None
    if args.dev:
        dev_examples = _load_examples(args.dev, vocab, cfg, args.vocab,
                                      create_stats=False)
        dev_examples, _ = filter_long(dev_examples, cfg.data.max_frames)
        dev_streams = build_finetune_streams(dev_examples, [], [], cfg.data,
                                             seed=0)
    summary = run_training(model, streams, cfg, args.out,
                           vocab.content_hash, "finetune",
                           start_step=start_step, adam=adam,
                           dev_streams=dev_streams)
    _finish_training(summary, args.out)
    return EXIT_OK


def cmd_translate(args):
    ck = load_checkpoint(args.ckpt)
    model = build_model(ck)
    vocab = load_vocabulary(args.vocab)
    _check_vocab(ck.vocab_hash, vocab)
    cfg = Config()
    cfg.model = model.config
    examples = _load_examples(args.manifest, vocab, cfg, args.vocab,
                              create_stats=False)
    out_path = Path(args.out)
    timing = []
    lines = []
    for ex in examples:
        began = time.perf_counter()
        if ex.feats is not None:
            result = translate_ids(model, feats=ex.feats, beam=args.beam,
                                   alpha=args.alpha,
                                   max_len_cap=args.max_len)
            units = ex.feats.shape[0]
        elif ex.src_ids is not None:
            result = translate_ids(model, src_ids=ex.src_ids,
                                   beam=args.beam, alpha=args.alpha,
                                   max_len_cap=args.max_len)
            units = len(ex.src_ids)
        else:
            raise DataError(f"{ex.uid}: nothing to translate from")
        seconds = time.perf_counter() - began
        lines.append(vocab.decode(result.tokens))
        timing.append((ex.uid, units, seconds, len(result.tokens)))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
    timing_csv = Path(f"{out_path}.timing.csv")
    write_timing_csv(timing_csv, timing)
    render_timing_figure(Path(f"{out_path}.timing.png"), timing)
    total = sum(t[2] for t in timing)
    print(f"decoded {len(lines)} inputs to {out_path} "
          f"({total:.2f}s, beam={args.beam})")
    print(f"timing: {timing_csv}")
    return EXIT_OK


def cmd_eval(args):
    if (args.manifest is None) == (args.ref is None):
        raise UsageError("give exactly one of --manifest or --ref")
    with open(args.hyp, encoding="utf-8") as f:
        hyps = [line.rstrip("\n").split() for line in f]
    if args.manifest:
        refs = []
        for _, rec in read_manifest_records(args.manifest):
            if not rec.get("text_tgt"):
                raise DataError(f"{args.manifest}: record {rec.get('id')} "
                                "has no target text to score against")
            refs.append(rec["text_tgt"].split())
    else:
        with open(args.ref, encoding="utf-8") as f:
            refs = [line.rstrip("\n").split() for line in f]
    report = corpus_bleu(hyps, refs, smooth=args.smooth)
    precisions = " ".join(f"p{n}={report.precisions[n]:.4f}"
                          for n in report.orders)
    print(f"BLEU = {report.score:.2f} (BP={report.brevity_penalty:.4f}, "
          f"{precisions}, hyp_len={report.hyp_length}, "
          f"ref_len={report.ref_length})")
    return EXIT_OK


def cmd_attention_dump(args):
    ck = load_checkpoint(args.ckpt)
    model = build_model(ck)
    vocab = load_vocabulary(args.vocab)
    _check_vocab(ck.vocab_hash, vocab)
    cfg = Config()
    cfg.model = model.config
    examples = _load_examples(args.manifest, vocab, cfg, args.vocab,
                              create_stats=False)
    if args.uid:
        examples = [ex for ex in examples if ex.uid == args.uid]
        if not examples:
            raise DataError(f"uid {args.uid!r} not found in {args.manifest}")
    examples = examples[:args.limit]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for ex in examples:
        collect = {}
        speech = (model.acoustic_embed(ex.feats, collect=collect)
                  if ex.feats is not None else None)
        fused = model.fuse_encode(
            speech=speech,
            src=(ex.src_ids, None) if ex.src_ids is not None else None,
            tgt=(ex.tgt_ids, None) if ex.tgt_ids is not None else None,
            collect=collect)
        if collect.get("acoustic"):
            t4 = fused.segments[0][1]
            rows += dump_attention_stage(out_dir, ex.uid, "acoustic",
                                         collect["acoustic"],
                                         segments=[("speech", t4)])
        rows += dump_attention_stage(out_dir, ex.uid, "shared",
                                     collect["shared"],
                                     segments=collect["segments"])
        if (model.config.kind == "fat_st" and ex.tgt_ids is not None
                and ex.feats is not None):
            memory = model.encode_speech_source(ex.feats)
            cross = []
            model.decoder_logits([BOS] + list(ex.tgt_ids), memory,
                                 collect_cross=cross)
            rows += dump_attention_stage(out_dir, ex.uid, "cross", cross)
    write_attention_summary(out_dir / "summary.csv", rows)
    cross_rows = [r for r in rows if r[1] == "cross"]
    if cross_rows:
        mean_conc = float(np.mean([r[7] for r in cross_rows]))
        print(f"cross-attention diagonal concentration: {mean_conc:.4f} "
              f"over {len(cross_rows)} maps")
    print(f"wrote {len(rows)} attention maps to {out_dir}")
    return EXIT_OK


def cmd_avg(args):
    # a glob like step_*.fatc also matches the optimizer sidecars this tool
    # writes next to each checkpoint; those are not model weights
    paths = [p for p in args.checkpoints if not p.endswith(".opt.fatc")]
    skipped = len(args.checkpoints) - len(paths)
    if skipped:
        print(f"skipped {skipped} optimizer sidecar(s)")
    if not paths:
        raise DataError("avg: no model checkpoints among the inputs")
    cks = [load_checkpoint(p) for p in paths]
    avg = average_checkpoints(cks)
    write_raw_checkpoint(args.out, avg.config, avg.step, avg.vocab_hash,
                         avg.tensors)
    print(f"averaged {len(cks)} checkpoints into {args.out}")
    return EXIT_OK


def cmd_info(args):
    ck = load_checkpoint(args.ckpt)
    n_params = sum(int(np.prod(t.shape)) for t in ck.tensors.values())
    print(f"kind: {ck.config.kind}")
    print(f"step: {ck.step}")
    print(f"vocab hash: {ck.vocab_hash}")
    print(f"tensors: {len(ck.tensors)} ({n_params} parameters)")
    print(f"d_model={ck.config.d_model} heads={ck.config.heads} "
          f"layers={ck.config.acoustic_layers}+{ck.config.shared_layers}"
          f"+{ck.config.dec_layers} ffn={ck.config.ffn_dim}")
    if args.tensors:
        for name in sorted(ck.tensors):
            print(f"  {name} {tuple(ck.tensors[name].shape)}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="fatspeech",
                     description="Fused speech/text pretraining and "
                                 "end-to-end speech translation.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    p = sub.add_parser("vocab", parents=[], help="train a subword vocabulary")
    p.add_argument("--manifest", action="append", required=True,
                   help="JSONL manifest supplying text fields (repeatable)")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("pretrain", help="train the fused masked model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dev", help="held-out manifest for periodic loss")
    p.add_argument("--resume", help="continue from a checkpoint")
    _add_config_options(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the speech translator")
    p.add_argument("--manifest", required=True,
                   help="speech translation triplets")
    p.add_argument("--mt-manifest", help="extra parallel text")
    p.add_argument("--mlm-manifest", help="extra masked-objective data")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dev", help="held-out manifest for periodic loss")
    p.add_argument("--init-from", help="warm start from a pretrained "
                                       "checkpoint")
    p.add_argument("--resume", help="continue from a checkpoint")
    _add_config_options(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("translate", help="decode a manifest to text")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.0,
                   help="length normalization strength")
    p.add_argument("--max-len", type=int, default=512)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="score a hypothesis file with BLEU")
    p.add_argument("--hyp", required=True)
    p.add_argument("--manifest", help="references from this manifest")
    p.add_argument("--ref", help="references from a plain text file")
    p.add_argument("--smooth", action="store_true",
                   help="add-one smoothing above unigrams")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attention-dump",
                       help="export attention maps and their statistics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--uid", help="dump a single utterance")
    p.add_argument("--limit", type=int, default=1,
                   help="number of utterances when --uid is not given")
    p.set_defaults(func=cmd_attention_dump)

    p = sub.add_parser("avg", help="average checkpoints elementwise")
    p.add_argument("--out", required=True)
    p.add_argument("checkpoints", nargs="+")
    p.set_defaults(func=cmd_avg)

    p = sub.add_parser("info", help="describe a checkpoint")
    p.add_argument("ckpt")
    p.add_argument("--tensors", action="store_true",
                   help="list every tensor")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"fatspeech: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"fatspeech: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except FatSpeechError as e:
        print(f"fatspeech: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"fatspeech: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
