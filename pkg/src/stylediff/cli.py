"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .audio import MelSpectrogram, denormalize_mel, mel_to_wave, normalize_mel, read_wav, save_mel, wave_to_mel, \
    write_wav
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, resolve_groups
from .data import collate, load_corpus, make_synthetic_corpus, prepare_corpus
from .diffusion import SOLVERS, reverse_sample
from .evaluation import evaluate_secs, format_report
from .training import DivergenceError, finetune, normalize_corpus, train
from .text import Vocabulary, tokenize

log = logging.getLogger("stylediff")


class UsageError(Exception):
    pass


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _run_config(args) -> RunConfig:
    cfg = load_config(_require(args.config, "config file")) if args.config else RunConfig()
    train_cfg = cfg.train
    if getattr(args, "steps", None) is not None:
        train_cfg = dataclasses.replace(train_cfg, steps=args.steps)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    return dataclasses.replace(cfg, train=train_cfg)


def _load_ckpt(args):
    cfg = load_config(_require(args.config, "config file")) if getattr(args, "config", None) else None
    return load_checkpoint(_require(args.checkpoint, "checkpoint"), cfg, force=getattr(args, "force", False))


# -- commands ----------------------------------------------------------------


def cmd_make_synthetic(args):
    make_synthetic_corpus(args.speakers, args.utts, args.seed or 0, args.out,
                          frames_per_symbol=args.frames_per_symbol, speaker_offset=args.speaker_offset)
    print(f"wrote {args.speakers * args.utts} utterances to {args.out}")


def cmd_prepare(args):
    cfg = _run_config(args)
    n = prepare_corpus(_require(args.corpus, "corpus"), cfg.features)
    print(f"featurised {n} utterances in {args.corpus}")


def _dump_alignments(model, utts, path):
    arrays = {}
    model.eval()
    with torch.no_grad():
        for u in utts:
            fw = model.teacher_forced(collate([u], next(model.parameters()).dtype))
            arrays[f"soft/{u.id}"] = fw.log_soft[0].exp().numpy()
            arrays[f"hard/{u.id}"] = fw.hard[0].numpy()
            arrays[f"durations/{u.id}"] = fw.durations[0].numpy()
    np.savez(path, **arrays)
    log.info("wrote alignments of %d utterances to %s", len(utts), path)


def cmd_train(args):
    cfg = _run_config(args)
    corpus_dir = _require(args.corpus, "corpus")
    utts = load_corpus(corpus_dir, config=cfg.features)
    if not utts:
        raise UsageError(f"no usable utterances in {corpus_dir}")
    vocab = Vocabulary.load(corpus_dir / "vocab.txt") if (corpus_dir / "vocab.txt").exists() else \
        Vocabulary.from_texts(u.text for u in utts)
    ckpt = train(cfg, utts, vocab, out_dir=args.out, resume=not args.no_resume)
    if args.dump_alignment:
        _dump_alignments(ckpt.build_model(), normalize_corpus(utts, ckpt.stats), args.dump_alignment)
    print(f"trained to step {ckpt.step}; checkpoint in {Path(args.out) / 'checkpoint.npz'}")


def cmd_finetune(args):
    try:
        groups = resolve_groups(args.groups.split(","))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ckpt = _load_ckpt(args)
    target = load_corpus(_require(args.corpus, "corpus"), ckpt.vocab, ckpt.config.features)
    if args.target_speakers:
        keep = set(args.target_speakers.split(","))
        target = [u for u in target if u.speaker_id in keep]
    if not target:
        raise UsageError("no target utterances")
    reg = None
    if args.regularization:
        reg = load_corpus(_require(args.regularization, "regularization corpus"), ckpt.vocab, ckpt.config.features)
    tc = ckpt.config.train
    if args.seed is not None:
        tc = dataclasses.replace(tc, seed=args.seed)
    out = finetune(ckpt, target, groups, args.steps, reg, out_dir=args.out, train_config=tc)
    if out is ckpt:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, Path(args.out) / "checkpoint.npz")
    print(f"fine-tuned {','.join(groups) or 'nothing'} to step {out.step}; checkpoint in {args.out}")


def cmd_synth(args):
    if args.n_steps < 1:
        raise UsageError("--n-steps must be >= 1")
    if args.pace <= 0:
        raise UsageError("--pace must be positive")
    if args.temperature <= 0:
        raise UsageError("--temperature must be positive")
    ckpt = _load_ckpt(args)
    if ckpt.vocab is None or ckpt.stats is None:
        raise UsageError("checkpoint lacks vocabulary or normalisation statistics")
    feats = ckpt.config.features
    ref_wave = read_wav(_require(args.reference, "reference wav"), feats.sample_rate_hz)
    ref = normalize_mel(wave_to_mel(ref_wave, feats), ckpt.stats)
    try:
        tokens = tokenize(args.text, ckpt.vocab)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = ckpt.build_model()
    seed = args.seed or 0
    mu, s, durations = model.prior(tokens, ref.frames, args.pace)
    if int(durations.max()) <= 1:
        log.warning("degenerate durations: every token clamped to one frame")
    model.eval()
    with torch.no_grad():
        result = reverse_sample(mu, s, model.score, model.schedule, args.n_steps, args.solver, args.temperature,
                                seed, trace_every=args.trace_every, t_min=model.diff.t_min)
    mel, trace = result if args.trace_every else (result, None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_mel = denormalize_mel(MelSpectrogram(mel[0].numpy(), feats.config_hash), ckpt.stats)
    save_mel(out.with_suffix(".npz"), log_mel, durations=durations.numpy(), mu=mu[0].numpy(),
             tokens=np.asarray(tokens))
    if trace is not None:
        np.savez(out.with_suffix(".trace.npz"), trace=torch.stack([y[0] for y in trace]).numpy(),
                 every=np.int64(args.trace_every))
    wave = mel_to_wave(log_mel, feats, gl_iters=args.gl_iters, seed=seed)
    write_wav(out, wave, feats.sample_rate_hz)
    print(f"wrote {out} ({len(wave)} samples, {int(durations.sum())} frames)")


def cmd_eval_secs(args):
    ckpt = _load_ckpt(args)
    utts = load_corpus(_require(args.corpus, "corpus"), ckpt.vocab, ckpt.config.features)
    utts = normalize_corpus(utts, ckpt.stats)
    targets = set(args.target_speakers.split(",")) if args.target_speakers else None
    try:
        report = evaluate_secs(ckpt.build_model(), utts, args.n_pairs, args.seed or 0, args.n_steps, args.solver,
                               target_speakers=targets)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = format_report(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


# -- parser ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="stylediff", description="Zero-shot style-conditioned diffusion TTS.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="INI run config")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("make-synthetic", help="write a synthetic multi-speaker corpus")
    sp.add_argument("--speakers", type=int, default=4)
    sp.add_argument("--utts", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames-per-symbol", type=int, default=8)
    sp.add_argument("--speaker-offset", type=int, default=0)
    common(sp, config=False)
    sp.set_defaults(func=cmd_make_synthetic)

    sp = sub.add_parser("prepare", help="featurise a wav corpus into mels/ and vocab.txt")
    sp.add_argument("--corpus", required=True)
    common(sp)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train (or resume) a model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="run directory (checkpoint.npz, metrics.jsonl)")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--no-resume", action="store_true")
    sp.add_argument("--dump-alignment", help="write soft/hard alignments of the corpus to this archive")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="update selected parameter groups on a target corpus")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True, help="target corpus")
    sp.add_argument("--target-speakers", help="comma-separated speaker ids to keep from the target corpus")
    sp.add_argument("--regularization", help="corpus mixed into every batch (usually the training corpus)")
    sp.add_argument("--groups", required=True, help="comma-separated groups, e.g. sae,diffusion")
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true", help="load despite version/config mismatch")
    common(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("synth", help="zero-shot synthesis from text and a reference wav")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--text", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--out", required=True, help="output wav; the mel archive is written beside it")
    sp.add_argument("--n-steps", type=int, default=100)
    sp.add_argument("--solver", choices=sorted(SOLVERS), default="ml")
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--pace", type=float, default=1.0)
    sp.add_argument("--gl-iters", type=int, default=32)
    sp.add_argument("--trace-every", type=int, default=0, help="also dump Y_t every k sampler steps")
    sp.add_argument("--force", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("eval-secs", help="speaker-embedding cosine similarity report")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--n-pairs", type=int, default=16)
    sp.add_argument("--n-steps", type=int, default=100)
    sp.add_argument("--solver", choices=sorted(SOLVERS), default="ml")
    sp.add_argument("--target-speakers", help="comma-separated speaker ids to draw targets from")
    sp.add_argument("--out", help="also write the report here")
    sp.add_argument("--force", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_eval_secs)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
