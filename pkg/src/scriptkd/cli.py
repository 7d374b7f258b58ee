"""Command-line pipeline: corpus synthesis through training to evaluation.

Machine-readable results go to stdout as tab-separated lines; progress goes
to stderr.  Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime
error.  All randomness is driven by ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .data import (
    DEVANAGARI_CONSONANTS,
    DatasetManifest,
    build_atlas,
    gen_synth_corpus,
    load_samples,
    make_random_texts,
    split,
)
from .distill import (
    MetricsLog,
    Pipeline,
    TrainPlan,
    arm_weights,
    corpus_bleu_on,
    load_checkpoint,
    rng_for,
    save_checkpoint,
    token_accuracy,
    train_student,
    train_teacher,
)
from .encoder import VisionConfig
from .errors import (
    CapacityError,
    ContractError,
    DataFormatError,
    DimensionError,
    EmptyLossError,
    ParameterError,
    ScriptKdError,
    VocabularyError,
)
from .evalkit import bleu, char_accuracy, co2_estimate, corpus_bleu, throughput_bench
from .imaging import PreprocessConfig, ThresholdParams, preprocess, read_pgm, write_pgm
from .student import DecoderLM, preset
from .teacher import attach_lora, teacher_config
from .tokenizer import BpeVocab, bpe_train, decode_lossy

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

_DATA_ERRORS = (DataFormatError, VocabularyError, CapacityError, ContractError,
                EmptyLossError, DimensionError, FileNotFoundError)


@dataclass
class RunConfig:
    """Flat run configuration; serializes as key=value lines (flags override)."""

    seed: int = 0
    corpus_dir: str = "corpus"
    checkpoint_dir: str = "checkpoints"
    manifest: str = "manifest.tsv"
    vocab_path: str = "vocab.bpe"
    preset: str = "S"
    scale: str = "desk"
    vocab_size: int = 512
    patch: int = 16
    d_v: int = 128
    encoder_blocks: int = 4
    teacher_hidden: int = 512
    teacher_blocks: int = 8
    epochs: int = 3
    pretrain_epochs: int = 6
    pretrain_lr: float = 1e-3
    lr_teacher: float = 1e-6
    lr_student: float = 1e-4
    batch_size: int = 4
    grad_accum: int = 8
    lora_rank: int = 64
    lora_steps: int = 25
    w_ce: float = 1.0
    w_l2: float = 1.0
    w_kl: float = 1.0
    parallel_attention: bool = True
    qk_norm: bool = True
    loss_arm: str = ""
    texts: int = 100
    styles: int = 2
    alphabet_size: int = 24
    noise: float = 0.0
    rotation: float = 0.0
    max_gen_len: int = 32
    jobs: int = 1

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for field in dataclasses.fields(self):
                f.write(f"{field.name}={getattr(self, field.name)}\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        values = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise DataFormatError(f"{path}: expected key=value, got {line!r}")
                key, val = line.split("=", 1)
                values[key.strip()] = val.strip()
        kwargs = {}
        for field in dataclasses.fields(cls):
            if field.name not in values:
                continue
            raw = values.pop(field.name)
            if field.type in ("int", int):
                kwargs[field.name] = int(raw)
            elif field.type in ("float", float):
                kwargs[field.name] = float(raw)
            elif field.type in ("bool", bool):
                kwargs[field.name] = raw.lower() in ("1", "true", "yes")
            else:
                kwargs[field.name] = raw
        if values:
            raise DataFormatError(f"{path}: unknown config keys {sorted(values)}")
        return cls(**kwargs)


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(key, value):
    if isinstance(value, float):
        print(f"{key}\t{value:.6g}")
    else:
        print(f"{key}\t{value}")


def _note(msg):
    print(msg, file=sys.stderr, flush=True)


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for field in dataclasses.fields(RunConfig):
        if hasattr(args, field.name) and getattr(args, field.name) is not None:
            setattr(cfg, field.name, getattr(args, field.name))
    return cfg


def _vision_config(cfg: RunConfig) -> VisionConfig:
    return VisionConfig(patch=cfg.patch, d_v=cfg.d_v, blocks=cfg.encoder_blocks,
                        heads=max(1, cfg.d_v // 64))


def _plan(cfg: RunConfig) -> TrainPlan:
    return TrainPlan(lr_teacher=cfg.lr_teacher, lr_student=cfg.lr_student,
                     batch_size=cfg.batch_size, grad_accum=cfg.grad_accum,
                     seed=cfg.seed, epochs=cfg.epochs,
                     pretrain_lr=cfg.pretrain_lr, pretrain_epochs=cfg.pretrain_epochs,
                     lora_rank=cfg.lora_rank, lora_steps=cfg.lora_steps,
                     max_gen_len=cfg.max_gen_len)


def _weights(cfg: RunConfig):
    if cfg.loss_arm:
        return arm_weights(cfg.loss_arm)
    return (cfg.w_ce, cfg.w_l2, cfg.w_kl)


def _alphabet(cfg: RunConfig) -> str:
    n = cfg.alphabet_size
    if not 1 <= n <= len(DEVANAGARI_CONSONANTS):
        raise ParameterError(
            f"alphabet_size must be 1..{len(DEVANAGARI_CONSONANTS)}, got {n}")
    return DEVANAGARI_CONSONANTS[:n]


def _load_split_samples(cfg: RunConfig, vocab: BpeVocab):
    manifest = DatasetManifest.load(cfg.manifest, seed=cfg.seed)
    split(manifest, seed=cfg.seed)
    return load_samples(manifest, vocab, root=cfg.corpus_dir)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    alphabet = _alphabet(cfg)
    atlas = build_atlas(alphabet, n_styles=cfg.styles, seed=cfg.seed)
    texts = make_random_texts(cfg.texts, alphabet, seed=cfg.seed)
    manifest, images = gen_synth_corpus(texts, atlas, out_dir=out,
                                        max_rotation=cfg.rotation, noise=cfg.noise,
                                        seed=cfg.seed)
    manifest.save(os.path.join(out, "manifest.tsv"))
    _note(f"rendered {len(images)} images into {out}")
    _emit("images", len(images))
    _emit("texts", len(texts))
    _emit("manifest", os.path.join(out, "manifest.tsv"))
    return EXIT_OK


def _preprocess_one(job):
    src, dst, k, window, rule = job
    img = read_pgm(src)
    cfg = PreprocessConfig(threshold=ThresholdParams(k=k, window=window),
                           threshold_rule=rule)
    write_pgm(preprocess(img, cfg), dst)
    return dst


def cmd_preprocess(args) -> int:
    cfg = _config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    names = sorted(n for n in os.listdir(args.input) if n.endswith(".pgm"))
    if not names:
        raise DataFormatError(f"no .pgm files under {args.input}")
    jobs = [(os.path.join(args.input, n), os.path.join(args.out, n),
             args.k, args.window, args.rule) for n in names]
    if cfg.jobs > 1:
        import multiprocessing

        with multiprocessing.Pool(cfg.jobs) as pool:
            for i, _ in enumerate(pool.imap(_preprocess_one, jobs), 1):
                if i % 50 == 0:
                    _note(f"preprocessed {i}/{len(jobs)}")
    else:
        for i, job in enumerate(jobs, 1):
            _preprocess_one(job)
            if i % 50 == 0:
                _note(f"preprocessed {i}/{len(jobs)}")
    _emit("processed", len(jobs))
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _config_from_args(args)
    try:
        parts = [float(x) for x in args.ratios.split(":")]
        ratios = tuple(p / sum(parts) for p in parts)
    except (ValueError, ZeroDivisionError):
        raise ParameterError(f"bad ratios {args.ratios!r}; expected like 80:10:10")
    manifest = DatasetManifest.load(args.manifest, seed=cfg.seed)
    split(manifest, ratios=ratios, seed=cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    for part in ("train", "test", "val"):
        sub = DatasetManifest(records=manifest.by_split(part), seed=cfg.seed)
        sub.save(os.path.join(args.out, f"{part}.tsv"))
        _emit(part, len(sub.records))
    return EXIT_OK


def cmd_tokenizer_train(args) -> int:
    cfg = _config_from_args(args)
    manifest = DatasetManifest.load(args.manifest, seed=cfg.seed)
    vocab = bpe_train([r.text for r in manifest.records], cfg.vocab_size)
    vocab.save(args.out)
    _emit("vocab_size", vocab.size)
    _emit("merges", len(vocab.merges))
    _emit("vocab", args.out)
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _config_from_args(args)
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    vocab = BpeVocab.load(cfg.vocab_path)
    splits = _load_split_samples(cfg, vocab)
    plan = _plan(cfg)
    log = MetricsLog(os.path.join(cfg.checkpoint_dir, "teacher_metrics.tsv"))
    lm_cfg = teacher_config(hidden=cfg.teacher_hidden, blocks=cfg.teacher_blocks,
                            vocab=vocab.size)
    teacher = train_teacher(plan, splits, vocab, vision_config=_vision_config(cfg),
                            lm_config=lm_cfg, log=log, verbose=True)
    log.close()
    acc = token_accuracy(teacher, (splits.get("val") or splits["train"])[:64], vocab)
    ckpt = os.path.join(cfg.checkpoint_dir, "teacher.mosc")
    save_checkpoint(ckpt, teacher.state_dict())
    cfg.save(os.path.join(cfg.checkpoint_dir, "teacher.cfg"))
    _emit("checkpoint", ckpt)
    _emit("val_token_accuracy", acc)
    return EXIT_OK


def _rebuild_teacher(ckpt_dir: str) -> tuple[Pipeline, RunConfig]:
    cfg = RunConfig.load(os.path.join(ckpt_dir, "teacher.cfg"))
    state = load_checkpoint(os.path.join(ckpt_dir, "teacher.mosc"))
    vocab = BpeVocab.load(cfg.vocab_path)
    lm_cfg = teacher_config(hidden=cfg.teacher_hidden, blocks=cfg.teacher_blocks,
                            vocab=vocab.size)
    pipeline = Pipeline(lm_cfg, _vision_config(cfg), seed=cfg.seed)
    attach_lora(pipeline.lm, rank=min(cfg.lora_rank, lm_cfg.hidden),
                rng=rng_for(cfg.seed, 11))
    pipeline.load_state_dict(state)
    pipeline.freeze()
    return pipeline, cfg


def cmd_distill(args) -> int:
    cfg = _config_from_args(args)
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    teacher, teacher_cfg = _rebuild_teacher(args.teacher)
    # the student shares the teacher's encoder; record its geometry
    cfg.patch = teacher_cfg.patch
    cfg.d_v = teacher_cfg.d_v
    cfg.encoder_blocks = teacher_cfg.encoder_blocks
    vocab = BpeVocab.load(cfg.vocab_path)
    splits = _load_split_samples(cfg, vocab)
    student_cfg = preset(cfg.preset, cfg.scale)
    student_cfg.vocab = vocab.size
    student_cfg.use_parallel_attention = cfg.parallel_attention
    student_cfg.use_qk_norm = cfg.qk_norm
    plan = _plan(cfg)
    log = MetricsLog(os.path.join(cfg.checkpoint_dir, "student_metrics.tsv"))
    student, bridge, history = train_student(plan, splits, vocab, teacher,
                                             student_cfg, weights=_weights(cfg),
                                             log=log, verbose=True)
    test_bleu = corpus_bleu_on(student, splits["test"], vocab,
                               max_len=cfg.max_gen_len)
    log.log(-1, "test", "bleu", test_bleu)
    log.close()
    state = student.state_dict()
    if bridge is not None:
        state["bridge/bridge.w"] = np.array(bridge.w.data)
        state["bridge/bridge.b"] = np.array(bridge.b.data)
    ckpt = os.path.join(cfg.checkpoint_dir, "student.mosc")
    save_checkpoint(ckpt, state)
    cfg.save(os.path.join(cfg.checkpoint_dir, "student.cfg"))
    _emit("checkpoint", ckpt)
    _emit("test_bleu", test_bleu)
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = RunConfig.load(os.path.join(args.checkpoint, "student.cfg"))
    vocab = BpeVocab.load(args.vocab or cfg.vocab_path)
    student_cfg = preset(cfg.preset, cfg.scale)
    student_cfg.vocab = vocab.size
    student_cfg.use_parallel_attention = cfg.parallel_attention
    student_cfg.use_qk_norm = cfg.qk_norm
    pipeline = Pipeline(student_cfg, _vision_config(cfg), seed=cfg.seed)
    state = load_checkpoint(os.path.join(args.checkpoint, "student.mosc"))
    pipeline.load_state_dict({k: v for k, v in state.items()
                              if not k.startswith("bridge/")})
    img = read_pgm(args.image)
    if args.preprocess:
        img = preprocess(img)
    ids = pipeline.generate_ids(img, vocab, max_len=cfg.max_gen_len)
    print(decode_lossy(vocab, ids))
    return EXIT_OK


def _read_lines(path):
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def cmd_eval_bleu(args) -> int:
    cands = _read_lines(args.candidates)
    refs = _read_lines(args.references)
    if len(cands) != len(refs):
        raise DataFormatError(
            f"line counts differ: {len(cands)} candidates vs {len(refs)} references")
    if args.sentence:
        reports = [bleu(c.split(), [r.split()], smoothing=args.smoothing)
                   for c, r in zip(cands, refs)]
        score = sum(r.bleu for r in reports) / len(reports)
        report = reports[0] if len(reports) == 1 else None
    else:
        report = corpus_bleu([(c.split(), [r.split()]) for c, r in zip(cands, refs)],
                             smoothing=args.smoothing)
        score = report.bleu
    if args.json:
        payload = dataclasses.asdict(report) if report else {"bleu": score}
        print(json.dumps(payload))
    else:
        _emit("bleu", score)
        if report:
            _emit("bp", report.bp)
            for i, p in enumerate(report.precisions, 1):
                _emit(f"p{i}", p)
            _emit("len_c", report.len_c)
            _emit("len_r", report.len_r)
    return EXIT_OK


def cmd_eval_char(args) -> int:
    cands = _read_lines(args.candidates)
    refs = _read_lines(args.references)
    if len(cands) != len(refs):
        raise DataFormatError(
            f"line counts differ: {len(cands)} candidates vs {len(refs)} references")
    scores = [char_accuracy(c, r) for c, r in zip(cands, refs)]
    _emit("char_accuracy", sum(scores) / len(scores))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    model_cfg = preset(cfg.preset, cfg.scale)
    lm = DecoderLM(model_cfg, rng_for(cfg.seed, 40))
    rate = throughput_bench(lm, prefix_len=args.prefix_len, duration=args.duration,
                            trials=args.trials, seed=cfg.seed)
    _emit("preset", cfg.preset)
    _emit("tokens_per_second", rate)
    return EXIT_OK


def cmd_co2(args) -> int:
    est = co2_estimate(args.gpus, args.kw, args.hours, args.intensity)
    _emit("total_kw", est.total_kw)
    _emit("kwh", est.kwh)
    _emit("kg_co2", est.kg_co2)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config_flags(p, *names):
    p.add_argument("--config", help="key=value config file (flags override)")
    p.add_argument("--seed", type=int, default=None)
    flags = {
        "corpus_dir": dict(type=str),
        "checkpoint_dir": dict(type=str),
        "manifest": dict(type=str),
        "vocab_path": dict(type=str),
        "preset": dict(type=str, choices=["S", "M", "L", "XL"]),
        "scale": dict(type=str, choices=["desk", "paper"]),
        "vocab_size": dict(type=int),
        "patch": dict(type=int),
        "d_v": dict(type=int),
        "encoder_blocks": dict(type=int),
        "teacher_hidden": dict(type=int),
        "teacher_blocks": dict(type=int),
        "epochs": dict(type=int),
        "pretrain_epochs": dict(type=int),
        "pretrain_lr": dict(type=float),
        "lr_teacher": dict(type=float),
        "lr_student": dict(type=float),
        "batch_size": dict(type=int),
        "grad_accum": dict(type=int),
        "lora_rank": dict(type=int),
        "lora_steps": dict(type=int),
        "w_ce": dict(type=float),
        "w_l2": dict(type=float),
        "w_kl": dict(type=float),
        "loss_arm": dict(type=str, choices=["full", "ce", "ce+l2", "ce+kl"]),
        "texts": dict(type=int),
        "styles": dict(type=int),
        "alphabet_size": dict(type=int),
        "noise": dict(type=float),
        "rotation": dict(type=float),
        "max_gen_len": dict(type=int),
        "jobs": dict(type=int),
    }
    for name in names:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None,
                       **flags[name])


def build_parser() -> _Parser:
    parser = _Parser(prog="scriptkd",
                     description="historical-script transliteration pipeline")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic glyph corpus", parents=[])
    p.add_argument("--out", required=True)
    _add_config_flags(p, "texts", "styles", "alphabet_size", "noise", "rotation")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("preprocess", help="run the scan-cleanup chain over a directory")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--window", type=int, default=31)
    p.add_argument("--rule", choices=["mean-offset", "literal"], default="mean-offset")
    _add_config_flags(p, "jobs")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("split", help="assign train/test/val splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", default="80:10:10")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("tokenizer-train", help="learn a byte-level BPE vocabulary")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, "vocab_size")
    p.set_defaults(fn=cmd_tokenizer_train)

    p = sub.add_parser("train-teacher", help="pretrain the teacher, then LoRA fine-tune")
    _add_config_flags(p, "corpus_dir", "checkpoint_dir", "manifest", "vocab_path",
                      "patch", "d_v", "encoder_blocks", "teacher_hidden",
                      "teacher_blocks", "pretrain_epochs", "pretrain_lr",
                      "lr_teacher", "batch_size", "grad_accum", "lora_rank",
                      "lora_steps")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    _add_config_flags(p, "corpus_dir", "checkpoint_dir", "manifest", "vocab_path",
                      "preset", "scale", "epochs", "lr_student", "batch_size",
                      "grad_accum", "w_ce", "w_l2", "w_kl", "loss_arm",
                      "max_gen_len")
    p.add_argument("--no-parallel-attention", dest="parallel_attention",
                   action="store_false", default=None)
    p.add_argument("--no-qk-norm", dest="qk_norm", action="store_false", default=None)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("generate", help="transliterate one image with a student")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True, help="student checkpoint directory")
    p.add_argument("--vocab", default=None)
    p.add_argument("--preprocess", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval-bleu", help="BLEU of candidate lines vs reference lines")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--sentence", action="store_true",
                   help="average sentence BLEU instead of corpus BLEU")
    p.add_argument("--smoothing", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_eval_bleu)

    p = sub.add_parser("eval-char", help="mean character accuracy of candidate lines")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.set_defaults(fn=cmd_eval_char)

    p = sub.add_parser("bench", help="tokens/second of greedy generation")
    p.add_argument("--duration", type=float, default=0.5)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--prefix-len", type=int, default=8)
    _add_config_flags(p, "preset", "scale")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("co2", help="estimate training emissions")
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--kw", type=float, required=True)
    p.add_argument("--hours", type=float, required=True)
    p.add_argument("--intensity", type=float, required=True)
    p.set_defaults(fn=cmd_co2)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "fn", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except ParameterError as e:
        _note(f"error: {e}")
        return EXIT_USAGE
    except _DATA_ERRORS as e:
        _note(f"data error: {e}")
        return EXIT_DATA
    except ScriptKdError as e:
        _note(f"runtime error: {e}")
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - CLI boundary
        _note(f"runtime error: {type(e).__name__}: {e}")
        return EXIT_RUNTIME


def entrypoint():
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
