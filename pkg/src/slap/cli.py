"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable audio, bad manifest, bad checkpoint), 3 numeric error
(non-finite loss or gradient, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from slap.errors import ConfigError, DataError, InputError, NumericError

log = logging.getLogger("slap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def load_config(path=None, seed=None):
    """Read a JSON config with optional "model" and "train" sections.

    Keys inside each section mirror the fields of ModelConfig (nested
    "audio", "text", "decoder", "heads") and TrainConfig.
    """
    from slap.model import ModelConfig
    from slap.state import TrainConfig

    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg}, line {e.lineno})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        extra = set(raw) - {"model", "train"}
        if extra:
            raise ConfigError(f"{path}: unknown sections {sorted(extra)}")
    train = dict(raw.get("train", {}))
    if seed is not None:
        train["seed"] = seed
    try:
        return ModelConfig.from_dict(raw.get("model", {})), TrainConfig(**train)
    except TypeError as e:
        raise ConfigError(f"config: {e}") from e


def _load_model(args):
    from slap.checkpoint import load_checkpoint

    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    model_cfg = load_config(args.config)[0] if args.config else None
    model = load_checkpoint(args.checkpoint, model_cfg).model
    model.eval()
    return model


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out:
        Path(out).write_text(text + "\n")


def cmd_synth_data(args):
    from slap.data import synth_dataset

    recs = synth_dataset(args.out, n_pairs=args.pairs, seed=args.seed or 0)
    print(f"wrote {len(recs)} pairs to {args.out}")


def cmd_train(args):
    from slap.data import read_manifest
    from slap.trainer import fit

    model_cfg, cfg = load_config(args.config, args.seed)
    if args.steps is not None:
        cfg.steps = args.steps
    manifest = read_manifest(args.manifest)

    def report(rec):
        if rec["step"] % args.log_every == 0:
            log.info("step %d total %.4f clap %.4f ssl %.4f cap %.4f lr %.2e",
                     rec["step"], rec["total"], rec["l_clap"], rec["l_ssl"], rec["l_cap"], rec["lr"])

    state = fit(cfg, manifest, args.out, model_cfg=model_cfg, resume=args.checkpoint, on_step=report)
    print(f"trained to step {state.step}; checkpoint {Path(args.out) / 'final.slap'}")


def _manifest_batch(manifest):
    from slap.dsp import wav_to_patches

    return [wav_to_patches(r.audio_path) for r in manifest]


def cmd_eval_retrieval(args):
    from slap.data import read_manifest
    from slap.evaluation import retrieval_report, similarity_matrix

    model = _load_model(args)
    manifest = read_manifest(args.manifest)
    seqs = _manifest_batch(manifest)
    # identical captions are all relevant for each other's clips
    texts = sorted({r.caption for r in manifest})
    col = {t: j for j, t in enumerate(texts)}
    S = similarity_matrix(model.embed_audio(seqs), model.embed_text(texts))
    pairs = [(i, col[r.caption]) for i, r in enumerate(manifest)]
    _emit(retrieval_report(S, pairs, args.k), args.out)


def cmd_eval_zeroshot(args):
    from slap.data import read_manifest
    from slap.evaluation import zero_shot_classify

    model = _load_model(args)
    manifest = read_manifest(args.manifest)
    classes = [c.strip() for c in args.classes.split(",")] if args.classes else sorted({r.caption for r in manifest})
    index = {c: i for i, c in enumerate(classes)}
    unknown = [r.id for r in manifest if r.caption not in index]
    if unknown:
        raise DataError(f"{len(unknown)} records have a caption outside the class list, first: {unknown[0]}")
    emb = model.embed_audio(_manifest_batch(manifest))
    preds, acc = zero_shot_classify(model, emb, classes, [index[r.caption] for r in manifest], args.template)
    _emit({"top1": acc, "n": len(manifest), "classes": len(classes),
           "predictions": {r.id: classes[p] for r, p in zip(manifest, preds)}}, args.out)


def cmd_embed(args):
    from slap.data import read_manifest
    from slap.evaluation import embed_manifest

    if args.out is None:
        raise UsageError("--out is required")
    model = _load_model(args)
    missing = embed_manifest(model, read_manifest(args.manifest), args.out)
    print(f"wrote embeddings to {args.out}")
    if missing:
        raise DataError(f"audio missing for {len(missing)} records: {', '.join(missing[:5])}")


def cmd_caption(args):
    from slap.data import read_manifest
    from slap.encoders import EOS, detokenize
    from slap.packing import pack

    model = _load_model(args)
    manifest = read_manifest(args.manifest)
    seqs = _manifest_batch(manifest)
    hits = 0
    with torch.no_grad():
        for i in range(0, len(seqs), 16):
            out = model.audio(pack(seqs[i : i + 16]))
            for r, ids in zip(manifest[i : i + 16], model.decoder.greedy_decode(out, args.max_len)):
                text = detokenize(ids[1:-1] if ids[-1] == EOS else ids[1:])
                hits += text == r.caption
                print(f"{r.id}\t{text}")
    print(f"exact match {hits}/{len(manifest)}")


def cmd_grad_check(args):
    from slap.diagnostics import TOLERANCE, run_grad_checks

    results = run_grad_checks(args.seed or 0)
    for name, err in results.items():
        print(f"{name:20s} max rel err {err:.3e} {'ok' if err <= TOLERANCE else 'FAIL'}")
    if max(results.values()) > TOLERANCE:
        raise NumericError(f"gradient check above {TOLERANCE}")


def cmd_pack_bench(args):
    from slap.diagnostics import pack_bench
    from slap.model import SlapModel

    if args.checkpoint:
        model = _load_model(args)
    else:
        model_cfg, cfg = load_config(args.config, args.seed)
        torch.manual_seed(cfg.seed)
        model = SlapModel(model_cfg)
    _emit(pack_bench(model, n_clips=args.clips, seed=args.seed or 0), args.out)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--checkpoint", help="checkpoint to load (train: resume from it)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="slap", description="Desk-scale language-audio pretraining")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic tone corpus")
    p.add_argument("--pairs", type=int, default=16)
    p.set_defaults(func=cmd_synth_data, need_out=True)

    p = sub.add_parser("train", parents=[common], help="train and write checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train, need_out=True)

    p = sub.add_parser("eval-retrieval", parents=[common], help="recall@k in both directions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-zeroshot", parents=[common], help="classify clips by caption class")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", help="comma-separated class names (default: distinct captions)")
    p.add_argument("--template", default=None, help="e.g. 'the sound of {}'")
    p.set_defaults(func=cmd_eval_zeroshot)

    p = sub.add_parser("embed", parents=[common], help="export audio and text embeddings")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("caption", parents=[common], help="greedy-decode captions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--max-len", type=int, default=None)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference checks of every loss")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("pack-bench", parents=[common], help="time a packed audio forward")
    p.add_argument("--clips", type=int, default=8)
    p.set_defaults(func=cmd_pack_bench)
    return parser


def _configure_runtime(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if os.environ.get("SLAP_DETERMINISTIC") == "1":
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "need_out", False) and not args.out:
            raise UsageError("--out is required")
        _configure_runtime(args.verbose)
        args.func(args)
        return EXIT_OK
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, InputError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
