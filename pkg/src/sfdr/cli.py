"""Command-line entry point.

Subcommands: gen-synthetic, train, caption, eval, selftest, inspect.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every run writes a manifest with the fully resolved configuration so it can
be reproduced bit-identically.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import NumericError, Tensor, grad_check, tensor
from .config import ConfigError, RunConfig
from .data_io import (
    FormatError,
    TokenSeq,
    build_vocab,
    gen_synthetic_corpus,
    load_corpus,
    read_bundle,
    read_header,
    save_corpus,
    tokenize,
)
from .inference import beam_search, greedy_decode, attention_rows
from .metrics import MetricInputError, evaluate, format_report
from .model import load_checkpoint, save_checkpoint
from .trainer import Adam, TrainingDiverged, train

USAGE_ERROR, DATA_ERROR, NUMERIC_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def build_parser() -> _Parser:
    parser = _Parser(prog="sfdr", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override one config key (repeatable)")
    common.add_argument("--preset", help="named config preset (e.g. desk)")
    common.add_argument("--threads", type=int,
                        help="corpus-level parallelism cap (env SFDR_THREADS)")
    common.add_argument("--no-figures", action="store_true",
                        help="skip rendering diagnostic images")

    gen = sub.add_parser("gen-synthetic", parents=[common],
                         help="write a deterministic toy corpus")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", parents=[common], help="run one training stage")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--stage", choices=["ce", "scst"], default="ce")
    tr.add_argument("--out", required=True, help="checkpoint output path")
    tr.add_argument("--init-ckpt", help="starting checkpoint (required for scst)")
    tr.add_argument("--resume", help="resume from a .last checkpoint")

    cap = sub.add_parser("caption", parents=[common],
                         help="generate captions for a corpus split")
    cap.add_argument("--ckpt", required=True)
    cap.add_argument("--corpus", required=True)
    cap.add_argument("--split", default="test", choices=["train", "val", "test"])
    cap.add_argument("--beam", type=int)
    cap.add_argument("--length-norm", type=float)
    cap.add_argument("--out", required=True)
    cap.add_argument("--dump-attention", metavar="DIR",
                     help="write per-token cross-attention grids")

    ev = sub.add_parser("eval", parents=[common], help="score captions")
    ev.add_argument("--candidates", required=True)
    ev.add_argument("--references", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--spice", type=float,
                    help="externally computed SPICE score for the star aggregate")

    sub.add_parser("selftest", parents=[common],
                   help="run gradient and metric self-checks")

    ins = sub.add_parser("inspect", parents=[common],
                         help="describe a bundle or checkpoint")
    ins.add_argument("--bundle")
    ins.add_argument("--ckpt")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg.load_file(args.config)
    if args.preset:
        cfg.apply_preset(args.preset)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects K=V, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    cfg.update(overrides)
    env_threads = os.environ.get("SFDR_THREADS")
    if env_threads is not None:
        cfg.update({"threads": env_threads})
    if args.threads is not None:
        cfg.update({"threads": str(args.threads)})
    return cfg


def write_run_manifest(path, command: str, cfg: RunConfig,
                       extras: dict[str, str] | None = None) -> None:
    lines = [f"command={command}", f"version={__version__}"]
    for key in sorted(cfg.values):
        lines.append(f"{key}={cfg.values[key]}")
    for key, value in sorted((extras or {}).items()):
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    corpus = gen_synthetic_corpus(
        args.n, args.seed, dims=cfg.synthetic_dims(),
        captions_per_image=cfg.get_int("data.captions_per_image"))
    save_corpus(corpus, out)
    for split in ("train", "val", "test"):
        lines = []
        for bundle in corpus.bundles(split):
            for idx, caption in enumerate(bundle.captions):
                lines.append(f"{bundle.image_id}\t{idx}\t{caption}")
        (out / f"refs_{split}.txt").write_text(
            "\n".join(lines) + "\n" if lines else "", encoding="utf-8")
    write_run_manifest(out / "run_manifest.txt", "gen-synthetic", cfg,
                       {"gen.n": str(args.n), "gen.seed": str(args.seed)})
    print(f"wrote {args.n} bundles to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    seed = cfg.get_int("train.seed")

    model = vocab = optimizer = None
    start_epoch = 0
    if args.resume:
        model, vocab, pairs, opt_state = load_checkpoint(args.resume)
        optimizer = Adam(model.params(), lr=cfg.get_float("train.lr"),
                         grad_clip=cfg.get_float("train.grad_clip"))
        optimizer.load_state(opt_state)
        start_epoch = int(pairs.get("train.completed_epochs", "0"))
    elif args.init_ckpt:
        model, vocab, _, _ = load_checkpoint(args.init_ckpt)
    elif args.stage == "scst":
        raise ConfigError("scst stage needs --init-ckpt or --resume")

    train_cfg = cfg.train_config(args.stage)
    if vocab is None:
        vocab = build_vocab(corpus.training_token_lists(),
                            cfg.get_int("train.min_count"))
    model_cfg = None if model is not None \
        else cfg.model_config(corpus.header, len(vocab))

    result = train(corpus, train_cfg, model_cfg=model_cfg, model=model,
                   vocab=vocab, optimizer=optimizer, start_epoch=start_epoch,
                   extra_config={"train.seed": str(seed)})

    completed = str(start_epoch + train_cfg.epochs)
    save_checkpoint(
        f"{out}.last", result.model, vocab,
        extra={"train.completed_epochs": completed, "train.stage": args.stage},
        opt_state=result.optimizer.state_tensors())
    result.load_best()
    save_checkpoint(out, result.model, vocab,
                    extra={"train.best_epoch": str(result.best_epoch),
                           "train.stage": args.stage})
    manifest_path = f"{out}.manifest.txt"
    Path(manifest_path).write_text(result.manifest.to_text(), encoding="utf-8")
    if not args.no_figures:
        from .figures import save_loss_curve
        save_loss_curve(result.manifest, f"{out}.loss.png")
    write_run_manifest(f"{out}.run.txt", f"train --stage {args.stage}", cfg,
                       {"train.completed_epochs": completed,
                        "vocab.hash": vocab.content_hash()})
    final = result.manifest.epochs[-1]
    print(f"stage {args.stage}: {len(result.manifest.epochs)} epochs, "
          f"final train loss {final.train_loss:.4f}, best epoch "
          f"{result.best_epoch}; checkpoint {out}")
    return 0


def cmd_caption(args, cfg: RunConfig) -> int:
    model, vocab, _, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    bundles = corpus.bundles(args.split)
    if not bundles:
        raise FormatError(f"corpus split {args.split!r} is empty")
    beam = args.beam if args.beam is not None else cfg.get_int("infer.beam")
    norm = args.length_norm if args.length_norm is not None \
        else cfg.get_float("infer.length_norm")

    def decode_one(bundle):
        if beam == 1:
            hyp = greedy_decode(model, bundle)
        else:
            hyp = beam_search(model, bundle, beam=beam, length_norm=norm)[0]
        return bundle.image_id, hyp

    threads = max(1, cfg.get_int("threads"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(decode_one, bundles))
    else:
        results = [decode_one(b) for b in bundles]

    lines = []
    for image_id, hyp in results:
        caption = " ".join(vocab.decode(hyp.tokens.content))
        lines.append(f"{image_id}\t{caption}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")

    if args.dump_attention:
        dump_dir = Path(args.dump_attention)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for (image_id, hyp), bundle in zip(results, bundles):
            rows = attention_rows(model, bundle, hyp.tokens)
            tokens = vocab.decode(hyp.tokens.ids[1:])
            grid_lines = ["token\t" + "\t".join(
                f"node{j}" for j in range(rows.shape[1]))]
            for tok, row in zip(tokens, rows):
                grid_lines.append(tok + "\t" + "\t".join(f"{w:.6f}" for w in row))
            (dump_dir / f"{image_id}.attention.txt").write_text(
                "\n".join(grid_lines) + "\n", encoding="utf-8")
            if not args.no_figures:
                from .figures import save_attention_heatmap
                save_attention_heatmap(tokens, rows,
                                       dump_dir / f"{image_id}.attention.png")

    write_run_manifest(f"{args.out}.run.txt",
                       f"caption --split {args.split} --beam {beam}", cfg,
                       {"ckpt": str(args.ckpt), "infer.beam": str(beam),
                        "infer.length_norm": repr(norm)})
    print(f"captioned {len(lines)} images -> {args.out}")
    return 0


def _read_candidates(path) -> list[tuple[str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'image_id<TAB>caption'")
        out.append((parts[0], parts[1]))
    return out


def _read_references(path) -> dict[str, list[str]]:
    refs: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(
                f"{path}:{lineno}: expected 'image_id<TAB>ref_index<TAB>sentence'")
        refs.setdefault(parts[0], []).append(parts[2])
    return refs


def cmd_eval(args, cfg: RunConfig) -> int:
    candidates = _read_candidates(args.candidates)
    references = _read_references(args.references)
    cand_tokens = []
    ref_tokens = []
    for image_id, caption in candidates:
        if image_id not in references:
            raise MetricInputError(f"no references for image {image_id!r}")
        cand_tokens.append(tokenize(caption))
        ref_tokens.append([tokenize(r) for r in references[image_id]])
    report = evaluate(cand_tokens, ref_tokens, spice=args.spice,
                      cider_variant=cfg["eval.cider_variant"])
    text = format_report(report)
    Path(args.out).write_text(text, encoding="utf-8")
    if not args.no_figures:
        from .figures import save_metric_bars
        save_metric_bars(report, f"{args.out}.metrics.png")
    write_run_manifest(f"{args.out}.run.txt", "eval", cfg,
                       {"eval.candidates": str(args.candidates),
                        "eval.references": str(args.references)})
    print(text, end="")
    return 0


def cmd_inspect(args, cfg: RunConfig) -> int:
    if bool(args.bundle) == bool(args.ckpt):
        raise ConfigError("inspect needs exactly one of --bundle or --ckpt")
    if args.bundle:
        header = read_header(args.bundle)
        bundle = read_bundle(args.bundle)
        print(f"bundle {bundle.image_id}")
        print(f"dims: d_v={header.d_v} d_t={header.d_t} H={header.H} "
              f"d_g={header.d_g} k={header.k} d_r={header.d_r}")
        print(f"clip_text: {'present' if bundle.clip_text is not None else 'absent'}")
        print(f"captions: {len(bundle.captions)}")
        for caption in bundle.captions:
            print(f"  {caption}")
    else:
        model, vocab, pairs, opt_state = load_checkpoint(args.ckpt)
        total = sum(t.data.size for t in model.params())
        print(f"checkpoint {args.ckpt}")
        print(f"parameters: {total}")
        print(f"vocabulary: {len(vocab)} tokens (hash {vocab.content_hash()})")
        print(f"optimizer state: {'present' if opt_state else 'absent'}")
        for key in sorted(pairs):
            print(f"  {key}={pairs[key]}")
    return 0


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def _selftest_checks():
    from .data_io import CorpusHeader, SyntheticDims
    from .dgfr import EdgeMLPParams, adjacency, edge_weights, threshold
    from .metrics import aggregate, bleu, cider, meteor_lite, rouge_l
    from .model import CaptionModel, ModelConfig

    def ops_gradients():
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            a = Tensor(rng.uniform(-1, 1, (3, 4)))
            b = rng.uniform(-1, 1, (4, 3))
            worst = max(worst, grad_check(
                lambda ps: ad.sum_all(ad.softmax_rows(
                    ad.matmul(ps[0], tensor(b)), scale=1.1)), [a], eps=1e-5))
        return worst < 1e-6, f"max rel err {worst:.2e}"

    def pipeline_gradient():
        dims = SyntheticDims(d_v=4, d_t=3, H=3, d_g=5, k=3, d_r=4, classes=2)
        corpus = gen_synthetic_corpus(2, seed=1, dims=dims)
        vocab = build_vocab(corpus.training_token_lists(), 0)
        model = CaptionModel(
            ModelConfig(header=corpus.header, vocab_size=len(vocab), d=6,
                        dec_dim=6, dec_layers=1, dec_heads=2, dec_ffw=8,
                        max_len=10), np.random.default_rng(0))
        from .trainer import batch_ce
        bundle = corpus.bundles("train")[0]
        items = [(bundle, TokenSeq.from_caption(vocab, bundle.captions[0], 10))]
        err = ad.grad_check_inplace(lambda: batch_ce(model, items),
                                    model.params(), eps=1e-5)
        return err < 1e-4, f"max rel err {err:.2e}"

    def graph_laws():
        rng = np.random.default_rng(1)
        for _ in range(100):
            k, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
            nodes = tensor(rng.uniform(-2, 2, (k, d)))
            w = edge_weights(nodes, EdgeMLPParams.init(rng, d))
            if not np.array_equal(w.data, w.data.T):
                return False, "edge weights not symmetric"
            t = threshold(w)
            a_mask, w_n = adjacency(w, t)
            if not ((w.data >= t) | np.eye(k, dtype=bool))[a_mask.astype(bool)].all():
                return False, "adjacency violates the >= rule"
            if not a_mask.diagonal().all():
                return False, "missing self-loop"
        uniform = tensor(np.full((3, 3), 0.4))
        a_mask, _ = adjacency(uniform, threshold(uniform))
        if not a_mask.all():
            return False, "degenerate equal scores must keep all edges"
        if threshold(tensor([[0.1, 0.4, 0.9]])) != 0.5:
            return False, "threshold formula broken"
        return True, "100 randomized trials"

    def metric_anchors():
        checks = [
            abs(bleu([["the", "cat"]], [[["the", "cat", "sat"]]])[0]
                - 100 * np.exp(-0.5)) < 1e-9,
            abs(rouge_l([["a", "b", "c", "d"]], [[["a", "c", "b", "d"]]])
                - 75.0) < 1e-9,
            abs(meteor_lite([["a"]], [[["a"]]]) - 50.0) < 1e-9,
            aggregate(71.72, 47.34, 79.74, 328.64, 45.22)
            == ((71.72 + 47.34 + 79.74 + 328.64) / 4,
                (71.72 + 47.34 + 79.74 + 328.64 + 45.22) / 5),
        ]
        refs = [
            [["boat", "sails", "on", "river"], ["boat", "moves", "down", "river"]],
            [["cars", "drive", "along", "roads"], ["many", "cars", "cross", "roads"]],
            [["planes", "rest", "near", "hangar"], ["two", "planes", "park", "hangar"]],
        ]
        cands = [r[0] for r in refs]
        checks.append(abs(cider(cands, refs, reporting_scale=False) - 5.625) < 1e-12)
        return all(checks), f"{sum(checks)}/{len(checks)} anchors"

    def beam_exactness():
        from .inference import beam_search as bs, greedy_decode as gd
        dims = SyntheticDims(d_v=4, d_t=3, H=3, d_g=5, k=3, d_r=4, classes=2)
        for seed in range(5):
            corpus = gen_synthetic_corpus(2, seed=seed, dims=dims)
            model = CaptionModel(
                ModelConfig(header=corpus.header, vocab_size=5, d=6, dec_dim=6,
                            dec_layers=1, dec_heads=2, dec_ffw=8, max_len=4),
                np.random.default_rng(seed))
            bundle = corpus.all_bundles()[0]
            if bs(model, bundle, beam=1)[0].tokens.ids != gd(model, bundle).tokens.ids:
                return False, f"beam=1 != greedy at seed {seed}"
        return True, "beam=1 equals greedy on 5 random models"

    def bundle_round_trip():
        import tempfile
        rng = np.random.default_rng(2)
        header = CorpusHeader(3, 2, 2, 3, 2, 3)
        from .data_io import FeatureBundle, write_bundle
        f32 = lambda shape: rng.standard_normal(shape).astype(np.float32).astype(float)
        bundle = FeatureBundle("img", f32((1, 3)), f32((1, 2)), f32((2, 3)),
                               f32((2, 3)), ["a boat on the river"])
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "b.sfdr"
            write_bundle(bundle, path, header)
            again = read_bundle(path, expect=header)
            ok = (np.array_equal(again.grid, bundle.grid)
                  and again.captions == bundle.captions)
        return ok, "write-read identity"

    return [
        ("op-gradients-vs-finite-differences", ops_gradients),
        ("pipeline-gradient-integrity", pipeline_gradient),
        ("graph-refinement-laws", graph_laws),
        ("metric-anchors", metric_anchors),
        ("beam-search-consistency", beam_exactness),
        ("bundle-round-trip", bundle_round_trip),
    ]


def cmd_selftest(args, cfg: RunConfig) -> int:
    failures = 0
    for name, check in _selftest_checks():
        try:
            ok, detail = check()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
        failures += 0 if ok else 1
    print(f"{'all checks passed' if not failures else f'{failures} check(s) failed'}")
    return 0 if not failures else NUMERIC_ERROR


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_ERROR
    try:
        cfg = resolve_config(args)
        handler = {
            "gen-synthetic": cmd_gen_synthetic,
            "train": cmd_train,
            "caption": cmd_caption,
            "eval": cmd_eval,
            "selftest": cmd_selftest,
            "inspect": cmd_inspect,
        }[args.command]
        return handler(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (FormatError, MetricInputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (NumericError, TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
