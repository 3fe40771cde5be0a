"""Command-line surface: data generation, training, evaluation, cost tools.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time

import numpy as np

from . import costmodel as cm
from . import retrieval as rt
from . import training as tr
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, reference_encoder_config
from .data import gen_corpus, load_corpus, save_corpus, split_items
from .embedding import VisionInput
from .encoder import EncoderConfig, sample_layerdrop_mask
from .errors import LatentVLError, NumericError
from .model import VisionLanguageModel, load_model, save_model
from .rng import RngStream
from .tensor import Tape, grad_check, no_grad


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _common_flags(p):
    p.add_argument("--config", help="JSON run config path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output path")


def build_parser() -> _Parser:
    parser = _Parser(prog="latentvl")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _common_flags(p)

    p = sub.add_parser("train", help="VTM+MLM pretraining")
    _common_flags(p)
    p.add_argument("--corpus", help="corpus index path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log", help="metrics JSONL path")

    p = sub.add_parser("finetune", help="retrieval or QA finetuning")
    _common_flags(p)
    p.add_argument("--task", choices=["retrieval", "qa"], default="retrieval")
    p.add_argument("--stream", choices=["single", "multi", "mixed"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("eval-retrieval", help="report R@1/5/10 per stream mode")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--stream", choices=["single", "multi", "mixed"])
    p.add_argument("--split", default="val")
    p.add_argument("--layerdrop-infer", type=int, default=None,
                   help="run only the first c cross-attention layers")
    p.add_argument("--cache", help="latent cache path to reuse/persist")

    p = sub.add_parser("eval-qa", help="QA accuracy over the closed answer set")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--split", default="val")

    p = sub.add_parser("flops", help="single cost report: latent vs baseline")
    _common_flags(p)
    p.add_argument("--paper-shapes", action="store_true",
                   help="use the reference d=768 shapes instead of the config")

    p = sub.add_parser("sweep", help="efficiency sweep to CSV")
    _common_flags(p)
    p.add_argument("--variable", required=True,
                   choices=["M_frames", "M_framesize", "N", "cross_layers",
                            "corpus_size"])
    p.add_argument("--grid", required=True,
                   help="comma-separated ascending integers")
    p.add_argument("--instrumented", action="store_true",
                   help="also execute the model and assert exact MAC equality")
    p.add_argument("--stream", choices=["single", "multi", "mixed"])

    p = sub.add_parser("bench", help="wall-clock comparison of stream modes")
    _common_flags(p)
    p.add_argument("--corpus-size", type=int, default=16)
    p.add_argument("--runs", type=int, default=3)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    _common_flags(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--sample", type=float, default=0.01)

    p = sub.add_parser("selftest", help="run the invariant suite")
    _common_flags(p)
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "stream", None):
        cfg.stream = args.stream
    return cfg


def _load_items(args, cfg):
    path = getattr(args, "corpus", None) or cfg.corpus_index
    return load_corpus(path)


def _layer_mask(cfg_k, c):
    if c is None:
        return None
    return sample_layerdrop_mask(cfg_k, 0.0, None, mode=("fixed", c))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _run_config(args)
    items = gen_corpus(cfg.seed,
                       counts={"train": cfg.train_count, "val": cfg.val_count,
                               "test": cfg.test_count},
                       image_size=cfg.image_size,
                       video_fraction=cfg.video_fraction,
                       video_frames=cfg.max_frames)
    out = args.out or cfg.corpus_index
    save_corpus(items, out)
    print(f"wrote {len(items)} items to {out}")
    return 0


def cmd_train(args):
    cfg = _run_config(args)
    items = split_items(_load_items(args, cfg), "train")
    steps = args.steps if args.steps is not None else cfg.steps
    model = VisionLanguageModel(cfg.model_config(), seed=cfg.seed)
    schedule = (tr.two_stage_schedule(cfg.warm_steps, steps)
                if cfg.warm_steps > 0 else tr.constant_schedule(steps))
    metrics = tr.train_loop(model, items, steps, RngStream(cfg.seed).child("train"),
                            lr=cfg.lr, weight_decay=cfg.weight_decay,
                            batch_size=cfg.batch_size, schedule=schedule,
                            layerdrop=cfg.layerdrop, log_path=args.log)
    out = args.out or "model.ckpt"
    save_model(out, model, seed=cfg.seed, step=steps)
    last = metrics[-1] if metrics else {}
    print(f"trained {steps} steps; final {json.dumps(last)}; saved {out}")
    return 0


def cmd_finetune(args):
    cfg = _run_config(args)
    model, header = load_model(args.checkpoint)
    items = split_items(_load_items(args, cfg), "train")
    steps = args.steps if args.steps is not None else 200
    rng = RngStream(cfg.seed).child("finetune")
    if args.task == "qa":
        tr.finetune_qa(model, items, steps, rng, lr=cfg.lr,
                       batch_size=cfg.batch_size, layerdrop=cfg.layerdrop)
    else:
        tr.finetune_retrieval(model, items, cfg.stream, steps, rng, lr=cfg.lr,
                              batch_size=cfg.batch_size, tau=cfg.tau,
                              layerdrop=cfg.layerdrop)
    out = args.out or "finetuned.ckpt"
    save_model(out, model, seed=cfg.seed, step=header.get("step", 0) + steps,
               extra={"finetuned": args.task, "stream": cfg.stream})
    print(f"finetuned ({args.task}, {cfg.stream}) for {steps} steps; saved {out}")
    return 0


def cmd_eval_retrieval(args):
    cfg = _run_config(args)
    model, _ = load_model(args.checkpoint)
    items = split_items(_load_items(args, cfg), args.split)
    enc_cfg = model.cfg.encoder
    mask = _layer_mask(enc_cfg.k, args.layerdrop_infer)

    cache = None
    fp = rt.model_fingerprint(model)
    if args.cache and cfg.stream != "single":
        try:
            cache = rt.LatentCache.load(args.cache)
        except (FileNotFoundError, LatentVLError):
            cache = rt.LatentCache(fp)

    scores = tr.eval_retrieval(model, items, mode=cfg.stream, cache=cache,
                               layer_mask=mask, tau=cfg.tau)
    print(f"stream={cfg.stream} split={args.split} "
          + " ".join(f"{k}={v:.4f}" for k, v in scores.items()))
    if args.layerdrop_infer is not None:
        c = args.layerdrop_infer
        # per-encode MAC saving from skipping the last k-c cross-attentions
        m_t = model.cfg.embed.max_text_len
        m_v = model.cfg.embed.max_patches  # single-frame visual encode
        for name, m in (("text", m_t), ("visual(1 frame)", m_v)):
            delta = (enc_cfg.k - c) * cm.cross_attention_macs(
                enc_cfg.n_latents, m, enc_cfg.d)
            print(f"mac_delta[{name} encode, fixed({c}) vs fixed({enc_cfg.k})] "
                  f"= {delta}")
    if cache is not None and args.cache:
        cache.save(args.cache)
    return 0


def cmd_eval_qa(args):
    cfg = _run_config(args)
    model, _ = load_model(args.checkpoint)
    items = split_items(_load_items(args, cfg), args.split)
    acc = tr.eval_qa_accuracy(model, items)
    print(f"qa accuracy ({args.split}): {acc:.4f}")
    return 0


def cmd_flops(args):
    cfg = _run_config(args)
    if args.paper_shapes:
        enc = reference_encoder_config()
        m = 1568 + 40          # 8-frame video at 224/16 patches + text
        patch_dim = 16 * 16 * 3
        m_v = 1568
    else:
        enc = cfg.encoder_config()
        lp = (cfg.image_size // cfg.patch) ** 2
        m_v = lp
        m = m_v + cfg.max_text_len
        patch_dim = cfg.patch * cfg.patch * 3
    report = cm.inference_cost(enc, m_v, m - m_v, patch_dim)
    depth = enc.k * (1 + enc.l)
    baseline = cm.baseline_selfattn_macs(depth, enc.d, m)
    print(f"latent encoder (k={enc.k}, l={enc.l}, N={enc.n_latents}, "
          f"d={enc.d}, M={m}):")
    for line in report.lines():
        print(line)
    print(f"  baseline self-attention (depth {depth}): {baseline:>16,d} MACs"
          f"  ({2 * baseline / 1e9:.3f} GFLOPs)")
    print(f"  baseline/latent encoder ratio: "
          f"{baseline / report.components['encoder']:.2f}x")
    return 0


def _instrumented_runner(run_cfg: RunConfig):
    from .data import render_scene, SceneObject  # noqa: PLC0415

    def runner(enc_cfg, frames, frame_size, active, corpus):
        model_cfg = RunConfig(**{**run_cfg.__dict__,
                                 "n_latents": enc_cfg.n_latents,
                                 "image_size": frame_size}).model_config()
        model = VisionLanguageModel(model_cfg, seed=run_cfg.seed)
        pixels = render_scene([SceneObject("circle", "red", 0.5, 0.5)],
                              frame_size, frames)
        vision = VisionInput(frames=pixels, is_video=frames > 1)
        text = model.text_input("a red circle")
        # pad text to the fixed length used by the analytic formulas
        with no_grad(), Tape() as tape:
            model.encode(vision, text, layer_mask=active)
        return tape.macs

    return runner


def cmd_sweep(args):
    cfg = _run_config(args)
    grid = [int(x) for x in args.grid.split(",")]
    spec = cm.SweepSpec(variable=args.variable, grid=grid,
                        cfg=cfg.encoder_config(), out_path=args.out,
                        frames=1, frame_size=cfg.image_size, patch=cfg.patch,
                        text_len=cfg.max_text_len,
                        mode=args.stream or "encoder")
    runner = None
    if args.instrumented and spec.mode == "encoder":
        runner = _instrumented_runner(cfg)
    rows = cm.sweep(spec, runner=runner)
    for r in rows:
        print(f"{r['variable']}={r['value']:>6d}  analytic={r['analytic_mac']:>14,d}"
              f"  measured={r['measured_mac']:>14,d}  wall_ns={r['wall_ns']}")
    if args.out:
        print(f"csv written to {args.out}")
    return 0


def cmd_bench(args):
    cfg = _run_config(args)
    model = VisionLanguageModel(cfg.model_config(), seed=cfg.seed)
    items = gen_corpus(cfg.seed, counts={"train": args.corpus_size, "val": 2,
                                         "test": 2},
                       image_size=cfg.image_size, video_fraction=0.0)
    corpus = split_items(items, "train")
    query = corpus[0]
    results = {}
    for mode in ("single", "mixed", "multi"):
        walls, macs = [], None
        for _ in range(args.runs):
            m, w = rt.measure_query_macs(model, corpus, query, mode,
                                         tau=cfg.tau)
            macs = m
            walls.append(w)
        results[mode] = (macs, statistics.median(walls))
        print(f"{mode:>7s}: per-query MACs={macs:>14,d} "
              f"median wall={statistics.median(walls) / 1e6:.2f} ms")
    order = sorted(results, key=lambda k: -results[k][0])
    print("MAC ordering:", " > ".join(order))
    return 0


def cmd_grad_check(args):
    from .embedding import TextInput  # noqa: PLC0415
    from .data import render_scene, SceneObject  # noqa: PLC0415
    from .training import loss_mlm, loss_vtm, mask_tokens  # noqa: PLC0415
    from . import tensor as T  # noqa: PLC0415

    cfg = RunConfig(d=32, heads=4, k=2, l=2, n_latents=8, image_size=16,
                    patch=8, max_text_len=12, p_ld=0.0)
    model = VisionLanguageModel(cfg.model_config(), seed=args.seed or 0,
                                dtype=np.float64)
    pixels = render_scene([SceneObject("square", "blue", 0.5, 0.5, size=0.5)], 16, 1)
    vision = VisionInput(frames=pixels)
    text = model.text_input("a blue square")
    rng = RngStream(args.seed or 0).child("gc")
    masked_ids, flags, targets = mask_tokens(text, rng)
    masked = TextInput(token_ids=masked_ids, attention_mask=text.attention_mask)

    def build_loss():
        vtm_logits, mlm_logits = model.pretrain_forward(vision, masked, flags)
        return T.add(loss_vtm(vtm_logits, [1]), loss_mlm(mlm_logits, targets, flags))

    report = grad_check(build_loss, model.params.items(), h=1e-5, tol=args.tol,
                        sample_fraction=args.sample,
                        rng=np.random.default_rng(args.seed or 0), verbose=True)
    worst = max(err for err, _ in report.values())
    checked = sum(n for _, n in report.values())
    print(f"checked {checked} entries; max relative error {worst:.3e} "
          f"(tol {args.tol})")
    if worst >= args.tol:
        raise NumericError("gradient check failed")
    return 0


def cmd_selftest(args):
    from . import selftest  # noqa: PLC0415

    ok = selftest.run(seed=args.seed or 0)
    return 0 if ok else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-qa": cmd_eval_qa,
    "flops": cmd_flops,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "grad-check": cmd_grad_check,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except LatentVLError as e:
        print(f"validation failure: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"validation failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
