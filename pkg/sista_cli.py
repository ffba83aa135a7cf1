#!/usr/bin/env python3
"""
sista_cli.py

Command-line entry point. Each stage can be run on its own (invert, finetune,
sample, adapt, shift) or end to end (run, sweep, report). `prepare-toy` builds
the desk-scale bench (data splits, G_s, H_s, source classifiers).

Exit codes: 0 on full completion, 1 on errors, 2 on configuration errors,
130 when interrupted.
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from pydantic import ValidationError

from sista_common import TRIAL_MODE_DEFAULT, USE_POSTGRES, ConfigurationError, console, from_uint8
from stylegen import CHECKPOINT_ADAPTERS, StyleLayerSet, load_checkpoint, save_checkpoint


def _read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _style_layers(spec):
    return StyleLayerSet.parse(spec) if spec else None


def cmd_invert(args):
    from inversion import InversionConfig, invert, invert_conditional

    gen = load_checkpoint(args.ckpt, adapter=args.adapter, kind="generator")
    disc = load_checkpoint(args.disc, kind="discriminator")
    cfg = InversionConfig(steps=args.steps, step_size=args.step_size, init=args.init, monotone=args.monotone, seed=args.seed)
    x_t = from_uint8(_read_image(args.image))
    result = invert_conditional(x_t, gen, disc, cfg, label=args.label) if gen.conditional else invert(x_t, gen, disc, cfg)
    result.save(args.out)
    console.print(f"[+] inversion loss {result.final_loss:.4f} (class {result.condition}) -> {args.out}")


def cmd_finetune(args):
    from finetune import FinetuneConfig, sista_g_finetune
    from inversion import InversionConfig, InversionResult, invert, invert_conditional

    gen = load_checkpoint(args.ckpt, adapter=args.adapter, kind="generator")
    disc = load_checkpoint(args.disc, kind="discriminator")
    x_t = from_uint8(_read_image(args.image))
    if args.inv:
        inv = InversionResult.load(args.inv)
    else:
        inv_cfg = InversionConfig(seed=args.seed)
        inv = invert_conditional(x_t, gen, disc, inv_cfg, label=args.label) if gen.conditional else invert(x_t, gen, disc, inv_cfg)
    cfg = FinetuneConfig(iterations=args.iters, learning_rate=args.lr, seed=args.seed, **({"style_layers": _style_layers(args.style_layers)} if args.style_layers else {}))
    report = sista_g_finetune(x_t, inv, gen, disc, cfg)
    save_checkpoint(report.generator, args.out)
    if report.loss_trace:
        console.print(f"[+] fine-tune loss {report.loss_trace[0]:.4f} -> {report.loss_trace[-1]:.4f}; G_t -> {args.out}")


def cmd_sample(args):
    from sampler import PruneConfig, curate_dataset

    G_t = load_checkpoint(args.target_ckpt, adapter=args.adapter, kind="generator")
    G_s = load_checkpoint(args.source_ckpt, adapter=args.adapter, kind="generator") if args.source_ckpt else None
    fields = {"strategy": args.strategy, "ratio": args.p, "gate_probability": args.gate_probability, "seed": args.seed}
    if args.style_layers:
        fields["style_layers"] = _style_layers(args.style_layers)
    cfg = PruneConfig(**fields)
    class_mode = "uniform-random" if G_t.conditional else "none"
    curate_dataset(G_t, G_s, cfg, args.T, args.out, class_mode=class_mode, workers=args.workers)


def cmd_adapt(args):
    from adapt import NRCConfig, adapt_classifier, load_classifier, save_classifier
    from sampler import SyntheticManifest

    model = load_classifier(args.model)
    manifest = SyntheticManifest.load(args.data)
    cfg = NRCConfig(
        k=args.K, expanded=args.expanded, epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.lr, momentum=args.momentum, head_only=args.head_only, seed=args.seed,
    )
    result = adapt_classifier(model, manifest, cfg)
    save_classifier(result.classifier, args.out)
    if result.history["total"]:
        console.print(f"[+] adapted over {result.steps} steps, final NRC loss {result.history['total'][-1]:.4f} -> {args.out}")


def cmd_shift(args):
    from shiftlab import ShiftConfig, build_target_split
    from toybench import ImageSet

    fields = {"domain": args.domain, "severity": args.severity, "seed": args.seed}
    for name in ("sigma_s", "sigma_r", "corruption", "blur_sigma"):
        if getattr(args, name) is not None:
            fields[name] = getattr(args, name)
    cfg = ShiftConfig(**fields)
    _, manifest = build_target_split(ImageSet.load(args.input), cfg, out_dir=args.out)
    console.print(f"[+] dataset hash {manifest['dataset_hash']}")


def cmd_prepare(args):
    from pipeline import ExperimentConfig, load_experiment_config, prepare_bench

    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.bench_dir:
        updates["bench_dir"] = args.bench_dir
    if args.modes:
        for mode in args.modes.split(","):
            prepare_bench(cfg.model_copy(update={**updates, "generator_mode": mode.strip()}))
    else:
        prepare_bench(cfg.model_copy(update=updates))
    console.print(f"[+] bench ready in {updates.get('bench_dir', cfg.bench_dir)}")


def cmd_run(args):
    from pipeline import emit_report, load_experiment_config, run_experiment, write_resolved_config
    from run_ledger import enqueue_trial, get_engine_and_session

    cfg = load_experiment_config(args.config)
    mode = args.trial_mode or cfg.trial_mode
    if mode == "enqueue":
        write_resolved_config(cfg)
        _, Session = get_engine_and_session(USE_POSTGRES or cfg.use_postgres, out_dir=cfg.output_dir)
        session = Session()
        try:
            jobs = [enqueue_trial(session, args.config, seed) for seed in cfg.seeds]
        finally:
            session.close()
        console.print(f"[+] enqueued {len(jobs)} trials; run `python trial_worker.py --ledger-dir {cfg.output_dir} --loop`")
        return
    table = run_experiment(cfg)
    emit_report(table, cfg.output_dir)


def cmd_sweep(args):
    from pipeline import emit_report, load_experiment_config, run_sweep

    cfg = load_experiment_config(args.config)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    tables = run_sweep(cfg, args.axis, values)
    emit_report(tables, Path(cfg.output_dir) / f"sweep_{args.axis}")


def cmd_report(args):
    from pipeline import RESULTS_FILE, collect_results, emit_report, load_table

    in_dir = Path(args.input)
    tables = load_table(in_dir / RESULTS_FILE) if (in_dir / RESULTS_FILE).exists() and not args.recollect else collect_results(in_dir)
    emit_report(tables, args.out or in_dir)


def cmd_bundle(args):
    from adapt import load_classifier
    from pipeline import export_client_bundle
    from sampler import SyntheticManifest

    export_client_bundle(args.out, load_classifier(args.model), SyntheticManifest.load(args.data))


def build_parser():
    parser = argparse.ArgumentParser(description="Single-shot source-free domain adaptation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    adapters = sorted(CHECKPOINT_ADAPTERS)

    p = sub.add_parser("invert", help="Project one target image into the generator's w+ space")
    p.add_argument("--image", required=True, help="Target image (PNG)")
    p.add_argument("--ckpt", required=True, help="Source generator checkpoint")
    p.add_argument("--disc", required=True, help="Discriminator feature extractor checkpoint")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--init", choices=["mean-latent", "random"], default="mean-latent")
    p.add_argument("--monotone", action="store_true", help="Gradient descent with backtracking instead of Adam")
    p.add_argument("--label", type=int, default=None, help="Known class (conditional generators)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--adapter", choices=adapters, default="toy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("finetune", help="Single-shot generator fine-tuning")
    p.add_argument("--image", required=True, help="Target image (PNG)")
    p.add_argument("--ckpt", required=True, help="Source generator checkpoint")
    p.add_argument("--disc", required=True, help="Discriminator feature extractor checkpoint")
    p.add_argument("--inv", default=None, help="Saved inversion result (computed when omitted)")
    p.add_argument("--label", type=int, default=None)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--style-layers", default=None, help='e.g. "3-8" or "1,3"')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--adapter", choices=adapters, default="toy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="Curate the synthetic target dataset")
    p.add_argument("--target-ckpt", required=True)
    p.add_argument("--source-ckpt", default=None)
    p.add_argument("--strategy", choices=["base", "prune-zero", "prune-rewind"], default="prune-zero")
    p.add_argument("--p", type=float, default=None, help="Pruning ratio in percent")
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--style-layers", default=None)
    p.add_argument("--gate-probability", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--adapter", choices=adapters, default="toy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("adapt", help="NRC adaptation on a curated dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("-K", type=int, default=5)
    p.add_argument("--expanded", type=int, default=5)
    p.add_argument("--head-only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("shift", help="Build a target domain from an image set")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--domain", choices=["A", "B", "C", "D"], required=True)
    p.add_argument("--sigma-s", type=float, default=None)
    p.add_argument("--sigma-r", type=float, default=None)
    p.add_argument("--blur-sigma", type=float, default=None)
    p.add_argument("--corruption", default=None)
    p.add_argument("--severity", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_shift)

    p = sub.add_parser("prepare-toy", help="Build the desk-scale bench (data, G_s, H_s, classifiers)")
    p.add_argument("--config", default=None)
    p.add_argument("--bench-dir", default=None)
    p.add_argument("--modes", default=None, help='Generator modes to prepare, e.g. "single,conditional,per-class"')
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("run", help="Run a full experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--trial-mode", choices=["inline", "enqueue"], default=None, help=f"Default from config ({TRIAL_MODE_DEFAULT})")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="Sweep the pruning ratio or the dataset size")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", choices=["p", "T"], required=True)
    p.add_argument("--values", required=True, help="Comma-separated values, e.g. 0,20,50,80,90")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="Render tables and plots for a finished run")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--recollect", action="store_true", help="Rebuild the table from trial results")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bundle", help="Export classifier + synthetic data for client-side adaptation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bundle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except KeyboardInterrupt:
        console.print("[yellow][!] interrupted[/yellow]")
        return 130
    except (ConfigurationError, ValidationError) as e:
        console.print(f"[red][!] configuration error: {e}[/red]")
        return 2
    except Exception as e:
        console.print(f"[red][!] {type(e).__name__}: {e}[/red]")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
