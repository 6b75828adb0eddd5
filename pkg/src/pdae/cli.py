"""Command-line shell: every pipeline and measurement behind subcommands.

Each run owns an output directory holding the fully resolved config, a
plain-text manifest, CSV outputs, PNG image grids, and rendered figures.
If a run dies partway, a FAILED marker with the error text is left behind
so partial outputs are never mistaken for results.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import evaluation, pipelines, plotting, training
from .checkpoint import Checkpoint
from .config import RunConfig
from .pipelines import ModelBundle, SamplerPlan
from .schedule import dump_schedule_csv


def _write_manifest(out_dir: Path, entries: dict) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = RunConfig.load(args.config)
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        cfg.override(key.strip(), val.strip())
    if args.seed is not None:
        cfg.override("train.seed", args.seed)
        cfg.override("sampler.seed", args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.resolved")
    return cfg, out_dir


def _load_bundle(path: str) -> ModelBundle:
    ckpt = Checkpoint.load(path)
    if ckpt.kind == "pdae":
        return ModelBundle.from_pdae(ckpt)
    return ModelBundle.from_pretrained(ckpt)


def _plan(cfg: RunConfig, method=None, steps=None, scale=None) -> SamplerPlan:
    plan = cfg.sampler_plan(n_steps=steps)
    from dataclasses import replace

    if method is not None:
        plan = SamplerPlan.from_steps(
            method=method,
            T=cfg.get("schedule.T"),
            n_steps=steps if steps is not None else cfg.get("sampler.steps"),
            eta=plan.eta,
            guidance_scale=plan.guidance_scale,
            guided_fraction=plan.guided_fraction,
            guided_cutoff=plan.guided_cutoff,
            seed=plan.seed,
        )
    if scale is not None:
        plan = replace(plan, guidance_scale=scale)
    return plan


def _plan_echo(plan: SamplerPlan) -> dict:
    return {
        "plan.method": plan.method,
        "plan.steps": len(plan.timesteps) - 1,
        "plan.eta": plan.eta,
        "plan.guidance_scale": plan.guidance_scale,
        "plan.guided_fraction": plan.guided_fraction,
        "plan.seed": plan.seed,
    }


# -- subcommand handlers -------------------------------------------------------


def cmd_dump_schedule(args):
    cfg, out = _prepare(args)
    sched = cfg.schedule()
    dump_schedule_csv(sched, out / "schedule.csv", gamma=cfg.get("train.gamma"))
    plotting.save_weighting_figure(sched, out / "weighting.png", cfg.get("train.gamma"))
    _write_manifest(out, {"command": "dump-schedule", "T": sched.T})


def cmd_pretrain(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    ckpt = training.pretrain_ddpm(
        data, cfg.eps_spec(), cfg.train_config(), cfg.schedule(), out_dir=out
    )
    ckpt.config = cfg.as_dict()
    ckpt.save(out / "pretrained.ckpt")
    hist = ckpt.blobs["meta/eval_loss"]
    plotting.save_loss_curves_figure(
        out / "loss_curve.png",
        {"eval loss": (ckpt.blobs["meta/images_seen"], hist)},
    )
    _write_manifest(
        out,
        {
            "command": "pretrain",
            "images_seen": ckpt.counters["images_seen"],
            "final_eval_loss": float(hist[-1]),
            "seed": cfg.get("train.seed"),
        },
    )


def cmd_pdae_train(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    pretrained = Checkpoint.load(args.pretrained)
    ckpt = training.train_pdae(
        data, pretrained, cfg.train_config(), cfg.encoder_spec(), out_dir=out
    )
    ckpt.config = cfg.as_dict()
    ckpt.save(out / "pdae.ckpt")
    plotting.save_loss_curves_figure(
        out / "loss_curve.png",
        {
            "own weighting": (
                ckpt.blobs["meta/images_seen"], ckpt.blobs["meta/eval_loss"],
            ),
            "gap weighting": (
                ckpt.blobs["meta/images_seen"],
                ckpt.blobs["meta/eval_loss_gap_weighted"],
            ),
        },
    )
    _write_manifest(
        out,
        {
            "command": "pdae-train",
            "images_seen": ckpt.counters["images_seen"],
            "condition": ckpt.specs["condition"],
            "final_eval_loss": float(ckpt.blobs["meta/eval_loss"][-1]),
            "seed": cfg.get("train.seed"),
        },
    )


def cmd_latent_train(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    bundle = _load_bundle(args.pdae)
    codes = pipelines.encode_dataset(bundle, data.images)
    tc = cfg.train_config()
    from dataclasses import replace

    tc = replace(
        tc,
        batch_size=cfg.get("latent.batch_size"),
        learning_rate=cfg.get("latent.learning_rate"),
        total_images=cfg.get("latent.total_codes"),
    )
    ckpt = training.train_latent_dpm(
        codes, cfg.latent_spec(), tc, cfg.latent_schedule(), out_dir=out
    )
    ckpt.config = cfg.as_dict()
    ckpt.save(out / "latent.ckpt")
    _write_manifest(
        out,
        {
            "command": "latent-train",
            "codes_seen": ckpt.counters["codes_seen"],
            "floored_dims": ckpt.counters["floored_dims"],
        },
    )


def cmd_encode(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    bundle = _load_bundle(args.pdae)
    codes = pipelines.encode_dataset(bundle, data.images)
    import csv as _csv

    with open(out / "codes.csv", "w", newline="") as f:
        w = _csv.writer(f)
        header = [f"z{i}" for i in range(codes.shape[1])]
        if data.labels is not None:
            header.append("label")
        w.writerow(header)
        for i, row in enumerate(codes):
            vals = [f"{v:.8g}" for v in row]
            if data.labels is not None:
                vals.append(int(data.labels[i]))
            w.writerow(vals)
    _write_manifest(out, {"command": "encode", "count": len(codes)})


def cmd_reconstruct(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    bundle = _load_bundle(args.pdae)
    plan = _plan(cfg, method="ddim" if args.inferred_xt else None)
    x0 = torch.as_tensor(data.images[: args.count])
    recon = pipelines.autoencode(bundle, x0, plan, use_inferred_xT=args.inferred_xt)
    mse, ssim = evaluation.recon_metrics(
        x0.numpy(), np.clip(recon.numpy(), -1.0, 1.0)
    )
    plotting.save_image_grid(
        np.concatenate([x0.numpy(), recon.numpy()]), out / "recon.png",
        n_cols=len(x0),
    )
    import csv as _csv

    with open(out / "metrics.csv", "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["mse", f"{mse:.8g}"])
        w.writerow(["ssim", f"{ssim:.8g}"])
    _write_manifest(
        out,
        {
            "command": "reconstruct",
            "inferred_xT": args.inferred_xt,
            "mse": f"{mse:.8g}",
            "ssim": f"{ssim:.8g}",
            **_plan_echo(plan),
        },
    )


def cmd_invert(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    bundle = _load_bundle(args.pdae)
    plan = _plan(cfg, method="ddim")
    x0 = torch.as_tensor(data.images[: args.count])
    xT = pipelines.infer_xT(bundle, x0, plan)
    recon = pipelines.autoencode(bundle, x0, plan, use_inferred_xT=True)
    baseline = pipelines.autoencode(bundle, x0, plan, use_inferred_xT=False)
    mse_inf, _ = evaluation.recon_metrics(x0.numpy(), np.clip(recon.numpy(), -1, 1))
    mse_rand, _ = evaluation.recon_metrics(x0.numpy(), np.clip(baseline.numpy(), -1, 1))
    plotting.save_image_grid(
        np.concatenate([x0.numpy(), recon.numpy(), baseline.numpy()]),
        out / "inversion.png", n_cols=len(x0),
    )
    import csv as _csv

    with open(out / "metrics.csv", "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["mse_inferred_xT", f"{mse_inf:.8g}"])
        w.writerow(["mse_random_xT", f"{mse_rand:.8g}"])
        w.writerow(["xT_mean", f"{float(xT.mean()):.8g}"])
        w.writerow(["xT_var", f"{float(xT.var()):.8g}"])
    _write_manifest(
        out,
        {
            "command": "invert",
            "mse_inferred_xT": f"{mse_inf:.8g}",
            "mse_random_xT": f"{mse_rand:.8g}",
            **_plan_echo(plan),
        },
    )


def cmd_interpolate(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    bundle = _load_bundle(args.pdae)
    plan = _plan(cfg, method="ddim")
    xA = torch.as_tensor(data.images[args.index_a : args.index_a + 1])
    xB = torch.as_tensor(data.images[args.index_b : args.index_b + 1])
    lambdas = [float(v) for v in args.lambdas.split(",")]
    rows = []
    for mode in ("latent", "direction"):
        for lam in lambdas:
            rows.append(
                pipelines.interpolate(bundle, xA, xB, lam, mode, plan).numpy()
            )
    plotting.save_image_grid(np.concatenate(rows), out / "interpolation.png",
                             n_cols=len(lambdas))
    _write_manifest(
        out,
        {"command": "interpolate", "lambdas": args.lambdas, **_plan_echo(plan)},
    )


def cmd_manipulate(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    if data.labels is None:
        raise ValueError("manipulation needs a labeled dataset")
    bundle = _load_bundle(args.pdae)
    plan = _plan(cfg, method="ddim")
    codes = pipelines.encode_dataset(bundle, data.images)
    normed, mean, std, _ = training.normalize_codes(codes)
    clf = training.train_latent_classifier(normed, data.labels, seed=plan.seed)
    direction = clf.direction(positive=args.label)
    scales = [float(v) for v in args.scales.split(",")]
    x0 = torch.as_tensor(data.images[args.index : args.index + 1])
    rows = [
        pipelines.manipulate(bundle, x0, direction, s, plan, mean, std).numpy()
        for s in scales
    ]
    plotting.save_image_grid(np.concatenate([x0.numpy()] + rows),
                             out / "manipulation.png", n_cols=len(scales) + 1)
    _write_manifest(
        out,
        {"command": "manipulate", "label": args.label, "scales": args.scales,
         **_plan_echo(plan)},
    )


def cmd_sample_uncond(args):
    cfg, out = _prepare(args)
    bundle = _load_bundle(args.pdae)
    latent = Checkpoint.load(args.latent)
    plan = _plan(cfg)
    improved = pipelines.improved_unconditional(bundle, latent, plan, args.count)
    from dataclasses import replace

    pure = pipelines.improved_unconditional(
        bundle, latent, replace(plan, guided_fraction=0.0), args.count
    )
    plotting.save_image_grid(improved.numpy(), out / "samples_improved.png")
    plotting.save_image_grid(pure.numpy(), out / "samples_pretrained_only.png")
    _write_manifest(
        out, {"command": "sample-uncond", "count": args.count, **_plan_echo(plan)}
    )


def cmd_sample_fewshot(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    if data.labels is None:
        raise ValueError("few-shot sampling needs a labeled dataset")
    bundle = _load_bundle(args.pdae)
    latent = Checkpoint.load(args.latent)
    plan = _plan(cfg)
    codes = pipelines.encode_dataset(bundle, data.images)
    mean, std = latent.blobs["norm/mean"], latent.blobs["norm/std"]
    normed = (codes - np.asarray(mean)) / np.asarray(std)
    rng = np.random.default_rng(plan.seed)
    few = rng.choice(len(codes), size=min(args.n_labeled, len(codes)), replace=False)
    clf = training.train_latent_classifier(normed[few], data.labels[few], seed=plan.seed)
    images, stats = pipelines.fewshot_conditional(
        bundle, latent, clf, args.label, args.count, plan,
        floor=cfg.get("fewshot.floor"),
    )
    plotting.save_image_grid(images.numpy(), out / "samples_fewshot.png")
    _write_manifest(
        out,
        {
            "command": "sample-fewshot",
            "label": args.label,
            "accepted": stats["accepted"],
            "trials": stats["trials"],
            **_plan_echo(plan),
        },
    )


def cmd_sample_truncation(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    bundle = _load_bundle(args.pdae)
    plan = _plan(cfg)
    probe = evaluation.train_pixel_probe(data) if data.labels is not None else None
    scales = [float(v) for v in args.scales.split(",")]
    import csv as _csv

    rows = []
    for s in scales:
        imgs = pipelines.truncation_sample(bundle, args.label, s, plan, args.count)
        arr = imgs.numpy()
        plotting.save_image_grid(arr, out / f"samples_scale_{s:g}.png")
        acc = (
            float(np.mean(probe(arr) == args.label)) if probe is not None else float("nan")
        )
        flat = arr.reshape(len(arr), -1)
        d = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=2)
        diversity = float(d[np.triu_indices(len(arr), 1)].mean())
        rows.append((s, acc, diversity))
    with open(out / "truncation.csv", "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["scale", "class_accuracy", "mean_pairwise_distance"])
        w.writerows(rows)
    _write_manifest(
        out, {"command": "sample-truncation", "label": args.label,
              "scales": args.scales, **_plan_echo(plan)}
    )


def cmd_measure_gap(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    bundle = _load_bundle(args.pdae)
    curve = evaluation.measure_gap_curve(
        bundle, data,
        sample_count=cfg.get("eval.gap_samples"),
        t_stride=cfg.get("eval.t_stride"),
        seed=cfg.get("sampler.seed"),
    )
    curve.write_csv(out / "gap_curve.csv")
    plotting.save_gap_figure(curve, out / "gap_curve.png")
    ts = [max(1, bundle.sched.T // 10), bundle.sched.T // 2,
          (9 * bundle.sched.T) // 10]
    grid = evaluation.one_step_grid(
        bundle, torch.as_tensor(data.images[: args.count]), ts,
        seed=cfg.get("sampler.seed"),
    )
    plotting.save_one_step_figure(grid, out / "one_step.png")
    _write_manifest(
        out,
        {
            "command": "measure-gap",
            "samples": curve.sample_count,
            "mid_t_mse_pretrained": f"{grid.mse_pretrained[1]:.8g}",
            "mid_t_mse_shifted": f"{grid.mse_shifted[1]:.8g}",
            "seed": cfg.get("sampler.seed"),
        },
    )


def cmd_grid_search(args):
    cfg, out = _prepare(args)
    data = cfg.dataset()
    bundle = _load_bundle(args.pdae)
    plan = _plan(cfg, method="ddpm")
    probe = evaluation.train_pixel_probe(data)
    split, table = evaluation.grid_search_critical_stage(
        bundle, plan, probe,
        t_grid_stride=cfg.get("eval.stage_stride"),
        accuracy_threshold=cfg.get("eval.stage_threshold"),
        count=cfg.get("eval.stage_samples"),
    )
    import csv as _csv

    with open(out / "stage_search.csv", "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["t1", "t2", "accuracy"])
        for (t1, t2), acc in table:
            w.writerow([t1, t2, f"{acc:.6g}"])
    plotting.save_stage_table_figure(
        table, bundle.sched.T, cfg.get("eval.stage_stride"), out / "stage_search.png"
    )
    _write_manifest(
        out,
        {
            "command": "grid-search",
            "found": split is not None,
            "t1": "-" if split is None else split.t1,
            "t2": "-" if split is None else split.t2,
            "threshold": cfg.get("eval.stage_threshold"),
        },
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pdae",
        description="Diffusion autoencoding by posterior-mean-gap filling, desk scale.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="flat key=value config file")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key")

    sp = sub.add_parser("dump-schedule", help="schedule constants and weights as CSV")
    common(sp)
    sp.set_defaults(func=cmd_dump_schedule)

    sp = sub.add_parser("pretrain", help="train the noise predictor")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("pdae-train", help="train encoder + gradient estimator")
    common(sp)
    sp.add_argument("--pretrained", required=True)
    sp.set_defaults(func=cmd_pdae_train)

    sp = sub.add_parser("latent-train", help="train the latent-code denoiser")
    common(sp)
    sp.add_argument("--pdae", required=True)
    sp.set_defaults(func=cmd_latent_train)

    sp = sub.add_parser("encode", help="dump semantic codes as CSV")
    common(sp)
    sp.add_argument("--pdae", required=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("reconstruct", help="autoencode images")
    common(sp)
    sp.add_argument("--pdae", required=True)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--inferred-xt", action="store_true")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("invert", help="stochastic-code inversion round trip")
    common(sp)
    sp.add_argument("--pdae", required=True)
    sp.add_argument("--count", type=int, default=8)
    sp.set_defaults(func=cmd_invert)

    sp = sub.add_parser("interpolate", help="interpolate between two images")
    common(sp)
    sp.add_argument("--pdae", required=True)
    sp.add_argument("--index-a", type=int, default=0)
    sp.add_argument("--index-b", type=int, default=1)
    sp.add_argument("--lambdas", default="0,0.25,0.5,0.75,1")
    sp.set_defaults(func=cmd_interpolate)

    sp = sub.add_parser("manipulate", help="move a semantic code along a class direction")
    common(sp)
    sp.add_argument("--pdae", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--label", type=int, default=1)
    sp.add_argument("--scales", default="-2,-1,0,1,2")
    sp.set_defaults(func=cmd_manipulate)

    sp = sub.add_parser("sample-uncond", help="latent-prior-assisted unconditional samples")
    common(sp)
    sp.add_argument("--pdae", required=True)
    sp.add_argument("--latent", required=True)
    sp.add_argument("--count", type=int, default=16)
    sp.set_defaults(func=cmd_sample_uncond)

    sp = sub.add_parser("sample-fewshot", help="few-shot conditional samples")
    common(sp)
    sp.add_argument("--pdae", required=True)
    sp.add_argument("--latent", required=True)
    sp.add_argument("--label", type=int, default=1)
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--n-labeled", type=int, default=100)
    sp.set_defaults(func=cmd_sample_fewshot)

    sp = sub.add_parser("sample-truncation", help="scaled label guidance sweep")
    common(sp)
    sp.add_argument("--pdae", required=True)
    sp.add_argument("--label", type=int, default=0)
    sp.add_argument("--scales", default="0,0.5,1,1.5,2,2.5,3")
    sp.add_argument("--count", type=int, default=16)
    sp.set_defaults(func=cmd_sample_truncation)

    sp = sub.add_parser("measure-gap", help="gap curves and one-step grids")
    common(sp)
    sp.add_argument("--pdae", required=True)
    sp.add_argument("--count", type=int, default=6)
    sp.set_defaults(func=cmd_measure_gap)

    sp = sub.add_parser("grid-search", help="critical-stage search")
    common(sp)
    sp.add_argument("--pdae", required=True)
    sp.set_defaults(func=cmd_grid_search)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out)
    try:
        args.func(args)
    except Exception as e:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "FAILED").write_text(
            f"{type(e).__name__}: {e}\n\n{traceback.format_exc()}"
        )
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
