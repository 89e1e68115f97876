"""Command-line entry points: dataset, train, sample, rollout, eval, gradcheck."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import codec
from . import config as config_mod
from . import flow
from . import model as model_mod
from . import sceneio
from . import tensor as T
from . import toyworld
from . import verify
from .conditioning import ConditionTriple, tokenize_caption
from .optim import Adam


def _scene_condition(rec: sceneio.SceneRecord) -> ConditionTriple:
    return ConditionTriple(caption=tokenize_caption(rec.caption),
                           layout=rec.layouts, sketch=rec.sketch)


def _load_buckets(run: config_mod.RunConfig) -> dict:
    """{bucket key: [(latent, ConditionTriple)]} for the configured buckets."""
    rows = sceneio.read_manifest(Path(run.dataset) / "manifest.tsv")
    buckets: dict = {b: [] for b in run.buckets}
    for path, bucket, _ in rows:
        if bucket not in buckets:
            continue
        rec = sceneio.read_scene(path)
        latent = codec.encode(rec.video, run.model.factor)
        buckets[bucket].append((latent, _scene_condition(rec)))
    empty = [b for b, items in buckets.items() if not items]
    if empty:
        raise config_mod.ConfigError(
            [f"bucket {b!r} has no scenes in {run.dataset}" for b in empty])
    return buckets


def cmd_dataset(args) -> int:
    manifest = sceneio.make_dataset(args.n, args.seed, args.out,
                                    frame_buckets=tuple(args.frames))
    print(f"wrote {args.n} scenes, manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    run = config_mod.load_config(args.config)
    if not run.dataset or not Path(run.dataset).exists():
        raise config_mod.ConfigError(
            [f"dataset path {run.dataset!r} does not exist"])
    buckets = _load_buckets(run)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = config_mod.config_text(run)
    rng = np.random.default_rng(run.seed)
    params = model_mod.init_params(run.model, rng)
    opt = Adam(params, lr=run.lr, beta1=run.beta1, beta2=run.beta2,
               eps=run.eps)
    bucket_keys = list(buckets)
    t_start = time.monotonic()
    with open(out_dir / "metrics.log", "w", encoding="utf-8") as log:
        for step in range(run.total_steps):
            items = buckets[bucket_keys[step % len(bucket_keys)]]
            idx = rng.choice(len(items), size=min(run.batch_size, len(items)),
                             replace=False)
            batch = [items[i] for i in idx]
            loss, _ = flow.rf_loss(params, run.model, batch, rng)
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"non-finite loss at step {step}")
            grads = T.backward(loss, leaves=list(params.values()))
            opt.step({name: grads[p] for name, p in params.items()})
            if step % run.log_every == 0 or step == run.total_steps - 1:
                wall_ms = (time.monotonic() - t_start) * 1000.0
                line = (f"step={step} loss={loss.item():.6f} "
                        f"wall_ms={wall_ms:.1f}")
                log.write(line + "\n")
                log.flush()
                print(line, flush=True)
            if (step + 1) % run.checkpoint_every == 0:
                _save(out_dir / f"ckpt_{step + 1:06d}.mvdt", snapshot,
                      step + 1, params, opt)
    _save(out_dir / "ckpt_final.mvdt", snapshot, run.total_steps, params, opt)
    print(f"final checkpoint: {out_dir / 'ckpt_final.mvdt'}")
    return 0


def _save(path, snapshot, step, params, opt) -> None:
    ckpt_mod.save_checkpoint(path, snapshot, step, params,
                             opt.state_arrays() if opt else None)


def load_model(checkpoint_path):
    """(run config, params) restored from a checkpoint file."""
    snapshot, step, arrays = ckpt_mod.load_checkpoint(checkpoint_path)
    run = config_mod.parse_config(snapshot)
    params = model_mod.init_params(run.model, np.random.default_rng(0))
    ckpt_mod.restore_params(params, arrays)
    for p in params.values():  # inference only: skip tape recording
        p.requires_grad = False
    return run, params, step


def _resolve_sampler(run, args, caption: str) -> flow.SamplerConfig:
    lam_t = args.lambda_t
    if lam_t is None:
        # night scenes default to weaker caption guidance
        lam_t = 1.0 if "night" in caption.split() else run.sampler.lambda_t
    return flow.SamplerConfig(
        steps=args.steps if args.steps else run.sampler.steps,
        lambda_t=lam_t,
        lambda_l=args.lambda_l if args.lambda_l is not None else run.sampler.lambda_l,
        lambda_r=args.lambda_r if args.lambda_r is not None else run.sampler.lambda_r,
        seed=args.seed)


def contact_sheet(video: np.ndarray, path) -> None:
    """PNG grid of V rows x T columns."""
    from PIL import Image
    v, t, c, h, w = video.shape
    sheet = np.zeros((v * h, t * w, 3), dtype=np.uint8)
    img = (np.clip(video, 0, 1) * 255).astype(np.uint8)
    for vi in range(v):
        for ti in range(t):
            sheet[vi * h:(vi + 1) * h, ti * w:(ti + 1) * w] = \
                img[vi, ti].transpose(1, 2, 0)
    Image.fromarray(sheet).save(path)


def cmd_sample(args) -> int:
    run, params, _ = load_model(args.checkpoint)
    rec = sceneio.read_scene(args.scene)
    cfg = run.model
    frames = rec.video.shape[1]
    if args.k > 0 and frames < args.k:
        raise ValueError(f"scene provides {frames} frames, --k {args.k} "
                         "conditioning frames required")
    sampler = _resolve_sampler(run, args, rec.caption)
    mask = flow.MaskSpec(k=args.k, frames=frames)
    cond = _scene_condition(rec)
    latent_shape = (cfg.views, frames, cfg.c_lat, cfg.lat_h, cfg.lat_w)
    conditioning = codec.encode(rec.video, cfg.factor) if args.k > 0 else None
    latent = flow.generate(flow.model_velocity_fn(params, cfg), cond, sampler,
                           mask, latent_shape,
                           conditioning_frames=conditioning)
    video = np.clip(codec.decode(latent, cfg.factor), 0.0, 1.0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sceneio.write_scene(out, video, rec.layouts, rec.sketch, rec.caption)
    contact_sheet(video, out.with_suffix(".png"))
    print(f"wrote {out} and {out.with_suffix('.png')}")
    return 0


def cmd_rollout(args) -> int:
    run, params, _ = load_model(args.checkpoint)
    cfg = run.model
    recs = [sceneio.read_scene(p) for p in args.scenes]
    frames = recs[0].video.shape[1]
    if args.k >= frames:
        raise ValueError(f"--k {args.k} must be < clip length {frames}")
    conds = [_scene_condition(recs[min(i, len(recs) - 1)])
             for i in range(args.clips)]
    sampler = _resolve_sampler(run, args, recs[0].caption)
    latent_shape = (cfg.views, frames, cfg.c_lat, cfg.lat_h, cfg.lat_w)
    latent = flow.rollout(flow.model_velocity_fn(params, cfg), conds, sampler,
                          args.k, latent_shape)
    video = np.clip(codec.decode(latent, cfg.factor), 0.0, 1.0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    total = video.shape[1]
    if args.clips == 1:
        # single clip: byte-identical to cmd_sample on the same scene
        layouts, sketch = recs[0].layouts, recs[0].sketch
    else:
        layouts = []
        sketch = np.zeros((video.shape[0], total, 1) + video.shape[3:],
                          dtype=np.uint8)
    sceneio.write_scene(out, video, layouts, sketch, recs[0].caption)
    contact_sheet(video, out.with_suffix(".png"))
    print(f"wrote {out} ({total} frames) and {out.with_suffix('.png')}")
    return 0


def evaluate(params, cfg, sampler: flow.SamplerConfig, records: list,
             probe_seed: int = 0) -> dict:
    """Generate one clip per held-out scene and score against ground truth."""
    vel_fn = flow.model_velocity_fn(params, cfg)
    gt_videos, gen_videos, adherence, consistency = [], [], [], []
    for i, rec in enumerate(records):
        frames = rec.video.shape[1]
        shape = (cfg.views, frames, cfg.c_lat, cfg.lat_h, cfg.lat_w)
        clip_sampler = flow.SamplerConfig(
            steps=sampler.steps, lambda_t=sampler.lambda_t,
            lambda_l=sampler.lambda_l, lambda_r=sampler.lambda_r,
            seed=sampler.seed + i)
        latent = flow.generate(vel_fn, _scene_condition(rec), clip_sampler,
                               flow.MaskSpec(k=0, frames=frames), shape)
        video = np.clip(codec.decode(latent, cfg.factor), 0.0, 1.0)
        gt_videos.append(rec.video)
        gen_videos.append(video)
        if rec.layouts:
            adherence.append(
                toyworld.metric_layout_adherence(video, rec.layouts))
        consistency.append(
            toyworld.metric_temporal_consistency(video, probe_seed))
    return {
        "feat_dist": toyworld.metric_feature_distance(gen_videos, gt_videos,
                                                      probe_seed),
        "layout_adherence": float(np.mean(adherence)) if adherence else 1.0,
        "temp_consistency": float(np.mean(consistency)),
        "n": len(records),
        "seed": sampler.seed,
    }


def cmd_eval(args) -> int:
    run, params, _ = load_model(args.checkpoint)
    rows = sceneio.read_manifest(Path(args.dataset) / "manifest.tsv")
    rows = [r for r in rows if r[1] == args.bucket]
    if len(rows) < args.n:
        raise ValueError(f"dataset has {len(rows)} scenes in bucket "
                         f"{args.bucket!r}, need {args.n}")
    records = [sceneio.read_scene(r[0]) for r in rows[-args.n:]]
    sampler = flow.SamplerConfig(
        steps=args.steps or run.sampler.steps,
        lambda_t=run.sampler.lambda_t, lambda_l=run.sampler.lambda_l,
        lambda_r=run.sampler.lambda_r, seed=args.seed)
    report = evaluate(params, run.model, sampler, records)
    lines = [f"{k}={v}" for k, v in report.items()]
    print("\n".join(lines))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    report = verify.model_grad_check(coords_per_param=args.coords,
                                     corrupt=args.corrupt)
    worst = sorted(report.per_group.items(), key=lambda kv: -kv[1])
    for name, err in worst[: args.top]:
        print(f"param={name} max_rel_err={err:.3e}")
    print(f"max_rel_err={report.max_error:.3e} tolerance={report.tolerance:g} "
          f"verdict={'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvdit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="render a toy-world dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, nargs="+", default=[16, 8],
                   help="frame-length buckets, cycled over scenes")
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="run")
    p.set_defaults(fn=cmd_train)

    def sampling_flags(p):
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--lambda-t", dest="lambda_t", type=float, default=None)
        p.add_argument("--lambda-l", dest="lambda_l", type=float, default=None)
        p.add_argument("--lambda-r", dest="lambda_r", type=float, default=None)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sample", help="generate one clip from a scene's conditions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--k", type=int, default=0)
    p.add_argument("--out", required=True)
    sampling_flags(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("rollout", help="autoregressive long-video generation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--clips", type=int, default=2)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--out", required=True)
    sampling_flags(p)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("eval", help="metrics on held-out scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--bucket", default="32x32xT16")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--coords", type=int, default=16,
                   help="coordinates sampled per parameter")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (config_mod.ConfigError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
