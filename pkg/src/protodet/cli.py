"""Operator surface: dataset synthesis, degradation, training, evaluation,
visualization, and the self-check suites.

Exit codes: 0 success, 1 usage error, 2 validation failure.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import checks, data, detector
from .imageio import write_pgm, write_ppm
from .proto import aggregate_saliency


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _write_resolved_config(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def _load_config_file(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise data.DataError(f"config file not found: {path}")
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    out = args.out
    if os.path.exists(out) and os.listdir(out) and not args.force:
        print(f"error: output directory {out} is not empty (use --force)",
              file=sys.stderr)
        return 1
    spec_kwargs = {}
    if args.spec:
        if not os.path.exists(args.spec):
            print(f"error: spec file not found: {args.spec}", file=sys.stderr)
            return 1
        with open(args.spec) as f:
            spec_kwargs = json.load(f)
        unknown = set(spec_kwargs) - set(data.SceneSpec.__dataclass_fields__)
        if unknown:
            print(f"error: unknown scene spec keys: {sorted(unknown)}",
                  file=sys.stderr)
            return 2
        if "size_ranges" in spec_kwargs:
            spec_kwargs["size_ranges"] = {k: tuple(v) for k, v in
                                          spec_kwargs["size_ranges"].items()}
    spec_kwargs.setdefault("image_size", args.image_size)
    spec = data.SceneSpec(**spec_kwargs)
    rng = np.random.default_rng(args.seed)
    seeds = {"train": [int(s) for s in rng.integers(0, 2 ** 31, args.count)],
             "test": [int(s) for s in rng.integers(0, 2 ** 31, args.test_count)]}
    fog = data.FogParams(A=args.fog_a, beta=args.fog_beta)
    for split, split_seeds in seeds.items():
        scenes = [data.synth_scene(s, spec) for s in split_seeds]
        data.write_dataset(out, scenes, split=split)
        fogged = [data.Scene(data.apply_fog(sc.image, fog), sc.boxes, sc.seed)
                  for sc in scenes]
        data.write_dataset(out, fogged, split=f"{split}_fog",
                           degradation={"kind": "fog", "A": fog.A, "beta": fog.beta})
        dark = [data.Scene(data.apply_lowlight(sc.image, args.gamma,
                                               args.noise_sigma, sc.seed),
                           sc.boxes, sc.seed) for sc in scenes]
        data.write_dataset(out, dark, split=f"{split}_dark",
                           degradation={"kind": "lowlight", "gamma": args.gamma,
                                        "sigma": args.noise_sigma})
    _write_resolved_config(out, {"command": "synth", "seed": args.seed,
                                 "count": args.count, "test_count": args.test_count,
                                 "scene_spec": spec.to_dict(),
                                 "fog": {"A": fog.A, "beta": fog.beta},
                                 "lowlight": {"gamma": args.gamma,
                                              "sigma": args.noise_sigma}})
    print(f"dataset written to {out}; digest {data.manifest_digest(out)}")
    return 0


def cmd_fog(args):
    scenes = data.read_dataset(args.dataset, split=args.split)
    fog = data.FogParams(A=args.fog_a, beta=args.fog_beta)
    fogged = [data.Scene(data.apply_fog(sc.image, fog), sc.boxes, sc.seed)
              for sc in scenes]
    data.write_dataset(args.dataset, fogged, split=f"{args.split}_fog",
                       degradation={"kind": "fog", "A": fog.A, "beta": fog.beta})
    print(f"fogged split {args.split}_fog written to {args.dataset}")
    return 0


def _config_from_args(args):
    file_cfg = _load_config_file(args.config)
    cfg = detector.TrainConfig.from_dict(file_cfg) if file_cfg \
        else detector.TrainConfig()
    overrides = {
        "epochs": args.epochs, "learning_rate": args.lr,
        "batch_size": args.batch_size, "seed": args.seed,
        "pr_variant": args.pr_variant,
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    if args.no_rpc:
        cfg.use_rpc = False
    if args.no_pr:
        cfg.use_pr = False
    if args.no_splgs:
        cfg.use_splgs = False
    return cfg


def cmd_train(args):
    scenes = data.read_dataset(args.dataset, split=args.split)
    if not scenes:
        print("error: dataset split is empty", file=sys.stderr)
        return 2
    cfg = _config_from_args(args)
    cfg.image_size = scenes[0].image.shape[0]
    os.makedirs(args.out, exist_ok=True)
    params, start_step = None, 0
    if args.resume:
        params, _, start_step = detector.load_checkpoint(args.resume)
    log_path = os.path.join(args.out, "train_log.jsonl")
    if not args.resume and os.path.exists(log_path):
        os.remove(log_path)
    _write_resolved_config(args.out, {"command": "train",
                                      "dataset": args.dataset,
                                      "split": args.split,
                                      "train_config": cfg.to_dict()})
    params, reports = detector.train(cfg, scenes, out_dir=args.out,
                                     log_path=log_path, params=params,
                                     start_step=start_step)
    print(f"trained {len(reports)} steps; final total loss "
          f"{reports[-1][1].total:.4f}; checkpoint in {args.out}")
    return 0


def cmd_eval(args):
    params, cfg, _ = detector.load_checkpoint(args.checkpoint)
    scenes = data.read_dataset(args.dataset, split=args.split)
    class_counts = {b.class_index for sc in scenes for b in sc.boxes}
    if class_counts and max(class_counts) > cfg.class_count - 1:
        print(f"error: dataset has class {max(class_counts)} but checkpoint "
              f"supports 1..{cfg.class_count - 1}", file=sys.stderr)
        return 2
    report = detector.evaluate(params, scenes, cfg, restrict_level=args.level)
    payload = report.to_dict()
    payload["spar_percent"] = 100.0 * report.spar
    os.makedirs(args.out, exist_ok=True)
    _write_resolved_config(args.out, {"command": "eval",
                                      "checkpoint": args.checkpoint,
                                      "dataset": args.dataset,
                                      "split": args.split, "level": args.level})
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    with open(os.path.join(args.out, "per_class.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "ap50"])
        for k in sorted(report.per_class):
            writer.writerow([k, f"{report.per_class[k]:.6f}"])
    print(json.dumps(payload, indent=1, sort_keys=True))
    return 0


def cmd_visualize(args):
    params, cfg, _ = detector.load_checkpoint(args.checkpoint)
    scenes = data.read_dataset(args.dataset, split=args.split)
    if not 0 <= args.index < len(scenes):
        print(f"error: image index {args.index} outside 0..{len(scenes) - 1}",
              file=sys.stderr)
        return 2
    if not 1 <= args.class_index <= cfg.class_count - 1:
        print(f"error: class index {args.class_index} unknown; valid classes: "
              f"{list(range(1, cfg.class_count))}", file=sys.stderr)
        return 2
    scene = scenes[args.index]
    outputs, _, _ = detector.forward(params, scene.image, cfg)
    os.makedirs(args.out, exist_ok=True)
    k = args.class_index
    for out in outputs:
        write_pgm(os.path.join(args.out, f"response_class{k}_level{out.level.index}.pgm"),
                  out.stack.scores.data[k - 1])
    sal = aggregate_saliency([o.stack for o in outputs], k - 1,
                             (cfg.image_size, cfg.image_size))
    write_pgm(os.path.join(args.out, f"saliency_class{k}.pgm"), sal.values)
    overlay = scene.image.copy()
    for b in scene.boxes:
        if b.class_index != k:
            continue
        x1, y1 = max(int(b.x1), 0), max(int(b.y1), 0)
        x2 = min(int(b.x2), cfg.image_size - 1)
        y2 = min(int(b.y2), cfg.image_size - 1)
        overlay[y1:y2 + 1, [x1, x2]] = (1.0, 0.0, 0.0)
        overlay[[y1, y2], x1:x2 + 1] = (1.0, 0.0, 0.0)
    write_ppm(os.path.join(args.out, f"overlay_class{k}.ppm"), overlay)
    print(f"wrote {len(outputs) + 1} maps + overlay to {args.out}")
    return 0


def cmd_check_grads(args):
    results, tol = checks.run_grad_suite(seeds=range(args.seeds))
    failed = False
    for name, err in sorted(results.items()):
        ok = err < tol
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max FD error {err:.3e} "
              f"(tol {tol:.0e})")
    return 2 if failed else 0


def cmd_oracle(args):
    mism = checks.run_rasterize_oracle(trials=args.trials)
    print(f"{'PASS' if mism == 0 else 'FAIL'} rasterize oracle: "
          f"{mism}/{args.trials} mismatches")
    worst = checks.run_auc_oracle(trials=200)
    print(f"{'PASS' if worst < 1e-9 else 'FAIL'} AUC oracle: "
          f"max deviation {worst:.3e}")
    return 2 if (mism or worst >= 1e-9) else 0


# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="protodet",
                description="Hierarchical prototype detection laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize a toy dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=5)
    sp.add_argument("--count", type=int, default=32)
    sp.add_argument("--test-count", type=int, default=16)
    sp.add_argument("--image-size", type=int, default=192)
    sp.add_argument("--spec", help="scene spec JSON file")
    sp.add_argument("--fog-a", type=float, default=0.5)
    sp.add_argument("--fog-beta", type=float, default=0.1)
    sp.add_argument("--gamma", type=float, default=3.0)
    sp.add_argument("--noise-sigma", type=float, default=0.03)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fog", help="apply fog to an existing split")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--fog-a", type=float, default=0.5)
    sp.add_argument("--fog-beta", type=float, default=0.1)
    sp.set_defaults(func=cmd_fog)

    sp = sub.add_parser("train", help="train the toy detector")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="flat JSON config file")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--pr-variant", choices=["svd", "cosine", "pop"])
    sp.add_argument("--no-rpc", action="store_true")
    sp.add_argument("--no-pr", action="store_true")
    sp.add_argument("--no-splgs", action="store_true")
    sp.add_argument("--resume", help="checkpoint prefix to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--level", type=int, choices=[1, 2, 3])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("visualize", help="export response and saliency maps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--class-index", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_visualize)

    sp = sub.add_parser("check-grads", help="finite-difference gradient suite")
    sp.add_argument("--seeds", type=int, default=20)
    sp.set_defaults(func=cmd_check_grads)

    sp = sub.add_parser("oracle", help="rasterization and AUC oracles")
    sp.add_argument("--trials", type=int, default=1000)
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except (data.DataError, detector.DetectorError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 2
    sys.exit(code)


if __name__ == "__main__":
    main()
