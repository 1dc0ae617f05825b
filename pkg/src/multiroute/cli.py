"""Command-line entry point.

Single-threaded BLAS is pinned before numpy loads so repeated runs of the
same (seed, config) are bit-identical regardless of the host's core count.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
from pathlib import Path


def _parse_set(values):
    overrides = {}
    for item in values or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _load_run_config(args):
    from . import harness

    if getattr(args, "config", None):
        cfg_dict = json.loads(Path(args.config).read_text())
        if getattr(args, "preset", None):
            cfg_dict["preset"] = args.preset
    else:
        preset = getattr(args, "preset", None) or "mrdetr"
        cfg_dict = harness.RunConfig(preset=preset,
                                     model=harness.preset_model_config(preset)).to_dict()
    if getattr(args, "seed", None) is not None:
        cfg_dict["seed"] = args.seed
    cfg_dict = harness.apply_overrides(cfg_dict, _parse_set(args.set))
    return harness.RunConfig.from_dict(cfg_dict)


def cmd_train(args):
    from . import harness

    cfg = _load_run_config(args)
    result = harness.run_train(cfg, args.out, quiet=args.quiet)
    print(json.dumps({k: v for k, v in result.items() if k != "final"}, indent=2))
    for route, metrics in sorted(result["final"].items()):
        print(f"{route}: ap={metrics['ap']:.4f} ap50={metrics['ap50']:.4f} "
              f"ap75={metrics['ap75']:.4f} (nms={int(metrics['use_nms'])})")
    return 0


def cmd_ablate(args):
    from . import harness

    seeds = [int(s) for s in args.seeds.split(",")]
    summary = harness.run_ablation_preset(args.preset, args.out, seeds=seeds,
                                          overrides=_parse_set(args.set),
                                          quiet=args.quiet)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_probe(args):
    from . import harness

    cfg = harness.ProbeConfig(steps=args.steps, lr=args.lr, seed=args.seed or 0)
    result = harness.run_probe(args.checkpoint, args.route, cfg, quiet=args.quiet)
    print(json.dumps(result, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_eval(args):
    from . import harness
    from .evaluate import evaluate_model
    from .model import load_checkpoint

    model, extra = load_checkpoint(args.checkpoint)
    run_cfg = harness.RunConfig.from_dict(extra["run_config"])
    _, val_scenes = harness.build_datasets(run_cfg)
    use_nms = None
    if args.nms:
        use_nms = True
    elif args.no_nms:
        use_nms = False
    metrics = evaluate_model(model, val_scenes, args.route, use_nms=use_nms,
                             phi=run_cfg.loss.phi if args.phi is None else args.phi)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args):
    import numpy as np

    from . import autodiff as ad
    from . import losses
    from .data import GenConfig, generate_dataset
    from .model import DetectionModel, ModelConfig, RouteSpec

    rng = np.random.default_rng(0)
    failures = []
    checks = []
    for kind in ("add", "sub", "mul", "div", "matmul", "neg", "exp", "log", "pow",
                 "abs", "sigmoid", "softplus", "relu", "gelu", "tanh", "maximum",
                 "minimum", "softmax", "layer_norm", "sum", "mean", "concat",
                 "slice", "transpose", "reshape", "expand", "take_rows",
                 "masked_fill"):
        err = _op_gradcheck(kind, rng, trials=args.trials)
        ok = err <= 1e-4
        checks.append((f"op:{kind}", err, ok))
        if not ok:
            failures.append(kind)
    specs = [RouteSpec("route1", ffn="independent-o2m", target="o2m"), RouteSpec("route2"),
             RouteSpec("route3", sa="instructive", target="o2m")]
    cfg = ModelConfig(route_specs=specs, d_model=8, n_heads=2, d_ff=16, n_enc_layers=1,
                      n_dec_layers=2, n_queries=6, n_classes=3, n_instruction_tokens=2)
    model = DetectionModel(cfg, init_seed=0)
    scenes = generate_dataset(123, 1, GenConfig())
    images = np.stack([s.image for s in scenes])
    gts = [(s.boxes, s.labels) for s in scenes]
    outs = model.forward_train(images)
    plan = losses.build_plan(outs, gts, cfg.route_specs, losses.AssignerConfig())

    def f():
        outs = model.forward_train(images)
        loss, _, _ = losses.multi_route_loss(outs, gts, cfg.route_specs,
                                             losses.LossWeights(),
                                             losses.AssignerConfig(), plan=plan)
        return loss

    err = ad.grad_check(f, list(model.params), eps=1e-5,
                        max_coords_per_param=args.model_coords, seed=0)
    ok = err <= 1e-4
    checks.append(("full-model", err, ok))
    if not ok:
        failures.append("full-model")
    for name, err, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: max rel err {err:.3e}")
    return 1 if failures else 0


def _op_gradcheck(kind, rng, trials=5):
    import numpy as np

    from . import autodiff as ad

    worst = 0.0
    for _ in range(trials):
        shape = tuple(rng.integers(2, 5, size=2))
        if kind in ("log", "pow"):
            x = rng.uniform(0.5, 2.0, shape)
        elif kind in ("relu", "abs"):
            x = rng.normal(size=shape) + np.where(rng.random(shape) < 0.5, -0.2, 0.2)
        else:
            x = rng.normal(size=shape)
        p = ad.Param("x", x)
        attrs = {"axis": -1, "exponent": 1.7, "shape": (shape[0] * shape[1],),
                 "start": 0, "length": shape[1] - 1,
                 "indices": rng.integers(0, shape[0], size=3),
                 "mask": rng.random(shape) < 0.3, "value": -2.0}
        if kind in ("add", "sub", "mul", "div", "maximum", "minimum", "matmul"):
            q = ad.Param("y", rng.normal(size=(shape[1], shape[0])) + 3.0
                         if kind == "matmul" else rng.normal(size=shape) + 3.0)
            raw = lambda: ad.forward_op(kind, [p.tensor, q.tensor], attrs)
            params = [p, q]
        elif kind == "concat":
            raw = lambda: ad.forward_op(kind, [p.tensor, p.tensor], attrs)
            params = [p]
        elif kind == "expand":
            e = ad.Param("e", rng.normal(size=(1, shape[1])))
            attrs["shape"] = shape
            raw = lambda: ad.forward_op(kind, [e.tensor], attrs)
            params = [e]
        else:
            raw = lambda: ad.forward_op(kind, [p.tensor], attrs)
            params = [p]
        # weighting must be a fixed constant across probe evaluations
        weight = ad.Tensor(rng.normal(size=raw().shape))
        f = lambda: ad.mul(raw(), weight).sum()
        worst = max(worst, ad.grad_check(f, params, eps=1e-5))
    return worst


def cmd_gen_data(args):
    from .data import GenConfig, derive_scene_seed, generate_scene, write_manifest

    gen = GenConfig()
    scenes = [generate_scene(derive_scene_seed(args.seed, i), gen)
              for i in range(args.count)]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_manifest(args.out, scenes)
    print(json.dumps({"scenes": len(scenes), "manifest": str(args.out)}))
    return 0


def cmd_dump(args):
    from . import harness

    kinds = args.what.split(",")
    written = harness.dump_artifacts(args.checkpoint, kinds, args.out,
                                     n_scenes=args.scenes)
    print(json.dumps({"written": written}, indent=2))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="multiroute",
                                     description="Desk-scale multi-route detection transformer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one preset")
    p.add_argument("--preset", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON run config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train an ablation preset over seeds")
    p.add_argument("--preset", required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", help="linear probing of a frozen checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--route", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="evaluate a checkpoint's route on its val set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--route", required=True)
    p.add_argument("--nms", action="store_true")
    p.add_argument("--no-nms", action="store_true")
    p.add_argument("--phi", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--model-coords", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a dataset manifest (JSONL of seeds+gts)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("dump", help="analysis artifacts from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--what", default="attention,experts,cosine")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=16)
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
