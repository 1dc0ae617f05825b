"""Training runs, ablation presets, probing, and analysis dumps.

Every run is fully determined by (seed, resolved config): datasets are
derived from the seed, batch order comes from a per-epoch counter-based
stream, and all emitted files use canonical formatting, so reruns are
byte-identical.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import geometry, losses
from .assignment import focal_cls_cost, hungarian_match
from .data import GenConfig, derive_scene_seed, generate_scene
from .evaluate import (
    DEFAULT_NMS_THRESH,
    compute_ap,
    detections_from_grid,
    evaluate_routes,
    metrics_csv_header,
    metrics_csv_row,
)
from .model import (
    ConfigError,
    DetectionModel,
    ModelConfig,
    RouteSpec,
    Trace,
    default_moe_layers,
    load_checkpoint,
    save_checkpoint,
)
from .optim import AdamW


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message names the offending epoch/step."""


# -- presets ------------------------------------------------------------------

DESK_MODEL = dict(d_model=32, n_heads=4, d_ff=64, n_enc_layers=2, n_dec_layers=2,
                  n_queries=20, n_classes=3, n_instruction_tokens=10,
                  n_experts=4, top_k=2)


def preset_route_specs(name: str):
    """RouteSpec list plus model-config extras for each ablation preset."""
    p = RouteSpec("route2")
    table = {
        "o2o-only": ([p], {}),
        "share-all": ([RouteSpec("aux-share", target="o2m"), p], {}),
        "indep-sa": ([RouteSpec("aux-sa", sa="independent", target="o2m"), p], {}),
        "indep-ca": ([RouteSpec("aux-ca", ca="independent", target="o2m"), p], {}),
        "indep-ffn": ([RouteSpec("aux-ffn", ffn="independent-o2m", target="o2m"), p], {}),
        "shared-sa": ([RouteSpec("aux-ca-ffn", ca="independent", ffn="independent-o2m",
                                 target="o2m"), p], {}),
        "shared-ca": ([RouteSpec("aux-sa-ffn", sa="independent", ffn="independent-o2m",
                                 target="o2m"), p], {}),
        "shared-ffn": ([RouteSpec("aux-sa-ca", sa="independent", ca="independent",
                                  target="o2m"), p], {}),
        "combo-3-4": ([RouteSpec("aux-sa", sa="independent", target="o2m"),
                       RouteSpec("aux-ca", ca="independent", target="o2m"), p], {}),
        "combo-3-5": ([RouteSpec("aux-sa", sa="independent", target="o2m"),
                       RouteSpec("aux-ffn", ffn="independent-o2m", target="o2m"), p], {}),
        "combo-4-5": ([RouteSpec("aux-ca", ca="independent", target="o2m"),
                       RouteSpec("aux-ffn", ffn="independent-o2m", target="o2m"), p], {}),
        "combo-3-4-5": ([RouteSpec("aux-sa", sa="independent", target="o2m"),
                         RouteSpec("aux-ca", ca="independent", target="o2m"),
                         RouteSpec("aux-ffn", ffn="independent-o2m", target="o2m"), p], {}),
        "mrdetr": ([RouteSpec("route1", ffn="independent-o2m", target="o2m"), p,
                    RouteSpec("route3", sa="instructive", target="o2m")], {}),
        "mrdetr-pp": ([RouteSpec("route1", ffn="moe-gate-independent", target="o2m"),
                       RouteSpec("route2", ffn="moe-gate-shared"),
                       RouteSpec("route3", sa="instructive", ffn="moe-gate-shared",
                                 target="o2m")],
                      {"moe_scales": 1, "moe_decoder_layers": "last-half"}),
    }
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {sorted(table)}")
    return table[name]


def preset_names():
    return ["o2o-only", "share-all", "indep-sa", "indep-ca", "indep-ffn", "shared-sa",
            "shared-ca", "shared-ffn", "combo-3-4", "combo-3-5", "combo-4-5",
            "combo-3-4-5", "mrdetr", "mrdetr-pp"]


def preset_model_config(name: str, **overrides) -> ModelConfig:
    specs, extras = preset_route_specs(name)
    kwargs = dict(DESK_MODEL)
    kwargs.update(extras)
    kwargs.update(overrides)
    if kwargs.get("moe_decoder_layers") == "last-half":
        kwargs["moe_decoder_layers"] = default_moe_layers(kwargs["n_dec_layers"])
    cfg = ModelConfig(route_specs=specs, **kwargs)
    cfg.validate()
    return cfg


# -- run configuration --------------------------------------------------------

@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    lr_drop_epoch: int = 25


@dataclass
class DatasetConfig:
    n_train: int = 500
    n_val: int = 100
    gen: GenConfig = field(default_factory=GenConfig)


@dataclass
class RunConfig:
    preset: str = "mrdetr"
    seed: int = 0
    model: ModelConfig = None
    loss: losses.LossWeights = field(default_factory=losses.LossWeights)
    assigner: losses.AssignerConfig = field(default_factory=losses.AssignerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval_every: int = 1
    o2m_only: bool = False  # oracle mode: every route supervised one-to-many

    def __post_init__(self):
        if self.model is None:
            self.model = preset_model_config(self.preset)

    def validate(self) -> None:
        self.model.validate(require_instruction_tokens=True)
        self.loss.validate()
        self.dataset.gen.validate()
        if self.dataset.gen.count_range[1] > self.model.n_queries:
            raise ConfigError("scene object count can exceed the query budget")
        if self.dataset.gen.n_classes != self.model.n_classes:
            raise ConfigError("generator and model disagree on the class count")
        if self.optim.epochs < 1 or self.optim.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d["model"]) if d.get("model") else None
        loss = losses.LossWeights(**d.get("loss", {}))
        assigner = losses.AssignerConfig(**d.get("assigner", {}))
        optim = OptimConfig(**d.get("optim", {}))
        ds = dict(d.get("dataset", {}))
        gen = GenConfig(**ds.pop("gen", {}))
        gen.count_range = tuple(gen.count_range)  # JSON round-trips tuples as lists
        gen.size_range = tuple(gen.size_range)
        dataset = DatasetConfig(gen=gen, **ds)
        return RunConfig(preset=d.get("preset", "mrdetr"), seed=d.get("seed", 0),
                         model=model, loss=loss, assigner=assigner, optim=optim,
                         dataset=dataset, eval_every=d.get("eval_every", 1),
                         o2m_only=d.get("o2m_only", False))


def apply_overrides(cfg_dict: dict, overrides: dict) -> dict:
    """Apply dotted-path overrides like {"optim.lr": 0.01} to a config dict."""
    for path, value in overrides.items():
        node = cfg_dict
        keys = path.split(".")
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise KeyError(f"unknown config path {path!r}")
            node = node[k]
        if keys[-1] not in node:
            raise KeyError(f"unknown config key {path!r}")
        node[keys[-1]] = value
    return cfg_dict


def build_datasets(cfg: RunConfig):
    gen = cfg.dataset.gen
    train = [generate_scene(derive_scene_seed(cfg.seed * 2, i), gen)
             for i in range(cfg.dataset.n_train)]
    val = [generate_scene(derive_scene_seed(cfg.seed * 2 + 1, i), gen)
           for i in range(cfg.dataset.n_val)]
    return train, val


def _loss_specs(cfg: RunConfig):
    """Route specs as seen by the loss; o2m-only mode retargets everything."""
    if not cfg.o2m_only:
        return cfg.model.route_specs
    return [RouteSpec(s.name, sa=s.sa, ca=s.ca, ffn=s.ffn, target="o2m")
            for s in cfg.model.route_specs]


def _write_config(path: Path, cfg: RunConfig) -> None:
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def run_train(cfg: RunConfig, out_dir, quiet: bool = False) -> dict:
    """Train per the config; writes config.json, metrics.csv, checkpoint.json."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out / "config.json", cfg)
    run_id = f"{cfg.preset}-seed{cfg.seed}"
    train_scenes, val_scenes = build_datasets(cfg)
    model = DetectionModel(cfg.model, init_seed=cfg.seed)
    opt = AdamW(model.params, lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    loss_specs = _loss_specs(cfg)
    requests = [(s.name, None) for s in cfg.model.route_specs]
    rows = []
    started = time.time()
    final_metrics = None
    n_train = len(train_scenes)
    for epoch in range(cfg.optim.epochs):
        opt.lr = cfg.optim.lr * (0.1 if epoch >= cfg.optim.lr_drop_epoch else 1.0)
        order = np.random.Generator(
            np.random.Philox(key=[cfg.seed, 0xE90C + epoch])).permutation(n_train)
        for start in range(0, n_train, cfg.optim.batch_size):
            batch = [train_scenes[i] for i in order[start:start + cfg.optim.batch_size]]
            images = np.stack([s.image for s in batch])
            gts = [(s.boxes, s.labels) for s in batch]
            outs = model.forward_train(images)
            loss, _, _ = losses.multi_route_loss(outs, gts, loss_specs, cfg.loss,
                                                 cfg.assigner)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {start // cfg.optim.batch_size}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.optim.epochs - 1:
            metrics = evaluate_routes(model, val_scenes, requests, phi=cfg.loss.phi)
            final_metrics = {key[0]: m for key, m in metrics.items()}
            for key in sorted(metrics.keys()):
                rows.append(metrics_csv_row(run_id, epoch, metrics[key]))
            if not quiet:
                summary = " ".join(f"{k[0]}={m['ap']:.3f}" for k, m in sorted(metrics.items()))
                print(f"[{run_id}] epoch {epoch}: {summary}", flush=True)
    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_csv_header(cfg.model.n_dec_layers))
        writer.writerows(rows)
    ckpt_path = out / "checkpoint.json"
    save_checkpoint(ckpt_path, model, extra={"run_config": cfg.to_dict()})
    return {
        "run_id": run_id,
        "final": final_metrics,
        "wall_seconds": time.time() - started,
        "metrics_csv": str(csv_path),
        "checkpoint": str(ckpt_path),
    }


def run_ablation_preset(name: str, out_dir, seeds=(0,), overrides=None,
                        quiet: bool = False) -> dict:
    """Train one Table-style preset and report the two-column summary:
    primary-route AP without NMS and the best auxiliary AP with NMS."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_seed = []
    for seed in seeds:
        cfg = RunConfig(preset=name, seed=seed, model=preset_model_config(name))
        if overrides:
            cfg = RunConfig.from_dict(apply_overrides(cfg.to_dict(), overrides))
        result = run_train(cfg, out / f"seed{seed}", quiet=quiet)
        primary = cfg.model.primary().name
        o2o_ap = result["final"][primary]["ap"]
        aux_aps = [result["final"][s.name]["ap"] for s in cfg.model.aux_routes()]
        per_seed.append({"seed": seed, "o2o_ap": o2o_ap,
                         "o2m_ap": max(aux_aps) if aux_aps else None})
    summary = {
        "preset": name,
        "seeds": list(seeds),
        "per_seed": per_seed,
        "o2o_ap_mean": float(np.mean([r["o2o_ap"] for r in per_seed])),
        "o2m_ap_mean": (float(np.mean([r["o2m_ap"] for r in per_seed]))
                        if per_seed[0]["o2m_ap"] is not None else None),
    }
    with open(out / "ablation.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["preset", "seed", "o2o_ap", "o2m_ap"])
        for r in per_seed:
            writer.writerow([name, r["seed"], repr(r["o2o_ap"]),
                             "" if r["o2m_ap"] is None else repr(r["o2m_ap"])])
    return summary


# -- probing ------------------------------------------------------------------

@dataclass
class ProbeConfig:
    steps: int = 200
    lr: float = 0.05
    seed: int = 0


def _route_features(model: DetectionModel, scenes, route: str, batch: int = 16):
    """Frozen final-layer queries and boxes for one route."""
    feats, boxes = [], []
    for start in range(0, len(scenes), batch):
        chunk = scenes[start:start + batch]
        images = np.stack([s.image for s in chunk])
        outs = model.forward_train(images)[-1][route]
        feats.append(outs.queries.data.copy())
        boxes.append(outs.boxes.data.copy())
    return np.concatenate(feats), np.concatenate(boxes)


def run_probe(checkpoint_path, route: str, probe_cfg: ProbeConfig | None = None,
              quiet: bool = False) -> dict:
    """Freeze the checkpoint, fit a fresh linear classification probe on the
    route's final-layer queries under one-to-one assignment, and report AP
    with and without NMS next to the route's own numbers.

    Probe detections reuse the route's frozen boxes; rankings use raw
    classification probabilities for both the probe and the route's own
    rows so the comparison isolates what the queries still encode.
    """
    probe_cfg = probe_cfg or ProbeConfig()
    model, extra = load_checkpoint(checkpoint_path)
    if route not in [s.name for s in model.cfg.route_specs]:
        raise KeyError(f"route {route!r} not in checkpoint "
                       f"(have {[s.name for s in model.cfg.route_specs]})")
    run_cfg = RunConfig.from_dict(extra["run_config"])
    train_scenes, val_scenes = build_datasets(run_cfg)
    for p in model.params:
        p.trainable = False

    feats, frozen_boxes = _route_features(model, train_scenes, route)
    n_scenes, n, d = feats.shape
    c = model.cfg.n_classes
    gts = [(s.boxes, s.labels) for s in train_scenes]

    # geometry part of the matching cost never changes: precompute per scene
    geo_cost, cls_ctx = [], []
    for s in range(n_scenes):
        gt_boxes, gt_labels = gts[s]
        pb = geometry.clamp_degenerate(frozen_boxes[s])
        l1 = np.abs(pb[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
        giou = geometry.giou_pairwise(geometry.cxcywh_to_xyxy(pb),
                                      geometry.cxcywh_to_xyxy(gt_boxes))
        w = run_cfg.assigner.cost_weights
        geo_cost.append(w["w_l1"] * l1 + w["w_giou"] * (1.0 - giou))
        cls_ctx.append((gt_labels, w["w_cls"]))

    probe = ad.ParamSet()
    rng = np.random.default_rng(probe_cfg.seed)
    w0 = rng.uniform(-np.sqrt(6.0 / (d + c)), np.sqrt(6.0 / (d + c)), (d, c))
    pw = probe.add("probe.w", w0)
    pb_ = probe.add("probe.b", np.full(c, -np.log(99.0)))
    opt = AdamW(probe, lr=probe_cfg.lr, weight_decay=0.0)
    flat_feats = feats.reshape(n_scenes * n, d)

    for step in range(probe_cfg.steps):
        logits_t = ad.add(ad.matmul(ad.Tensor(flat_feats), pw.tensor), pb_.tensor)
        logits = logits_t.data.reshape(n_scenes, n, c)
        probs = 1.0 / (1.0 + np.exp(-logits))
        pos_mask = np.zeros((n_scenes, n, c))
        scene_w = np.zeros((n_scenes, 1, 1))
        for s in range(n_scenes):
            gt_labels, w_cls = cls_ctx[s]
            cost = w_cls * focal_cls_cost(probs[s][:, gt_labels]) + geo_cost[s]
            pairs = hungarian_match(cost).pairs()
            scene_w[s] = 1.0 / (n_scenes * max(1, len(pairs)))
            for pi, gj in pairs:
                pos_mask[s, pi, int(gt_labels[gj])] = 1.0
        plan = losses.RoutePlan(
            pairs=[], pos_mask=pos_mask, scene_weight=scene_w,
            vfl_targets=np.zeros_like(pos_mask), flat_pair_idx=np.zeros(0, dtype=np.int64),
            pair_gt_cxcywh=np.zeros((0, 4)), pair_gt_xyxy=np.zeros((0, 4)),
            pair_weight=np.zeros((0, 1)), n_positives=int(pos_mask.sum()))
        loss = losses.focal_from_plan(ad.reshape(logits_t, (n_scenes, n, c)), plan)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        if not quiet and step % 50 == 0:
            print(f"[probe {route}] step {step}: loss {loss.item():.5f}", flush=True)

    val_feats, val_boxes = _route_features(model, val_scenes, route)
    val_gts = [(geometry.cxcywh_to_xyxy(s.boxes), s.labels) for s in val_scenes]
    probe_logits = val_feats @ pw.data + pb_.data
    probe_scores = 1.0 / (1.0 + np.exp(-probe_logits))
    top_n = min(100, n * c)

    def ap_from(scores_grid, use_nms):
        dets = []
        for s in range(len(val_scenes)):
            dets.extend(detections_from_grid(scores_grid[s], val_boxes[s], s,
                                             use_nms, top_n, DEFAULT_NMS_THRESH))
        return compute_ap(dets, val_gts)["ap"]

    own_logits = []
    for start in range(0, len(val_scenes), 16):
        chunk = val_scenes[start:start + 16]
        images = np.stack([s.image for s in chunk])
        own_logits.append(model.forward_train(images)[-1][route].cls_logits.data)
    own_scores = 1.0 / (1.0 + np.exp(-np.concatenate(own_logits)))
    result = {
        "route": route,
        "own_ap_raw": ap_from(own_scores, use_nms=False),
        "own_ap_nms": ap_from(own_scores, use_nms=True),
        "probe_ap_raw": ap_from(probe_scores, use_nms=False),
        "probe_ap_nms": ap_from(probe_scores, use_nms=True),
        "probe_steps": probe_cfg.steps,
    }
    return result


# -- analysis dumps -------------------------------------------------------------

def _write_matrix_csv(path: Path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(matrix):
            writer.writerow([repr(float(v)) for v in row])


def dump_artifacts(checkpoint_path, what, out_dir, n_scenes: int = 16) -> list[str]:
    """Write analysis CSVs: instructive-SA attention means, expert-selection
    histograms, and instruction-token cosine similarity."""
    wanted = {what} if isinstance(what, str) else set(what)
    valid = {"attention", "experts", "cosine"}
    if not wanted <= valid:
        raise ValueError(f"unknown dump kinds {sorted(wanted - valid)}; valid: {sorted(valid)}")
    model, extra = load_checkpoint(checkpoint_path)
    cfg = model.cfg
    has_instructive = (any(s.sa == "instructive" for s in cfg.route_specs)
                       and cfg.n_instruction_tokens > 0)
    if {"attention", "cosine"} & wanted and not has_instructive:
        raise ConfigError("checkpoint has no instruction tokens to dump")
    if "experts" in wanted and not cfg.uses_moe():
        raise ConfigError("checkpoint has no MoE components to dump")
    run_cfg = RunConfig.from_dict(extra["run_config"])
    _, val_scenes = build_datasets(run_cfg)
    scenes = val_scenes[:n_scenes]
    images = np.stack([s.image for s in scenes])
    trace = Trace()
    model.forward_train(images, trace=trace)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "attention" in wanted:
        for layer in sorted(trace.ins_attention.keys()):
            stacked = np.concatenate(trace.ins_attention[layer], axis=0)  # (B, h, T, T)
            mean_attn = stacked.mean(axis=(0, 1))
            path = out / f"ins_attention_layer{layer}.csv"
            _write_matrix_csv(path, mean_attn)
            written.append(str(path))
    if "experts" in wanted:
        path = out / "expert_histograms.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["context", "gate"] + [f"expert{i}" for i in range(cfg.n_experts)])
            for (layer, gate_name) in sorted(trace.moe_masks.keys(), key=str):
                masks = np.concatenate(
                    [m.reshape(-1, cfg.n_experts) for m in trace.moe_masks[(layer, gate_name)]])
                counts = masks.sum(axis=0).astype(int)
                ctx = f"enc{layer[1]}" if isinstance(layer, tuple) else f"dec{layer}"
                writer.writerow([ctx, gate_name] + [str(int(v)) for v in counts])
        written.append(str(path))
    if "cosine" in wanted:
        for layer in range(cfg.n_dec_layers):
            name = f"dec{layer}.instruction"
            if name not in model.params:
                continue
            tokens = model.params[name].data
            norm = tokens / np.linalg.norm(tokens, axis=1, keepdims=True)
            path = out / f"instruction_cosine_layer{layer}.csv"
            _write_matrix_csv(path, norm @ norm.T)
            written.append(str(path))
    return written
