"""Tiny encoder-decoder detector with multi-route training.

The decoder runs one primary query stream supervised one-to-one plus any
number of auxiliary routes supervised one-to-many. Routes differ only in
which self-attention / cross-attention / feed-forward variant they
compose; shared variants resolve to the same parameter objects and are
computed once per layer. Auxiliary routes exist only in the training
graph; inference runs the primary chain alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import ParamSet, Tensor
from .data import FeatureStem

N_SCALES = 3  # fixed by the stem's stride pyramid

SA_KINDS = ("shared", "independent", "instructive")
CA_KINDS = ("shared", "independent")
FFN_KINDS = ("shared-o2o", "independent-o2m", "moe-gate-shared", "moe-gate-independent")


class ConfigError(ValueError):
    """Model or run configuration violates a structural constraint."""


@dataclass
class RouteSpec:
    """One decoder route: a composition of component variants plus its target."""

    name: str
    sa: str = "shared"
    ca: str = "shared"
    ffn: str = "shared-o2o"
    target: str = "o2o"


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_queries: int = 20
    n_classes: int = 3
    n_instruction_tokens: int = 10
    n_experts: int = 4
    top_k: int = 2
    moe_scales: int = 0                     # eta: how many coarsest scales get the encoder MoE
    moe_decoder_layers: list[int] = field(default_factory=list)
    route_specs: list[RouteSpec] = field(default_factory=lambda: [RouteSpec("primary")])

    def primary(self) -> RouteSpec:
        return next(s for s in self.route_specs if s.target == "o2o")

    def aux_routes(self) -> list[RouteSpec]:
        return [s for s in self.route_specs if s.target != "o2o"]

    def uses_decoder_moe(self) -> bool:
        return any(s.ffn.startswith("moe") for s in self.route_specs)

    def uses_moe(self) -> bool:
        return self.uses_decoder_moe() or self.moe_scales > 0

    def validate(self, require_instruction_tokens: bool = False) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 4:
            raise ConfigError("d_model must be divisible by 4 for 2D sin-cos encodings")
        if not (1 <= self.top_k <= self.n_experts):
            raise ConfigError(f"need 1 <= top_k <= n_experts, got k={self.top_k} t={self.n_experts}")
        if not (0 <= self.moe_scales <= N_SCALES):
            raise ConfigError(f"moe_scales {self.moe_scales} exceeds scale count {N_SCALES}")
        if self.n_instruction_tokens < 0:
            raise ConfigError("n_instruction_tokens must be >= 0")
        names = [s.name for s in self.route_specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate route names {names}")
        targets = [s.target for s in self.route_specs]
        if targets.count("o2o") != 1:
            raise ConfigError("exactly one route must target o2o")
        for s in self.route_specs:
            if s.sa not in SA_KINDS or s.ca not in CA_KINDS or s.ffn not in FFN_KINDS:
                raise ConfigError(f"bad route spec {s}")
            if s.target not in ("o2o", "o2m"):
                raise ConfigError(f"bad route target {s.target}")
        prim = self.primary()
        if prim.sa != "shared" or prim.ca != "shared":
            raise ConfigError("primary route must use the shared SA and CA")
        if prim.ffn not in ("shared-o2o", "moe-gate-shared"):
            raise ConfigError("primary route must use the shared FFN or the shared MoE gate")
        for l in self.moe_decoder_layers:
            if not (0 <= l < self.n_dec_layers):
                raise ConfigError(f"moe decoder layer {l} out of range")
        if self.uses_decoder_moe() and not self.moe_decoder_layers:
            raise ConfigError("moe route specs require moe_decoder_layers")
        if require_instruction_tokens and self.n_instruction_tokens == 0:
            if any(s.sa == "instructive" for s in self.route_specs):
                raise ConfigError("instructive self-attention requires n_instruction_tokens >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["route_specs"] = [RouteSpec(**r) for r in d.get("route_specs", [])]
        d["moe_decoder_layers"] = list(d.get("moe_decoder_layers", []))
        return ModelConfig(**d)


def default_moe_layers(n_dec_layers: int) -> list[int]:
    """Last ceil(L/2) decoder layers host the route-aware MoE."""
    start = n_dec_layers - (n_dec_layers + 1) // 2
    return list(range(start, n_dec_layers))


@dataclass
class RouteOutput:
    """Per-layer, per-route head predictions on the route's query output."""

    queries: Tensor      # (B, n, d)
    cls_logits: Tensor   # (B, n, C)
    boxes: Tensor        # (B, n, 4) cxcywh after sigmoid
    iou_logits: Tensor   # (B, n, C)


class Linear:
    def __init__(self, params: ParamSet, prefix: str, d_in: int, d_out: int,
                 rng, bias_init: float = 0.0):
        bound = np.sqrt(6.0 / (d_in + d_out))
        self.w = params.add(f"{prefix}.w", rng.uniform(-bound, bound, (d_in, d_out)))
        self.b = params.add(f"{prefix}.b", np.full(d_out, bias_init, dtype=np.float64))

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, x.shape[-1]))
        out = ad.add(ad.matmul(flat, self.w.tensor), self.b.tensor)
        return ad.reshape(out, lead + (self.w.tensor.shape[1],))


class LayerNorm:
    def __init__(self, params: ParamSet, prefix: str, d: int):
        self.g = params.add(f"{prefix}.g", np.ones(d))
        self.b = params.add(f"{prefix}.b", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x, axis=-1), self.g.tensor), self.b.tensor)


class MultiHeadAttention:
    """Standard dense attention over (B, T, d) sequences."""

    def __init__(self, params: ParamSet, prefix: str, d_model: int, n_heads: int, rng):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = Linear(params, f"{prefix}.q", d_model, d_model, rng)
        self.k_proj = Linear(params, f"{prefix}.k", d_model, d_model, rng)
        self.v_proj = Linear(params, f"{prefix}.v", d_model, d_model, rng)
        self.out_proj = Linear(params, f"{prefix}.o", d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        x = ad.reshape(x, (b, t, self.n_heads, self.d_head))
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (b * self.n_heads, t, self.d_head))

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, record=None) -> Tensor:
        b, tq, _ = q_in.shape
        tk = k_in.shape[1]
        q = self._split(self.q_proj(q_in))
        k = self._split(self.k_proj(k_in))
        v = self._split(self.v_proj(v_in))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.d_head))
        probs = ad.softmax(scores, axis=-1)
        if record is not None:
            record(probs.data.reshape(b, self.n_heads, tq, tk))
        ctx = ad.matmul(probs, v)
        ctx = ad.reshape(ctx, (b, self.n_heads, tq, self.d_head))
        ctx = ad.transpose(ctx, (0, 2, 1, 3))
        return self.out_proj(ad.reshape(ctx, (b, tq, self.d_model)))


class FeedForward:
    def __init__(self, params: ParamSet, prefix: str, d_model: int, d_ff: int, rng):
        self.lin1 = Linear(params, f"{prefix}.lin1", d_model, d_ff, rng)
        self.lin2 = Linear(params, f"{prefix}.lin2", d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.gelu(self.lin1(x)))


class ExpertBank:
    """t two-layer MLP experts of shared input/output width."""

    def __init__(self, params: ParamSet, prefix: str, d_model: int, d_ff: int,
                 n_experts: int, rng):
        self.experts = [FeedForward(params, f"{prefix}.expert{i}", d_model, d_ff, rng)
                        for i in range(n_experts)]

    def __len__(self):
        return len(self.experts)

    def __iter__(self):
        return iter(self.experts)


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries along the last axis (ties to lower index)."""
    flat = scores.reshape(-1, scores.shape[-1])
    order = np.argsort(-flat, axis=-1, kind="stable")
    mask = np.zeros_like(flat, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=-1)
    return mask.reshape(scores.shape)


def moe_block(x: Tensor, gate, experts, k: int, record=None) -> Tensor:
    """Sparse mixture: softmax the gate, keep the top-k scores per token,
    and sum the selected experts weighted by their (un-renormalized) scores.
    """
    experts = list(experts)
    t = len(experts)
    if not (1 <= k <= t):
        raise ConfigError(f"need 1 <= k <= {t}, got {k}")
    logits = gate(x)
    if logits.shape[-1] != t:
        raise ad.ShapeError(f"gate emitted {logits.shape[-1]} scores for {t} experts")
    weights = ad.softmax(logits, axis=-1)
    mask = topk_mask(weights.data, k)
    if record is not None:
        record(mask)
    masked = ad.mul(weights, Tensor(mask.astype(np.float64)))
    out = None
    axis = masked.ndim - 1
    for i, expert in enumerate(experts):
        if not mask[..., i].any():
            continue  # unselected everywhere: exact-zero contribution either way
        w_i = ad.narrow(masked, axis, i, 1)
        term = ad.mul(expert(x), w_i)
        out = term if out is None else ad.add(out, term)
    return out


class EncoderLayer:
    """Self-attention over the concatenated scales, then the scale-aware
    feed-forward stage: the shared FFN everywhere plus an additive MoE on
    the first ``eta`` (coarsest) scales.
    """

    def __init__(self, params: ParamSet, prefix: str, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.sa = MultiHeadAttention(params, f"{prefix}.sa", cfg.d_model, cfg.n_heads, rng)
        self.ln_sa = LayerNorm(params, f"{prefix}.ln_sa", cfg.d_model)
        self.ffn = FeedForward(params, f"{prefix}.ffn", cfg.d_model, cfg.d_ff, rng)
        self.ln_ffn = LayerNorm(params, f"{prefix}.ln_ffn", cfg.d_model)
        self.gate = None
        self.bank = None
        if cfg.moe_scales > 0:
            self.gate = Linear(params, f"{prefix}.moe_gate", cfg.d_model, cfg.n_experts, rng)
            self.bank = ExpertBank(params, f"{prefix}.moe", cfg.d_model, cfg.d_ff,
                                   cfg.n_experts, rng)

    def __call__(self, x: Tensor, scale_sizes, record_moe=None, eta=None) -> Tensor:
        eta = self.cfg.moe_scales if eta is None else eta
        if eta > len(scale_sizes):
            raise ConfigError(f"eta {eta} exceeds scale count {len(scale_sizes)}")
        x = self.ln_sa(ad.add(x, self.sa(x, x, x)))
        ffn_out = self.ffn(x)
        if eta > 0 and self.gate is not None:
            head = int(sum(scale_sizes[:eta]))
            moe_in = ad.narrow(x, 1, 0, head)
            moe_out = moe_block(moe_in, self.gate, self.bank, self.cfg.top_k,
                                record=record_moe)
            head_out = ad.add(ad.narrow(ffn_out, 1, 0, head), moe_out)
            tail = ad.narrow(ffn_out, 1, head, x.shape[1] - head)
            ffn_out = ad.concat([head_out, tail], axis=1)
        return self.ln_ffn(ad.add(x, ffn_out))


class DecoderLayer:
    """One multi-route decoder layer.

    Shared components are single objects reused by every route that names
    them; per-route independents get their own parameters. A small memo
    keyed by (component, input) keeps shared stages computed exactly once.
    """

    def __init__(self, params: ParamSet, prefix: str, layer_index: int,
                 cfg: ModelConfig, rng):
        self.cfg = cfg
        self.index = layer_index
        self.is_moe_layer = layer_index in cfg.moe_decoder_layers and cfg.uses_decoder_moe()
        d, h = cfg.d_model, cfg.n_heads

        self.sa = MultiHeadAttention(params, f"{prefix}.sa", d, h, rng)
        self.ln_sa = LayerNorm(params, f"{prefix}.ln_sa", d)
        self.ca = MultiHeadAttention(params, f"{prefix}.ca", d, h, rng)
        self.ln_ca = LayerNorm(params, f"{prefix}.ln_ca", d)
        self.ffn_o2o = FeedForward(params, f"{prefix}.ffn_o2o", d, cfg.d_ff, rng)
        self.ln_ffn = LayerNorm(params, f"{prefix}.ln_ffn", d)

        self.sa_indep = {}
        self.ln_sa_indep = {}
        self.ca_indep = {}
        self.ln_ca_indep = {}
        for spec in cfg.route_specs:
            if spec.sa == "independent":
                self.sa_indep[spec.name] = MultiHeadAttention(
                    params, f"{prefix}.sa_{spec.name}", d, h, rng)
                self.ln_sa_indep[spec.name] = LayerNorm(params, f"{prefix}.ln_sa_{spec.name}", d)
            if spec.ca == "independent":
                self.ca_indep[spec.name] = MultiHeadAttention(
                    params, f"{prefix}.ca_{spec.name}", d, h, rng)
                self.ln_ca_indep[spec.name] = LayerNorm(params, f"{prefix}.ln_ca_{spec.name}", d)

        self.instruction = None
        if any(s.sa == "instructive" for s in cfg.route_specs) and cfg.n_instruction_tokens > 0:
            self.instruction = params.add(f"{prefix}.instruction",
                                          rng.normal(0.0, 1.0, (cfg.n_instruction_tokens, d)))

        self.ffn_o2m = None
        self.ln_ffn_o2m = None
        if any(s.ffn == "independent-o2m" for s in cfg.route_specs):
            self.ffn_o2m = FeedForward(params, f"{prefix}.ffn_o2m", d, cfg.d_ff, rng)
            self.ln_ffn_o2m = LayerNorm(params, f"{prefix}.ln_ffn_o2m", d)

        self.bank = None
        self.gate_shared = None
        self.gate_indep = None
        self.ln_moe = None
        if self.is_moe_layer:
            self.bank = ExpertBank(params, f"{prefix}.moe", d, cfg.d_ff, cfg.n_experts, rng)
            self.ln_moe = LayerNorm(params, f"{prefix}.ln_moe", d)
            if any(s.ffn == "moe-gate-shared" for s in cfg.route_specs):
                self.gate_shared = Linear(params, f"{prefix}.gate", d, cfg.n_experts, rng)
            if any(s.ffn == "moe-gate-independent" for s in cfg.route_specs):
                self.gate_indep = Linear(params, f"{prefix}.gate_indep", d, cfg.n_experts, rng)

    def _sa_stage(self, spec: RouteSpec, q: Tensor, cache: dict, trace=None) -> Tensor:
        if spec.sa == "shared":
            key = ("sa_shared",)
            if key not in cache:
                cache[key] = self.ln_sa(ad.add(q, self.sa(q, q, q)))
            return cache[key]
        if spec.sa == "independent":
            attn = self.sa_indep[spec.name]
            return self.ln_sa_indep[spec.name](ad.add(q, attn(q, q, q)))
        # instructive: same parameters as the shared SA over the prepended tokens
        key = ("sa_instructive",)
        if key not in cache:
            m = self.cfg.n_instruction_tokens
            if m == 0 or self.instruction is None:
                combined = q
            else:
                ins = ad.expand(ad.reshape(self.instruction.tensor, (1, m, self.cfg.d_model)),
                                (q.shape[0], m, self.cfg.d_model))
                combined = ad.concat([ins, q], axis=1)
            record = None
            if trace is not None:
                record = lambda p: trace.record_ins_attention(self.index, p)
            attn_out = self.sa(combined, combined, combined, record=record)
            kept = ad.narrow(attn_out, 1, self.cfg.n_instruction_tokens, q.shape[1])
            cache[key] = self.ln_sa(ad.add(q, kept))
        return cache[key]

    def _ca_stage(self, spec: RouteSpec, x: Tensor, memory: Tensor, cache: dict) -> Tensor:
        if spec.ca == "shared":
            key = ("ca_shared", id(x))
            if key not in cache:
                cache[key] = self.ln_ca(ad.add(x, self.ca(x, memory, memory)))
            return cache[key]
        attn = self.ca_indep[spec.name]
        return self.ln_ca_indep[spec.name](ad.add(x, attn(x, memory, memory)))

    def _ffn_stage(self, spec: RouteSpec, x: Tensor, cache: dict, trace=None) -> Tensor:
        kind = spec.ffn
        if kind.startswith("moe") and not self.is_moe_layer:
            kind = "shared-o2o"  # off-MoE layers fall back to the plain shared FFN
        if kind == "shared-o2o":
            key = ("ffn_o2o", id(x))
            if key not in cache:
                cache[key] = self.ln_ffn(ad.add(x, self.ffn_o2o(x)))
            return cache[key]
        if kind == "independent-o2m":
            return self.ln_ffn_o2m(ad.add(x, self.ffn_o2m(x)))
        gate_name = "shared" if kind == "moe-gate-shared" else "independent"
        gate = self.gate_shared if gate_name == "shared" else self.gate_indep
        key = ("moe", gate_name, id(x))
        if key not in cache:
            record = None
            if trace is not None:
                record = lambda mask: trace.record_moe(self.index, gate_name, mask)
            out = moe_block(x, gate, self.bank, self.cfg.top_k, record=record)
            cache[key] = self.ln_moe(ad.add(x, out))
        return cache[key]

    def __call__(self, q: Tensor, memory: Tensor, specs=None, trace=None) -> dict[str, Tensor]:
        specs = specs if specs is not None else self.cfg.route_specs
        cache: dict = {}
        outs: dict[str, Tensor] = {}
        for spec in specs:
            x = self._sa_stage(spec, q, cache, trace)
            x = self._ca_stage(spec, x, memory, cache)
            outs[spec.name] = self._ffn_stage(spec, x, cache, trace)
        return outs


class PredictionHeads:
    """Class, box, and IoU-score heads shared across routes and layers."""

    PRIOR_BIAS = float(-np.log((1.0 - 0.01) / 0.01))  # start near-background

    def __init__(self, params: ParamSet, cfg: ModelConfig, rng):
        d, c = cfg.d_model, cfg.n_classes
        self.cls = Linear(params, "head.cls", d, c, rng, bias_init=self.PRIOR_BIAS)
        self.iou = Linear(params, "head.iou", d, c, rng, bias_init=self.PRIOR_BIAS)
        self.box1 = Linear(params, "head.box1", d, d, rng)
        self.box2 = Linear(params, "head.box2", d, d, rng)
        self.box3 = Linear(params, "head.box3", d, 4, rng)

    def __call__(self, queries: Tensor) -> RouteOutput:
        mlp = self.box3(ad.gelu(self.box2(ad.gelu(self.box1(queries)))))
        return RouteOutput(
            queries=queries,
            cls_logits=self.cls(queries),
            boxes=ad.sigmoid(mlp),
            iou_logits=self.iou(queries),
        )


def sincos_position_encoding(grid: int, d_model: int) -> np.ndarray:
    """2D sine-cosine encodings for a grid x grid token map, row-major."""
    half = d_model // 2
    omega = 1.0 / (10000.0 ** (np.arange(half // 2) / (half // 2)))
    coords = (np.arange(grid) + 0.5) / grid
    ys, xs = np.meshgrid(coords, coords, indexing="ij")

    def encode(vals):
        angles = vals.reshape(-1, 1) * omega.reshape(1, -1) * 2 * np.pi
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    return np.concatenate([encode(ys), encode(xs)], axis=1)


class Trace:
    """Mutable collector for attention maps and expert selections."""

    def __init__(self):
        self.ins_attention: dict[int, list[np.ndarray]] = {}
        self.moe_masks: dict[tuple, list[np.ndarray]] = {}

    def record_ins_attention(self, layer: int, probs: np.ndarray) -> None:
        self.ins_attention.setdefault(layer, []).append(probs)

    def record_moe_entry(self, layer, gate_name, mask) -> None:
        self.moe_masks.setdefault((layer, gate_name), []).append(mask)


class DetectionModel:
    """Encoder-decoder detector over synthetic 64x64 scenes."""

    def __init__(self, cfg: ModelConfig, init_seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params = ParamSet()
        rng = np.random.Generator(np.random.Philox(key=[init_seed & ((1 << 64) - 1), 0xA11CE]))
        self.stem = FeatureStem(self.params, cfg.d_model, rng)
        self.scale_embed = self.params.add("scale_embed", rng.normal(0.0, 0.1, (N_SCALES, cfg.d_model)))
        self.query_embed = self.params.add("query_embed", rng.normal(0.0, 1.0, (cfg.n_queries, cfg.d_model)))
        self.enc_layers = [EncoderLayer(self.params, f"enc{i}", cfg, rng)
                           for i in range(cfg.n_enc_layers)]
        self.dec_layers = [DecoderLayer(self.params, f"dec{i}", i, cfg, rng)
                           for i in range(cfg.n_dec_layers)]
        self.heads = PredictionHeads(self.params, cfg, rng)
        self._pos_cache: dict[int, np.ndarray] = {}

    # -- forward passes -----------------------------------------------------

    def _positional(self, grid: int) -> np.ndarray:
        if grid not in self._pos_cache:
            self._pos_cache[grid] = sincos_position_encoding(grid, self.cfg.d_model)
        return self._pos_cache[grid]

    def encode(self, images: np.ndarray, trace: Trace | None = None):
        """Stem + positional/scale embeddings + encoder stack."""
        tokens = self.stem(images)
        scale_sizes = [t.shape[1] for t in tokens]
        enriched = []
        for j, t in enumerate(tokens):
            grid = int(round(np.sqrt(t.shape[1])))
            pos = Tensor(self._positional(grid))
            emb = ad.narrow(self.scale_embed.tensor, 0, j, 1)
            enriched.append(ad.add(ad.add(t, pos), emb))
        x = ad.concat(enriched, axis=1)
        for li, layer in enumerate(self.enc_layers):
            record = None
            if trace is not None and self.cfg.moe_scales > 0:
                record = lambda mask, li=li: trace.record_moe_entry(("enc", li), "shared", mask)
            x = layer(x, scale_sizes, record_moe=record)
        return x, scale_sizes

    def forward_train(self, images: np.ndarray, trace: Trace | None = None):
        """All routes, all layers. Returns a list (per decoder layer) of
        dicts mapping route name -> RouteOutput.
        """
        memory, _ = self.encode(images, trace)
        batch = memory.shape[0]
        q = ad.expand(ad.reshape(self.query_embed.tensor,
                                 (1, self.cfg.n_queries, self.cfg.d_model)),
                      (batch, self.cfg.n_queries, self.cfg.d_model))
        per_layer = []
        primary = self.cfg.primary().name
        wrapped = _LayerTrace(trace) if trace is not None else None
        for layer in self.dec_layers:
            outs = layer(q, memory, trace=wrapped)
            per_layer.append({name: self.heads(t) for name, t in outs.items()})
            q = outs[primary]
        return per_layer

    def forward_primary(self, images: np.ndarray):
        """Inference path: primary route only, all layers, final heads."""
        memory, _ = self.encode(images)
        batch = memory.shape[0]
        q = ad.expand(ad.reshape(self.query_embed.tensor,
                                 (1, self.cfg.n_queries, self.cfg.d_model)),
                      (batch, self.cfg.n_queries, self.cfg.d_model))
        prim = self.cfg.primary()
        for layer in self.dec_layers:
            q = layer(q, memory, specs=[prim])[prim.name]
        return self.heads(q)


class _LayerTrace:
    """Adapts a Trace to the decoder layers' record callbacks."""

    def __init__(self, trace: Trace):
        self.trace = trace

    def record_ins_attention(self, layer, probs):
        self.trace.record_ins_attention(layer, probs)

    def record_moe(self, layer, gate_name, mask):
        self.trace.record_moe_entry(layer, gate_name, mask)


def inference_forward(model: DetectionModel, images: np.ndarray, phi: float = 0.0,
                      top_n: int | None = None):
    """Ranked detections from the primary route.

    Scores are the calibrated blend of class and IoU-score probabilities.
    Returns, per image, a list of (score, query_index, class_index, box)
    sorted by descending score, truncated to ``top_n``.
    """
    out = model.forward_primary(images)
    cls_prob = 1.0 / (1.0 + np.exp(-out.cls_logits.data))
    iou_prob = 1.0 / (1.0 + np.exp(-out.iou_logits.data))
    scores = losses.calibrate_score(cls_prob, iou_prob, phi)
    boxes = out.boxes.data
    batch, n, c = scores.shape
    if top_n is None:
        top_n = min(100, n * c)
    results = []
    for b in range(batch):
        flat = scores[b].reshape(-1)
        order = np.lexsort((np.arange(flat.size), -flat))[:top_n]
        dets = [(float(flat[i]), int(i // c), int(i % c), boxes[b, i // c].copy())
                for i in order]
        results.append(dets)
    return results


# -- persistence -------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: DetectionModel, extra: dict | None = None) -> None:
    """JSON checkpoint: config + named parameter arrays, bit-exact floats."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": {p.name: {"shape": list(p.data.shape),
                            "values": p.data.reshape(-1).tolist(),
                            "trainable": p.trainable}
                   for p in model.params},
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[DetectionModel, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict(payload["config"])
    model = DetectionModel(cfg)
    stored = payload["params"]
    names = set(model.params.names())
    if names != set(stored.keys()):
        missing = names ^ set(stored.keys())
        raise ValueError(f"checkpoint/model param mismatch: {sorted(missing)[:5]}")
    for p in model.params:
        entry = stored[p.name]
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {p.name}")
        p.tensor.data = arr
        p.trainable = bool(entry.get("trainable", True))
    return model, payload.get("extra", {})


# -- analytic multiply-accumulate accounting ---------------------------------

def _attn_macs(tq: int, tk: int, d: int) -> int:
    return tq * d * d + 2 * tk * d * d + 2 * tq * tk * d + tq * d * d


def _ffn_macs(t: int, d: int, d_ff: int) -> int:
    return 2 * t * d * d_ff


def _moe_macs(t: int, d: int, d_ff: int, n_experts: int, k: int) -> int:
    return t * d * n_experts + k * _ffn_macs(t, d, d_ff)


def _heads_macs(n: int, d: int, c: int) -> int:
    return n * d * c * 2 + n * (d * d * 2 + d * 4)


def mac_counts(cfg: ModelConfig, token_counts=(4, 16, 64), mode: str = "train") -> dict:
    """Multiply-accumulate estimate per forward pass (batch of one).

    ``train`` charges every route's compute with shared stages counted
    once, mirroring the decoder's memoization; ``inference`` charges the
    primary chain only.
    """
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be train or inference, got {mode}")
    d, d_ff = cfg.d_model, cfg.d_ff
    total_tokens = int(sum(token_counts))
    enc = 0
    for _ in range(cfg.n_enc_layers):
        enc += _attn_macs(total_tokens, total_tokens, d)
        enc += _ffn_macs(total_tokens, d, d_ff)
        if cfg.moe_scales > 0:
            moe_tokens = int(sum(token_counts[:cfg.moe_scales]))
            enc += _moe_macs(moe_tokens, d, d_ff, cfg.n_experts, cfg.top_k)
    n, m, c = cfg.n_queries, cfg.n_instruction_tokens, cfg.n_classes
    specs = [cfg.primary()] if mode == "inference" else cfg.route_specs
    dec = 0
    heads = 0
    for li in range(cfg.n_dec_layers):
        seen = set()
        streams: dict[str, str] = {}
        for spec in specs:
            sa_key = {"shared": "sa_shared", "instructive": "sa_ins"}.get(
                spec.sa, f"sa_{spec.name}")
            if sa_key not in seen:
                seen.add(sa_key)
                t_sa = m + n if spec.sa == "instructive" else n
                dec += _attn_macs(t_sa, t_sa, d)
            ca_key = (f"ca_{spec.name}" if spec.ca == "independent" else "ca_shared", sa_key)
            if ca_key not in seen:
                seen.add(ca_key)
                dec += _attn_macs(n, total_tokens, d)
            ffn_kind = spec.ffn
            is_moe = li in cfg.moe_decoder_layers and ffn_kind.startswith("moe")
            if not is_moe and ffn_kind.startswith("moe"):
                ffn_kind = "shared-o2o"
            ffn_key = (ffn_kind, ca_key)
            if ffn_key not in seen:
                seen.add(ffn_key)
                if is_moe:
                    dec += _moe_macs(n, d, d_ff, cfg.n_experts, cfg.top_k)
                else:
                    dec += _ffn_macs(n, d, d_ff)
            heads += _heads_macs(n, d, c)
    return {"encoder": enc, "decoder": dec, "heads": heads,
            "total": enc + dec + heads}
