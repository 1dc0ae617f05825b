import numpy as np
import pytest

from multiroute import autodiff as ad
from multiroute import losses
from multiroute.autodiff import ParamSet, Tensor
from multiroute.data import GenConfig, generate_dataset
from multiroute.model import (
    ConfigError,
    DetectionModel,
    EncoderLayer,
    ModelConfig,
    MultiHeadAttention,
    RouteSpec,
    Trace,
    default_moe_layers,
    inference_forward,
    load_checkpoint,
    mac_counts,
    moe_block,
    save_checkpoint,
    topk_mask,
)

MRDETR_SPECS = [
    RouteSpec("route1", ffn="independent-o2m", target="o2m"),
    RouteSpec("route2"),
    RouteSpec("route3", sa="instructive", target="o2m"),
]

MRDETRPP_SPECS = [
    RouteSpec("route1", ffn="moe-gate-independent", target="o2m"),
    RouteSpec("route2", ffn="moe-gate-shared"),
    RouteSpec("route3", sa="instructive", ffn="moe-gate-shared", target="o2m"),
]


def tiny_config(specs, **kw):
    base = dict(d_model=8, n_heads=2, d_ff=16, n_enc_layers=1, n_dec_layers=2,
                n_queries=6, n_classes=3, n_instruction_tokens=3)
    base.update(kw)
    return ModelConfig(route_specs=specs, **base)


def batch_images(n, seed=3):
    scenes = generate_dataset(seed, n, GenConfig())
    return np.stack([s.image for s in scenes]), [(s.boxes, s.labels) for s in scenes]


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(top_k=5, n_experts=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(moe_scales=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(route_specs=[RouteSpec("a", target="o2m")]).validate()
    with pytest.raises(ConfigError):
        ModelConfig(route_specs=[RouteSpec("a"), RouteSpec("b")]).validate()
    with pytest.raises(ConfigError):
        ModelConfig(route_specs=[RouteSpec("a", sa="independent")]).validate()
    with pytest.raises(ConfigError):
        tiny_config(MRDETRPP_SPECS).validate()  # moe specs need moe layers
    cfg = tiny_config(MRDETR_SPECS, n_instruction_tokens=0)
    cfg.validate()  # model-level: m=0 degrades instructive SA to plain SA
    with pytest.raises(ConfigError):
        cfg.validate(require_instruction_tokens=True)


def test_config_roundtrip():
    cfg = tiny_config(MRDETRPP_SPECS, moe_decoder_layers=default_moe_layers(2))
    back = ModelConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_attention_matches_dense_reference():
    params = ParamSet()
    rng = np.random.default_rng(0)
    attn = MultiHeadAttention(params, "t", d_model=2, n_heads=1, rng=rng)
    wq, wk, wv, wo = (np.array([[0.3, -0.2], [0.5, 0.4]]),
                      np.array([[0.1, 0.7], [-0.3, 0.2]]),
                      np.array([[0.9, 0.0], [0.2, -0.5]]),
                      np.array([[1.0, 0.3], [-0.4, 0.8]]))
    for lin, w in zip((attn.q_proj, attn.k_proj, attn.v_proj, attn.out_proj),
                      (wq, wk, wv, wo)):
        lin.w.tensor.data[:] = w
        lin.b.tensor.data[:] = 0.0
    x = np.array([[[0.6, -1.1], [0.2, 0.9]]])  # one instruction row + one query row
    out = attn(Tensor(x), Tensor(x), Tensor(x)).data

    q, k, v = x[0] @ wq, x[0] @ wk, x[0] @ wv
    scores = q @ k.T / np.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    ref = (probs @ v) @ wo
    assert np.allclose(out[0], ref, atol=1e-12)


def test_instructive_rows_dropped_and_m0_degenerates():
    cfg = tiny_config(MRDETR_SPECS)
    model = DetectionModel(cfg, init_seed=5)
    images, _ = batch_images(2)
    outs = model.forward_train(images)
    for layer in outs:
        assert layer["route3"].queries.shape == (2, cfg.n_queries, cfg.d_model)

    cfg0 = tiny_config(MRDETR_SPECS, n_instruction_tokens=0)
    model0 = DetectionModel(cfg0, init_seed=5)
    outs0 = model0.forward_train(images)
    for layer in outs0:
        assert np.array_equal(layer["route3"].queries.data, layer["route2"].queries.data)
        assert np.array_equal(layer["route3"].cls_logits.data, layer["route2"].cls_logits.data)
        assert np.array_equal(layer["route3"].boxes.data, layer["route2"].boxes.data)


def test_m0_bitwise_in_moe_preset():
    cfg = tiny_config(MRDETRPP_SPECS, n_instruction_tokens=0,
                      moe_decoder_layers=default_moe_layers(2))
    model = DetectionModel(cfg, init_seed=6)
    images, _ = batch_images(2)
    outs = model.forward_train(images)
    for layer in outs:
        assert np.array_equal(layer["route3"].queries.data, layer["route2"].queries.data)


def test_instructive_attention_rows_are_distributions():
    cfg = tiny_config(MRDETR_SPECS)
    model = DetectionModel(cfg, init_seed=7)
    images, _ = batch_images(2)
    trace = Trace()
    model.forward_train(images, trace=trace)
    assert sorted(trace.ins_attention.keys()) == [0, 1]
    m, n = cfg.n_instruction_tokens, cfg.n_queries
    for layer, recs in trace.ins_attention.items():
        for probs in recs:
            assert probs.shape[-2:] == (m + n, m + n)
            assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_moe_scalar_hand_case():
    # experts e_i(x) = i * x at x = 1, gate logits (2, 1, 0, -1), k = 2
    x = Tensor(np.array([1.0]))
    gate = lambda t: Tensor(np.array([2.0, 1.0, 0.0, -1.0]))
    experts = [lambda t, i=i: ad.mul(t, float(i)) for i in range(4)]
    out = moe_block(x, gate, experts, k=2)
    weights = np.exp([2.0, 1.0, 0.0, -1.0])
    weights /= weights.sum()
    assert np.isclose(out.data[0], weights[1] * 1.0, atol=1e-12)
    assert np.isclose(out.data[0], 0.2369, atol=5e-5)


def test_moe_k_equals_t_is_dense():
    rng = np.random.default_rng(8)
    params = ParamSet()
    from multiroute.model import ExpertBank, Linear

    bank = ExpertBank(params, "bank", 6, 12, 4, rng)
    gate = Linear(params, "gate", 6, 4, rng)
    x = Tensor(rng.normal(size=(2, 5, 6)))
    sparse = moe_block(x, gate, bank, k=4)
    logits = gate(x)
    w = ad.softmax(logits, axis=-1)
    dense = None
    for i, e in enumerate(bank):
        term = ad.mul(e(x), ad.narrow(w, 2, i, 1))
        dense = term if dense is None else ad.add(dense, term)
    assert np.allclose(sparse.data, dense.data, atol=1e-12)


def test_moe_uniform_gate_tie_break():
    mask = topk_mask(np.full((3, 4), 0.25), k=2)
    assert np.array_equal(mask, np.tile([True, True, False, False], (3, 1)))


def test_moe_selected_count_is_k():
    rng = np.random.default_rng(9)
    mask = topk_mask(rng.random((7, 11, 5)), k=3)
    assert np.all(mask.sum(axis=-1) == 3)


def test_scale_aware_encoder_tail_bit_equality():
    cfg = tiny_config(MRDETR_SPECS, moe_scales=1)
    params = ParamSet()
    rng = np.random.default_rng(10)
    layer = EncoderLayer(params, "enc", cfg, rng)
    sizes = [4, 16, 64]
    x = Tensor(rng.normal(size=(2, sum(sizes), cfg.d_model)))
    with_moe = layer(x, sizes, eta=1)
    plain = layer(x, sizes, eta=0)
    head = sizes[0]
    assert np.array_equal(with_moe.data[:, head:], plain.data[:, head:])
    assert not np.array_equal(with_moe.data[:, :head], plain.data[:, :head])


def test_mac_ordering_and_inference_parity():
    # eta ordering on a four-scale pyramid
    base = dict(route_specs=[RouteSpec("primary")], n_experts=4, top_k=2)
    counts = [4, 16, 64, 256]
    eta1 = mac_counts(ModelConfig(moe_scales=1, **base), token_counts=counts)
    eta4 = ModelConfig(moe_scales=3, **base)  # accountant reads the field directly
    eta4.moe_scales = 4
    eta4_macs = mac_counts(eta4, token_counts=counts)
    assert eta1["total"] < eta4_macs["total"]

    multi = ModelConfig(route_specs=MRDETR_SPECS)
    baseline = ModelConfig(route_specs=[RouteSpec("route2")])
    assert mac_counts(multi, mode="inference") == mac_counts(baseline, mode="train")
    assert mac_counts(multi, mode="train")["total"] > mac_counts(multi, mode="inference")["total"]


def test_parameter_sharing_identities():
    cfg = tiny_config(MRDETR_SPECS)
    model = DetectionModel(cfg, init_seed=11)
    images, _ = batch_images(2)
    before = {name: out.queries.data.copy()
              for name, out in model.forward_train(images)[-1].items()}

    model.params["dec0.sa.q.w"].tensor.data[0, 0] += 0.5  # shared SA touches every route
    after = {name: out.queries.data for name, out in model.forward_train(images)[-1].items()}
    for name in before:
        assert not np.array_equal(before[name], after[name])

    base = {name: out.queries.data.copy()
            for name, out in model.forward_train(images)[-1].items()}
    model.params["dec1.ffn_o2m.lin1.w"].tensor.data[0, 0] += 0.5  # only route1's path
    after = {name: out.queries.data for name, out in model.forward_train(images)[-1].items()}
    assert not np.array_equal(base["route1"], after["route1"])
    assert np.array_equal(base["route2"], after["route2"])
    assert np.array_equal(base["route3"], after["route3"])

    base = {name: out.queries.data.copy()
            for name, out in model.forward_train(images)[-1].items()}
    model.params["dec1.instruction"].tensor.data[0, 0] += 0.5  # only route3's path
    after = {name: out.queries.data for name, out in model.forward_train(images)[-1].items()}
    assert np.array_equal(base["route1"], after["route1"])
    assert np.array_equal(base["route2"], after["route2"])
    assert not np.array_equal(base["route3"], after["route3"])

    # earlier layers' instruction tokens only reach that layer's own branch:
    # the propagated query stream is the primary route's output
    base_layers = [{n: o.queries.data.copy() for n, o in layer.items()}
                   for layer in model.forward_train(images)]
    model.params["dec0.instruction"].tensor.data[0, 0] += 0.5
    after_layers = [{n: o.queries.data for n, o in layer.items()}
                    for layer in model.forward_train(images)]
    assert not np.array_equal(base_layers[0]["route3"], after_layers[0]["route3"])
    assert np.array_equal(base_layers[0]["route2"], after_layers[0]["route2"])
    assert np.array_equal(base_layers[1]["route3"], after_layers[1]["route3"])


def test_heads_shared_and_sigmoid_box():
    cfg = tiny_config(MRDETR_SPECS)
    model = DetectionModel(cfg, init_seed=12)
    model.params["head.box3.w"].tensor.data[:] = 0.0
    model.params["head.box3.b"].tensor.data[:] = 0.0
    images, _ = batch_images(2)
    outs = model.forward_train(images)
    assert np.allclose(outs[-1]["route2"].boxes.data, 0.5, atol=1e-15)

    rng = np.random.default_rng(0)
    q = Tensor(rng.normal(size=(1, cfg.n_queries, cfg.d_model)))
    a, b = model.heads(q), model.heads(q)
    assert np.array_equal(a.cls_logits.data, b.cls_logits.data)

    model2 = DetectionModel(cfg, init_seed=13)
    outs2 = model2.forward_train(images)
    boxes = outs2[-1]["route1"].boxes.data
    assert np.all(boxes > 0) and np.all(boxes < 1)


def test_inference_equals_primary_training_path():
    for specs, extra in ((MRDETR_SPECS, {}),
                         (MRDETRPP_SPECS, dict(moe_scales=1,
                                               moe_decoder_layers=default_moe_layers(2)))):
        cfg = tiny_config(specs, **extra)
        model = DetectionModel(cfg, init_seed=14)
        images, _ = batch_images(3)
        train_out = model.forward_train(images)[-1]["route2"]
        infer_out = model.forward_primary(images)
        assert np.max(np.abs(train_out.cls_logits.data - infer_out.cls_logits.data)) <= 1e-12
        assert np.max(np.abs(train_out.boxes.data - infer_out.boxes.data)) <= 1e-12
        assert np.max(np.abs(train_out.iou_logits.data - infer_out.iou_logits.data)) <= 1e-12


def test_inference_phi_one_ranks_by_class_score():
    cfg = tiny_config(MRDETR_SPECS)
    model = DetectionModel(cfg, init_seed=15)
    images, _ = batch_images(1)
    out = model.forward_primary(images)
    cls_prob = 1.0 / (1.0 + np.exp(-out.cls_logits.data[0]))
    dets = inference_forward(model, images, phi=1.0, top_n=5)[0]
    flat = cls_prob.reshape(-1)
    order = np.lexsort((np.arange(flat.size), -flat))[:5]
    got = [(q, c) for _, q, c, _ in dets]
    want = [(int(i // cfg.n_classes), int(i % cfg.n_classes)) for i in order]
    assert got == want


def test_route2_only_loss_leaves_aux_params_untouched():
    cfg = tiny_config(MRDETRPP_SPECS, moe_scales=0,
                      moe_decoder_layers=default_moe_layers(2))
    model = DetectionModel(cfg, init_seed=16)
    images, gts = batch_images(2)
    outs = model.forward_train(images)
    weights = losses.LossWeights(lambda_aux=0.0)
    loss, _, _ = losses.multi_route_loss(outs, gts, cfg.route_specs, weights,
                                         losses.AssignerConfig())
    model.params.zero_grad()
    grads = ad.backward(loss, list(model.params))
    for name, g in grads.items():
        if "instruction" in name or "gate_indep" in name or "ffn_o2m" in name:
            assert np.all(g == 0.0), name
    # primary path parameters do receive gradient
    assert np.any(grads["dec0.sa.q.w"] != 0)
    assert np.any(grads["dec1.gate.w"] != 0)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = tiny_config(MRDETRPP_SPECS, moe_scales=1,
                      moe_decoder_layers=default_moe_layers(2))
    model = DetectionModel(cfg, init_seed=17)
    rng = np.random.default_rng(0)
    for p in model.params:
        p.tensor.data += rng.normal(scale=0.01, size=p.data.shape)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, model, extra={"note": "test"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "test"}
    assert loaded.cfg == cfg
    for p in model.params:
        assert np.array_equal(p.data, loaded.params[p.name].data), p.name
    images, _ = batch_images(2)
    a = model.forward_primary(images)
    b = loaded.forward_primary(images)
    assert np.array_equal(a.cls_logits.data, b.cls_logits.data)


def test_tiny_model_grad_check():
    cfg = tiny_config(MRDETR_SPECS, n_dec_layers=1, n_enc_layers=1, n_queries=4,
                      n_instruction_tokens=2)
    model = DetectionModel(cfg, init_seed=18)
    images, gts = batch_images(1)
    outs = model.forward_train(images)
    plan = losses.build_plan(outs, gts, cfg.route_specs, losses.AssignerConfig())
    weights = losses.LossWeights()

    def f():
        outs = model.forward_train(images)
        loss, _, _ = losses.multi_route_loss(outs, gts, cfg.route_specs, weights,
                                             losses.AssignerConfig(), plan=plan)
        return loss

    err = ad.grad_check(f, list(model.params), eps=1e-5, max_coords_per_param=2, seed=0)
    assert err <= 1e-4
