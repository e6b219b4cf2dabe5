import dataclasses

import numpy as np
import pytest

from rgbdfuse import tensor as T
from rgbdfuse.data import SceneConfig, generate_dataset
from rgbdfuse.errors import ConfigurationError, ContractError, DimensionError, TrainingError
from rgbdfuse.model import (FUSION_KINDS, ROUTING_DESIGNS, Model, ModelConfig, backbone_forward, batch_inputs,
                            canonical_kind, decode_predictions, init_params, load_checkpoint, normalize_inputs,
                            pool_mask, route_features, targets_for, upsample_bilinear)
from rgbdfuse.tensor import Tensor
from rgbdfuse.train import Adam, TrainConfig, batch_loss, train

SMALL_SCENE = SceneConfig(height=32, width=32, min_size=8, max_size=14, min_instances=1, max_instances=2,
                          min_visible_pixels=12)


def small_cfg(**kw) -> ModelConfig:
    base = dict(input_size=(32, 32), blocks=((8, 2), (16, 2), (16, 1), (16, 1)), num_queries=4, hidden_dim=16)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(SMALL_SCENE, 4, 3)


def test_config_aliases_and_validation():
    assert canonical_kind("rgb-only") == "none" and canonical_kind("cdf-only") == "cdf"
    assert ModelConfig(fusion_kind="iam-only").fusion_kind == "iam"
    with pytest.raises(ConfigurationError):
        ModelConfig(fusion_kind="mystery")
    with pytest.raises(ConfigurationError):
        ModelConfig(routing_design="E")
    with pytest.raises(ConfigurationError):
        ModelConfig(insertion_mask=(True, False))
    cfg = small_cfg(fusion_kind="cdf", routing_design="D")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_feature_grid():
    assert ModelConfig().feature_size == (16, 16)
    assert small_cfg().feature_size == (8, 8)


def test_none_ignores_depth(scenes):
    model = Model(small_cfg(fusion_kind="none"))
    assert not any(k.startswith("depth.") for k in model.params)
    a = model(scenes).prediction
    noisy = [dataclasses.replace(s, depth=np.random.default_rng(0).integers(0, 65535, s.depth.shape).astype(np.uint16))
             for s in scenes]
    b = model(noisy).prediction
    for x, y in ((a.class_logits, b.class_logits), (a.boxes, b.boxes), (a.mask_logits, b.mask_logits)):
        assert np.array_equal(x.data, y.data)


def test_none_is_single_stream(scenes):
    cfg = small_cfg(fusion_kind="none")
    params = init_params(cfg)
    x, d = batch_inputs(scenes, cfg)
    bb = backbone_forward(x, d, cfg, params)
    f = x
    for i, (_, stride) in enumerate(cfg.blocks):
        f = T.relu(T.conv2d(f, params[f"rgb.s{i + 1}.w"], params[f"rgb.s{i + 1}.b"], stride, 1))
    assert np.array_equal(bb.f_rgb.data, f.data) and bb.f_agg is bb.f_rgb
    assert all(s is None for s in bb.depth_stages)


def test_zeroed_gates_scale_streams_by_three_quarters(scenes):
    cfg = small_cfg(fusion_kind="iam+cdf")
    params = init_params(cfg)
    for k in params:
        if ".cdf.w_gate" in k or ".cdf.b_gate" in k:
            params[k] = Tensor(np.zeros(params[k].shape))
    x, d = batch_inputs(scenes, cfg)
    bb = backbone_forward(x, d, cfg, params)
    fr, fd = x, d
    for i, (_, stride) in enumerate(cfg.blocks):
        fr = T.relu(T.conv2d(fr, params[f"rgb.s{i + 1}.w"], params[f"rgb.s{i + 1}.b"], stride, 1))
        fd = T.relu(T.conv2d(fd, params[f"depth.s{i + 1}.w"], params[f"depth.s{i + 1}.b"], stride, 1))
        if i >= 1:
            fr, fd = fr * 0.75, fd * 0.75
        np.testing.assert_allclose(bb.rgb_stages[i].data, fr.data, rtol=0, atol=1e-13)
        np.testing.assert_allclose(bb.depth_stages[i].data, fd.data, rtol=0, atol=1e-13)


def test_forward_is_deterministic(scenes):
    cfg = small_cfg()
    a = Model(cfg)(scenes)
    b = Model(cfg)(scenes)
    assert np.array_equal(a.prediction.mask_logits.data, b.prediction.mask_logits.data)
    for sa, sb in zip(a.backbone.rgb_stages, b.backbone.rgb_stages):
        assert np.array_equal(sa.data, sb.data)


@pytest.mark.parametrize("kind", FUSION_KINDS)
def test_every_kind_produces_valid_outputs(kind, scenes):
    cfg = small_cfg(fusion_kind=kind)
    pred = Model(cfg)(scenes[:2]).prediction
    assert pred.class_logits.shape == (2, 4, 3)
    assert pred.mask_logits.shape == (2, 4, 8, 8)
    b = pred.boxes.data
    assert ((b >= 0) & (b <= 1)).all() and np.isfinite(pred.mask_logits.data).all()


@pytest.mark.parametrize("mask", [(True, False, False), (False, False, True), (False, True, False)])
def test_partial_insertion(mask, scenes):
    cfg = small_cfg(fusion_kind="iam", insertion_mask=mask)
    out = Model(cfg)(scenes[:1])
    assert sorted(out.backbone.agg_stages) == [i + 1 for i, on in enumerate(mask) if on]


def test_routing_table():
    a, b = Tensor(np.zeros((1, 2, 2, 2)), tag="f_rgb"), Tensor(np.ones((1, 2, 2, 2)), tag="f_agg")
    assert route_features("C", a, b) == (a, b)
    assert route_features("A", a, b) == (b, b)
    assert route_features("B", a, b) == (b, a)
    assert route_features("D", a, b) == (a, a)
    with pytest.raises(ContractError):
        route_features("Z", a, b)
    with pytest.raises(DimensionError):
        route_features("C", a, Tensor(np.zeros((1, 3, 2, 2))))


def test_routing_equivalent_when_maps_coincide():
    a = Tensor(np.zeros((1, 2, 2, 2)))
    assert all(route_features(dz, a, a) == (a, a) for dz in ROUTING_DESIGNS)


@pytest.mark.parametrize("design,tags", [("A", ("f_agg", "f_agg")), ("B", ("f_agg", "f_rgb")),
                                         ("C", ("f_rgb", "f_agg")), ("D", ("f_rgb", "f_rgb"))])
def test_routing_provenance(design, tags, scenes):
    out = Model(small_cfg(routing_design=design))(scenes[:1])
    assert (out.prediction.meta["det_tag"], out.prediction.meta["seg_tag"]) == tags
    assert (out.prediction.aux_mask_logits is not None) == (design == "D")


def test_design_d_adds_auxiliary_loss(scenes):
    cfg = small_cfg(routing_design="D")
    model = Model(cfg)
    _, comps = batch_loss(model, model.params, scenes[:2], TrainConfig().weights)
    assert comps["aux"] > 0


def test_input_size_mismatch(scenes):
    with pytest.raises(DimensionError):
        Model(ModelConfig())(scenes[:1])


def test_normalisation_and_pooling():
    rgb = np.full((2, 2, 3), 255, dtype=np.uint8)
    x, d = normalize_inputs(rgb, np.full((2, 2), 6000, dtype=np.uint16), 12000.0)
    assert x.shape == (3, 2, 2) and (x == 2.0).all() and d.shape == (1, 2, 2) and (d == 0.0).all()
    m = np.zeros((4, 4), dtype=bool)
    m[:2, :1] = True
    assert pool_mask(m, (2, 2)).tolist() == [[0.5, 0.0], [0.0, 0.0]]


def test_targets(scenes):
    cfg = small_cfg()
    t = targets_for(scenes[0], cfg)
    assert len(t) == len(scenes[0].instance_masks)
    assert t.masks.shape[1:] == (8, 8) and set(t.labels) <= {0, 1}


def test_upsample_constant_and_identity(rng):
    x = rng.normal(size=(2, 4, 4))
    np.testing.assert_allclose(upsample_bilinear(x, 4, 4), x, atol=1e-15)
    np.testing.assert_allclose(upsample_bilinear(np.full((1, 3, 3), 2.5), 12, 12), 2.5, atol=1e-15)


def test_decode_shapes(scenes):
    cfg = small_cfg()
    dets = decode_predictions(Model(cfg)(scenes[:2]).prediction, cfg)
    assert len(dets) == 2
    d = dets[0]
    assert d.masks.shape == (4, 32, 32) and d.masks.dtype == bool
    assert ((d.scores > 0) & (d.scores < 1)).all() and set(d.categories) <= {1, 2}


def test_checkpoint_round_trip(tmp_path, scenes):
    cfg = small_cfg(fusion_kind="cdf", routing_design="D", seed=5)
    model = Model(cfg)
    model.save(tmp_path / "ck")
    cfg2, params = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg and sorted(params) == sorted(model.params)
    assert all(np.array_equal(params[k].data, model.params[k].data) for k in params)
    again = Model.load(tmp_path / "ck")
    assert np.array_equal(again(scenes[:1]).prediction.mask_logits.data, model(scenes[:1]).prediction.mask_logits.data)


def test_checkpoint_rejects_wrong_params():
    cfg = small_cfg()
    params = init_params(cfg)
    params.pop("head.query")
    with pytest.raises(ConfigurationError):
        Model(cfg, params)


def test_adam_zero_lr_keeps_parameters():
    p = {"w": Tensor(np.ones(3), requires_grad=True)}
    opt = Adam(p)
    out = opt.step(p, {"w": np.ones(3)}, 0.0)
    assert out["w"] is p["w"]


def test_lr_schedule():
    t = TrainConfig(epochs=30, lr=1e-3)
    assert t.lr_at(0) == 1e-3 and t.lr_at(19) == 1e-3
    assert abs(t.lr_at(20) - 1e-4) < 1e-18


def test_train_with_zero_lr_leaves_parameters(scenes):
    cfg = small_cfg()
    r = train(cfg, scenes, None, TrainConfig(epochs=2, lr=0.0, batch_size=2), log=lambda m: None)
    ref = init_params(cfg)
    assert all(np.array_equal(r.model.params[k].data, ref[k].data) for k in ref)


def test_overfit_single_sample(scenes):
    cfg = small_cfg(fusion_kind="iam+cdf")
    one = [scenes[0]]
    r = train(cfg, one, None, TrainConfig(epochs=150, lr=3e-3, batch_size=1, decay_at=0.9), log=lambda m: None)
    losses = [row["loss"] for row in r.trace]
    assert losses[-1] < 0.1 * losses[0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_same_seed_same_trace(scenes, tmp_path):
    cfg = small_cfg()
    t = TrainConfig(epochs=2, batch_size=2, seed=4)
    a = train(cfg, scenes, scenes[:2], t, out_dir=tmp_path / "a", log=lambda m: None)
    b = train(cfg, scenes, scenes[:2], t, out_dir=tmp_path / "b", log=lambda m: None)
    assert a.trace_csv() == b.trace_csv()
    for name in ("trace.csv", "report.json", "checkpoint/manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "trace.csv").read_text().splitlines()[0]
    assert header == "epoch,loss,cls,l1,giou,dice,bce,aux,lr,ap_seg50,ap_det50"


def test_nan_loss_aborts_with_diagnostics(scenes, monkeypatch):
    import rgbdfuse.train as tr

    real = tr.batch_loss

    def poisoned(*a, **k):
        loss, comps = real(*a, **k)
        return loss * float("nan"), comps

    monkeypatch.setattr(tr, "batch_loss", poisoned)
    with pytest.raises(TrainingError) as err:
        train(small_cfg(), scenes, None, TrainConfig(epochs=1, batch_size=2), log=lambda m: None)
    diag = err.value.args[1] if len(err.value.args) > 1 else getattr(err.value, "diagnostics", None)
    assert diag["epoch"] == 1 and diag["batch"] == 0 and "cls" in diag["components"]


def test_empty_training_set():
    with pytest.raises(ContractError):
        train(small_cfg(), [], None, TrainConfig(epochs=1), log=lambda m: None)
