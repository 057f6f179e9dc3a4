import json

import numpy as np
import pytest
import torch

from conceptfuse.concepts import ConceptError
from conceptfuse.pipeline.checkpoint import AdapterCheckpoint, CheckpointError, FusedCheckpoint
from conceptfuse.pipeline.config import ConfigError, RunConfig
from conceptfuse.pipeline.fuse import concept_activations, fuse_model, probe_prompts
from conceptfuse.pipeline.generate import MultiOptions, generate_multi, generate_single
from conceptfuse.pipeline.metrics import (
    MetricReport, clip_t_score, cosine, dino_multi_average, dino_score, embed_backend, f1_score, register_backend,
)
from conceptfuse.pipeline.train import ConceptTrainer, off_mask_attention, train_single
from conceptfuse.testbed.data import BUILTIN_CONCEPTS, make_dataset
from conceptfuse.testbed.sampler import sample
from conceptfuse.fusion import FusionError

PROMPT2 = "a photo of <dogA> and <clockB> on the grass"


def _same_file(a, b):
    # safetensors writes metadata in hash-map order; compare parsed headers and the data section
    import struct
    ra, rb = a.read_bytes(), b.read_bytes()
    na, nb = (struct.unpack("<Q", r[:8])[0] for r in (ra, rb))
    return json.loads(ra[8:8 + na]) == json.loads(rb[8:8 + nb]) and ra[8 + na:] == rb[8 + nb:]


# ---- config ---------------------------------------------------------------------------------

def test_config_roundtrip_and_validation():
    cfg = RunConfig(adapter="lora", rank=8, sama_window=[0.1, 0.9], fusion_mu=1e-3)
    assert RunConfig.from_json(cfg.to_json()) == cfg
    assert cfg.digest() == RunConfig.from_json(cfg.to_json()).digest() != RunConfig().digest()
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict({"lamda_attn": 0.1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"adapter": "ia3"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"sama_window": [0.9, 0.1]})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train_steps": "fifty"})
    with pytest.raises(ConfigError):
        RunConfig.from_json("[1, 2]")
    assert RunConfig.from_dict({"lr": 1}).lr == 1.0


def test_defaults():
    cfg = RunConfig()
    assert (cfg.lambda_attn, cfg.factor, cfg.adapter) == (0.001, 16, "krona_wed")
    assert (cfg.guidance_tau, cfg.guidance_lambda, cfg.phi0) == (0.3, 0.1, 10.0)


# ---- metrics --------------------------------------------------------------------------------

def test_f1_examples():
    assert f1_score(0.682, 0.282) == pytest.approx(0.694, abs=1e-3)
    assert f1_score(0.667, 0.281) == pytest.approx(0.685, abs=1e-3)
    assert f1_score(0, 0.3) == 0
    assert f1_score(0, 0) == 0


def test_dino_average():
    assert dino_multi_average([0.4, 0.5]) == pytest.approx(0.45)
    assert dino_multi_average([0.7]) == 0.7
    assert dino_multi_average([0.1, 0.2, 0.6]) == dino_multi_average([0.6, 0.1, 0.2])
    with pytest.raises(ValueError):
        dino_multi_average([])


def test_stub_backend():
    a = make_dataset(BUILTIN_CONCEPTS["dogA"], 0)
    b = make_dataset(BUILTIN_CONCEPTS["clockB"], 0)
    va, vb = embed_backend(a.images[0]), embed_backend(b.images[0])
    assert np.array_equal(va, embed_backend(a.images[0]))
    assert cosine(va, va) == pytest.approx(1.0)
    assert cosine(va, vb) < 0.99
    assert dino_score(a.images[:2], a.images) > dino_score(a.images[:2], b.images)
    assert 0 <= clip_t_score(list(a.images[:2]), a.prompts[:2]) <= 1
    with pytest.raises(KeyError, match="not registered"):
        embed_backend(a.images[0], "dinov2")
    register_backend("ones", lambda x: np.ones(3))
    assert np.array_equal(embed_backend("x", "ones"), np.ones(3))


def test_report_roundtrip():
    rep = MetricReport({"dogA": 0.45, "clockB": 0.46}, 0.3, notes={"backend": "stub"})
    back = MetricReport.from_text(rep.to_text())
    assert back == rep
    assert back.f1 == f1_score(0.455, 0.3)
    tampered = rep.to_text().replace(f"f1\t{rep.f1!r}", "f1\t0.9")
    with pytest.raises(ValueError, match="F1"):
        MetricReport.from_text(tampered)


# ---- training ---------------------------------------------------------------------------------

def test_trainer_optimizes_exactly_the_declared_set(base):
    tr = ConceptTrainer(RunConfig(), base, make_dataset(BUILTIN_CONCEPTS["dogA"], 0))
    ids = {id(p) for p in tr.trainable()}
    assert id(tr.concept.v_rand) in ids and id(tr.concept.v_class) in ids
    assert all(id(p) in ids for p in tr.image_adapter.parameters())
    for ad in tr.adapters.values():
        assert {id(ad.kron_A), id(ad.kron_B), id(ad.m)} <= ids
    n_expected = 2 + len(list(tr.image_adapter.parameters())) + 3 * len(tr.adapters)
    assert len(ids) == n_expected
    base_params = [p for m in (tr.tb.denoiser, tr.tb.text_encoder, tr.tb.image_encoder)
                   for n, p in m.named_parameters() if p.requires_grad]
    assert all(id(p) in ids for p in base_params)


def test_training_run(trained, base):
    r = trained["dogA"]
    assert len(r.log) == RunConfig().train_steps
    assert set(r.log[0]) >= {"denoise", "w_denoise", "con", "attn", "total"}
    assert r.eval_after < r.eval_before
    assert r.base_hash_before == r.base_hash_after == base.base_hash()
    assert r.checkpoint.kind == "krona_wed" and len(r.checkpoint.layers) == 24


def test_training_requires_masks(base):
    ds = make_dataset(BUILTIN_CONCEPTS["dogA"], 0)
    ds.masks = None
    with pytest.raises(ValueError, match="masks"):
        train_single(RunConfig(train_steps=1), ds, base)


def test_training_is_deterministic(base):
    ds = make_dataset(BUILTIN_CONCEPTS["manC"], 0)
    cfg = RunConfig(train_steps=3)
    a, b = train_single(cfg, ds, base), train_single(cfg, ds, base)
    assert a.log == b.log
    for lid in a.checkpoint.layers:
        for k in a.checkpoint.layers[lid]:
            assert torch.equal(a.checkpoint.layers[lid][k], b.checkpoint.layers[lid][k])


def test_no_ar_configuration(base):
    r = train_single(RunConfig(lambda_attn=0.0, train_steps=2), make_dataset(BUILTIN_CONCEPTS["dogA"], 0), base)
    assert all(row["attn"] == 0 for row in r.log)


# ---- checkpoints ------------------------------------------------------------------------------

def test_adapter_checkpoint_roundtrip(trained, tmp_path):
    ck = trained["dogA"].checkpoint
    ck.save(tmp_path / "a.safetensors")
    back = AdapterCheckpoint.load(tmp_path / "a.safetensors")
    assert (back.kind, back.factor, back.layer_shapes) == (ck.kind, ck.factor, ck.layer_shapes)
    for lid in ck.layers:
        assert ck.layers[lid].keys() == back.layers[lid].keys() == {"kron.A", "kron.B", "m"}
        for k in ck.layers[lid]:
            assert torch.equal(ck.layers[lid][k], back.layers[lid][k])
    assert torch.equal(ck.concepts[0].v_rand, back.concepts[0].v_rand)
    assert all(torch.equal(ck.image_adapter[k], back.image_adapter[k]) for k in ck.image_adapter)
    back.save(tmp_path / "b.safetensors")
    assert _same_file(tmp_path / "a.safetensors", tmp_path / "b.safetensors")
    from safetensors import safe_open
    with safe_open(str(tmp_path / "a.safetensors"), "pt") as fh:
        meta = fh.metadata()
        keys = set(fh.keys())
    assert meta["format_version"] == "1" and meta["f"] == "16"
    assert "down16.attn1.to_q.kron.A" in keys and "concepts.dogA.v_rand" in keys


def test_checkpoint_errors(tmp_path, trained):
    with pytest.raises(CheckpointError):
        AdapterCheckpoint.load(tmp_path / "missing.safetensors")
    trained["dogA"].checkpoint.save(tmp_path / "a.safetensors")
    with pytest.raises(CheckpointError, match="not a fused"):
        FusedCheckpoint.load(tmp_path / "a.safetensors")


def test_materialized_checkpoint_matches_live_adapters(trained, base):
    ck = trained["dogA"].checkpoint
    live, _ = ck.attach(base)
    baked = ck.materialize(base)
    a = sample(live, "a photo of <dogA>", steps=3, seed=1)[-1]
    b = sample(baked, "a photo of <dogA>", steps=3, seed=1)[-1]
    assert torch.allclose(a, b, atol=1e-5)


# ---- fusion on the testbed --------------------------------------------------------------------

def test_concept_activations_contract(trained, base):
    model = trained["dogA"].checkpoint.materialize(base)
    acts = concept_activations(model, ["a photo of <dogA>"], timesteps=2, seed=0)
    assert acts["down16.attn1.to_q"].shape == (32, 2 * 256)
    assert acts["mid8.attn1.to_q"].shape == (64, 2 * 64)
    assert acts["up16.attn2.to_k"].shape == (32, 2 * 16)
    again = concept_activations(model, ["a photo of <dogA>"], timesteps=2, seed=0)
    assert all(torch.equal(acts[k], again[k]) for k in acts)
    assert bool((torch.linalg.vector_norm(acts["down16.attn1.to_q"], dim=0) > 0).all())
    with pytest.raises(FusionError):
        concept_activations(model, [], 2)


def test_fuse_model_report_and_registry(fused):
    assert fused.concept_names == ["dogA", "clockB"]
    assert len(fused.residuals) == 24 and all(len(v) == 2 for v in fused.residuals.values())
    assert all(d.dtype == torch.float64 for d in fused.deltas.values())


def test_fused_checkpoint_roundtrip(fused, tmp_path):
    fused.save(tmp_path / "f.safetensors")
    back = FusedCheckpoint.load(tmp_path / "f.safetensors")
    assert all(torch.equal(fused.deltas[k], back.deltas[k]) for k in fused.deltas)
    assert back.residuals == fused.residuals and back.concept_names == fused.concept_names
    back.save(tmp_path / "g.safetensors")
    assert _same_file(tmp_path / "f.safetensors", tmp_path / "g.safetensors")


def test_single_adapter_fusion_reproduces_generation(trained, base):
    ck = trained["dogA"].checkpoint
    single = fuse_model([ck], base)
    a = sample(ck.materialize(base), "a photo of <dogA> on the snow", steps=4, seed=2)
    b = sample(single.materialize(base), "a photo of <dogA> on the snow", steps=4, seed=2)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_duplicate_concepts_rejected(trained, base):
    with pytest.raises(ConceptError, match="duplicate"):
        fuse_model([trained["dogA"].checkpoint, trained["dogA"].checkpoint], base)


# ---- generation -------------------------------------------------------------------------------

def test_generate_single(trained, base):
    model = trained["dogA"].checkpoint.materialize(base)
    a, _ = generate_single(model, "a photo of <dogA>", seed=1, steps=3)
    b, _ = generate_single(model, "a photo of <dogA>", seed=1, steps=3)
    assert a.dtype == np.uint8 and a.shape == (16, 16, 3) and np.array_equal(a, b)
    with pytest.raises(ConceptError):
        generate_single(model, "a photo of <catZ>", seed=1, steps=2)


def test_init_adapter_generation_equals_base(base):
    from conceptfuse.testbed.model import wrap_adapters
    import copy
    tb = copy.deepcopy(base)
    wrap_adapters(tb.denoiser, "krona_wed", 16)
    a, _ = generate_single(tb, "a photo of a dog", seed=0, steps=4)
    b, _ = generate_single(base, "a photo of a dog", seed=0, steps=4)
    assert np.array_equal(a, b)


@pytest.fixture(scope="module")
def fused_model(fused, base):
    return fused.materialize(base)


def test_disabled_multi_equals_plain_sampling(fused_model):
    opts = MultiOptions(steps=6, sama=False, guidance=False)
    res = generate_multi(fused_model, PROMPT2, seed=3, options=opts)
    plain = sample(fused_model, PROMPT2, steps=6, seed=3)
    assert res.n_reference_branches == 2
    assert all(torch.equal(x, y) for x, y in zip(res.trajectory, plain))


def test_zero_masks_and_zero_phi_are_transparent(fused_model):
    plain = sample(fused_model, PROMPT2, steps=6, seed=3)
    z = generate_multi(fused_model, PROMPT2, 3, MultiOptions(steps=6, guidance=False, mask_override="zeros"))
    assert z.sama_steps and all(torch.equal(x, y) for x, y in zip(z.trajectory, plain))
    p = generate_multi(fused_model, PROMPT2, 3, MultiOptions(steps=6, sama=False, phi0=0.0))
    assert all(torch.equal(x, y) for x, y in zip(p.trajectory, plain))


def test_multi_structure_and_determinism(fused_model, tmp_path):
    one = generate_multi(fused_model, "a photo of <dogA> on the beach", 0, MultiOptions(steps=10))
    assert one.n_reference_branches == 1 and one.concepts == ["dogA"]
    assert one.sama_steps == [2, 3, 4, 5, 6, 7]
    a = generate_multi(fused_model, PROMPT2, 0, MultiOptions(steps=10, dump_dir=tmp_path))
    b = generate_multi(fused_model, PROMPT2, 0, MultiOptions(steps=10))
    assert np.array_equal(a.image, b.image) and a.final_iou == b.final_iou
    assert [r["step"] for r in a.layout_log] == list(range(1, 10))
    assert (tmp_path / "layout_log.txt").exists() and (tmp_path / "step002_mask0.png").exists()
    assert (tmp_path / "vw_stats.txt").read_text().count("\n") == len(a.sama_steps)


def test_sama_changes_the_target(fused_model):
    plain = generate_multi(fused_model, PROMPT2, 0, MultiOptions(steps=10, guidance=False, sama=False))
    sama = generate_multi(fused_model, PROMPT2, 0, MultiOptions(steps=10, guidance=False))
    assert not torch.equal(plain.trajectory[-1], sama.trajectory[-1])
    assert torch.equal(plain.trajectory[2], sama.trajectory[2])


def test_k0_falls_back(fused_model, caplog):
    res = generate_multi(fused_model, "a photo of a dog on the grass", 0, MultiOptions(steps=4))
    assert res.n_reference_branches == 0
    assert "falling back" in caplog.text
    assert torch.equal(res.trajectory[-1], sample(fused_model, "a photo of a dog on the grass", 4, 0)[-1])


def test_one_guided_step_decreases_layout_loss(fused_model):
    from conceptfuse.layout import guidance_step, layout_loss, refine_activation
    from conceptfuse.objectives import AttentionMapSet
    from conceptfuse.pipeline.generate import _concept_maps
    from conceptfuse.testbed.sampler import NoiseSchedule, initial_latent
    tb = fused_model
    spec = tb.registry.bind(PROMPT2)
    refs = tb.registry.extract_concept_tokens(spec)
    ctx, _ = tb.context([spec])
    s = NoiseSchedule()
    ts = s.timesteps(20)

    def maps_at(z, t):
        m = AttentionMapSet()
        tb.denoiser(z, torch.tensor(t), ctx, {"cross_attn": m.hook})
        return [refine_activation(x, 0.1, 0.3) for x in _concept_maps(m, refs)]

    z = initial_latent(0)
    with torch.no_grad():
        anchors = [a.detach() for a in maps_at(z, ts[0])]
        z = s.ddim_step(z, tb.denoiser(z, torch.tensor(ts[0]), ctx), ts[0], ts[1])
    zr = z.clone().requires_grad_(True)
    loss = layout_loss(maps_at(zr, ts[1]), anchors)
    (g,) = torch.autograd.grad(loss, zr)
    with torch.no_grad():
        after = layout_loss(maps_at(guidance_step(z, g, 1.0), ts[1]), anchors)
    assert float(after) < float(loss.detach())


def test_off_mask_attention_probe(trained, base):
    ds = make_dataset(BUILTIN_CONCEPTS["dogA"], 0)
    v = off_mask_attention(trained["dogA"].model, ds, "a photo of <dogA> on the street")
    assert v > 0 and v == off_mask_attention(trained["dogA"].model, ds, "a photo of <dogA> on the street")
    with pytest.raises(ValueError):
        off_mask_attention(trained["dogA"].model, ds, "a photo of a dog")
