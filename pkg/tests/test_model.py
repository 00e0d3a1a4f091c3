import json

import numpy as np
import pytest
import torch

from olivia.errors import ValidationError
from olivia.model import (
    ModelConfig,
    Olivia,
    Stage,
    TUNE_GROUPS,
    forward,
    init_params,
    param_group,
    patchify_embed,
    set_stage,
    state_arrays,
)
from olivia.training import loss, tiny_config


def small(**kw):
    base = dict(T=16, patch_len=4, d=8, H=2, P=4, M=2, enc_layers=1, dec_layers=1, K=4, horizons=[3, 5])
    base.update(kw)
    return ModelConfig(**base)


def identity_model(T=8, patch=4, instance_norm=False):
    cfg = ModelConfig(T=T, patch_len=patch, d=patch, H=1, P=patch, M=1, enc_layers=1, dec_layers=1, K=0,
                      horizons=[2], gamma_init=0.0, instance_norm=instance_norm)
    m = Olivia(cfg)
    with torch.no_grad():
        m.patch_embed.weight.copy_(torch.eye(patch))
        m.patch_embed.bias.zero_()
        m.pos_embed.zero_()
        for block in [*m.encoder, *m.decoder]:
            block.fc2.weight.zero_()
            block.fc2.bias.zero_()
        m.recon_head.weight.copy_(torch.eye(T))
        m.recon_head.bias.zero_()
    return m


def test_init_deterministic():
    a, b = state_arrays(init_params(small())), state_arrays(init_params(small()))
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = state_arrays(init_params(small(seed=1)))
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_reference_scale_defaults_accepted():
    cfg = ModelConfig()
    assert (cfg.T, cfg.patch_len, cfg.d, cfg.H, cfg.K) == (512, 64, 256, 16, 256)
    assert cfg.L == 8 and cfg.resonators == 2
    m = Olivia(ModelConfig(enc_layers=1, dec_layers=0, K=2, horizons=[96]))
    assert tuple(m.pos_embed.shape) == (8, 256)


@pytest.mark.parametrize("kw", [dict(T=10, patch_len=4), dict(d=6), dict(K=-1), dict(M=9, T=16, patch_len=2, d=8),
                                dict(horizons=[0]), dict(K=3), dict(attention="linear")])
def test_invalid_configs(kw):
    base = dict(T=16, patch_len=4, d=8, H=2, P=4, M=2, K=4)
    base.update(kw)
    with pytest.raises(ValidationError):
        ModelConfig(**base)


def test_config_json(tmp_path):
    cfg = small()
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_json()))
    assert ModelConfig.load(p) == cfg
    p.write_text(json.dumps({**cfg.to_json(), "dropout": 0.1}))
    with pytest.raises(ValidationError, match="dropout"):
        ModelConfig.load(p)


def test_patchify_by_hand():
    cfg = ModelConfig(T=4, patch_len=2, d=2, H=1, P=2, M=1, enc_layers=0, dec_layers=0, K=0, horizons=[1])
    m = Olivia(cfg)
    with torch.no_grad():
        m.patch_embed.weight.copy_(torch.tensor([[1.0, 2.0], [3.0, 4.0]]))
        m.patch_embed.bias.copy_(torch.tensor([0.5, -0.5]))
        m.pos_embed.copy_(torch.tensor([[0.0, 1.0], [1.0, 0.0]]))
    out = patchify_embed([1.0, 2.0, 3.0, 4.0], m)
    # [1,2] -> [5,11] + b + pos0 ; [3,4] -> [11,25] + b + pos1
    np.testing.assert_allclose(out.detach().numpy(), [[5.5, 11.5], [12.5, 24.5]], atol=1e-14)
    m2 = Olivia(ModelConfig(T=8, patch_len=4, d=4, H=1, P=4, M=1, enc_layers=0, dec_layers=0, K=0, horizons=[1]))
    with torch.no_grad():
        m2.patch_embed.bias.zero_()
        m2.pos_embed.zero_()
    assert patchify_embed(torch.zeros(8), m2).shape == (2, 4)
    assert torch.all(patchify_embed(torch.zeros(8), m2) == 0)


def test_identity_configuration_passes_through(rng):
    m = identity_model()
    x = torch.from_numpy(rng.normal(size=(3, 8)) * 5)
    out = forward(x, m, Stage.PRETRAIN)
    assert "forecasts" not in out
    assert torch.max(torch.abs(out["x_hat"] - x)) < 1e-10


def test_constant_input_with_instance_norm():
    m = identity_model(instance_norm=True)
    x = torch.full((8,), 3.25)
    out = m(x, Stage.PRETRAIN)
    assert torch.max(torch.abs(out["x_hat"] - 3.25)) < 1e-8


def test_output_contract_and_finiteness(rng):
    m = init_params(small())
    x = torch.from_numpy(rng.uniform(-10, 10, size=(4, 16)))
    out = m(x, Stage.TUNE)
    assert out["x_hat"].shape == (4, 16)
    assert {h: tuple(f.shape) for h, f in out["forecasts"].items()} == {3: (4, 3), 5: (4, 5)}
    assert all(torch.isfinite(t).all() for t in [out["x_hat"], *out["forecasts"].values()])
    single = m(x[0], Stage.INFER)
    assert single["x_hat"].shape == (16,)
    np.testing.assert_allclose(single["x_hat"].detach().numpy(), out["x_hat"][0].detach().numpy(), atol=1e-12)
    with pytest.raises(ValidationError):
        m(torch.zeros(15), Stage.PRETRAIN)


def test_forward_deterministic(rng):
    x = torch.from_numpy(rng.normal(size=(2, 16)))
    a = init_params(small())(x, Stage.TUNE)
    b = init_params(small())(x, Stage.TUNE)
    assert torch.equal(a["x_hat"], b["x_hat"])
    assert all(torch.equal(a["forecasts"][h], b["forecasts"][h]) for h in a["forecasts"])


def test_full_attention_variant_runs():
    m = init_params(small(attention="full"))
    assert torch.isfinite(m(torch.randn(2, 16, dtype=torch.float64), Stage.TUNE)["x_hat"]).all()


def test_set_stage_name_sets():
    m = init_params(small())
    set_stage(m, Stage.TUNE)
    expected = {n for n, _ in m.named_parameters() if param_group(n) in TUNE_GROUPS}
    assert set(m.trainable_names()) == expected
    assert expected == {"harmonizer.vectors", "pred_heads.3.weight", "pred_heads.3.bias",
                        "pred_heads.5.weight", "pred_heads.5.bias"}
    set_stage(m, Stage.INFER)
    assert m.trainable_names() == []
    set_stage(m, Stage.PRETRAIN)
    assert len(m.trainable_names()) == len(list(m.parameters()))


def test_groups_cover_every_parameter():
    m = init_params(small())
    groups = m.groups()
    names = [n for g in groups.values() for n in g]
    assert sorted(names) == sorted(n for n, _ in m.named_parameters())
    assert groups["gammas"] == ["encoder.0.attn.gamma", "decoder.0.attn.gamma"]


def test_frozen_groups_receive_no_gradient(rng):
    m = set_stage(init_params(small(householder_init="random")), Stage.TUNE)
    rows = torch.from_numpy(rng.normal(size=(3, 21)))
    batch = {"x": rows[:, :16], "futures": rows[:, 16:]}
    loss(m(batch["x"], Stage.TUNE), batch, Stage.TUNE).total.backward()
    for name, p in m.named_parameters():
        if param_group(name) in TUNE_GROUPS:
            assert p.grad is not None and torch.any(p.grad != 0), name
        else:
            assert p.grad is None or torch.all(p.grad == 0), name


def test_restorer_affects_forecasts(rng):
    m = init_params(small())
    x = torch.from_numpy(rng.normal(size=16))
    before = m(x, Stage.INFER)["forecasts"][3].detach().clone()
    with torch.no_grad():
        m.harmonizer.vectors[0] += 0.3
    after = m(x, Stage.INFER)["forecasts"][3]
    assert torch.max(torch.abs(after - before)) > 1e-6


def test_set_horizons_replaces_heads():
    m = init_params(small())
    m.set_horizons([7])
    assert list(m.pred_heads) == ["7"] and m.config.horizons == [7]
    assert m(torch.zeros(16), Stage.TUNE)["forecasts"][7].shape == (7,)


def test_tiny_config_shape():
    cfg = tiny_config()
    assert (cfg.T, cfg.patch_len, cfg.d, cfg.K, cfg.L) == (8, 4, 4, 2, 2)
