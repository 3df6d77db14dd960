import dataclasses

import numpy as np
import pytest

from vdn import autodiff as ad
from vdn.autodiff import Tensor
from vdn.errors import ContractError
from vdn.models import (ALL_GROUPS, ConfigMismatchError, CorruptManifestError, ModelConfig,
                        TruncatedBlobError, VdnModel, checkpoint_load, checkpoint_save, encode,
                        generate, predict_logits)


@pytest.fixture
def model():
    return VdnModel(ModelConfig(init_seed=3))


def test_encode_shapes_and_style_has_no_layout(model, rng):
    x = rng.uniform(-1, 1, size=(5, 432))
    q, zd = encode(model, x)
    assert q.mu.shape == (5, 8) and zd.shape == (5, 4)
    # permuting pixels leaves the pooled style code unchanged
    img = x.reshape(5, 144, 3)
    shuffled = img[:, rng.permutation(144), :].reshape(5, 432)
    np.testing.assert_allclose(encode(model, shuffled)[1].data, zd.data, atol=1e-12)
    with pytest.raises(ContractError):
        encode(model, rng.normal(size=(5, 10)))


def test_zero_weights_give_bias_as_mean(rng):
    m = VdnModel(ModelConfig())
    for _, p in m.E_c.named_parameters():
        p.data = np.zeros_like(p.data)
    m.E_c.mu_head.b.data = np.arange(8.0)
    q, _ = encode(m, rng.normal(size=(3, 432)))
    np.testing.assert_array_equal(q.mu.data, np.tile(np.arange(8.0), (3, 1)))


def test_identical_rows_identical_outputs(model, rng):
    x = np.repeat(rng.normal(size=(1, 432)), 2, axis=0)
    q, zd = encode(model, x)
    np.testing.assert_array_equal(q.mu.data[0], q.mu.data[1])
    np.testing.assert_array_equal(zd.data[0], zd.data[1])


def test_toy_topology():
    m = VdnModel(ModelConfig(toy_mode=True, zc_dim=7))
    cfg = m.config
    assert (cfg.input_dim, cfg.zc_dim, cfg.n_classes) == (3, 2, 2)
    shapes = {n: p.shape for n, p in m.named_parameters()}
    assert shapes["E_c.body.fc0.W"] == (3, 3)
    assert shapes["E_c.mu.W"] == (3, 2)
    assert shapes["E_t.fc.W"] == (2, 1)
    q, zd = encode(m, np.zeros((4, 3)))
    assert q.mu.shape == (4, 2) and zd is None


def test_generator_range_and_swapped_styles(model, rng):
    zc, zd = rng.normal(scale=5, size=(6, 8)), rng.normal(scale=5, size=(6, 4))
    out = generate(model, zc, zd[::-1]).data
    assert out.shape == (6, 432)
    assert np.all(np.abs(out) <= 1.0)
    with pytest.raises(ContractError):
        generate(model, zc, zd[:, :3])


def test_critic_arity_matches_source_domains():
    m = VdnModel(ModelConfig(n_domains=5))
    x = np.random.default_rng(0).normal(size=(2, 432))
    assert m.D_x.net(x).shape == (2, 5)
    assert m.D_x(x, [4, 0]).shape == (2,)
    with pytest.raises(ContractError):
        m.D_x(x, [0])


def test_perceptual_map_never_gets_gradient(model, rng):
    for phase in ("generator", "critic", "none"):
        model.set_phase(phase)
        assert not any(p.requires_grad for p in model.E_p.parameters())
    model.set_phase("generator")
    x = Tensor(rng.normal(size=(2, 432)))
    loss = ad.sum_(model.E_p(model.G(model.E_c(x).mu, model.E_d(x))))
    ad.backward(loss)
    assert all(p.grad is None for p in model.E_p.parameters())
    assert any(p.grad is not None for p in model.G.parameters())


def test_inference_touches_only_content_encoder_and_task_head(model, rng):
    x = rng.normal(size=(4, 432))
    before = predict_logits(model, x)
    for name in ALL_GROUPS:
        if name not in ("E_c", "E_t"):
            for p in model.group(name).parameters():
                p.data = np.full_like(p.data, np.nan)
    np.testing.assert_array_equal(predict_logits(model, x), before)


def test_checkpoint_round_trip_is_bit_exact(model, tmp_path, rng):
    checkpoint_save(model, tmp_path / "a")
    loaded = checkpoint_load(tmp_path / "a")
    checkpoint_save(loaded, tmp_path / "b")
    for f in ("manifest.txt", "params.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    x = rng.normal(size=(10, 432))
    np.testing.assert_array_equal(predict_logits(model, x), predict_logits(loaded, x))
    assert dataclasses.asdict(loaded.config) == dataclasses.asdict(model.config)


def test_checkpoint_manifest_lists_every_parameter(model, tmp_path):
    checkpoint_save(model, tmp_path)
    records = [l.split() for l in (tmp_path / "manifest.txt").read_text().splitlines() if l.startswith("param ")]
    assert [r[1] for r in records] == [n for n, _ in model.named_parameters()]
    offsets = [int(r[4]) for r in records]
    assert offsets == sorted(offsets) and offsets[0] == 0


def test_checkpoint_load_errors(model, tmp_path):
    checkpoint_save(model, tmp_path)
    with pytest.raises(ConfigMismatchError):
        checkpoint_load(tmp_path, expected=ModelConfig(n_classes=5, init_seed=3))
    manifest = tmp_path / "manifest.txt"
    text = manifest.read_text()
    manifest.write_text(text.replace("config.n_classes = 4", "config.n_classes = 5"))
    with pytest.raises(ConfigMismatchError):
        checkpoint_load(tmp_path)
    manifest.write_text(text.replace("format = vdn-checkpoint", "format = other"))
    with pytest.raises(CorruptManifestError):
        checkpoint_load(tmp_path)
    manifest.write_text(text)
    blob = tmp_path / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(TruncatedBlobError):
        checkpoint_load(tmp_path)


def test_config_invariants():
    with pytest.raises(ContractError):
        ModelConfig(zc_dim=0)
    with pytest.raises(ContractError):
        ModelConfig(input_dim=10)
