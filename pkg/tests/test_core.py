import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dtgan.core import (ANCHOR_ID, ConfigError, DefectDomain, ImageSet, LabeledSample, ModelConfig, ProductLabel,
                        RunConfig, UnknownDomainError, domain_schema, dump_config_text, load_config, make_rng,
                        parse_config_text, parse_domain, product_schema, sample_latent, save_config,
                        validate_config)


def test_bottleneck_size_from_downsampling():
    cfg = ModelConfig(image_size=32, downsampling=4)
    assert cfg.bottleneck_size == 8
    assert cfg.n_down == 2


def test_indivisible_image_size_rejected():
    with pytest.raises(ConfigError, match="not divisible"):
        validate_config(ModelConfig(image_size=30, downsampling=4))


def test_foreground_must_leave_background_channels():
    with pytest.raises(ConfigError, match="Cfg must be < Cb"):
        validate_config(ModelConfig(bottleneck_channels=8, fg_channels=8))


def test_channel_accounting():
    cfg = ModelConfig(bottleneck_channels=32, fg_channels=8)
    assert (cfg.bg_channels, cfg.fg_channels) == (24, 8)


def test_domain_schema_has_normal_anchor_first():
    doms = domain_schema(3)
    assert [d.name for d in doms] == ["Normal", "Scratches", "Spots"]
    assert doms[ANCHOR_ID].is_anchor and not doms[1].is_anchor
    assert [p.name for p in product_schema(3)] == ["A", "B", "C"]


@pytest.mark.parametrize("raw", ["scratches", "SCRATCHES", " Scratches ", "1", 1])
def test_parse_domain_case_insensitive(raw):
    assert parse_domain(raw) == DefectDomain(1, "Scratches")


@pytest.mark.parametrize("raw", ["Cracks", "7", ""])
def test_parse_domain_unknown(raw):
    with pytest.raises(UnknownDomainError):
        parse_domain(raw)


def test_latent_same_seed_identical():
    a = sample_latent(make_rng(3, 1), 16, 5)
    b = sample_latent(make_rng(3, 1), 16, 5)
    assert torch.equal(a, b)
    assert not torch.equal(a, sample_latent(make_rng(3, 2), 16, 5))


def test_latent_moments_law_of_large_numbers():
    z = sample_latent(make_rng(0), 16, 100_000).double()
    assert z.shape == (100_000, 16)
    assert z.mean(0).abs().max() < 0.02
    assert (z.var(0) - 1).abs().max() < 0.05


def test_latent_dim_zero_rejected():
    with pytest.raises(ValueError):
        sample_latent(make_rng(0), 0)


def test_config_roundtrip(tmp_path):
    cfg = RunConfig().replace(image_size=16, lr_g=5e-4, seeds=(1, 2), reference_ratio=0.25)
    save_config(cfg, tmp_path / "c.txt")
    back = load_config(tmp_path / "c.txt")
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert dump_config_text(back) == dump_config_text(cfg)


def test_config_text_errors():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("a = 1\na = 2\n")
    with pytest.raises(ConfigError, match="expected"):
        parse_config_text("just words\n")
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_flat({"no_such_key": 1})
    assert parse_config_text("# c\nlr_g = 0.1  # tail\n\n") == {"lr_g": "0.1"}


def test_flat_keys_unique_across_groups():
    flat = RunConfig().to_flat()
    assert flat["batch_size"] == 8 and flat["clf_batch_size"] == 32


def test_seed_sets_model_and_train():
    cfg = RunConfig().replace(seed=7)
    assert cfg.model.seed == 7 and cfg.train.seed == 7


@pytest.mark.parametrize("kw", [dict(ema_decay=1.0), dict(batch_size=1), dict(lr_g=-1.0),
                                dict(sampling="weird"), dict(lambda_cyc=-1.0)])
def test_train_config_ranges(kw):
    with pytest.raises(ConfigError):
        RunConfig().replace(**kw)


def test_ds_weight_linear_decay():
    w = RunConfig().replace(ds_decay_steps=100, lambda_ds=2.0).train.weights
    assert w.ds_weight(0) == 2.0
    assert w.ds_weight(50) == 1.0
    assert w.ds_weight(100) == 0.0 and w.ds_weight(500) == 0.0


def _sample(domain, mask=None):
    return LabeledSample(np.zeros((3, 4, 4), np.float32), domain_schema()[domain], ProductLabel(0, "A"), mask)


def test_normal_mask_must_be_zero():
    _sample(0, np.zeros((4, 4), bool))
    m = np.zeros((4, 4), bool)
    m[1, 1] = True
    _sample(1, m)
    with pytest.raises(ValueError):
        _sample(0, m)
    with pytest.raises(ValueError):
        _sample(1, np.zeros((3, 3), bool))


def test_imageset_subset():
    s = ImageSet.from_samples([_sample(0), _sample(1), _sample(2)])
    sub = s.subset([2, 0])
    assert sub.domains.tolist() == [2, 0]
    assert len(sub) == 2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2**31 - 1), min_size=1, max_size=4))
def test_make_rng_is_a_function_of_keys(keys):
    assert torch.equal(torch.rand(3, generator=make_rng(*keys)), torch.rand(3, generator=make_rng(*keys)))
