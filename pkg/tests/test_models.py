import numpy as np
import pytest
import torch

from idaseg.config import NumericError
from idaseg.data import Domain, ImageSample
from idaseg.models import (
    NetworkConfig,
    build_model,
    clone_model,
    ema_update,
    predict_sample,
    pseudo_label,
    to_tensor,
)


def _model(depth=2, base=4, classes=2, seed=0):
    return build_model(NetworkConfig(depth=depth, base_channels=base, num_classes=classes), seed=seed)


def test_forward_shapes_and_simplex():
    model = _model(depth=3, base=4)
    x = to_tensor(np.random.default_rng(0).random((2, 16, 16)))
    out = model(x)
    assert out.probabilities.shape == (2, 2, 16, 16)
    assert out.logits.shape == (2, 2, 16, 16)
    assert out.stage1_logits.shape == (2, 2, 16, 16)
    # bottleneck tap: H / 2^(depth-1) with feature_dim channels
    assert out.features.shape == (2, 16, 4, 4)
    sums = out.probabilities.sum(dim=1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-12)


def test_float64_everywhere():
    model = _model()
    assert all(p.dtype == torch.float64 for p in model.parameters())
    out = model(to_tensor(np.zeros((8, 8))))
    assert out.probabilities.dtype == torch.float64
    assert out.features.dtype == torch.float64


def test_no_normalization_layers():
    model = _model(depth=4, base=2)
    bad = (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d, torch.nn.GroupNorm,
           torch.nn.InstanceNorm2d, torch.nn.LayerNorm)
    assert not any(isinstance(m, bad) for m in model.modules())
    assert any(isinstance(m, torch.nn.SiLU) for m in model.modules())
    assert any(isinstance(m, torch.nn.AvgPool2d) for m in model.modules())
    assert not any(isinstance(m, torch.nn.MaxPool2d) for m in model.modules())


def test_stage2_consumes_stage1_logits():
    cfg = NetworkConfig(depth=2, base_channels=4, num_classes=3)
    model = build_model(cfg, seed=0)
    first_conv = model.stage2.encoders[0].net[0]
    assert first_conv.in_channels == cfg.in_channels + cfg.num_classes


def test_stride_divisibility_enforced():
    model = _model(depth=3)  # stride 4
    with pytest.raises(ValueError):
        model(to_tensor(np.zeros((10, 12))))
    with pytest.raises(ValueError):
        model(torch.zeros(1, 2, 8, 8, dtype=torch.float64))


def test_non_finite_input_raises():
    model = _model()
    x = to_tensor(np.full((8, 8), np.nan))
    with pytest.raises(NumericError):
        model(x)


def test_build_model_seeding():
    a = _model(seed=3)
    b = _model(seed=3)
    c = _model(seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_clone_model_is_independent():
    model = _model(seed=1)
    twin = clone_model(model)
    for pa, pb in zip(model.parameters(), twin.parameters()):
        assert torch.equal(pa, pb)
    with torch.no_grad():
        next(twin.parameters()).add_(1.0)
    assert not torch.equal(next(model.parameters()), next(twin.parameters()))


@pytest.mark.parametrize("lam", [0.0, 0.5, 0.99, 1.0])
def test_ema_update_convex_combination(lam):
    teacher = _model(seed=5)
    student = _model(seed=6)
    before = {k: v.clone() for k, v in teacher.state_dict().items()}
    it0 = teacher.iteration
    ema_update(teacher, student, lam)
    s_params = dict(student.named_parameters())
    for name, tp in teacher.named_parameters():
        expected = lam * before[name] + (1.0 - lam) * s_params[name]
        assert torch.allclose(tp, expected, atol=1e-12, rtol=0.0)
    assert teacher.iteration == it0 + 1


def test_ema_update_rejects_bad_momentum_and_structure():
    teacher, student = _model(), _model()
    with pytest.raises(ValueError):
        ema_update(teacher, student, 1.5)
    other = build_model(NetworkConfig(depth=3, base_channels=4), seed=0)
    with pytest.raises(ValueError):
        ema_update(teacher, other, 0.5)


def test_to_tensor_shapes():
    assert to_tensor(np.zeros((5, 6))).shape == (1, 1, 5, 6)
    assert to_tensor(np.zeros((3, 5, 6))).shape == (3, 1, 5, 6)
    assert to_tensor(np.zeros((5, 6))).dtype == torch.float64


def test_pseudo_label_tie_goes_to_lowest_class():
    model = _model()
    # zero out the final head so logits are constant -> exact ties
    with torch.no_grad():
        model.stage2.head.weight.zero_()
        model.stage2.head.bias.zero_()
    lab = pseudo_label(model, np.random.default_rng(0).random((8, 8)))
    assert lab.shape == (8, 8)
    assert np.all(lab == 0)


def test_predict_sample_native_resolution_and_range():
    model = _model(depth=2, base=2)
    rng = np.random.default_rng(2)
    s = ImageSample(pixels=rng.random((10, 14)), label=None, domain=Domain.TARGET, id="t")
    probs = predict_sample(model, s, (8, 8))
    assert probs.shape == (10, 14)
    assert probs.min() >= 0.0 and probs.max() <= 1.0


def test_predict_sample_rgb_input():
    model = _model(depth=2, base=2)
    rng = np.random.default_rng(3)
    s = ImageSample(pixels=rng.random((8, 8, 3)), label=None, domain=Domain.TARGET, id="t")
    probs = predict_sample(model, s, (8, 8))
    assert probs.shape == (8, 8)


def test_predict_sample_deterministic():
    model = _model(depth=2, base=2, seed=9)
    rng = np.random.default_rng(4)
    s = ImageSample(pixels=rng.random((12, 12)), label=None, domain=Domain.TARGET, id="t")
    a = predict_sample(model, s, (8, 8))
    b = predict_sample(model, s, (8, 8))
    assert np.array_equal(a, b)


def test_network_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(depth=1)
    with pytest.raises(ValueError):
        NetworkConfig(num_classes=1)
    cfg = NetworkConfig(depth=3, base_channels=8)
    assert cfg.feature_dim == 32
    assert cfg.stride == 4
