import math

import numpy as np
import pytest
import torch

from c2f_apv.apv import SoftMaskConfig, apv_classify, mask_volume, pv_loss, soft_mask
from c2f_apv.errors import ParameterError
from c2f_apv.fine import FineNet, ThresholdTable, classification_loss, fine_forward, threshold_mask


def small_net(seed=0):
    torch.manual_seed(seed)
    return FineNet(3, base_width=4, prior_dim=6).double().eval()


def test_fine_shapes_and_simplex():
    net = small_net()
    out = fine_forward(torch.rand(2, 1, 16, 16, 16, dtype=torch.float64), torch.rand(2, 6, dtype=torch.float64), net)
    assert out.prob.shape == (2, 16, 16, 16) and torch.all((out.prob >= 0) & (out.prob <= 1))
    assert out.class_probs.shape == (2, 3)
    assert torch.allclose(out.class_probs.sum(1), torch.ones(2, dtype=torch.float64))


def test_fine_rejects_bad_shapes():
    net = small_net()
    with pytest.raises(ParameterError):
        fine_forward(torch.rand(1, 1, 12, 16, 16, dtype=torch.float64), torch.rand(6, dtype=torch.float64), net)
    with pytest.raises(ParameterError):
        fine_forward(torch.rand(1, 1, 16, 16, 16, dtype=torch.float64), torch.rand(5, dtype=torch.float64), net)
    with pytest.raises(ParameterError):
        fine_forward(torch.rand(1, 2, 16, 16, 16, dtype=torch.float64), torch.rand(6, dtype=torch.float64), net)


def test_fine_deterministic_in_eval():
    net = small_net()
    x = torch.rand(16, 16, 16, dtype=torch.float64)
    s = torch.rand(6, dtype=torch.float64)
    a, b = fine_forward(x, s, net), fine_forward(x, s, net)
    assert torch.equal(a.prob, b.prob) and torch.equal(a.class_probs, b.class_probs)


def smooth(net):
    """Swap ReLU for Softplus so pointwise finite differences do not straddle kinks."""
    for name, child in net.named_children():
        if isinstance(child, torch.nn.ReLU):
            setattr(net, name, torch.nn.Softplus(beta=4.0))
        else:
            smooth(child)
    return net


def test_prior_gradient_matches_finite_differences():
    net = smooth(small_net())
    with torch.no_grad():  # an untrained net barely reacts to the prior; lift it above rounding noise
        net.prior_proj.weight.mul_(50.0)
    x = torch.rand(1, 1, 16, 16, 16, dtype=torch.float64)
    s = torch.rand(1, 6, dtype=torch.float64, requires_grad=True)
    weights = torch.randn(1, 16, 16, 16, dtype=torch.float64)  # zero-mean keeps the objective small
    assert torch.autograd.gradcheck(lambda v: (fine_forward(x, v, net).prob * weights).sum(), (s,), eps=1e-4, atol=1e-12, rtol=1e-3)


def test_dropout_only_in_training():
    net = small_net()
    x = torch.rand(4, 1, 16, 16, 16, dtype=torch.float64)
    s = torch.rand(4, 6, dtype=torch.float64)
    ev = [fine_forward(x, s, net).class_scores for _ in range(2)]
    assert torch.equal(ev[0], ev[1])
    net.train()
    torch.manual_seed(1)
    tr = [fine_forward(x, s, net).class_scores for _ in range(5)]
    spread = torch.stack(tr).std(0).mean().item()
    assert spread > 0
    # the segmentation head has no dropout: train-mode differences there come only from batch statistics
    p1 = fine_forward(x, s, net).prob
    p2 = fine_forward(x, s, net).prob
    assert torch.allclose(p1, p2, atol=1e-12)


def test_threshold_mask():
    table = ThresholdTable.uniform(2, 0.5)
    assert threshold_mask(np.ones((3, 3, 3)), 1, table).all()
    assert not threshold_mask(np.full((3, 3, 3), 0.5), 2, table).any()
    p = np.random.default_rng(0).random((6, 5, 4))
    custom = ThresholdTable({1: 0.3})
    assert np.array_equal(threshold_mask(p, 1, custom), (p > 0.3).astype(np.uint8))
    assert torch.equal(threshold_mask(torch.tensor(p), 1, custom), torch.tensor(p > 0.3).to(torch.uint8))
    with pytest.raises(ParameterError):
        threshold_mask(p, 3, table)
    with pytest.raises(ParameterError):
        ThresholdTable({1: 1.0})


def test_classification_loss():
    assert classification_loss(torch.tensor([0.0, 1.0, 0.0]), 2).item() == 0.0
    assert classification_loss(torch.full((4,), 0.25, dtype=torch.float64), 3).item() == pytest.approx(math.log(4), abs=1e-12)
    assert classification_loss(torch.tensor([1.0, 0.0]), 2).item() == pytest.approx(-math.log(1e-12))
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = rng.dirichlet(np.ones(5))
        n = int(rng.integers(1, 6))
        assert abs(classification_loss(torch.tensor(p), n).item() + math.log(p[n - 1])) <= 1e-9
    batch = torch.tensor(rng.dirichlet(np.ones(3), size=4))
    ids = torch.tensor([1, 3, 2, 3])
    expected = -np.mean([math.log(batch[i, ids[i] - 1].item()) for i in range(4)])
    assert abs(classification_loss(batch, ids).item() - expected) <= 1e-9


def test_soft_mask_values():
    cfg = SoftMaskConfig()
    assert soft_mask(torch.tensor(0.5), cfg).item() == 0.5
    assert soft_mask(torch.tensor(1.0, dtype=torch.float64), cfg).item() == pytest.approx(1 / (1 + math.exp(-5)), abs=1e-15)
    p = torch.sort(torch.rand(50, dtype=torch.float64)).values
    m = soft_mask(p, cfg)
    assert torch.all((m > 0) & (m < 1)) and torch.all(m[1:] >= m[:-1])


def test_soft_mask_gradient():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p0, w, sigma = rng.random(), rng.uniform(0.5, 20), rng.uniform(0.05, 0.95)
        cfg = SoftMaskConfig(w, sigma)
        p = torch.tensor(p0, dtype=torch.float64, requires_grad=True)
        m = soft_mask(p, cfg)
        (g,) = torch.autograd.grad(m, p)
        analytic = w * m.item() * (1 - m.item())
        h = 1e-6
        fd = (soft_mask(p.detach() + h, cfg) - soft_mask(p.detach() - h, cfg)).item() / (2 * h)
        assert abs(g.item() - analytic) <= 1e-5 * analytic
        assert abs(fd - analytic) <= 1e-5 * analytic


def test_soft_mask_config_validation():
    for kwargs in ({"w": 0}, {"sigma": 0.0}, {"sigma": 1.0}, {"mode": "other"}):
        with pytest.raises(ParameterError):
            SoftMaskConfig(**kwargs)


def test_mask_modes():
    x = torch.rand(2, 1, 4, 4, 4, dtype=torch.float64)
    sharp = SoftMaskConfig(w=1e4)
    assert torch.all(mask_volume(x, torch.ones(2, 4, 4, 4, dtype=torch.float64), sharp).abs() < 1e-6)
    assert torch.allclose(mask_volume(x, torch.zeros(2, 4, 4, 4, dtype=torch.float64), sharp), x)
    p = torch.rand(2, 4, 4, 4, dtype=torch.float64)
    lit = mask_volume(x, p, SoftMaskConfig(mode="literal"))
    m = 1 / (1 + torch.exp(-10 * (p - 0.5)))
    assert torch.allclose(lit[:, 0], p - m * x[:, 0], atol=1e-15)
    comp = mask_volume(x, p, SoftMaskConfig())
    assert torch.all(comp.abs() <= (1 - m[:, None]) * x.abs() + 1e-6)
    with pytest.raises(ParameterError):
        mask_volume(x, torch.rand(2, 4, 4, 3), SoftMaskConfig())


def test_pv_loss():
    assert pv_loss(torch.tensor([[0.0, 1.0, 0.0]]), 1).item() == 0.0
    assert pv_loss(torch.tensor([0.0, 1.0, 0.0]), 2).item() == 1.0
    probs = torch.tensor(np.random.default_rng(3).dirichlet(np.ones(3), size=5))
    ids = torch.tensor([1, 2, 3, 1, 2])
    expected = np.mean([probs[i, ids[i] - 1].item() for i in range(5)])
    assert abs(pv_loss(probs, ids).item() - expected) <= 1e-9
    with pytest.raises(ParameterError):
        pv_loss(probs, 4)


def test_weight_sharing_before_and_after_update():
    net = small_net()
    x = torch.rand(3, 1, 16, 16, 16, dtype=torch.float64)
    s = torch.rand(3, 6, dtype=torch.float64)
    before = apv_classify(x, net)
    assert torch.equal(before, fine_forward(x, s, net).class_probs)
    net.train()
    opt = torch.optim.SGD(net.parameters(), lr=0.1)
    out = fine_forward(x, s, net)
    loss = classification_loss(out.class_probs, torch.tensor([1, 2, 3])) + out.prob.mean()
    opt.zero_grad()
    loss.backward()
    opt.step()
    net.eval()
    after = apv_classify(x, net)
    assert torch.equal(after, fine_forward(x, s, net).class_probs)
    assert (after - before).abs().max() > 0


def test_apv_pass_leaves_norm_statistics():
    net = small_net().train()
    saved = {k: v.clone() for k, v in net.state_dict().items()}
    p = apv_classify(torch.rand(2, 1, 16, 16, 16, dtype=torch.float64), net)
    p[:, 0].sum().backward()
    assert all(torch.equal(saved[k], v) for k, v in net.state_dict().items())
    assert net.enc[0][0].weight.grad.abs().sum() > 0


def test_pv_gradient_wrt_segmentation():
    net = small_net()
    cfg = SoftMaskConfig()
    x = torch.rand(1, 1, 16, 16, 16, dtype=torch.float64)
    p = (0.25 + 0.5 * torch.rand(1, 16, 16, 16, dtype=torch.float64)).requires_grad_()  # unsaturated mask

    def f(prob):
        return pv_loss(apv_classify(mask_volume(x, prob, cfg), net), 2)

    (grad,) = torch.autograd.grad(f(p), p)
    assert grad.abs().max() > 0
    # voxels whose derivative is ~0 are judged against a tenth of the typical magnitude
    floor = 0.1 * grad.pow(2).mean().sqrt().item()
    rng = np.random.default_rng(4)
    h = 1e-5
    for _ in range(20):
        idx = (0, *rng.integers(0, 16, 3))
        e = torch.zeros_like(p)
        e[idx] = h
        fd = ((f(p.detach() + e) - f(p.detach() - e)) / (2 * h)).item()
        assert abs(fd - grad[idx].item()) <= 1e-3 * max(abs(fd), floor)
