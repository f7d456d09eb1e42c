import math

import pytest
import torch

from classil.model import (
    IncrementalClassifier,
    MLPExtractor,
    build_extractor,
    load_checkpoint,
    save_checkpoint,
    snapshot,
    weight_norms,
)


def _model(head="dot", classes=4, seed=0):
    torch.manual_seed(seed)
    return IncrementalClassifier(MLPExtractor(6, hidden=16, out_dim=8), classes, head,
                                 generator=torch.Generator().manual_seed(seed))


def test_expand_head_keeps_old_rows_bit_for_bit():
    for head in ("dot", "cosine"):
        m = _model(head)
        w, b = m.weight.detach().clone(), None if m.bias is None else m.bias.detach().clone()
        m.expand_head(3, torch.Generator().manual_seed(1))
        assert m.num_classes == 7 and m.num_old == 4
        assert torch.equal(m.weight[:4], w)
        if b is not None:
            assert torch.equal(m.bias[:4], b)
        assert m(torch.randn(2, 6)).shape == (2, 7)


def test_expand_head_rejects_zero():
    with pytest.raises(ValueError):
        _model().expand_head(0)


def test_cosine_logits_bounded_by_scale():
    m = _model("cosine")
    x = torch.randn(32, 6) * 10
    z = m(x)
    assert z.abs().max() <= m.scale.item() + 1e-6
    with torch.no_grad():
        m.scale.fill_(7.0)
    assert torch.allclose(m(x), 7 * z, atol=1e-5)


def test_cosine_logit_of_aligned_feature_is_scale():
    m = _model("cosine")
    f = m.weight[1:2].detach() * 3
    assert m.head(f)[0, 1].item() == pytest.approx(m.scale.item(), abs=1e-6)


def test_snapshot_is_frozen_and_independent():
    m = _model()
    snap = snapshot(m)
    h = snap.parameter_hash()
    x = torch.randn(5, 6)
    before = snap(x)
    assert not before.requires_grad
    opt = torch.optim.SGD(m.parameters(), lr=1.0)
    m(x).sum().backward()
    opt.step()
    assert snap.parameter_hash() == h
    assert torch.equal(snap(x), before)
    assert m.parameter_hash() != h
    assert snapshot(snap) is snap


def test_snapshot_thaw_is_trainable_copy():
    snap = snapshot(_model())
    m = snap.thaw()
    assert all(p.requires_grad for p in m.parameters())
    assert m.parameter_hash() == snap.parameter_hash()


def test_weight_norms_example():
    m = _model(classes=3)
    with torch.no_grad():
        m.weight.zero_()
        m.weight[0, :2] = torch.tensor([3.0, 0.0])
        m.weight[1, :2] = torch.tensor([0.0, 4.0])
        m.weight[2, :2] = torch.tensor([3.0, 4.0])
    assert weight_norms(m, range(0, 2), range(2, 3)) == pytest.approx((3.5, 5.0))
    assert weight_norms(snapshot(m), range(0, 0), range(0, 3))[0] is None


def test_checkpoint_round_trip(tmp_path):
    m = _model("cosine").expand_head(2)
    save_checkpoint(m, tmp_path / "c.pt", epoch=3)
    back, meta = load_checkpoint(tmp_path / "c.pt", MLPExtractor(6, hidden=16, out_dim=8))
    assert meta == {"epoch": 3}
    assert back.parameter_hash() == m.parameter_hash()
    assert back.num_old == 4


@pytest.mark.parametrize("arch, shape, out", [("resnet32", (3, 32, 32), 64), ("resnet20", (3, 32, 32), 64),
                                               ("mlp", (10,), None)])
def test_build_extractor(arch, shape, out):
    e = build_extractor(arch, shape)
    f = e.eval()(torch.zeros(2, *shape))
    assert f.shape == (2, e.out_dim)
    if out:
        assert e.out_dim == out


def test_build_extractor_errors():
    with pytest.raises(ValueError):
        build_extractor("resnet33", (3, 32, 32))
    with pytest.raises(ValueError):
        build_extractor("vgg", (3, 32, 32))


def test_resnet18_out_dim():
    e = build_extractor("resnet18", (3, 64, 64)).eval()
    assert e(torch.zeros(1, 3, 64, 64)).shape == (1, 512)


def test_head_init_bound():
    m = _model(classes=50)
    assert m.weight.abs().max() <= 1 / math.sqrt(8)
