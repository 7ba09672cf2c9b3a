import pytest
import torch

from fssuw.episodes import Episode
from fssuw.model import FssuwNet, ModelConfig

from conftest import rand_mask


def make_episode(k=1, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    supports = [(torch.randn(3, size, size, generator=g), rand_mask(size, size, generator=g))
                for _ in range(k)]
    return Episode(supports=supports, query_image=torch.randn(3, size, size, generator=g),
                   query_gt=rand_mask(size, size, generator=g), class_id=1)


@pytest.mark.parametrize("use_fee,use_fam", [(True, True), (True, False),
                                             (False, True), (False, False)])
def test_ablation_shapes(use_fee, use_fam):
    cfg = ModelConfig(sfe_width=4, fee_width=4, c_prime=8, use_fee=use_fee, use_fam=use_fam)
    model = FssuwNet(cfg)
    ep = make_episode(size=32)
    out = model(ep)
    assert tuple(out.feature_logits.shape) == (2, 4, 4)
    assert tuple(out.query_logits.shape) == (2, 32, 32)
    assert tuple(out.f_query.shape) == (8, 4, 4)


def test_swap_roles_shape():
    cfg = ModelConfig(sfe_width=4, fee_width=4, c_prime=8, swap_roles=True)
    out = FssuwNet(cfg)(make_episode(size=32))
    assert tuple(out.f_query.shape) == (8, 4, 4)


def test_without_fee_has_no_fee_parameters():
    model = FssuwNet(ModelConfig(sfe_width=4, fee_width=4, c_prime=8, use_fee=False))
    assert model.fee is None
    assert not any(n.startswith("fee.") for n, _ in model.named_parameters())


def test_five_shot_forward():
    model = FssuwNet(ModelConfig(sfe_width=4, fee_width=4, c_prime=8))
    out = model(make_episode(k=5, size=32))
    assert len(out.f_supports) == 5
    assert out.prototypes[0].shots_merged == 5


def test_query_feature_independent_of_shot_count():
    # fusion ops are per-sample, so the query feature cannot depend on K
    torch.manual_seed(0)
    model = FssuwNet(ModelConfig(sfe_width=4, fee_width=4, c_prime=8))
    ep5 = make_episode(k=5, size=32, seed=3)
    ep1 = Episode(supports=ep5.supports[:1], query_image=ep5.query_image,
                  query_gt=ep5.query_gt, class_id=1)
    f1 = model(ep1).f_query
    f5 = model(ep5).f_query
    assert torch.allclose(f1, f5, atol=1e-6)


def test_predict_sizes():
    model = FssuwNet(ModelConfig(sfe_width=4, fee_width=4, c_prime=8))
    ep = make_episode(size=32)
    assert model.predict(ep).shape == (32, 32)
    assert model.predict(ep, out_size=(90, 70)).shape == (90, 70)


def test_weight_round_trip(tmp_path):
    torch.manual_seed(1)
    model = FssuwNet(ModelConfig(sfe_width=4, fee_width=4, c_prime=8))
    path = tmp_path / "model.fssw"
    model.save_weights(path)
    torch.manual_seed(2)
    other = FssuwNet(ModelConfig(sfe_width=4, fee_width=4, c_prime=8))
    other.load_weights(path)
    ep = make_episode(size=32)
    assert torch.equal(model(ep).query_logits, other(ep).query_logits)


def test_logits_bounded_by_temperature():
    model = FssuwNet(ModelConfig(sfe_width=4, fee_width=4, c_prime=8, temperature=20.0))
    out = model(make_episode(size=32))
    assert out.feature_logits.abs().max().item() <= 20.0 + 1e-5
