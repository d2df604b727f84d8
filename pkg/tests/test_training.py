from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import SMALL_DET
from oracles import adamw_steps, sgd_momentum_steps
from robustdet.core import AttackBudget, ContractError, PIXEL_ULP
from robustdet.toydet import ToyDetector, ToyDetectorConfig
from robustdet.training import (ConfigError, RecipeConfig, Trainer, TrainState, build_param_groups,
                                free_at_train, load_backbone_checkpoint, make_optimizer, pgd_at_train, resume,
                                standard_train)

BASE = RecipeConfig(replay_m=1, epochs_equivalent=3, base_lr=1e-3, batch_size=4, lr_milestones=(2,),
                    backbone_lr_multiplier=0.5)


def params(det):
    return {k: v.detach().clone().double() for k, v in det.state_dict().items()}


def max_rel_diff(a, b):
    num = max(float((a[k] - b[k]).abs().max()) for k in a)
    den = max(float(a[k].abs().max()) for k in a)
    return num / den


@pytest.mark.parametrize("opt,oracle", [("adaptive_decoupled_wd", adamw_steps), ("momentum_sgd", sgd_momentum_steps)])
def test_optimizer_matches_closed_form(opt, oracle):
    cfg = replace(BASE, optimizer=opt, base_lr=0.05, weight_decay=0.1)
    p0 = np.array([0.5, -1.0, 2.0])
    grads = [np.array([0.3, -0.2, 0.0]), np.array([-1.0, 0.5, 0.25]), np.array([0.1, 0.1, -2.0])]
    p = torch.nn.Parameter(torch.tensor(p0, dtype=torch.float64))
    o = make_optimizer([([p], cfg.base_lr)], cfg)
    expect = oracle(p0, grads, cfg.base_lr, cfg.weight_decay)
    for g, e in zip(grads, expect):
        p.grad = torch.tensor(g)
        o.step()
        assert np.allclose(p.detach().numpy(), e, rtol=1e-12, atol=1e-14)


def test_param_groups_and_frozen_backbone(tiny_det):
    groups = build_param_groups(tiny_det, BASE)
    assert [lr for _, lr in groups] == [5e-4, 1e-3]
    frozen = build_param_groups(tiny_det, replace(BASE, backbone_lr_multiplier=0.0))
    assert [lr for _, lr in frozen] == [1e-3]
    assert {id(p) for p in frozen[0][0]} == {id(p) for p in tiny_det.param_groups()["head"]}


def test_multiplier_zero_keeps_backbone(tiny_det, tiny_data):
    before = {k: v.clone() for k, v in tiny_det.named_param_groups()["backbone"].items()}
    free_at_train(tiny_det, tiny_data.samples, replace(BASE, replay_m=2, epochs_equivalent=4,
                                                      backbone_lr_multiplier=0.0))
    after = tiny_det.named_param_groups()["backbone"]
    assert all(torch.equal(before[k], after[k]) for k in before)


@pytest.mark.parametrize("m", [1, 2, 4])
def test_free_at_update_counts(tiny_data, m):
    det = ToyDetector(SMALL_DET, 0)
    cfg = replace(BASE, replay_m=m, epochs_equivalent=6 * m, lr_milestones=())
    st = free_at_train(det, tiny_data.samples, cfg)
    n_mb = 6 * -(-len(tiny_data) // cfg.batch_size)
    assert st.per_minibatch == [(m, m)] * n_mb
    assert st.counters["param_updates"] == st.counters["delta_updates"] == m * n_mb
    assert st.counters["images_seen"] == 6 * m * len(tiny_data)
    assert np.abs(st.delta).max() <= cfg.budget.eps + PIXEL_ULP


def test_free_at_degenerates_to_standard_training(tiny_data):
    cfg = replace(BASE, budget=AttackBudget(0))
    a, b = ToyDetector(SMALL_DET, 1), ToyDetector(SMALL_DET, 1)
    free_at_train(a, tiny_data.samples, cfg, seed=4)
    standard_train(b, tiny_data.samples, cfg, seed=4)
    assert max_rel_diff(params(a), params(b)) <= 1e-5


def test_pgd_at_without_inner_steps_is_standard(tiny_data):
    a, b = ToyDetector(SMALL_DET, 1), ToyDetector(SMALL_DET, 1)
    pgd_at_train(a, tiny_data.samples, BASE, inner_steps=0, seed=2)
    standard_train(b, tiny_data.samples, BASE, seed=2)
    assert max_rel_diff(params(a), params(b)) == 0.0


def test_pgd_at_trains_on_budgeted_examples(tiny_data):
    det = ToyDetector(SMALL_DET, 1)
    cfg = replace(BASE, epochs_equivalent=1)
    st = pgd_at_train(det, tiny_data.samples, cfg, inner_steps=2, inner_alpha=2.0)
    idx, adv = st.extra["last_adv_batch"]
    clean = np.stack([tiny_data.samples[i].image.data for i in idx])
    assert 0 < np.abs(adv - clean).max() <= 8 / 255 + PIXEL_ULP


@pytest.mark.parametrize("method", ["free", "standard"])
def test_resume_is_bit_exact(tiny_data, tmp_path, method):
    cfg = replace(BASE, replay_m=2, epochs_equivalent=4) if method == "free" else BASE
    full = ToyDetector(SMALL_DET, 5)
    Trainer(full, tiny_data.samples, cfg, seed=9, method=method).run()
    part = ToyDetector(SMALL_DET, 5)
    st = Trainer(part, tiny_data.samples, cfg, seed=9, method=method).run(max_minibatches=4)
    st.save(tmp_path / "state.pt")
    fresh = ToyDetector(SMALL_DET, 123)  # different init: everything must come from the state
    final = resume(fresh, tiny_data.samples, tmp_path / "state.pt")
    assert all(torch.equal(v, full.state_dict()[k]) for k, v in fresh.state_dict().items())
    assert final.counters["param_updates"] == cfg.epochs_equivalent * 3


def test_train_state_round_trip(tiny_data, tmp_path):
    det = ToyDetector(SMALL_DET, 0)
    st = standard_train(det, tiny_data.samples, replace(BASE, epochs_equivalent=1))
    st.save(tmp_path / "s.pt")
    back = TrainState.load(tmp_path / "s.pt")
    assert back.config == st.config and back.counters == st.counters and back.provenance == "random"


def test_recipe_validation():
    with pytest.raises(ConfigError):
        RecipeConfig(replay_m=4, epochs_equivalent=6)
    with pytest.raises(ConfigError):
        RecipeConfig(backbone_lr_multiplier=2.0)
    with pytest.raises(ConfigError):
        RecipeConfig(optimizer="rmsprop")
    r = RecipeConfig()
    assert [r.lr_factor(e) for e in (0, 15, 16, 20, 23)] == pytest.approx([1, 1, 0.1, 0.01, 0.01])
    assert RecipeConfig.from_dict(r.to_dict()) == r


def test_backbone_checkpoint_loading(tiny_det):
    donor = ToyDetector(SMALL_DET, 99)
    ckpt = {"backbone": {k: v.detach().clone() for k, v in donor.named_param_groups()["backbone"].items()}}
    load_backbone_checkpoint(tiny_det, ckpt, "upstream_adversarial")
    assert tiny_det.provenance == "upstream_adversarial"
    for k, v in tiny_det.named_param_groups()["backbone"].items():
        assert torch.equal(v, ckpt["backbone"][k])
    wider = ToyDetector(replace(SMALL_DET, backbone_width=12), 0)
    with pytest.raises(ContractError, match="does not fit"):
        load_backbone_checkpoint(wider, ckpt, "upstream_benign")
    with pytest.raises(ConfigError):
        load_backbone_checkpoint(tiny_det, ckpt, "imagenet")


def test_untagged_parameters_rejected(tiny_det):
    class Partial:
        net = tiny_det.net

        def param_groups(self):
            return {"head": tiny_det.param_groups()["head"]}

    with pytest.raises(ConfigError, match="untagged"):
        build_param_groups(Partial(), BASE)
