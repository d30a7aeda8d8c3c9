import copy

import pytest
import torch
from torch.func import functional_call

from conftest import TINY_CRITIC, TINY_SEG, ConvBackbone, EchoBackbone
from crackclf.data_io import synthetic_dataset
from crackclf.segnet import SegNet, SegNetConfig
from crackclf.trainer import (
    TrainConfig,
    critic_step,
    dataset_f1,
    fit,
    init_state,
    segmenter_objective,
    segmenter_step,
    wrap_with_clf,
)
from oracles import grad_rel_error


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def max_abs_diff(a, b):
    return max((a[k] - b[k]).abs().max().item() for k in a)


def batch_of(data, idx):
    return torch.stack([data[i][0] for i in idx]), torch.stack([data[i][1] for i in idx])


def strip_time(records):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]


def test_config_validation():
    for bad in ({"lr": 0}, {"batch_size": 0}, {"epochs": 0}, {"lambda_adv": -1}, {"optimizer": "sgd"},
                {"critic_clip": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_critic_step_fixed_point_when_prediction_equals_truth():
    y = (torch.rand(2, 1, 16, 16, generator=torch.Generator().manual_seed(0)) > 0.7).float()
    x = torch.cat([y, torch.rand(2, 2, 16, 16)], dim=1)
    cfg = TrainConfig(seed=0, lr=0.01)
    state = init_state(EchoBackbone(), cfg, TINY_CRITIC)
    before = snapshot(state.critic)
    state, loss = critic_step((x, y), state, cfg)
    assert loss == 0
    assert all(p.grad is None or torch.all(p.grad == 0) for p in state.critic.parameters())
    assert max_abs_diff(before, snapshot(state.critic)) == 0


def test_critic_ascent_trend(tiny_data):
    gains = []
    for seed in range(5):
        torch.manual_seed(seed)
        cfg = TrainConfig(seed=seed, lr=0.01)
        state = init_state(SegNet(TINY_SEG), cfg, TINY_CRITIC)
        batch = batch_of(tiny_data, [0, 1])
        losses = [critic_step(batch, state, cfg)[1] for _ in range(10)]
        gains.append(losses[-1] - losses[0])
    assert sum(gains) / len(gains) >= 0


def test_critic_and_segmenter_steps_touch_only_their_own_parameters(tiny_data):
    torch.manual_seed(0)
    cfg = TrainConfig(seed=0)
    state = init_state(SegNet(TINY_SEG), cfg, TINY_CRITIC)
    batch = batch_of(tiny_data, [0, 1])
    seg0, crit0 = snapshot(state.segmenter), snapshot(state.critic)
    critic_step(batch, state, cfg)
    assert max_abs_diff(seg0, snapshot(state.segmenter)) == 0
    assert max_abs_diff(crit0, snapshot(state.critic)) > 0
    crit1 = snapshot(state.critic)
    segmenter_step(batch, state, cfg)
    assert max_abs_diff(crit1, snapshot(state.critic)) == 0
    assert max_abs_diff(seg0, snapshot(state.segmenter)) > 0


def test_lambda_zero_objective_equals_supervised_loss(tiny_data):
    torch.manual_seed(1)
    cfg = TrainConfig(seed=0, lambda_adv=0.0)
    state = init_state(SegNet(TINY_SEG), cfg, TINY_CRITIC)
    j, report, adv = segmenter_objective(batch_of(tiny_data, [0, 1]), state, cfg)
    assert adv.item() > 0
    assert j.item() == report.l_total.item()


def test_lambda_zero_update_equals_open_loop(tiny_data):
    torch.manual_seed(2)
    net = SegNet(TINY_SEG)
    batch = batch_of(tiny_data, [0, 1, 2])
    on = TrainConfig(seed=0, lambda_adv=0.0)
    off = TrainConfig(seed=0, clf_enabled=False)
    s_on = init_state(copy.deepcopy(net), on, TINY_CRITIC)
    s_off = init_state(copy.deepcopy(net), off)
    for _ in range(3):
        critic_step(batch, s_on, on)
        segmenter_step(batch, s_on, on)
        segmenter_step(batch, s_off, off)
    assert max_abs_diff(snapshot(s_on.segmenter), snapshot(s_off.segmenter)) == 0


def test_objective_gradient_matches_finite_differences():
    torch.manual_seed(3)
    net = SegNet(SegNetConfig(stage_channels=(2, 4, 8, 16, 32))).double()
    cfg = TrainConfig(seed=0, lambda_adv=0.7)
    state = init_state(net, cfg, TINY_CRITIC)
    state.critic.double()
    g = torch.Generator().manual_seed(4)
    x = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    y = (torch.rand(1, 1, 16, 16, generator=g) > 0.8).double()
    names = ["fuse.weight", "fuse.bias", "side_heads.4.weight", "decoders.3.attn.sa_conv.weight"]
    params = dict(net.named_parameters())

    def j_of(*ps):
        state.segmenter = _Swapped(net, dict(zip(names, ps)))
        return segmenter_objective((x, y), state, cfg)[0]

    assert grad_rel_error(j_of, [params[n].detach() for n in names]) <= 1e-3


class _Swapped(torch.nn.Module):
    def __init__(self, net, params):
        super().__init__()
        self.net = net
        self.params = params

    def forward(self, x):
        return functional_call(self.net, self.params, (x,), strict=False)


def test_fit_bookkeeping(tiny_data):
    cfg = TrainConfig(epochs=1, batch_size=1, critic_steps_per_gen_step=3, seed=0)
    state, records = fit(tiny_data[:2], cfg, segnet_config=TINY_SEG, critic_config=TINY_CRITIC)
    kinds = [r["kind"] for r in records]
    assert kinds.count("segmenter") == 2
    assert kinds.count("critic") == 6
    assert state.critic_steps == 3 * state.step
    seg = [r for r in records if r["kind"] == "segmenter"]
    assert set(seg[0]) == {"kind", "step", "epoch", "l_side", "l_fuse", "l_total", "adv_loss", "J", "wall_ms"}


def test_fit_without_clf_has_no_critic(tiny_data):
    cfg = TrainConfig(epochs=1, batch_size=2, clf_enabled=False, seed=0)
    state, records = fit(tiny_data, cfg, segnet_config=TINY_SEG)
    assert state.critic is None and state.critic_opt is None
    assert all(r["kind"] == "segmenter" and "adv_loss" not in r for r in records)


def test_fit_is_deterministic(tiny_data):
    cfg = TrainConfig(epochs=2, batch_size=2, seed=5)
    logs = [strip_time(fit(tiny_data, cfg, segnet_config=TINY_SEG, critic_config=TINY_CRITIC)[1]) for _ in range(2)]
    assert logs[0] == logs[1]


def test_resume_reproduces_losses(tiny_data, tmp_path):
    full_cfg = TrainConfig(epochs=2, batch_size=2, seed=7)
    _, full = fit(tiny_data, full_cfg, segnet_config=TINY_SEG, critic_config=TINY_CRITIC)
    half_cfg = TrainConfig(epochs=1, batch_size=2, seed=7)
    fit(tiny_data, half_cfg, segnet_config=TINY_SEG, critic_config=TINY_CRITIC, out_dir=tmp_path)
    assert (tmp_path / "last.pt").exists()
    torch.manual_seed(123)  # resume must not depend on the caller's RNG state
    _, tail = fit(tiny_data, full_cfg, SegNet(TINY_SEG), critic_config=TINY_CRITIC, resume=tmp_path / "last.pt")
    assert strip_time(tail) == strip_time([r for r in full if r["epoch"] == 2])


def test_fit_best_checkpoint_from_validation(tiny_data, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2, seed=0, clf_enabled=False)
    _, records = fit(tiny_data, cfg, segnet_config=TINY_SEG, out_dir=tmp_path, val_dataset=tiny_data[:1])
    assert (tmp_path / "best.pt").exists() and (tmp_path / "last.pt").exists()
    assert [r["epoch"] for r in records if r["kind"] == "val"] == [1, 2]


def test_fit_rejects_empty_and_bad_sizes(tiny_data):
    with pytest.raises(ValueError, match="empty"):
        fit([], TrainConfig(epochs=1))
    bad = [(torch.rand(3, 24, 24), torch.zeros(1, 24, 24))]
    with pytest.raises(ValueError, match="item 0"):
        fit(bad, TrainConfig(epochs=1, clf_enabled=False), segnet_config=TINY_SEG)


@pytest.mark.slow
def test_overfit_single_image():
    data = synthetic_dataset(1, size=64, seed=3)
    torch.manual_seed(0)
    net = SegNet(SegNetConfig(stage_channels=(8, 16, 32, 64, 128)))
    cfg = TrainConfig(epochs=200, batch_size=1, seed=0)
    fit(data, cfg, net)
    assert dataset_f1(net, data) >= 0.95


def test_wrap_rejects_non_probability_output():
    class Raw(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.conv = torch.nn.Conv2d(3, 1, 1)

        def forward(self, x):
            return self.conv(x) - 5

    with pytest.raises(ValueError):
        wrap_with_clf(Raw())
    with pytest.raises(TypeError):
        wrap_with_clf(lambda x: x)


def test_wrap_self_identity(tiny_data):
    cfg = TrainConfig(epochs=1, batch_size=2, seed=0)
    torch.manual_seed(0)
    native_net = SegNet(TINY_SEG)
    wrapped_net = copy.deepcopy(native_net)
    _, native = fit(tiny_data, cfg, native_net, critic_config=TINY_CRITIC)
    _, wrapped = wrap_with_clf(wrapped_net, critic_config=TINY_CRITIC).fit(tiny_data, cfg)
    assert strip_time(native) == strip_time(wrapped)
    assert max_abs_diff(snapshot(native_net), snapshot(wrapped_net)) == 0


def test_wrap_toy_backbone_trains(tiny_data):
    torch.manual_seed(0)
    model = wrap_with_clf(ConvBackbone(layers=1), critic_config=TINY_CRITIC)
    _, records = model.fit(tiny_data, TrainConfig(epochs=3, batch_size=2, seed=0))
    seg = [r for r in records if r["kind"] == "segmenter"]
    assert len(seg) == 6 and all("adv_loss" in r for r in seg)
    assert model(tiny_data[0][0][None]).shape == (1, 1, 32, 32)


def test_wrap_lambda_zero_equals_unwrapped(tiny_data):
    torch.manual_seed(0)
    a = ConvBackbone(layers=3)
    b = copy.deepcopy(a)
    wrap_with_clf(a, critic_config=TINY_CRITIC).fit(tiny_data, TrainConfig(epochs=2, batch_size=2, lambda_adv=0.0))
    fit(tiny_data, TrainConfig(epochs=2, batch_size=2, clf_enabled=False), b)
    assert max_abs_diff(snapshot(a), snapshot(b)) == 0
