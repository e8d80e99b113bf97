from dataclasses import replace

import numpy as np
import pytest
import torch

from loda.adaptation import MODES
from loda.backbones import init_frozen
from loda.data import SyntheticSpec, dataset_from_spec
from loda.exceptions import ConfigError, ContractError, DegenerateBatchError
from loda.tensor import Tensor
from loda.training import (
    LOG_COLUMNS,
    OptimizerState,
    SplitPlan,
    TrainConfig,
    adamw_step,
    build_model,
    cosine_lr,
    predict,
    run_splits,
    sample_patches,
    train,
)

TINY = dataset_from_spec(SyntheticSpec(severities=(0.0, 1.0, 2.0, 3.0)), 0)  # 8 images
FAST = TrainConfig(epochs=2, batch_size=4, patches_per_test_image=2)


def test_adamw_matches_torch():
    g = np.random.default_rng(0)
    w0 = g.normal(size=(3, 4))
    grads = [g.normal(size=(3, 4)) for _ in range(5)]
    p = Tensor(w0.copy(), requires_grad=True)
    state = OptimizerState()
    tp = torch.tensor(w0.copy(), requires_grad=True)
    opt = torch.optim.AdamW([tp], lr=1e-2, weight_decay=0.1, betas=(0.9, 0.999), eps=1e-8)
    for gr in grads:
        p.grad = gr
        adamw_step({"w": p}, state, 1e-2, 0.1)
        tp.grad = torch.tensor(gr)
        opt.step()
    assert np.allclose(p.data, tp.detach().numpy(), atol=1e-14)


def test_adamw_requires_all_grads():
    with pytest.raises(ContractError, match="w"):
        adamw_step({"w": Tensor(np.ones(2))}, OptimizerState(), 0.1, 0.0)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 3e-4) == 3e-4
    assert cosine_lr(50, 100, 3e-4) == pytest.approx(1.5e-4)
    assert cosine_lr(100, 100, 3e-4) == pytest.approx(0.0, abs=1e-20)
    lrs = [cosine_lr(s, 100, 1.0) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_patches_crop_and_flip():
    img = np.arange(3 * 8 * 8, dtype=float).reshape(3, 8, 8)
    patches, labels, offs = sample_patches(img, 20, 4, np.random.default_rng(0), train=True, label=7.0)
    assert patches.shape == (20, 3, 4, 4) and np.all(labels == 7.0)
    for p, (y, x, fh, fv) in zip(patches, offs):
        ref = img[:, y:y + 4, x:x + 4]
        ref = ref[:, :, ::-1] if fh else ref
        ref = ref[:, ::-1, :] if fv else ref
        assert np.array_equal(p, ref)
    _, _, offs = sample_patches(img, 20, 4, np.random.default_rng(0), train=False)
    assert not offs[:, 2:].any()


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mode="adapter")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        build_model(TrainConfig(crop_size=32))


@pytest.mark.parametrize("mode", MODES)
def test_only_trainable_tensors_change(mode):
    cfg = replace(FAST, mode=mode, epochs=1)
    model = build_model(cfg)
    before_frozen = model.frozen.digest()
    before = model.state_dict()
    train(model, TINY, cfg)
    assert model.frozen.digest() == before_frozen
    after = model.state_dict()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_training_is_deterministic():
    logs = []
    for _ in range(2):
        model = build_model(FAST)
        res = train(model, TINY, FAST, eval_set=TINY)
        logs.append((res.log_text(), model.state_dict()))
    assert logs[0][0] == logs[1][0]
    assert all(np.array_equal(logs[0][1][k], logs[1][1][k]) for k in logs[0][1])
    header = logs[0][0].splitlines()[0]
    assert header == ",".join(LOG_COLUMNS)


def test_constant_labels_rejected():
    flat = replace(TINY, labels=np.ones(len(TINY)))
    with pytest.raises(DegenerateBatchError):
        train(build_model(FAST), flat, FAST)


def test_predict_shape_and_split_protocol():
    model = build_model(FAST)
    assert predict(model, TINY.images, FAST).shape == (len(TINY),)
    report = run_splits(TINY, replace(FAST, epochs=1), SplitPlan((0, 1)))
    assert len(report.per_split) == 2 and report.trainable == 26641
    assert set(report.as_dict()) >= {"median_srcc", "median_plcc", "per_split"}


def test_shared_frozen_backbone_between_modes():
    frozen = init_frozen(0)
    a = build_model(replace(FAST, mode="loda"), frozen=frozen)
    b = build_model(replace(FAST, mode="linear_probe"), frozen=frozen)
    assert a.frozen is b.frozen


def test_patch_count_irrelevant_for_full_image_crops():
    from loda.training import evaluate

    model = build_model(FAST)
    one = evaluate(model, TINY, replace(FAST, patches_per_test_image=1))
    many = evaluate(model, TINY, replace(FAST, patches_per_test_image=15))
    assert one == many


def test_identical_splits_give_identical_metrics():
    cfg = replace(FAST, epochs=1)
    plan = SplitPlan((5, 5, 5))
    report = run_splits(TINY, cfg, plan)
    assert report.per_split[0] == report.per_split[1] == report.per_split[2]
    assert report.median_srcc == report.per_split[0].srcc


def test_perfect_predictions_score_one():
    from loda.metrics import evaluate_scores

    m = evaluate_scores(TINY.labels, TINY.labels)
    assert m.srcc == 1.0 and m.plcc == pytest.approx(1.0, abs=1e-12)
