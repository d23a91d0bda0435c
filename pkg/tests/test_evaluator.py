import math
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oracles import central_difference_check
from sarutil.bayes import BBBConv2d
from sarutil.data import decode_azimuth, encode_azimuth
from sarutil.errors import InvalidArgument, InvalidState
from sarutil.evaluator import (
    CriteriaVector,
    Evaluator,
    EvaluatorTrainConfig,
    criteria_torch,
    elbo_loss,
    joint_likelihood_loss,
    load_evaluator,
    predict_criteria,
    predict_criteria_batch,
    save_evaluator,
    train_evaluator,
)
from sarutil.imageset import ImageSet

SIZE = 16


def model(variant="bbb", seed=0, C=3, **kw):
    m = Evaluator(C, variant, input_size=SIZE, generator=torch.Generator().manual_seed(seed), **kw)
    return m.double().requires_grad_(False)


def batch(n=6, C=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 1, SIZE, SIZE, generator=g, dtype=torch.float64)
    labels = torch.arange(n) % C
    az = torch.rand(n, generator=g, dtype=torch.float64) * 360
    return x, labels, az


def targets(az):
    return torch.tensor(np.array([encode_azimuth(float(a)) for a in az]))


def toy_set(n, C, seed=0):
    """Class is encoded by a bright quadrant, azimuth by a bright dot on a ring."""
    rng = np.random.default_rng(seed)
    x = np.zeros((n, 1, SIZE, SIZE))
    labels = np.arange(n) % C
    az = rng.uniform(0, 360, n)
    for i in range(n):
        q = labels[i]
        x[i, 0, (q // 2) * 8:(q // 2) * 8 + 8, (q % 2) * 8:(q % 2) * 8 + 8] += 0.3
        r, c = 8 - 5 * math.cos(math.radians(az[i])), 8 + 5 * math.sin(math.radians(az[i]))
        x[i, 0, int(r) - 1:int(r) + 2, int(c) - 1:int(c) + 2] += 0.7
    x += rng.normal(0, 0.02, x.shape)
    return ImageSet(torch.tensor(x), torch.tensor(labels), torch.tensor(az), [f"t{i}" for i in range(n)])


def test_joint_likelihood_examples():
    v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    y = torch.tensor([0])
    perfect = torch.tensor([[100.0, -100.0]], dtype=torch.float64)
    assert float(joint_likelihood_loss(perfect, v, y, v, 20.0)) == pytest.approx(0.0, abs=1e-12)
    uniform = torch.zeros(1, 10, dtype=torch.float64)
    assert float(joint_likelihood_loss(uniform, v, y, v, 20.0)) == pytest.approx(math.log(10), abs=1e-12)
    off = v + torch.tensor([[0.1, 0.0]], dtype=torch.float64)
    assert float(joint_likelihood_loss(perfect, off, y, v, 20.0)) == pytest.approx(0.2, abs=1e-12)


def test_elbo_decomposition_and_kl_weighting():
    m = model()
    x, y, az = batch()
    cfg = EvaluatorTrainConfig(kl_weighting="minibatch")
    total_kl = float(sum(layer.kl(m.prior_sigma) for layer in m.trunk))
    for seed in (0, 1):
        xs, ys, azs = batch(seed=seed)
        loss, parts = elbo_loss(m, xs, ys, targets(azs), cfg, 8, torch.Generator().manual_seed(seed))
        assert float(parts["kl"]) == pytest.approx(total_kl / 8, rel=1e-12)
        assert abs(float(loss) - float(parts["nll"] + parts["kl"])) < 1e-6
    loss, parts = elbo_loss(m, x, y, targets(az), EvaluatorTrainConfig(), 8, None, n_train=200)
    assert float(parts["kl"]) == pytest.approx(total_kl / 200, rel=1e-12)
    with pytest.raises(InvalidArgument):
        elbo_loss(m, x, y, targets(az), EvaluatorTrainConfig(), 8)
    with pytest.raises(InvalidState):
        elbo_loss(model("mcd"), x, y, targets(az), cfg, 8)


def test_floored_alpha_matches_deterministic_network():
    m = model()
    with torch.no_grad():
        for layer in m.trunk:
            layer.raw_alpha.fill_(-60.0)
    x, y, az = batch()
    cfg = EvaluatorTrainConfig(kl_weighting="minibatch")
    _, parts = elbo_loss(m, x, y, targets(az), cfg, 1, torch.Generator().manual_seed(3))
    h = x
    for layer in m.trunk:
        h = F.relu(F.conv2d(h, layer.mu, stride=layer.stride, padding=layer.padding))
    h = h.flatten(1)
    v = m.angle_head(h)
    v = v / torch.sqrt((v * v).sum(-1, keepdim=True) + 1e-12)
    ref = joint_likelihood_loss(m.class_head(h), v, y, targets(az), cfg.lambda_a)
    assert abs(float(parts["nll"]) - float(ref)) < 1e-4


def test_elbo_gradient_matches_finite_differences():
    m = model()
    m.requires_grad_(True)
    x, y, az = batch(4)
    t = targets(az)
    cfg = EvaluatorTrainConfig(kl_weighting="minibatch")

    def loss():
        return elbo_loss(m, x, y, t, cfg, 4, torch.Generator().manual_seed(9))[0]

    params = [p for layer in m.trunk for p in (layer.mu, layer.raw_alpha)]
    errs = central_difference_check(loss, params, 20, np.random.default_rng(1))
    assert max(errs) < 1e-3


def test_mcd_dropout_is_active_at_prediction():
    m = model("mcd", dropout_rate=0.3)
    x, _, _ = batch(2)
    a = m(x, generator=torch.Generator().manual_seed(0))[0]
    b = m(x, generator=torch.Generator().manual_seed(1))[0]
    assert not torch.allclose(a, b)
    cv = predict_criteria(m, x[0, 0].numpy(), T=10, rng=0)
    assert cv.u_c + cv.u_a > 0


def test_config_and_data_validation():
    with pytest.raises(InvalidArgument):
        EvaluatorTrainConfig(epochs=0)
    with pytest.raises(InvalidArgument):
        EvaluatorTrainConfig(dropout_rate=1.0)
    with pytest.raises(InvalidArgument):
        Evaluator(3, "svm", input_size=SIZE)
    cfg = EvaluatorTrainConfig(epochs=1)
    single = toy_set(6, 1)
    with pytest.raises(InvalidArgument):
        train_evaluator((single, None), cfg)
    with pytest.raises(InvalidArgument):
        train_evaluator((toy_set(6, 2).subset([]), None), cfg)


def test_criteria_vector_contract():
    m = model()
    x, _, _ = batch(3)
    cvs = predict_criteria_batch(m, x.numpy(), T=8, rng=4)
    for cv in cvs:
        assert cv.total_u == cv.u_c + cv.u_a
        assert cv.pred_azimuth_deg == decode_azimuth(cv.angle_vec)
        assert abs(cv.class_probs.sum() - 1) < 1e-9
        assert cv.u_c == pytest.approx(1 - cv.class_probs @ cv.class_probs, abs=1e-9)
        assert cv.u_c == pytest.approx(cv.aleatoric_trace + cv.epistemic_trace, abs=1e-12)
        back = CriteriaVector.from_json(cv.to_json())
        assert back.total_u == cv.total_u and back.pred_label == cv.pred_label
    again = predict_criteria_batch(m, x.numpy(), T=8, rng=4)
    assert [c.total_u for c in again] == [c.total_u for c in cvs]
    with pytest.raises(InvalidArgument):
        predict_criteria_batch(m, x.numpy(), T=1)
    with pytest.raises(InvalidArgument):
        predict_criteria(m, np.zeros((SIZE + 2, SIZE + 2)))


def test_differentiable_criteria_agree_with_numpy_path():
    m = model()
    x, _, _ = batch(3)
    ybar, u_c, vbar, u_a = criteria_torch(m, x, 8, torch.Generator().manual_seed(4))
    cvs = predict_criteria_batch(m, x.numpy(), T=8, rng=torch.Generator().manual_seed(4))
    for i, cv in enumerate(cvs):
        assert float(u_c[i]) == pytest.approx(cv.u_c, abs=1e-9)
        assert float(u_a[i]) == pytest.approx(cv.u_a, abs=1e-9)
        np.testing.assert_allclose(vbar[i].numpy(), cv.angle_vec, atol=1e-9)


def test_deterministic_variant_ablation_mode():
    m = model("cnn")
    x, _, _ = batch(2)
    cv = predict_criteria_batch(m, x.numpy(), T=25)[0]
    assert cv.T == 1 and cv.u_a == 0.0
    p = cv.class_probs
    assert cv.u_c == pytest.approx(float(-(p * np.log(p)).sum()), abs=1e-6)


def test_unit_angle_draws():
    m = model()
    x, _, _ = batch(4)
    _, v = m(x, generator=torch.Generator().manual_seed(0))
    np.testing.assert_allclose(v.norm(dim=-1).numpy(), 1.0, atol=1e-9)
    raw = model(unit_angle=False)
    _, v = raw(x, generator=torch.Generator().manual_seed(0))
    assert not np.allclose(v.norm(dim=-1).numpy(), 1.0)


def test_training_is_reproducible_and_learns(tmp_path):
    train, val = toy_set(48, 4, 0), toy_set(24, 4, 1)
    cfg = EvaluatorTrainConfig(variant="cnn", epochs=40, batch=8, lr=3e-3, augment=False)
    a = train_evaluator((train, val), cfg, log_path=tmp_path / "log.csv")
    b = train_evaluator((train, val), cfg)
    assert a.history == b.history
    assert a.history[-1]["val_acc"] >= 0.9
    assert a.history[-1]["val_angle_loss"] < a.history[0]["val_angle_loss"]
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,loss,nll,kl,val_acc,val_angle_loss"
    for variant in ("bbb", "mcd"):
        c = replace(cfg, variant=variant, epochs=2)
        assert train_evaluator((train, val), c).history == train_evaluator((train, val), c).history


def test_checkpoint_round_trip(tmp_path):
    m = model(class_names=["a", "b", "c"])
    m.train_config = EvaluatorTrainConfig(seed=7)
    save_evaluator(m, tmp_path / "eva.pt")
    back = load_evaluator(tmp_path / "eva.pt")
    assert back.class_names == ["a", "b", "c"] and back.train_config.seed == 7
    x, _, _ = batch(2)
    a = predict_criteria_batch(m, x.numpy(), T=5, rng=1)
    b = predict_criteria_batch(back, x.numpy(), T=5, rng=1)
    assert [c.total_u for c in a] == [c.total_u for c in b]


def test_bbb_layers_have_no_bias():
    m = model()
    assert all(isinstance(layer, BBBConv2d) for layer in m.trunk)
    names = {n for n, _ in m.trunk.named_parameters()}
    assert not any("bias" in n for n in names)
