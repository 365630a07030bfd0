import json

import numpy as np
import pytest

from mmnet import autodiff as ad
from mmnet import checkpoint as ckpt
from mmnet import metrics
from mmnet.autodiff import Tensor
from mmnet.config import config_from_dict, config_to_dict
from mmnet.data import downsample_gt, make_sample
from mmnet.model import MMNet
from mmnet.train import Adam, evaluate_model, loss_fn, poly_lr, train

from conftest import tiny_model_config, tiny_train_config


def tiny_samples(cfg, split, count):
    return [make_sample(cfg.seed, split, i, cfg.model.image_size,
                        cfg.model.max_len, cfg.max_distractors)
            for i in range(count)]


class TestMetrics:
    def test_iou_pixel_count_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pred = rng.random((9, 9)) > 0.5
            gt = rng.random((9, 9)) > 0.5
            inter = sum(1 for i in range(9) for j in range(9)
                        if pred[i, j] and gt[i, j])
            union = sum(1 for i in range(9) for j in range(9)
                        if pred[i, j] or gt[i, j])
            want = 1.0 if union == 0 else inter / union
            assert metrics.iou(pred, gt) == want

    def test_empty_union_is_one(self):
        z = np.zeros((4, 4), dtype=bool)
        assert metrics.iou(z, z) == 1.0

    def test_precision_strictly_greater(self):
        # IoU exactly 0.5 must not count toward Precision@50
        records = [{"iou": 0.5, "intersection": 1, "union": 2}]
        rep = metrics.build_report(records)
        assert rep.prec[0.5] == 0.0

    def test_precision_monotone_in_threshold(self):
        rng = np.random.default_rng(1)
        records = [{"iou": float(v), "intersection": 0, "union": 1}
                   for v in rng.random(200)]
        rep = metrics.build_report(records)
        vals = [rep.prec[t] for t in metrics.THRESHOLDS]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_overall_aggregation_pools_pixels(self):
        records = [{"iou": 1.0, "intersection": 10, "union": 10},
                   {"iou": 0.0, "intersection": 0, "union": 30}]
        rep = metrics.build_report(records, iou_agg="overall")
        assert rep.iou == 10 / 40
        assert metrics.build_report(records, iou_agg="mean").iou == 0.5


class TestLoss:
    def test_zero_logits_give_ln2(self):
        class Out:
            y = Tensor(np.zeros((4, 4)))
        gt = np.zeros((4, 4), dtype=bool)
        gt[0, 0] = True
        loss = loss_fn(Out(), gt)
        np.testing.assert_allclose(loss.data, np.log(2.0), atol=1e-12)

    def test_matches_naive_bce(self):
        rng = np.random.default_rng(2)
        logits = rng.uniform(-3, 3, (5, 5))
        gt = rng.random((5, 5)) > 0.5

        class Out:
            y = Tensor(logits)
        p = 1 / (1 + np.exp(-logits))
        t = gt.astype(np.float64)
        want = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()
        np.testing.assert_allclose(loss_fn(Out(), gt).data, want, atol=1e-10)

    def test_probability_space_variant_close_to_logit_form(self):
        rng = np.random.default_rng(3)
        logits = rng.uniform(-2, 2, (4, 4))
        gt = rng.random((4, 4)) > 0.5

        class OutL:
            y = Tensor(logits)

        class OutP:
            y = ad.sigmoid(Tensor(logits))
        a = loss_fn(OutL(), gt).data
        b = loss_fn(OutP(), gt, aggregate_probs=True).data
        np.testing.assert_allclose(a, b, atol=1e-5)


class TestSchedule:
    def test_poly_lr_endpoints(self):
        assert poly_lr(1e-3, 0, 100, 0.9) == 1e-3
        assert poly_lr(1e-3, 100, 100, 0.9) == 0.0

    def test_poly_lr_monotone_decreasing(self):
        vals = [poly_lr(1e-3, s, 50, 0.9) for s in range(51)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_power_one_is_linear(self):
        np.testing.assert_allclose(poly_lr(2.0, 25, 100, 1.0), 1.5)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # with bias correction the very first update is lr * sign(grad)
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.3, -0.7])
        opt = Adam({"p": p})
        opt.step(0.1)
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)

    def test_quadratic_converges(self):
        p = Tensor(np.array([5.0]), requires_grad=True)
        opt = Adam({"p": p})
        for _ in range(400):
            p.grad = 2 * p.data
            opt.step(0.05)
        assert abs(p.data[0]) < 0.05

    def test_skips_params_without_grad(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"p": p})
        opt.step(0.1)
        np.testing.assert_array_equal(p.data, [1.0])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = tiny_train_config()
        model = MMNet(cfg.model, seed=3)
        path = tmp_path / "model.bin"
        ckpt.save(path, config_to_dict(cfg), model.store.state())
        loaded_cfg, params = ckpt.load(path)
        restored = config_from_dict(loaded_cfg)
        assert config_to_dict(restored) == config_to_dict(cfg)
        state = model.store.state()
        assert set(params) == set(state)
        for k in state:
            np.testing.assert_array_equal(params[k], state[k])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(Exception):
            ckpt.load(path)


class TestTrainLoop:
    def test_short_run_writes_artifacts_and_is_deterministic(self, tmp_path):
        cfg = tiny_train_config(epochs=2, steps_per_epoch=2)
        tr = tiny_samples(cfg, "train", cfg.train_size)
        va = tiny_samples(cfg, "val", cfg.val_size)
        _, log1 = train(cfg, tmp_path / "a", tr, va)
        _, log2 = train(cfg, tmp_path / "b", tr, va)
        t1 = (tmp_path / "a" / "metrics.jsonl").read_text()
        t2 = (tmp_path / "b" / "metrics.jsonl").read_text()
        assert t1 == t2
        assert (tmp_path / "a" / "checkpoint.bin").exists()
        lines = [json.loads(l) for l in t1.splitlines()]
        assert len(lines) == 2
        assert set(lines[0]) == {"epoch", "loss", "lr", "iou", "pr50",
                                 "pr60", "pr70", "pr80", "pr90"}
        assert log1 == log2

    def test_loss_decreases_on_tiny_overfit(self, tmp_path):
        cfg = tiny_train_config(epochs=6, steps_per_epoch=4, batch_size=2,
                                train_size=2, val_size=1, lr=3e-3)
        tr = tiny_samples(cfg, "train", 2)
        va = tiny_samples(cfg, "val", 1)
        _, log = train(cfg, tmp_path, tr, va)
        assert log[-1]["loss"] < log[0]["loss"]

    def test_nonfinite_loss_names_a_tensor(self, tmp_path):
        cfg = tiny_train_config(epochs=1, steps_per_epoch=1, lr=1e-3)
        tr = tiny_samples(cfg, "train", 2)
        va = tiny_samples(cfg, "val", 1)
        model_holder = {}

        orig_forward = MMNet.forward

        def poisoned(self, image, tokens):
            out = orig_forward(self, image, tokens)
            out.y.data[0, 0] = np.nan
            return out

        MMNet.forward = poisoned
        try:
            with pytest.raises(RuntimeError, match="non-finite"):
                train(cfg, tmp_path, tr, va)
        finally:
            MMNet.forward = orig_forward

    def test_checkpoint_restores_identical_predictions(self, tmp_path):
        cfg = tiny_train_config(epochs=1, steps_per_epoch=2)
        tr = tiny_samples(cfg, "train", cfg.train_size)
        va = tiny_samples(cfg, "val", cfg.val_size)
        model, _ = train(cfg, tmp_path, tr, va)
        loaded_cfg, params = ckpt.load(tmp_path / "checkpoint.bin")
        restored = MMNet(config_from_dict(loaded_cfg).model, seed=99)
        restored.store.load_state(params)
        s = va[0]
        a = model.prediction_prob(model.forward(s.image, s.tokens))
        b = restored.prediction_prob(restored.forward(s.image, s.tokens))
        np.testing.assert_array_equal(a, b)


class TestEvaluate:
    def test_prediction_upsampled_and_counted(self):
        cfg = tiny_model_config()
        model = MMNet(cfg, seed=1)
        samples = tiny_samples(tiny_train_config(), "val", 2)
        rep = evaluate_model(model, samples)
        assert 0.0 <= rep.iou <= 1.0
        assert len(rep.per_sample) == 2
        for r in rep.per_sample:
            assert 0.0 <= r["iou"] <= 1.0

    def test_empty_split_rejected(self):
        cfg = tiny_model_config()
        model = MMNet(cfg, seed=1)
        with pytest.raises(Exception):
            evaluate_model(model, [])
