"""Fusion, combined objective, scheduler, optimizer, checkpoints."""

import math

import numpy as np
import pytest

from scriptkd import ndgrad as ng
from scriptkd.distill import (
    IGNORE_ID,
    AdamW,
    LossBundle,
    MetricsLog,
    Pipeline,
    TrainPlan,
    adam_state,
    adamw_step,
    arm_weights,
    cosine_lr,
    fuse,
    kd_loss,
    load_checkpoint,
    rng_for,
    save_checkpoint,
)
from scriptkd.encoder import EmbeddingSeq, VisionConfig
from scriptkd.errors import ContractError, DimensionError, ParameterError
from scriptkd.layers import Linear, ParamSet
from scriptkd.ndgrad import GradTensor
from scriptkd.student import StudentConfig
from scriptkd.teacher import teacher_config


def embed(rng, length, width, role):
    return EmbeddingSeq(GradTensor(rng.standard_normal((length, width)).astype(np.float32)),
                        role=role)


class TestFuse:
    def test_lengths_add_and_targets(self, rng):
        image = embed(rng, 5, 8, "image")
        text = embed(rng, 4, 8, "text")  # BOS + 3 tokens
        zc, targets = fuse(image, text, [7, 8, 9], eos_id=2)
        assert zc.role == "combined"
        assert zc.length == image.length + text.length
        assert list(targets[:5]) == [IGNORE_ID] * 5
        assert list(targets[5:]) == [7, 8, 9, 2]

    def test_empty_text_still_supervised(self, rng):
        image = embed(rng, 3, 8, "image")
        text = embed(rng, 1, 8, "text")  # BOS only
        _, targets = fuse(image, text, [], eos_id=2)
        assert list(targets) == [IGNORE_ID] * 3 + [2]

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            fuse(embed(rng, 3, 8, "image"), embed(rng, 2, 9, "text"), [5], eos_id=2)

    def test_text_length_contract(self, rng):
        with pytest.raises(ContractError):
            fuse(embed(rng, 3, 8, "image"), embed(rng, 2, 8, "text"), [5, 6], eos_id=2)


class TestKdLoss:
    def _logits_and_targets(self, rng, n=6, v=12):
        s_logits = GradTensor(rng.standard_normal((n, v)).astype(np.float32),
                              requires_grad=True)
        t_logits = GradTensor(rng.standard_normal((n, v)).astype(np.float32))
        targets = np.array([IGNORE_ID, IGNORE_ID] + list(rng.integers(0, v, size=n - 2)))
        return s_logits, t_logits, targets

    def test_ce_only_weights_total_equals_ce_exactly(self, rng):
        s_logits, t_logits, targets = self._logits_and_targets(rng)
        e1 = GradTensor(rng.standard_normal((6, 10)).astype(np.float32))
        e2 = GradTensor(rng.standard_normal((6, 10)).astype(np.float32))
        bundle = kd_loss(e1, e2, t_logits, s_logits, targets, weights=(1, 0, 0))
        assert bundle.l_total == bundle.l_ce

    def test_self_distillation_degenerate_case(self, rng):
        s_logits, _, targets = self._logits_and_targets(rng)
        e = GradTensor(rng.standard_normal((6, 10)).astype(np.float32))
        bundle = kd_loss(e, e, GradTensor(s_logits.data), s_logits, targets)
        assert bundle.l_l2 == 0.0
        assert bundle.l_kl == pytest.approx(0.0, abs=1e-6)

    def test_total_recomposes_from_parts(self, rng):
        s_logits, t_logits, targets = self._logits_and_targets(rng)
        e1 = GradTensor(rng.standard_normal((6, 10)).astype(np.float32))
        e2 = GradTensor(rng.standard_normal((6, 10)).astype(np.float32), requires_grad=True)
        weights = (0.7, 1.3, 0.5)
        bundle = kd_loss(e1, e2, t_logits, s_logits, targets, weights=weights)
        manual = (weights[0] * bundle.l_ce + weights[1] * bundle.l_l2
                  + weights[2] * bundle.l_kl)
        assert bundle.l_total == pytest.approx(manual, abs=1e-6)

    def test_no_gradient_into_teacher_side(self, rng):
        s_logits, _, targets = self._logits_and_targets(rng)
        t_logits = GradTensor(rng.standard_normal((6, 12)).astype(np.float32),
                              requires_grad=True)
        e1 = GradTensor(rng.standard_normal((6, 10)).astype(np.float32),
                        requires_grad=True)
        e2 = GradTensor(rng.standard_normal((6, 10)).astype(np.float32),
                        requires_grad=True)
        bundle = kd_loss(e1, e2, t_logits, s_logits, targets)
        ng.backward(bundle.total)
        assert e1.grad is None
        assert t_logits.grad is None
        assert e2.grad is not None
        assert s_logits.grad is not None

    def test_bridge_projection_applied(self, rng):
        s_logits, t_logits, targets = self._logits_and_targets(rng)
        params = ParamSet()
        bridge = Linear(params, "bridge", 4, 10, rng_for(0, 9))
        e1 = GradTensor(rng.standard_normal((6, 10)).astype(np.float32))
        e2 = GradTensor(rng.standard_normal((6, 4)).astype(np.float32), requires_grad=True)
        bundle = kd_loss(e1, e2, t_logits, s_logits, targets, proj=bridge)
        ng.backward(bundle.total)
        assert params["bridge.w"].grad is not None

    def test_zero_weight_allows_missing_teacher_inputs(self, rng):
        s_logits, _, targets = self._logits_and_targets(rng)
        bundle = kd_loss(None, None, None, s_logits, targets, weights=(1, 0, 0))
        assert bundle.l_total == bundle.l_ce

    def test_nonzero_weight_requires_teacher_inputs(self, rng):
        s_logits, _, targets = self._logits_and_targets(rng)
        with pytest.raises(ContractError):
            kd_loss(None, None, None, s_logits, targets, weights=(1, 1, 0))

    def test_negative_weights_rejected(self, rng):
        s_logits, t_logits, targets = self._logits_and_targets(rng)
        with pytest.raises(ParameterError):
            kd_loss(None, None, t_logits, s_logits, targets, weights=(1, 0, -1))

    def test_arm_weights(self):
        assert arm_weights("full") == (1.0, 1.0, 1.0)
        assert arm_weights("ce") == (1.0, 0.0, 0.0)
        assert arm_weights("ce+l2") == (1.0, 1.0, 0.0)
        assert arm_weights("ce+kl") == (1.0, 0.0, 1.0)
        with pytest.raises(ParameterError):
            arm_weights("l2")


class TestCosineLr:
    def test_end_of_warmup_is_max(self):
        assert cosine_lr(50, 1000, 1e-3, warmup_frac=0.05) == pytest.approx(1e-3)

    def test_final_step_is_zero(self):
        assert cosine_lr(1000, 1000, 1e-3, warmup_frac=0.05) == pytest.approx(0.0, abs=1e-12)

    def test_decay_midpoint_is_half(self):
        assert cosine_lr(525, 1000, 1e-3, warmup_frac=0.05) == pytest.approx(5e-4)

    def test_warmup_is_linear(self):
        assert cosine_lr(25, 1000, 1e-3, warmup_frac=0.05) == pytest.approx(5e-4)
        assert cosine_lr(0, 1000, 1e-3, warmup_frac=0.05) == 0.0

    def test_zero_total_rejected(self):
        with pytest.raises(ParameterError):
            cosine_lr(0, 0, 1e-3)

    def test_step_outside_range_rejected(self):
        with pytest.raises(ParameterError):
            cosine_lr(11, 10, 1e-3)


class TestAdamW:
    def test_zero_grad_zero_decay_leaves_params(self, rng):
        p = GradTensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
        before = p.data.copy()
        adamw_step([p], adam_state([p]), lr=1e-2, weight_decay=0.0)
        assert np.array_equal(p.data, before)

    def test_constant_gradient_fixed_point(self, rng):
        p = GradTensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        state = adam_state([p])
        g = np.array([0.5, -2.0, 7.0], dtype=np.float32)
        prev = p.data.copy()
        for _ in range(300):
            prev = p.data.copy()
            p.grad = g.copy()
            adamw_step([p], state, lr=1e-3, weight_decay=0.0)
        # update magnitude approaches lr * sign(g)
        assert np.allclose(np.abs(p.data - prev), 1e-3, rtol=0.05)

    def test_matches_reference_implementation(self, rng):
        shape = (5, 3)
        p = GradTensor(rng.standard_normal(shape).astype(np.float32), requires_grad=True)
        ref = p.data.astype(np.float64).copy()
        grads = [rng.standard_normal(shape).astype(np.float32) for _ in range(10)]
        state = adam_state([p])
        lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 0.01
        m = np.zeros(shape)
        v = np.zeros(shape)
        for t, g in enumerate(grads, start=1):
            p.grad = g.copy()
            adamw_step([p], state, lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
            g64 = g.astype(np.float64)
            m = b1 * m + (1 - b1) * g64
            v = b2 * v + (1 - b2) * g64 * g64
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            ref = ref - lr * (mhat / (np.sqrt(vhat) + eps) + wd * ref)
        assert np.abs(p.data - ref).max() < 1e-6

    def test_wrapper_applies_lr_override(self, rng):
        p = GradTensor(np.ones(2, dtype=np.float32), requires_grad=True)
        opt = AdamW([p], lr=1.0, weight_decay=0.0)
        p.grad = np.ones(2, dtype=np.float32)
        opt.step(lr=0.0)
        assert np.array_equal(p.data, np.ones(2, dtype=np.float32))


class TestGradAccumulation:
    def test_eight_micro_batches_equal_one_batch(self, tiny_task):
        from scriptkd.distill import _mean_loss

        vocab = tiny_task["vocab"]
        samples = (tiny_task["samples"] * 2)[:32]
        vis = VisionConfig(patch=64, d_v=16, blocks=1, heads=1)
        cfg = StudentConfig(hidden=32, blocks=1, heads=1, vocab=vocab.size, max_seq=64)

        def grads_for(batching):
            pipe = Pipeline(cfg, vis, seed=42)
            for start, size in batching:
                losses = []
                for img, ids, _ in samples[start:start + size]:
                    _, logits, targets = pipe.forward_sample(img, ids, vocab)
                    losses.append(ng.cross_entropy(logits, targets, ignore_id=IGNORE_ID))
                scale = size / len(samples)
                ng.backward(ng.scale(_mean_loss(losses), scale))
            return {name: t.grad.copy() for name, t in pipe.lm.params.items()
                    if t.grad is not None}

        accumulated = grads_for([(i, 4) for i in range(0, 32, 4)])
        single = grads_for([(0, 32)])
        assert accumulated.keys() == single.keys()
        for name in single:
            a, b = accumulated[name], single[name]
            denom = max(np.abs(b).max(), 1e-8)
            assert np.abs(a - b).max() / denom < 1e-5, name

    def test_optimizer_step_count_matches_accumulation_rule(self):
        plan = TrainPlan(batch_size=4, grad_accum=8)
        assert plan.effective_batch == 32
        n_micro = 20
        assert math.ceil(n_micro / plan.grad_accum) == 3


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        state = {
            "lm/blocks.0.attn.q.w": rng.standard_normal((4, 4)).astype(np.float32),
            "lm/lora.blocks.0.attn.q.a": rng.standard_normal((4, 2)).astype(np.float32),
            "encoder/patch_embed.b": rng.standard_normal(7).astype(np.float32),
            "scalar": np.float32(3.5),
        }
        path = tmp_path / "model.mosc"
        save_checkpoint(path, state)
        raw = path.read_bytes()
        assert raw[:5] == b"MOSC1"
        assert raw[5] == 1
        back = load_checkpoint(path)
        assert set(back) == set(state)
        for name in state:
            assert np.array_equal(back[name], np.asarray(state[name], dtype=np.float32))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.mosc"
        path.write_bytes(b"NOPE!" + bytes(20))
        from scriptkd.errors import DataFormatError

        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_pipeline_state_roundtrip(self, tmp_path, rng):
        vis = VisionConfig(patch=64, d_v=16, blocks=1, heads=1)
        cfg = teacher_config(hidden=32, blocks=1, vocab=40, max_seq=32)
        pipe = Pipeline(cfg, vis, seed=1)
        path = tmp_path / "pipe.mosc"
        save_checkpoint(path, pipe.state_dict())
        clone = Pipeline(cfg, vis, seed=2)
        clone.load_state_dict(load_checkpoint(path))
        x = rng.standard_normal((5, 32)).astype(np.float32)
        a = pipe.lm.forward(EmbeddingSeq(GradTensor(x), role="combined"))[1].data
        b = clone.lm.forward(EmbeddingSeq(GradTensor(x), role="combined"))[1].data
        assert np.array_equal(a, b)


class TestMetricsLog:
    def test_line_format(self, tmp_path):
        path = tmp_path / "metrics.tsv"
        log = MetricsLog(path)
        log.log(10, "val", "bleu", 0.5)
        log.log(20, "train", "loss_total", 1.25)
        log.close()
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "10\tval\tbleu\t0.5"
        assert lines[1] == "20\ttrain\tloss_total\t1.25"


class TestTrainingDeterminism:
    def test_student_training_bit_reproducible(self, tiny_task):
        from scriptkd.distill import train_student, train_teacher

        vocab = tiny_task["vocab"]
        samples = tiny_task["samples"]
        records = [type("S", (), {"image": img, "ids": ids, "text": text})()
                   for img, ids, text in samples]
        splits = {"train": records[:12], "val": records[12:14],
                  "test": records[14:]}
        vis = VisionConfig(patch=64, d_v=16, blocks=1, heads=1)
        tplan = TrainPlan(seed=5, pretrain_epochs=1, pretrain_lr=1e-3,
                          batch_size=2, grad_accum=2, lora_steps=2, val_subset=2)
        teacher = train_teacher(tplan, splits, vocab,
                                vision_config=vis,
                                lm_config=teacher_config(hidden=32, blocks=1,
                                                         vocab=vocab.size, max_seq=64))

        def run():
            splan = TrainPlan(seed=6, epochs=1, lr_student=1e-3, batch_size=2,
                              grad_accum=2, val_subset=2, max_gen_len=4)
            cfg = StudentConfig(hidden=16, blocks=1, heads=1, vocab=vocab.size,
                                max_seq=64)
            student, _, _ = train_student(splan, splits, vocab, teacher, cfg)
            return student.state_dict()

        a, b = run(), run()
        assert a.keys() == b.keys()
        for name in a:
            assert np.array_equal(a[name], b[name]), name


class TestLossBundleInvariant:
    def test_recomposition_identity_random(self, rng):
        for _ in range(20):
            parts = rng.random(3)
            weights = rng.random(3)
            total = float(np.dot(parts, weights))
            bundle = LossBundle(l_ce=parts[0], l_l2=parts[1], l_kl=parts[2],
                                l_total=total, w_ce=weights[0], w_l2=weights[1],
                                w_kl=weights[2])
            recomposed = (bundle.w_ce * bundle.l_ce + bundle.w_l2 * bundle.l_l2
                          + bundle.w_kl * bundle.l_kl)
            assert bundle.l_total == pytest.approx(recomposed, abs=1e-6)
