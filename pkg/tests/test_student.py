"""Student decoder: presets, block forms, QK-norm, causality, generation."""

import numpy as np
import pytest

from scriptkd import ndgrad as ng
from scriptkd.distill import rng_for
from scriptkd.encoder import EmbeddingSeq
from scriptkd.errors import CapacityError, ParameterError
from scriptkd.layers import Block, ParamSet, causal_mask
from scriptkd.ndgrad import GradTensor
from scriptkd.student import DecoderLM, StudentConfig, param_count_for, preset

TABLE_PARAMS = {"S": 44e6, "M": 92e6, "L": 234e6, "XL": 429e6}


def small_config(**kwargs):
    defaults = dict(hidden=32, blocks=2, heads=2, vocab=50, max_seq=64)
    defaults.update(kwargs)
    return StudentConfig(**defaults)


class TestPresets:
    def test_paper_table(self):
        assert (preset("XL", "paper").hidden, preset("XL", "paper").blocks) == (1024, 21)
        assert (preset("S", "paper").hidden, preset("S", "paper").blocks) == (256, 6)
        assert (preset("M", "paper").hidden, preset("M", "paper").blocks) == (512, 13)
        assert (preset("L", "paper").hidden, preset("L", "paper").blocks) == (768, 18)

    def test_desk_scaling_rule(self):
        cfg = preset("M", "desk")
        assert cfg.hidden == 512 // 4
        assert cfg.blocks == 5  # ceil(13/3)

    def test_desk_param_counts_strictly_increase(self):
        counts = [param_count_for(preset(n, "desk")) for n in ("S", "M", "L", "XL")]
        assert counts == sorted(counts)
        assert len(set(counts)) == 4

    def test_unknown_preset(self):
        with pytest.raises(ParameterError):
            preset("XXL")
        with pytest.raises(ParameterError):
            preset("S", "cloud")

    def test_analytic_count_matches_built_model(self):
        cfg = small_config()
        lm = DecoderLM(cfg, rng_for(0, 1))
        assert lm.param_count() == param_count_for(cfg)

    @pytest.mark.xfail(reason="published per-variant parameter counts are not "
                              "reproducible from (hidden, blocks) with head width 64, "
                              "MLP ratio 4 and a 32k vocab; see notes", strict=True)
    def test_paper_param_counts_within_ten_percent(self):
        for name, published in TABLE_PARAMS.items():
            count = param_count_for(preset(name, "paper"))
            assert abs(count - published) / published < 0.10, \
                f"{name}: {count / 1e6:.1f}M vs {published / 1e6:.0f}M"


class TestBlockForms:
    def test_zeroed_mlp_leaves_attention_path(self, rng):
        params = ParamSet()
        block = Block(params, "b", 16, 2, rng_for(1, 2), parallel=True)
        for name in ("b.mlp.fc1.w", "b.mlp.fc1.b", "b.mlp.fc2.w", "b.mlp.fc2.b"):
            params[name].data = np.zeros_like(params[name].data)
        x = GradTensor(rng.standard_normal((5, 16)).astype(np.float32))
        mask = causal_mask(5)
        out = block(x, mask)
        expected = ng.add(x, block.attn(block.ln1(x), mask))
        assert np.allclose(out.data, expected.data, atol=1e-6)

    def test_zeroed_both_branches_is_identity(self, rng):
        params = ParamSet()
        block = Block(params, "b", 16, 2, rng_for(2, 2), parallel=True)
        for name in ("b.attn.o.w", "b.attn.o.b", "b.mlp.fc2.w", "b.mlp.fc2.b"):
            params[name].data = np.zeros_like(params[name].data)
        x = GradTensor(rng.standard_normal((5, 16)).astype(np.float32))
        out = block(x, causal_mask(5))
        assert np.allclose(out.data, x.data, atol=1e-6)

    def test_parallel_vs_sequential_differ(self, rng):
        x = GradTensor(rng.standard_normal((6, 16)).astype(np.float32))
        outs = []
        for parallel in (True, False):
            params = ParamSet()
            block = Block(params, "b", 16, 2, rng_for(3, 2), parallel=parallel)
            outs.append(block(x, causal_mask(6)).data)
        assert not np.allclose(outs[0], outs[1])


class TestAttention:
    def test_qk_rows_unit_norm_before_scaling(self, rng):
        params = ParamSet()
        block = Block(params, "b", 16, 2, rng_for(4, 2), qk_norm=True)
        x = rng.standard_normal((5, 16)).astype(np.float32)
        q = block.attn.q_proj(GradTensor(x))
        per_head = ng.transpose(ng.reshape(q, (5, 2, 8)), (1, 0, 2))
        normed = ng.l2_normalize(per_head, axis=-1)
        assert np.allclose(np.linalg.norm(normed.data, axis=-1), 1.0, atol=1e-5)

    def test_weights_rows_sum_to_one_and_causal(self, rng):
        params = ParamSet()
        block = Block(params, "b", 16, 2, rng_for(5, 2), qk_norm=True)
        attn = block.attn
        length = 6
        u = GradTensor(rng.standard_normal((length, 16)).astype(np.float32))
        q = attn._split_heads(attn.q_proj(u), length)
        k = attn._split_heads(attn.k_proj(u), length)
        gamma = ng.exp(attn.qk_log_scale)
        q = ng.mul(ng.l2_normalize(q, axis=-1), gamma)
        k = ng.mul(ng.l2_normalize(k, axis=-1), gamma)
        scores = ng.add(ng.matmul(q, ng.transpose(k, (0, 2, 1))),
                        GradTensor(causal_mask(length)))
        weights = ng.softmax(scores, axis=-1).data
        assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-5)
        for i in range(length):
            assert np.all(weights[:, i, i + 1:] == 0.0)

    def test_single_position_sequence(self, rng):
        params = ParamSet()
        block = Block(params, "b", 16, 2, rng_for(6, 2), qk_norm=True)
        u = GradTensor(rng.standard_normal((1, 16)).astype(np.float32))
        out = block.attn(u, causal_mask(1))
        v = block.attn.v_proj(u)
        expected = block.attn.o_proj(v)
        assert np.allclose(out.data, expected.data, atol=1e-5)


class TestForward:
    def test_shapes(self, rng):
        cfg = small_config()
        lm = DecoderLM(cfg, rng_for(7, 1))
        zc = EmbeddingSeq(GradTensor(rng.standard_normal((10, 32)).astype(np.float32)),
                          role="combined")
        hidden, logits = lm.forward(zc)
        assert hidden.shape == (10, 32)
        assert logits.shape == (10, 50)

    def test_causality_bitwise(self, rng):
        cfg = small_config()
        lm = DecoderLM(cfg, rng_for(8, 1))
        base = rng.standard_normal((12, 32)).astype(np.float32)
        _, logits = lm.forward(EmbeddingSeq(GradTensor(base), role="combined"))
        for j in (3, 7, 11):
            perturbed = base.copy()
            perturbed[j] += rng.standard_normal(32).astype(np.float32)
            _, logits_p = lm.forward(EmbeddingSeq(GradTensor(perturbed), role="combined"))
            assert np.array_equal(logits.data[:j], logits_p.data[:j])
            assert not np.array_equal(logits.data[j:], logits_p.data[j:])

    def test_capacity_error(self, rng):
        cfg = small_config(max_seq=8)
        lm = DecoderLM(cfg, rng_for(9, 1))
        zc = EmbeddingSeq(GradTensor(rng.standard_normal((9, 32)).astype(np.float32)),
                          role="combined")
        with pytest.raises(CapacityError):
            lm.forward(zc)

    def test_architecture_flags_are_live(self, rng):
        zc = rng.standard_normal((10, 32)).astype(np.float32)
        outputs = {}
        for name, flags in {
            "both": dict(use_parallel_attention=True, use_qk_norm=True),
            "no_parallel": dict(use_parallel_attention=False, use_qk_norm=True),
            "no_qk": dict(use_parallel_attention=True, use_qk_norm=False),
        }.items():
            lm = DecoderLM(small_config(**flags), rng_for(10, 1))
            _, logits = lm.forward(EmbeddingSeq(GradTensor(zc), role="combined"))
            outputs[name] = logits.data
        assert not np.allclose(outputs["both"], outputs["no_parallel"])
        assert not np.allclose(outputs["both"], outputs["no_qk"])


class TestGenerate:
    def _lm_and_prefix(self, rng, seed=11):
        cfg = small_config(vocab=20)
        lm = DecoderLM(cfg, rng_for(seed, 1))
        prefix = EmbeddingSeq(GradTensor(rng.standard_normal((4, 32)).astype(np.float32)),
                              role="image")
        return lm, prefix

    def test_deterministic(self, rng):
        lm, prefix = self._lm_and_prefix(rng)
        a = lm.generate(prefix, bos_id=1, eos_id=2, pad_id=0, max_len=12)
        b = lm.generate(prefix, bos_id=1, eos_id=2, pad_id=0, max_len=12)
        assert a == b

    def test_never_emits_pad(self, rng):
        for seed in range(5):
            lm, prefix = self._lm_and_prefix(rng, seed=seed)
            ids = lm.generate(prefix, bos_id=1, eos_id=2, pad_id=0, max_len=16)
            assert 0 not in ids

    def test_max_len_zero(self, rng):
        lm, prefix = self._lm_and_prefix(rng)
        assert lm.generate(prefix, bos_id=1, eos_id=2, pad_id=0, max_len=0) == []

    def test_respects_max_len(self, rng):
        lm, prefix = self._lm_and_prefix(rng)
        ids = lm.generate(prefix, bos_id=1, eos_id=2, pad_id=0, max_len=5)
        assert len(ids) <= 5
