import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mqt import flops
from mqt.flops import FlopQuery
from mqt.model import MQTConfig, TaskSpec
from mqt.tensor import ContractError

TASKS = [TaskSpec("seg", "seg", 3), TaskSpec("depth", "depth")]


def g(scheme, h, w, **kw):
    return flops.flops_scheme(FlopQuery(scheme, h, w, **kw)).gflops


class TestComparisonTable:
    def test_none(self):
        assert flops.flops_none().total == 0
        assert g("none", 1, 1) == 0 and g("none", 128, 128) == 0

    def test_local_context_values(self):
        assert round(g("local_context", 64, 64), 2) == 21.74
        assert round(g("local_context", 128, 128), 2) == 86.98

    def test_local_context_linear_in_hw(self):
        a = flops.flops_local_context(FlopQuery("local_context", 32, 48)).total
        b = flops.flops_local_context(FlopQuery("local_context", 64, 96)).total
        assert b == 4 * a

    def test_local_context_even_kernel(self):
        with pytest.raises(ContractError):
            flops.flops_local_context(FlopQuery("local_context", K=4))

    def test_global_context_values(self):
        assert abs(g("global_context", 64, 64) / 9.74 - 1) < 0.02
        assert abs(g("global_context", 128, 128) / 142.83 - 1) < 0.02

    def test_global_attention_quadratic(self):
        a = flops.flops_global_context(FlopQuery("global_context", 16, 16)).items
        b = flops.flops_global_context(FlopQuery("global_context", 32, 32)).items
        assert b["attention_products"] == 16 * a["attention_products"]
        assert b["softmax"] == 16 * a["softmax"]

    def test_cross_task_value_and_size_independence(self):
        small = flops.flops_cross_task(FlopQuery("cross_task_attention", 64, 64))
        large = flops.flops_cross_task(FlopQuery("cross_task_attention", 128, 128))
        assert small.items == large.items and small.total == large.total
        assert 0.01 <= small.gflops <= 0.05

    def test_cross_task_hand_count(self):
        # 4 groups of 2 banks -> 2 ordered bank pairs per group, N^2 entries each
        n, c = 100, 256
        expected = 4 * 2 * (2 * n * n * c + 5 * n * n)
        assert flops.flops_cross_task(FlopQuery()).total == expected

    def test_cross_task_zero_queries(self):
        assert flops.flops_cross_task(FlopQuery(N=0)).total == 0

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(flops.SCHEMES), st.integers(1, 64), st.integers(1, 64), st.integers(1, 64),
           st.integers(0, 32), st.sampled_from([1, 3, 5]), st.integers(1, 4), st.integers(1, 4))
    def test_items_sum_to_total(self, scheme, h, w, c, n, k, tn, s):
        r = flops.flops_scheme(FlopQuery(scheme, h, w, c, n, k, tn, s))
        assert r.total == sum(r.items.values()) and all(v >= 0 for v in r.items.values())

    def test_bad_query(self):
        with pytest.raises(ContractError):
            FlopQuery("bogus")
        with pytest.raises(ContractError):
            FlopQuery(H=0)

    def test_format(self):
        text = flops.format_comparison_table(flops.comparison_table())
        assert "21.74" in text and "86.98" in text and "0.04" in text


class TestModelFlops:
    def test_baseline_is_backbone_plus_heads(self):
        r = flops.flops_model(MQTConfig(D=0, C=16, N=8), TASKS)
        assert set(r.items) == {"backbone", "heads"}

    def test_ctam_item_matches_cross_task(self):
        cfg = MQTConfig(C=32, N=16)
        r = flops.flops_model(cfg, TASKS)
        assert r.items["ctam"] == flops.flops_cross_task(FlopQuery(C=32, N=16, TN=2, S=2)).total

    def test_hand_count(self):
        cfg = MQTConfig(TN=2, S=2, N=8, C=16, num_heads=4, image_h=64, image_w=64)
        r = flops.flops_model(cfg, TASKS)
        c, n = 16, 8
        backbone = (32 * 32 * 9 * 3 * c) + (16 * 16 * 9 * c * c) + (8 * 8 * 9 * c * c) + 16 * 16 * c * c + 8 * 8 * c * c
        assert r.items["backbone"] == backbone

        enc = 0
        for hw in (256, 64):  # two scales, two tasks each
            q_o = 2 * n * c * c  # W_q and W_o on the N queries
            k_v = 2 * hw * c * c  # W_k and W_v on the HW features
            attn = 2 * n * hw * c + 5 * n * hw
            ql = n * c * 4 * c + n * 4 * c * c
            enc += 2 * (q_o + k_v + attn + ql)
        got_enc = sum(v for k, v in r.items.items() if k.startswith("encoder."))
        assert got_enc == enc

        ctam_local = 0
        for _ in range(4):  # groups of 2 banks = 16 rows
            rows = 2 * n
            ctam_local += 4 * rows * c * c + 2 * 2 * n * n * c + 5 * 2 * n * n + 2 * rows * 4 * c * c
        assert sum(v for k, v in r.items.items() if k.startswith("ctam_local.")) == ctam_local

        hw = 256
        dec_one = 2 * hw * c * c + 2 * n * c * c + 2 * hw * n * c + 5 * hw * n + 2 * hw * 4 * c * c
        assert sum(v for k, v in r.items.items() if k.startswith("decoder.")) == 2 * dec_one

        assert r.items["heads"] == hw * c * 3 + hw * c * 1
        assert r.total == sum(r.items.values())

    def test_image_override(self):
        cfg = MQTConfig(C=16, N=8)
        a = flops.flops_model(cfg, TASKS, (128, 128))
        assert a.items["backbone"] == 4 * flops.flops_model(cfg, TASKS).items["backbone"]
