import numpy as np
import pytest

from mqt import nn
from mqt.model import ConfigError, CtamTrace, MQTConfig, MQTransformer, TaskSpec
from mqt.tensor import ContractError, Tensor, add, concat_rows, constant, split_rows

import oracles

TASKS = [TaskSpec("seg", "seg", 3), TaskSpec("depth", "depth")]
SMALL = dict(TN=2, S=2, N=4, C=8, num_heads=2, image_h=16, image_w=16)


def make(dtype=np.float64, tasks=TASKS, seed=0, **kw):
    cfg = MQTConfig(**{**SMALL, **kw})
    return MQTransformer(cfg, tasks[: cfg.TN], seed=seed, dtype=dtype)


def image(h=16, w=16, seed=1):
    return np.random.default_rng(seed).uniform(0, 1, size=(h, w, 3))


def banks_of(model, seed=2, scale=1.0):
    rng = np.random.default_rng(seed)
    cfg = model.config
    return {
        (s, t): constant(rng.standard_normal((cfg.N, cfg.C)) * scale, dtype=model.dtype)
        for s in range(1, cfg.S + 1)
        for t in range(1, cfg.TN + 1)
    }


class TestConfig:
    def test_indivisible_input(self):
        with pytest.raises(ContractError, match="divisible by 8"):
            MQTConfig(image_h=60, image_w=64).validate()

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            MQTConfig(C=10, num_heads=4).validate()

    def test_unknown_task_kind(self):
        with pytest.raises(ConfigError):
            MQTransformer(MQTConfig(TN=1, **{k: v for k, v in SMALL.items() if k != "TN"}), [TaskSpec("x", "unknown")])

    def test_task_count_mismatch(self):
        with pytest.raises(ConfigError):
            MQTransformer(MQTConfig(**{**SMALL, "TN": 3}), TASKS)

    def test_roundtrip(self):
        cfg = MQTConfig(**SMALL)
        assert MQTConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            MQTConfig.from_dict({"bogus": 1})


class TestFeatures:
    def test_shapes(self):
        model = MQTransformer(MQTConfig(TN=2, S=2, N=8, C=16), TASKS)
        feats = model.extract_features(image(64, 64))
        assert [m.shape for m in feats.maps] == [(16, 16, 16), (8, 8, 16)]

    def test_zero_image_zero_bias(self):
        model = make()
        for name, p in model.named_parameters().items():
            if name.startswith("backbone.") and name.endswith(".bias"):
                p.data[...] = 0
        feats = model.extract_features(np.zeros((16, 16, 3)))
        for m in feats.maps:
            assert np.array_equal(m.data, np.zeros_like(m.data))

    def test_wrong_image_size(self):
        with pytest.raises(ContractError):
            make().extract_features(np.zeros((12, 16, 3)))

    def test_pyramid_matches_oracle(self):
        model = make(D=0)
        for spec, pred in model(image()).items():
            ref = oracles.forward(model, image())[spec]
            np.testing.assert_allclose(pred.data, ref, atol=1e-10)


class TestEncoder:
    def test_shape_and_oracle(self):
        model = MQTransformer(MQTConfig(TN=2, S=2, N=8, C=16, num_heads=4, image_h=32, image_w=32), TASKS,
                              dtype=np.float64)
        feats = model.extract_features(image(32, 32))
        x = feats.flat(1)
        assert x.shape == (64, 16)
        layer = model.encoder_layers(1, 1)[0]
        p = model.queries[(1, 1)]
        out = model.encoder_step(p, x, 1, 1, layer)
        assert out.shape == (8, 16)
        P = lambda t: t.data  # noqa: E731
        q = oracles.layer_norm(P(p) + P(model.pe_q[(1, 1)]), P(layer.ln_q.gamma), P(layer.ln_q.beta))
        k = oracles.layer_norm(P(x) + P(model.pe_k[1]), P(layer.ln_x.gamma), P(layer.ln_x.beta))
        v = oracles.layer_norm(P(x), P(layer.ln_x.gamma), P(layer.ln_x.beta))
        a = layer.attn
        ref = P(p) + oracles.mhsa(q, k, v, P(a.wq), P(a.wk), P(a.wv), P(a.wo), 4)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_value_pe_flag(self):
        off, on = make(), make(value_pe=True)
        feats = off.extract_features(image())
        args = (off.queries[(1, 1)], feats.flat(1), 1, 1)
        a = off.encoder_step(*args, off.encoder_layers(1, 1)[0]).data
        b = on.encoder_step(*args, on.encoder_layers(1, 1)[0]).data
        assert not np.allclose(a, b)

    def test_zero_output_projection_identity(self):
        model = make()
        layer = model.encoder_layers(1, 1)[0]
        layer.attn.wo.data[...] = 0
        p = model.queries[(1, 1)]
        out = model.encoder_step(p, model.extract_features(image()).flat(1), 1, 1, layer)
        assert np.array_equal(out.data, p.data)


class TestQueryLearning:
    def test_zero_mlp_identity(self):
        model = make()
        layer = model.encoder_layers(1, 1)[0]
        layer.mlp_ql.w2.data[...] = 0
        layer.mlp_ql.b2.data[...] = 0
        p = banks_of(model)[(1, 1)]
        assert np.array_equal(model.query_learning(p, layer).data, p.data)

    def test_disabled_is_bit_exact_passthrough(self):
        model = make(enable_query_learning=False)
        layer = model.encoder_layers(1, 1)[0]
        assert layer.mlp_ql is None
        p = banks_of(model)[(1, 1)]
        assert model.query_learning(p, layer) is p

    def test_oracle(self):
        model = make()
        layer = model.encoder_layers(2, 1)[0]
        p = banks_of(model)[(2, 1)]
        m, ln = layer.mlp_ql, layer.ln_ql
        ref = p.data + oracles.mlp(oracles.layer_norm(p.data, ln.gamma.data, ln.beta.data),
                                   m.w1.data, m.b1.data, m.w2.data, m.b2.data)
        np.testing.assert_allclose(model.query_learning(p, layer).data, ref, atol=1e-12)


def _four_term_sum(model, banks, refine):
    """The four-term ctam sum for S = TN = 2, written out literally."""
    n = model.config.N
    p = {k: v.data if isinstance(v, Tensor) else v for k, v in banks.items()}
    cat = np.concatenate
    q1, q2 = refine(cat([p[1, 1], p[1, 2]])), refine(cat([p[2, 1], p[2, 2]]))
    q3, q4 = refine(cat([p[1, 1], p[2, 1]])), refine(cat([p[1, 2], p[2, 2]]))
    p1 = q1[:n] + q2[:n] + q3[:n] + q3[n:]
    p2 = q1[n:] + q2[n:] + q4[:n] + q4[n:]
    return p1, p2


class TestCtam:
    def test_zero_weights_double_sum(self):
        model = make()
        for t in model.ctam_params.attn.named().values():
            t.data[...] = 0
        m = model.ctam_params.mlp
        for t in (m.w1, m.b1, m.w2, m.b2):
            t.data[...] = 0
        banks = banks_of(model)
        fused = model.ctam(banks)
        for t in (1, 2):
            np.testing.assert_allclose(fused[t - 1].data, 2 * (banks[1, t].data + banks[2, t].data), atol=1e-15)

    def test_literal_transcription(self):
        model = make()
        banks = banks_of(model)
        fused = model.ctam(banks)
        cp = model.ctam_params
        a, ln, m = cp.attn, cp.ln, cp.mlp

        def refine(g):
            g = g + oracles.mhsa(g, g, g, a.wq.data, a.wk.data, a.wv.data, a.wo.data, 2)
            return g + oracles.mlp(oracles.layer_norm(g, ln.gamma.data, ln.beta.data),
                                   m.w1.data, m.b1.data, m.w2.data, m.b2.data)

        for got, ref in zip(fused, _four_term_sum(model, banks, refine)):
            np.testing.assert_allclose(got.data, ref, atol=1e-12)

    def test_general_rule_reproduces_four_term_sum_exactly(self):
        model = make(dtype=np.float32)
        banks = banks_of(model)
        fused = model.ctam(banks)
        ref = _four_term_sum(model, banks, lambda g: model.ctam_refine(constant(g, dtype=np.float32)).data)
        for got, want in zip(fused, ref):
            assert np.array_equal(got.data, want)

    def test_trace_covers_every_bank_once_per_group_type(self):
        model = make(S=3, TN=2, image_h=32, image_w=32)
        trace = CtamTrace()
        model.ctam(banks_of(model), trace)
        assert len(trace.cross_task) == 3 and all(len(g) == 2 for g in trace.cross_task)
        assert len(trace.cross_scale) == 2 and all(len(g) == 3 for g in trace.cross_scale)

    def test_permutation_equivariance_single_precision(self):
        model = make(dtype=np.float32)
        banks = banks_of(model)
        perm = np.random.default_rng(9).permutation(model.config.N)
        permuted = {k: constant(v.data[perm], dtype=np.float32) for k, v in banks.items()}
        for a, b in zip(model.ctam(banks), model.ctam(permuted)):
            np.testing.assert_allclose(b.data, a.data[perm], atol=1e-6)

    def test_group_bookkeeping_roundtrip(self):
        model = make(S=3, TN=3, image_h=32, image_w=32, tasks=TASKS + [TaskSpec("sal", "sal")])
        banks = banks_of(model)
        n = model.config.N
        for s in range(1, 4):
            pieces = split_rows(concat_rows([banks[s, t] for t in range(1, 4)]), [n] * 3)
            for t, piece in enumerate(pieces, start=1):
                assert np.array_equal(piece.data, banks[s, t].data)

    def test_disabled_is_plain_sum(self):
        model = make(enable_ctam=False)
        assert model.ctam_params is None
        banks = banks_of(model)
        for t, got in enumerate(model.ctam(banks), start=1):
            assert np.array_equal(got.data, add(banks[1, t], banks[2, t]).data)

    def test_missing_bank(self):
        model = make()
        banks = banks_of(model)
        del banks[2, 2]
        with pytest.raises(AssertionError):
            model.ctam(banks)


class TestDecoder:
    def test_shape(self):
        model = MQTransformer(MQTConfig(TN=2, S=2, N=64, C=32), TASKS)
        feats = model.extract_features(image(64, 64))
        x = feats.flat(1)
        out = model.decoder_step(x, model.queries[(1, 1)], model.decoder_layers(1)[0])
        assert x.shape == (256, 32) and out.shape == (256, 32)

    def test_identity(self):
        model = make()
        layer = model.decoder_layers(1)[0]
        for t in (layer.attn.wo, layer.mlp.w2, layer.mlp.b2):
            t.data[...] = 0
        x = model.extract_features(image()).flat(1)
        assert np.array_equal(model.decoder_step(x, banks_of(model)[1, 1], layer).data, x.data)

    def test_oracle(self):
        model = make()
        layer = model.decoder_layers(1)[0]
        x = model.extract_features(image()).flat(1)
        ph = banks_of(model)[1, 2]
        d = lambda t: t.data  # noqa: E731
        kv = oracles.layer_norm(d(ph), d(layer.ln_p.gamma), d(layer.ln_p.beta))
        q = oracles.layer_norm(d(x), d(layer.ln_x.gamma), d(layer.ln_x.beta))
        a = layer.attn
        h = d(x) + oracles.mhsa(q, kv, kv, d(a.wq), d(a.wk), d(a.wv), d(a.wo), 2)
        m = layer.mlp
        ref = h + oracles.mlp(oracles.layer_norm(h, d(layer.ln_mlp.gamma), d(layer.ln_mlp.beta)),
                              d(m.w1), d(m.b1), d(m.w2), d(m.b2))
        np.testing.assert_allclose(model.decoder_step(x, ph, layer).data, ref, atol=1e-12)


class TestHeads:
    def test_constant_feature_constant_map(self):
        model = make()
        x = Tensor(np.full((4, 4, 8), 0.3), dtype=np.float64)
        for pred in model.task_heads([x, x]).values():
            for ch in range(pred.shape[-1]):
                np.testing.assert_allclose(pred.data[..., ch], pred.data[0, 0, ch], atol=1e-14)

    def test_shapes_and_normals_unit_norm(self):
        tasks = [TaskSpec("depth", "depth"), TaskSpec("normals", "normals"), TaskSpec("edge", "edge")]
        model = make(TN=3, tasks=tasks, dtype=np.float32)
        preds = model(image())
        assert preds["depth"].shape == (16, 16, 1)
        assert preds["edge"].shape == (16, 16, 1)
        norms = np.linalg.norm(preds["normals"].data, axis=-1)
        assert np.abs(norms - 1).max() < 1e-6


class TestForward:
    @pytest.mark.parametrize(
        "flags",
        [
            {},
            {"share_encoder": False, "share_decoder": False},
            {"enable_query_learning": False, "enable_ctam": False},
            {"D": 2, "value_pe": True, "scale_dim": "channels"},
        ],
    )
    def test_matches_straight_line_oracle(self, flags):
        model = make(**flags)
        img = image()
        ref = oracles.forward(model, img)
        for name, pred in model(img).items():
            np.testing.assert_allclose(pred.data, ref[name], atol=1e-10)

    def test_shapes(self):
        model = MQTransformer(MQTConfig(TN=2, S=2, N=8, C=16), TASKS)
        preds = model(image(64, 64))
        assert preds["seg"].shape == (64, 64, 3) and preds["depth"].shape == (64, 64, 1)

    @pytest.mark.parametrize("flags", [{}, {"S": 3, "image_h": 32, "image_w": 32}, {"D": 2, "share_encoder": False}])
    def test_residual_transparency(self, flags):
        model = make(**flags)
        model.zero_residual_branches()
        img = image(model.config.image_h, model.config.image_w)
        base = model.baseline_forward(img)
        for name, pred in model(img).items():
            assert np.abs(pred.data - base[name].data).max() <= 1e-12

    def test_deterministic(self):
        a = make(seed=5, dtype=np.float32)(image())
        b = make(seed=5, dtype=np.float32)(image())
        for k in a:
            assert a[k].data.tobytes() == b[k].data.tobytes()


class TestParameters:
    def test_shared_encoder_count_independent_of_tasks(self):
        tasks = TASKS + [TaskSpec("sal", "sal")]
        counts = {tn: make(TN=tn, tasks=tasks).parameter_count("encoder.") for tn in (1, 2, 3)}
        assert len(set(counts.values())) == 1
        unshared = {tn: make(TN=tn, tasks=tasks, share_encoder=False).parameter_count("encoder.") for tn in (1, 2)}
        assert unshared[2] == 2 * unshared[1] == 4 * counts[1]

    def test_single_encoder_set_when_shared(self):
        names = make().named_parameters()
        assert {n.split(".")[1] for n in names if n.startswith("encoder.")} == {"shared"}

    def test_bank_count(self):
        model = make(S=3, image_h=32, image_w=32)
        assert sorted(model.queries) == [(s, t) for s in (1, 2, 3) for t in (1, 2)]
        assert all(p.shape == (4, 8) for p in model.queries.values())

    def test_baseline_has_no_query_parameters(self):
        names = make(D=0).named_parameters()
        assert not any(n.startswith(("queries", "pe_", "encoder", "decoder", "ctam")) for n in names)

    def test_state_dict_roundtrip(self):
        a, b = make(seed=1), make(seed=2)
        b.load_state_dict(a.state_dict())
        for k, v in a.state_dict().items():
            assert np.array_equal(v, b.state_dict()[k])
        with pytest.raises(ConfigError):
            b.load_state_dict({})

    def test_init_ranges(self):
        model = make()
        for name, p in model.named_parameters().items():
            if name.startswith(("queries", "pe_")):
                assert np.abs(p.data).max() <= nn.PE_HALF_WIDTH
