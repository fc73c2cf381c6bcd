import math

import numpy as np
import pytest

from driftlab.autograd import (
    Tape,
    Tensor,
    add,
    backward,
    causal_mask,
    embedding,
    gelu,
    gradcheck,
    layernorm,
    matmul,
    mul,
    reshape,
    softmax,
    transpose,
    tsum,
)
from driftlab.checkpoint import file_checksum, load_checkpoint, save_checkpoint
from driftlab.model import (
    FeatureCapture,
    LengthError,
    ModelConfig,
    TransformerWeights,
    VocabError,
    forward,
    greedy_decode,
    project_logits,
)

from conftest import TINY


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(d_model=10, n_heads=3)

    def test_positive_extents(self):
        with pytest.raises(ValueError):
            ModelConfig(n_layers=0)

    def test_param_count_is_config_function(self):
        a = TransformerWeights(TINY)
        b = TransformerWeights(ModelConfig(**{**TINY.__dict__, "seed": 99}))
        assert a.param_count() == b.param_count()


class TestForward:
    def test_deterministic_bitwise(self, tiny_weights):
        toks = np.array([1, 5, 2, 7])
        a = forward(tiny_weights, toks).data
        b = forward(tiny_weights, toks).data
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("seed", range(5))
    def test_causality(self, tiny_weights, seed):
        rng = np.random.default_rng(seed)
        toks = rng.integers(0, TINY.vocab_size, size=8)
        base = forward(tiny_weights, toks).data
        for i in range(1, 8):
            perm = toks.copy()
            perm[i:] = rng.permutation(perm[i:] + 1) % TINY.vocab_size
            out = forward(tiny_weights, perm).data
            assert np.array_equal(base[:i], out[:i]), f"position < {i} changed"

    def test_vocab_error(self, tiny_weights):
        with pytest.raises(VocabError):
            forward(tiny_weights, np.array([0, TINY.vocab_size]))

    def test_length_error(self, tiny_weights):
        with pytest.raises(LengthError):
            forward(tiny_weights, np.zeros(TINY.max_seq_len + 1, dtype=int))

    def test_batched_matches_single(self, tiny_weights):
        rng = np.random.default_rng(0)
        toks = rng.integers(0, TINY.vocab_size, size=(3, 6))
        batched = forward(tiny_weights, toks).data
        for i in range(3):
            single = forward(tiny_weights, toks[i]).data
            assert np.allclose(batched[i], single, atol=1e-6)

    def test_hand_composed_pipeline_oracle(self):
        """One-layer forward equals the same pipeline composed step by step."""
        cfg = ModelConfig(vocab_size=8, d_model=4, n_layers=1, n_heads=1, d_ff=8,
                          max_seq_len=6, seed=5)
        w = TransformerWeights(cfg, dtype=np.float64)
        toks = np.array([3, 1, 7, 2])
        got = forward(w, toks).data

        lw = w.layers[0]
        x = add(embedding(w.tok_emb, toks), embedding(w.pos_emb, np.arange(4)))
        h = layernorm(x, lw.ln1_g, lw.ln1_b)
        q = matmul(h, lw.wq)
        k = matmul(h, lw.wk)
        v = matmul(h, lw.wv)
        scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(4))
        attn = softmax(causal_mask(scores))
        o = matmul(matmul(attn, v), lw.wo)
        x = add(x, o)
        f = matmul(gelu(matmul(layernorm(x, lw.ln2_g, lw.ln2_b), lw.w_in)), lw.w_out)
        x = add(x, f)
        z = layernorm(x, w.ln_f_g, w.ln_f_b)
        want = add(matmul(z, transpose(w.out_w)), w.out_b).data
        assert np.abs(got - want).max() <= 1e-6


class TestFeatureCapture:
    def test_capture_never_changes_logits(self, tiny_weights):
        toks = np.array([1, 2, 3, 4, 5])
        plain = forward(tiny_weights, toks).data
        for site in ("attn_q", "attn_k", "attn_v", "attn_o", "attn_all", "ffn",
                     "all_layers", "logits"):
            cap = FeatureCapture(site)
            out = forward(tiny_weights, toks, capture=cap).data
            assert np.array_equal(plain, out), site
            assert cap.tensors

    def test_captured_shapes(self, tiny_weights):
        toks = np.array([[1, 2, 3]])
        d = TINY.d_model
        cases = {
            "attn_q": (TINY.n_layers, (1, 3, d)),
            "attn_all": (4 * TINY.n_layers, (1, 3, d)),
            "ffn": (TINY.n_layers, (1, 3, d)),
            "all_layers": (TINY.n_layers, (1, 3, d)),
            "logits": (1, (1, 3, TINY.vocab_size)),
        }
        for site, (count, shape) in cases.items():
            cap = FeatureCapture(site)
            forward(tiny_weights, toks, capture=cap)
            assert len(cap.tensors) == count, site
            assert all(t.shape == shape for t in cap.tensors), site

    def test_unknown_site_rejected(self):
        with pytest.raises(ValueError):
            FeatureCapture("attn_z")


class TestProjectLogits:
    def test_hand_arithmetic(self):
        z = Tensor([[1.0, 0.0]])
        w_t = np.array([[1.0, 0.0, -1.0], [0.0, 2.0, 0.0]], dtype=np.float32)
        w = Tensor(w_t.T.copy())
        b = Tensor([0.5, 0.0, 0.0])
        out = project_logits(z, w, b)
        assert np.allclose(out.data, [[1.5, 0.0, -1.0]])

    def test_identity_projection(self):
        z = Tensor(np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32))
        w = Tensor(np.eye(4, dtype=np.float32))
        b = Tensor(np.zeros(4, dtype=np.float32))
        assert np.allclose(project_logits(z, w, b).data, z.data, atol=1e-7)

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        z = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((5, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal(5), requires_grad=True, dtype=np.float64)
        r = Tensor(rng.standard_normal((3, 5)), dtype=np.float64)
        err = gradcheck(lambda: tsum(mul(project_logits(z, w, b), r)), [z, w, b])
        assert err <= 1e-6

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            project_logits(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 6))),
                           Tensor(np.zeros(5)))


class TestGreedyDecode:
    def test_max_new_zero(self, tiny_weights):
        prompt = np.array([1, 2, 3])
        out = greedy_decode(tiny_weights, prompt, max_new=0, stop_token=9)
        assert np.array_equal(out, prompt)

    def test_constant_emitter_fixture(self):
        cfg = ModelConfig(vocab_size=10, d_model=4, n_layers=1, n_heads=1, d_ff=4,
                          max_seq_len=8, seed=0)
        w = TransformerWeights(cfg)
        for _, t in w.named_parameters():
            t.data = np.zeros_like(t.data)
        w.out_b.data[7] = 5.0
        out = greedy_decode(w, np.array([1]), max_new=4, stop_token=9)
        assert out.tolist() == [1, 7, 7, 7, 7]

    def test_tie_breaks_to_lowest_id(self):
        cfg = ModelConfig(vocab_size=10, d_model=4, n_layers=1, n_heads=1, d_ff=4,
                          max_seq_len=8, seed=0)
        w = TransformerWeights(cfg)
        for _, t in w.named_parameters():
            t.data = np.zeros_like(t.data)
        w.out_b.data[2] = 3.0
        w.out_b.data[5] = 3.0
        out = greedy_decode(w, np.array([1]), max_new=1, stop_token=9)
        assert out.tolist() == [1, 2]

    def test_empty_prompt_rejected(self, tiny_weights):
        with pytest.raises(ValueError):
            greedy_decode(tiny_weights, np.array([], dtype=int), 3, 9)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny_weights, tmp_path):
        path = tmp_path / "w.ckpt"
        save_checkpoint(path, tiny_weights, extras={"opt.m.0000": np.ones(3, np.float32)},
                        meta={"note": 1})
        loaded = load_checkpoint(path)
        assert loaded.config == tiny_weights.config
        for (na, ta), (nb, tb) in zip(tiny_weights.named_parameters(),
                                      loaded.weights.named_parameters()):
            assert na == nb
            assert ta.data.tobytes() == tb.data.tobytes()
        assert loaded.extras["opt.m.0000"].tolist() == [1, 1, 1]
        assert loaded.meta == {"note": 1}

    def test_save_load_save_identical_files(self, tiny_weights, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, tiny_weights)
        save_checkpoint(p2, load_checkpoint(p1).weights)
        assert file_checksum(p1) == file_checksum(p2)

    def test_checksum_tracks_content(self, tiny_weights):
        before = tiny_weights.checksum()
        tiny_weights.tok_emb.data[0, 0] += 1.0
        assert tiny_weights.checksum() != before

    def test_rejects_non_checkpoint(self, tmp_path):
        from driftlab.checkpoint import CheckpointError

        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)


def test_full_block_gradcheck_small():
    cfg = ModelConfig(vocab_size=9, d_model=8, n_layers=1, n_heads=2, d_ff=12,
                      max_seq_len=6, seed=1)
    w = TransformerWeights(cfg, dtype=np.float64)
    w.set_requires_grad(True)
    toks = np.array([1, 4, 7, 2, 0])
    r = Tensor(np.random.default_rng(0).standard_normal((5, 9)), dtype=np.float64)
    err = gradcheck(lambda: tsum(mul(forward(w, toks), r)), w.parameters(),
                    max_entries=20, rng=np.random.default_rng(1))
    assert err <= 1e-3


def test_tied_embeddings_flag():
    cfg = ModelConfig(vocab_size=9, d_model=8, n_layers=1, n_heads=2, d_ff=12,
                      max_seq_len=6, seed=1, tied_embeddings=True)
    w = TransformerWeights(cfg)
    assert w.out_w is w.tok_emb
    names = [n for n, _ in w.named_parameters()]
    assert "out_w" not in names
    untied = TransformerWeights(ModelConfig(**{**cfg.__dict__, "tied_embeddings": False}))
    assert untied.param_count() == w.param_count() + 9 * 8
