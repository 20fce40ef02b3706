import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_check
from trec.data import TaskSpec, generate_task, make_batches
from trec.denoiser import DenoiserConfig, sinusoidal
from trec.trainer import TrainConfig, Trainer, build_model
from trec.schedule import ScalingPolicy, make_schedule

TINY = DenoiserConfig(vocab_size=10, n_layers=1, n_heads=2, d_model=8, d_ffn=16, d=8, max_len=12)


def tiny_model(seed=0, dtype=torch.float64, config=TINY):
    return build_model(config, seed, dtype)


def _np(p):
    return p.detach().numpy().astype(np.float64)


def _layer_norm(x, ln):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * _np(ln.weight) + _np(ln.bias)


def _linear(x, lin):
    return x @ _np(lin.weight).T + _np(lin.bias)


def _gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def _attention(x, mem, att, n_heads, key_pad):
    D = x.shape[-1]
    dh = D // n_heads
    q, k, v = _linear(x, att.q), _linear(mem, att.k), _linear(mem, att.v)
    heads = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        s[:, key_pad] = -np.inf
        w = np.exp(s - s.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        heads.append(w @ v[:, sl])
    return _linear(np.concatenate(heads, -1), att.o)


def _positions(L, D):
    pos = np.zeros((L, D))
    for p in range(L):
        for i in range(D // 2):
            angle = p / 10000 ** (2 * i / D)
            pos[p, 2 * i] = math.sin(angle)
            pos[p, 2 * i + 1] = math.cos(angle)
    return pos


def oracle_encode(model, src, n_valid):
    """Straight-line numpy forward of the source encoder for one padded sequence."""
    c = model.config
    key_pad = np.arange(len(src)) >= n_valid
    x = _np(model.src_embed.weight)[src] + _positions(len(src), c.d_model)
    for layer in model.encoder:
        y = _layer_norm(x, layer.ln1)
        x = x + _attention(y, y, layer.attn, c.n_heads, key_pad)
        y = _layer_norm(x, layer.ln2)
        x = x + _linear(_gelu(_linear(y, layer.ffn.fc1)), layer.ffn.fc2)
    return _layer_norm(x, model.enc_norm)


@pytest.mark.parametrize("src,n_valid", [([5], 1), ([4, 7, 9, 6], 4), ([4, 7, 0, 0], 2)])
def test_encoder_matches_numpy_oracle(src, n_valid):
    model = tiny_model(1)
    mask = torch.arange(len(src))[None] >= n_valid
    mem = model.encode(torch.tensor([src]), mask)
    ref = oracle_encode(model, np.array(src), n_valid)
    np.testing.assert_allclose(mem.states[0, :n_valid].detach().numpy(), ref[:n_valid], atol=1e-10)


def test_encode_deterministic_and_pad_tail_invariant():
    model = tiny_model(2)
    src = torch.tensor([[4, 5, 6, 0, 0, 0]])
    a = model.encode(src)
    b = model.encode(src)
    assert torch.equal(a.states, b.states)
    scrambled = torch.tensor([[4, 5, 6, 9, 7, 8]])
    c = model.encode(scrambled, src == 0)
    torch.testing.assert_close(a.states[:, :3], c.states[:, :3], rtol=0, atol=1e-12)


def test_empty_source_rejected():
    with pytest.raises(ValueError):
        tiny_model().encode(torch.zeros(1, 0, dtype=torch.long))


def test_self_cond_none_is_zero_latent():
    model = tiny_model(3)
    mem = model.encode(torch.tensor([[4, 5, 6]]))
    z = torch.randn(1, 5, 8, dtype=torch.float64)
    a = model.denoise(z, None, mem, 17)
    b = model.denoise(z, torch.zeros_like(z), mem, 17)
    assert torch.equal(a, b)


@given(L=st.integers(1, 12), B=st.integers(1, 3))
@settings(max_examples=20, deadline=None)
def test_denoise_shape(L, B):
    model = tiny_model(4)
    mem = model.encode(torch.randint(4, 10, (B, 3)))
    z = torch.randn(B, L, 8, dtype=torch.float64)
    assert model.denoise(z, z, mem, 5).shape == z.shape


def test_denoise_rejects_bad_shapes():
    model = tiny_model(4)
    mem = model.encode(torch.tensor([[4, 5]]))
    with pytest.raises(ValueError):
        model.denoise(torch.zeros(1, 3, 8, dtype=torch.float64), torch.zeros(1, 2, 8, dtype=torch.float64), mem, 1)
    with pytest.raises(ValueError):
        model.denoise(torch.zeros(1, 3, 5, dtype=torch.float64), None, mem, 1)
    with pytest.raises(ValueError):
        model.denoise(torch.zeros(1, 13, 8, dtype=torch.float64), None, mem, 1)


def test_permutation_equivariance_without_positions():
    model = tiny_model(5)
    model.use_positions = False
    mem = model.encode(torch.tensor([[4, 8, 6]]))
    z = torch.randn(1, 6, 8, dtype=torch.float64)
    sc = torch.randn(1, 6, 8, dtype=torch.float64)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    out = model.denoise(z, sc, mem, 300)
    out_p = model.denoise(z[:, perm], sc[:, perm], mem, 300)
    torch.testing.assert_close(out_p, out[:, perm], rtol=0, atol=1e-12)


def test_latent_padding_does_not_leak():
    model = tiny_model(6)
    mem = model.encode(torch.tensor([[4, 8, 6]]))
    z = torch.randn(1, 5, 8, dtype=torch.float64)
    mask = torch.tensor([[False, False, False, True, True]])
    a = model.denoise(z, None, mem, 9, mask)
    z2 = z.clone()
    z2[:, 3:] = torch.randn(1, 2, 8, dtype=torch.float64) * 10
    b = model.denoise(z2, None, mem, 9, mask)
    torch.testing.assert_close(a[:, :3], b[:, :3], rtol=0, atol=1e-12)


@pytest.mark.parametrize("with_sc", [False, True])
def test_gradients_match_finite_differences(with_sc):
    model = tiny_model(7)
    g = torch.Generator().manual_seed(0)
    src = torch.tensor([[4, 5, 6, 7], [8, 9, 0, 0]])
    z = torch.randn(2, 3, 8, generator=g, dtype=torch.float64)
    sc = torch.randn(2, 3, 8, generator=g, dtype=torch.float64) if with_sc else None
    t = torch.tensor([13, 1500])

    def probe():
        mem = model.encode(src)
        return model.denoise(z, sc, mem, t).sum() + model.length_logits(mem).sum()

    finite_difference_check(model, probe)


def test_t0_sinusoid_pattern():
    base = sinusoidal(torch.tensor(0), 8)
    assert base.tolist() == [0.0, 1.0] * 4


def test_time_embedding_distinct_over_full_range():
    model = build_model(DenoiserConfig(), 0)
    with torch.no_grad():
        emb = model.time_embedding(torch.arange(2001)).double()
        assert torch.equal(model.time_embedding(7), model.time_embedding(7))
    dist = torch.cdist(emb, emb)
    dist.fill_diagonal_(float("inf"))
    assert dist.min().item() >= 1e-6


def test_length_head_probabilities_and_top_k():
    model = tiny_model(8)
    mem = model.encode(torch.tensor([[4, 5, 6]]))
    p = model.predict_length(mem)
    assert p.shape == (1, 17)
    assert p.sum().item() == pytest.approx(1.0, abs=1e-6)
    lens = model.top_lengths(mem, 3, 5)
    assert len(set(lens)) == 5
    order = [model.predict_length(mem)[0, n - 3 + 8].item() for n in lens if n > 1]
    assert order == sorted(order, reverse=True)


def test_offset_targets_clamped():
    model = tiny_model()
    off = model.offset_targets(torch.tensor([3, 20, 5]), torch.tensor([5, 2, 5]))
    assert off.tolist() == [10, 0, 8]


def test_length_head_learns_copy_offsets():
    torch.manual_seed(0)
    spec = TaskSpec(kind="copy", n_train=2000, n_valid=200, max_len=10, seed=3)
    train, valid, vocab = generate_task(spec)
    model = build_model(DenoiserConfig(vocab_size=len(vocab)), 0)
    cfg = TrainConfig(batch_size=64, warmup_steps=50, lr=1e-3, seed=0)
    trainer = Trainer(model, make_schedule(), ScalingPolicy(), cfg, train, valid)
    trainer.run(300, log_every=0)
    hits = total = 0
    with torch.no_grad():
        for batch in make_batches(valid, 100, 0):
            mem = model.encode(batch.src, batch.src_mask)
            hits += (model.length_logits(mem).argmax(-1) == 8).sum().item()
            total += len(batch)
    assert hits / total >= 0.95


def test_paper_preset():
    c = DenoiserConfig.paper(32000)
    assert (c.n_layers, c.d_model, c.n_heads, c.d_ffn, c.d) == (6, 512, 8, 2048, 128)
    with pytest.raises(ValueError):
        DenoiserConfig(d_model=10, n_heads=4)


def test_module_wrappers_agree():
    from trec import denoiser as dn

    model = tiny_model(9)
    mem = dn.encode_source([4, 5, 6], model)
    z = torch.randn(1, 2, 8, dtype=torch.float64)
    assert torch.equal(dn.denoise(z, None, mem, 3, model), model.denoise(z, None, mem, 3))
    assert torch.equal(dn.predict_length(mem, model), model.predict_length(mem))
    assert torch.equal(dn.time_embedding(3, model), model.time_embedding(3))
