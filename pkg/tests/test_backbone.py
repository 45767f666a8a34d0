import numpy as np
import pytest
import torch

from tsgrounding.backbone import (
    CrossSimilarity,
    EmbeddingTable,
    EncoderConfig,
    MultiHeadAttention,
    TextualEncoder,
    VisualEncoder,
    masked_mean,
    masked_softmax,
    sinusoidal_positions,
)
from tsgrounding.datamodel import MASK_ID, Vocab


def _mask(B, T, n_valid):
    return torch.arange(T)[None, :] < torch.as_tensor(n_valid)[:, None]


def test_encoder_config_rejects_bad_heads():
    with pytest.raises(ValueError):
        EncoderConfig(D=10, num_heads=4)


def test_visual_encoder_shape_default_dims():
    enc = VisualEncoder(64, EncoderConfig(D=128, num_heads=8)).eval()
    out = enc(torch.randn(1, 128, 64), torch.ones(1, 128, dtype=torch.bool))
    assert out.shape == (1, 128, 128)


def test_per_head_dim():
    assert MultiHeadAttention(128, 8).head_dim == 16


def test_visual_encoder_padded_rows_zero_and_deterministic():
    torch.manual_seed(0)
    enc = VisualEncoder(6, EncoderConfig(D=16, num_heads=4)).eval()
    x = torch.randn(2, 7, 6)
    mask = _mask(2, 7, [7, 4])
    x[1, 4:] = 0
    a, b = enc(x, mask), enc(x, mask)
    assert torch.equal(a, b)
    assert torch.all(a[1, 4:] == 0)


def test_visual_encoder_dim_mismatch():
    enc = VisualEncoder(6, EncoderConfig(D=16, num_heads=4))
    with pytest.raises(ValueError):
        enc(torch.randn(1, 3, 5), torch.ones(1, 3, dtype=torch.bool))


def test_encoders_finite_at_extreme_magnitudes():
    torch.manual_seed(1)
    enc = VisualEncoder(5, EncoderConfig(D=8, num_heads=2)).eval()
    for scale in (1e-3, 1.0, 1e3):
        for _ in range(50):
            x = torch.randn(3, 6, 5) * scale
            assert torch.isfinite(enc(x, torch.ones(3, 6, dtype=torch.bool))).all()


def test_padded_frames_get_no_gradient():
    torch.manual_seed(2)
    enc = VisualEncoder(4, EncoderConfig(D=8, num_heads=2, dropout=0.0)).double().eval()
    x = torch.randn(1, 6, 4, dtype=torch.float64, requires_grad=True)
    mask = _mask(1, 6, [4])
    enc(x, mask).sum().backward()
    assert torch.all(x.grad[0, 4:] == 0)
    # perturbing a padded row leaves the output unchanged
    y = x.detach().clone()
    y[0, 5] += 10.0
    assert torch.allclose(enc(x.detach(), mask), enc(y, mask), atol=0, rtol=0)


def test_textual_encoder_shape_and_mask_row():
    torch.manual_seed(3)
    enc = TextualEncoder(20, EncoderConfig(D=16, num_heads=4, embed_dim_in=12)).eval()
    ids = torch.randint(3, 20, (1, 12))
    assert enc(ids, torch.ones(1, 12, dtype=torch.bool)).shape == (1, 12, 16)
    assert enc.embed(torch.tensor([MASK_ID])).abs().sum() > 0
    assert torch.all(enc.embed(torch.tensor([0])) == 0)


def test_embedding_out_of_vocab():
    table = EmbeddingTable(10, 4)
    with pytest.raises(IndexError, match="17"):
        table(torch.tensor([[1, 17]]))


def test_embedding_file_loading(tmp_path):
    vocab = Vocab(["cup", "door"])
    (tmp_path / "e.txt").write_text("cup 1 2 3\nzebra 0 0 0\n")
    table = EmbeddingTable(len(vocab), 3)
    assert table.load_vectors(tmp_path / "e.txt", vocab) == 1
    assert table.weights[vocab.stoi["cup"]].tolist() == [1, 2, 3]
    with pytest.raises(ValueError):
        EmbeddingTable(len(vocab), 4).load_vectors(tmp_path / "e.txt", vocab)


def test_masked_softmax_rows_and_zeros():
    rng = torch.Generator().manual_seed(4)
    for _ in range(1000):
        n = int(torch.randint(1, 9, (1,), generator=rng))
        logits = torch.randn(3, n, generator=rng, dtype=torch.float64) * 10
        mask = torch.rand(3, n, generator=rng) > 0.4
        mask[:, 0] = True
        p = masked_softmax(logits, mask)
        assert torch.allclose(p.sum(-1), torch.ones(3, dtype=torch.float64), atol=1e-6)
        assert torch.all(p[~mask] == 0)


def test_masked_softmax_all_masked_is_zero():
    assert torch.all(masked_softmax(torch.randn(2, 4), torch.zeros(2, 4, dtype=torch.bool)) == 0)


def test_attention_single_context_position():
    mha = MultiHeadAttention(8, 2)
    _, w = mha(torch.randn(1, 5, 8), torch.randn(1, 1, 8), need_weights=True)
    assert torch.all(w == 1.0)


def test_attention_fused_and_explicit_agree():
    torch.manual_seed(5)
    mha = MultiHeadAttention(8, 2).double()
    x, c = torch.randn(2, 4, 8, dtype=torch.float64), torch.randn(2, 6, 8, dtype=torch.float64)
    mask = _mask(2, 6, [6, 3])
    a, _ = mha(x, c, mask)
    b, w = mha(x, c, mask, need_weights=True)
    assert torch.allclose(a, b, atol=1e-12)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)
    assert torch.all(w[1, :, :, 3:] == 0)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        MultiHeadAttention(8, 2)(torch.randn(1, 2, 8), torch.randn(1, 2, 6))


def test_cross_similarity_examples():
    torch.manual_seed(6)
    cs = CrossSimilarity(8).double()
    v = torch.randn(1, 4, 8, dtype=torch.float64)
    q = torch.randn(1, 3, 8, dtype=torch.float64)
    S = cs(v, q)
    assert torch.allclose(S.sum(-1), torch.ones(1, 4, dtype=torch.float64), atol=1e-6)
    assert torch.all(cs(v, q[:, :1]) == 1.0)
    same = q[:, :1].repeat(1, 3, 1)
    U = cs(v, same, torch.tensor([[True, True, False]]))
    assert torch.allclose(U[..., :2], torch.full((1, 4, 2), 0.5, dtype=torch.float64))
    assert torch.all(U[..., 2] == 0)


def test_cross_similarity_update_masks():
    torch.manual_seed(7)
    cs = CrossSimilarity(8)
    v, q = torch.randn(2, 5, 8), torch.randn(2, 4, 8)
    vm, qm = _mask(2, 5, [5, 3]), _mask(2, 4, [2, 4])
    v2, q2, S = cs.update(v, q, vm, qm)
    assert torch.all(v2[1, 3:] == 0) and torch.all(q2[0, 2:] == 0)
    col = S.sum(1)
    assert torch.all(col[0, 2:] == 0)


def test_sinusoidal_positions_values():
    pe = sinusoidal_positions(3, 4, torch.float64)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert abs(pe[1, 0] - np.sin(1.0)) < 1e-12


def test_masked_mean():
    x = torch.tensor([[[1.0], [3.0], [100.0]]])
    assert masked_mean(x, torch.tensor([[True, True, False]])).item() == 2.0
    with pytest.raises(ValueError):
        masked_mean(x, torch.zeros(1, 3, dtype=torch.bool))
