import pytest
import torch
import torch.nn.functional as F

from promptseg.model import PromptSegmenter
from promptseg.segnet import (DecoderBlock, DecoderTrace, ModelConfig, ShapeError, TextEncoder,
                              assemble_semantic_map, attention_mask_from, interp_matrix, upsample,
                              upsample_tokens)

SMALL = ModelConfig(num_classes=3, num_blocks=2, vis_dim=16, pix_dim=16, text_dim=8, token_dim=8, query_dim=16,
                    stem_dim=8, pixel_stride=2)


@pytest.fixture(scope="module")
def model():
    return PromptSegmenter(SMALL, seed=0).eval()


def test_output_shapes(model):
    x = torch.rand(2, 3, 32, 48)
    out = model(x)
    assert out.trace.num_blocks == 2
    for m, c in zip(out.trace.mask_logits, out.trace.class_logits):
        assert m.shape == (2, 3, 16, 24) and c.shape == (2, 3, 3)
    assert out.text.shape == (2, 3, 8) and out.text0.shape == (3, 8)
    assert out.pi.shape == (2, 8)
    assert out.feats.patch_features.shape == (2, 16, 4, 6) and out.feats.class_token.shape == (2, 16)
    assert out.semantic_logits().shape == (2, 3, 32, 48)
    assert model.predict(x).sum(1).allclose(torch.ones(2, 32, 48))


def test_bad_inputs(model):
    with pytest.raises(ShapeError):
        model(torch.rand(1, 1, 32, 32))
    with pytest.raises(ShapeError, match="divisible"):
        model(torch.rand(1, 3, 30, 32))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)
    with pytest.raises(ValueError, match="pixel_stride"):
        ModelConfig(pixel_stride=3)


def test_batch_permutation_equivariance(model):
    x = torch.rand(3, 3, 16, 16)
    perm = torch.tensor([2, 0, 1])
    a, b = model(x), model(x[perm])
    for ma, mb in zip(a.trace.mask_logits, b.trace.mask_logits):
        assert torch.allclose(ma[perm], mb, atol=1e-6)


def test_attention_mask_threshold_and_fallback():
    logits = torch.tensor([[[[1.0, -1.0], [0.0, 2.0]], [[-1.0, -2.0], [-3.0, -0.5]]]])
    mask = attention_mask_from(logits)
    assert mask[0, 0].tolist() == [True, False, False, True]
    # a query whose mask is empty attends everywhere
    assert mask[0, 1].all()


def test_masked_cross_attention_ignores_disallowed_pixels():
    torch.manual_seed(0)
    block = DecoderBlock(16, 16)
    q = torch.randn(1, 3, 16)
    memory = torch.randn(1, 10, 16)
    mask = torch.zeros(1, 3, 10, dtype=torch.bool)
    mask[0, 0, :4] = True
    mask[0, 1, 4:] = True
    mask[0, 2] = True
    base = block.cross_attend(q, memory, mask)
    changed = memory.clone()
    changed[0, 4:] += 5.0
    out = block.cross_attend(q, changed, mask)
    assert torch.equal(out[0, 0], base[0, 0])
    assert not torch.allclose(out[0, 1], base[0, 1])


def test_first_block_attends_everywhere(model):
    x = torch.rand(1, 3, 16, 16)
    z = model.pixel_decoder(model.image_encoder(x), model(x).text)
    q0 = model.query_mlp(model(x).text)
    block = model.decoder.blocks[0]
    memory = z.flatten(2).transpose(1, 2)
    want = block(q0, memory, None)
    trace = model.decoder(z, q0)
    m = model.decoder.mask_head(want)
    assert torch.allclose(trace.mask_logits[0], (m @ memory.transpose(1, 2)).reshape_as(trace.mask_logits[0]))


def test_assembly_matches_loop():
    g = torch.Generator().manual_seed(0)
    masks = [torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64) for _ in range(2)]
    cls = [torch.randn(2, 3, 3, generator=g, dtype=torch.float64) for _ in range(2)]
    trace = DecoderTrace(masks, cls)
    for block in (1, 2):
        got = assemble_semantic_map(trace, block)
        for b in range(2):
            for k in range(3):
                for y in range(4):
                    for x in range(4):
                        want = sum(torch.softmax(cls[block - 1][b, q], -1)[k] * torch.sigmoid(masks[block - 1][b, q, y, x])
                                   for q in range(3))
                        assert abs(got[b, k, y, x] - want) < 1e-12
    with pytest.raises(ValueError):
        assemble_semantic_map(trace, 3)
    with pytest.raises(ValueError):
        assemble_semantic_map(trace, 0)


@pytest.mark.parametrize("size", [(8, 8), (12, 20), (32, 32)])
def test_upsample_matches_bilinear(size):
    x = torch.randn(2, 3, 4, 5, dtype=torch.float64)
    want = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    assert torch.allclose(upsample(x, size), want, atol=1e-12)
    tokens = x.flatten(2).transpose(1, 2)
    got = upsample_tokens(tokens, (4, 5), size).transpose(1, 2).reshape(2, 3, *size)
    assert torch.allclose(got, want, atol=1e-12)


def test_interp_rows_sum_to_one():
    assert torch.allclose(interp_matrix(17, 5).sum(1), torch.ones(17))


def test_text_encoder_frozen_and_seeded():
    a, b = TextEncoder(8, 8, 5, seed=42), TextEncoder(8, 8, 5, seed=42)
    assert all(not p.requires_grad for p in a.parameters())
    prompt, cls = torch.randn(4, 8), torch.randn(3, 8)
    assert torch.equal(a(prompt, cls), b(prompt, cls))
    assert a(prompt[None].expand(2, -1, -1), cls).shape == (2, 3, 8)
    with pytest.raises(ShapeError):
        a(torch.randn(3, 8), cls)
    assert not torch.equal(TextEncoder(8, 8, 5, seed=1)(prompt, cls), a(prompt, cls))


def test_frozen_encoder_is_init_snapshot():
    m = PromptSegmenter(SMALL, seed=3)
    for (n1, p1), (n2, p2) in zip(m.image_encoder.named_parameters(), m.frozen_encoder.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2) and not p2.requires_grad


def test_same_seed_same_weights():
    a, b = PromptSegmenter(SMALL, seed=5), PromptSegmenter(SMALL, seed=5)
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k
