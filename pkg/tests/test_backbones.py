import pytest
import torch

from genhance.backbones import (
    DetectHead,
    GeneratorConfig,
    MaskedTokenGenerator,
    MiniResNet,
    MiniResNetConfig,
    PixelHead,
    ViTConfig,
    VisionTransformer,
    build_backbone_pair,
    build_shared_stem,
    enhancer_positions,
    grid_shape,
    pooled_features,
    resnet_forward,
    vit_forward,
)
from genhance.errors import ConfigurationError


def make_vit(depth=3, dim=32, heads=2, seed=0):
    torch.manual_seed(seed)
    return VisionTransformer(ViTConfig(image_size=32, patch=8, dim=dim, depth=depth, heads=heads))


def make_resnet(seed=0):
    torch.manual_seed(seed)
    return MiniResNet(MiniResNetConfig(image_size=32, stage_widths=(8, 16, 32), blocks_per_stage=(1, 1, 1)))


def vit_param_count(cfg: ViTConfig):
    """Closed-form parameter count for the ViT trunk."""
    d = cfg.dim
    n = cfg.num_patches
    patch_embed = (cfg.patch * cfg.patch * 3) * d + d
    cls_and_pos = d + (n + 1) * d
    hidden = int(d * cfg.mlp_ratio)
    per_block = (
        2 * d  # norm1
        + d * 3 * d + 3 * d  # qkv
        + d * d + d  # proj
        + 2 * d  # norm2
        + d * hidden + hidden  # mlp fc1
        + hidden * d + d  # mlp fc2
    )
    final_norm = 2 * d
    return patch_embed + cls_and_pos + cfg.depth * per_block + final_norm


def block_param_count(dim, mlp_ratio=4.0):
    hidden = int(dim * mlp_ratio)
    return 2 * dim + dim * 3 * dim + 3 * dim + dim * dim + dim + 2 * dim + dim * hidden + hidden + hidden * dim + dim


def test_vit_shapes():
    model = make_vit()
    cls, patches = model(torch.rand(2, 3, 32, 32))
    assert cls.shape == (2, 32)
    assert patches.shape == (2, 16, 32)


def test_vit_single_image_wrapper():
    model = make_vit()
    cls, patches = vit_forward(model, torch.rand(3, 32, 32))
    assert cls.shape == (32,)
    assert patches.shape == (16, 32)


def test_vit_output_finite():
    model = make_vit()
    cls, patches = model(torch.randn(2, 3, 32, 32).clamp(0, 1))
    assert torch.isfinite(cls).all() and torch.isfinite(patches).all()


def test_vit_rejects_bad_dims():
    model = make_vit()
    with pytest.raises(ConfigurationError):
        model(torch.rand(1, 3, 30, 32))


def test_vit_param_count_closed_form():
    for cfg in (
        ViTConfig(image_size=32, patch=8, dim=32, depth=3, heads=2),
        ViTConfig(image_size=32, patch=8, dim=192, depth=8, heads=3),
    ):
        torch.manual_seed(0)
        model = VisionTransformer(cfg)
        assert sum(p.numel() for p in model.parameters()) == vit_param_count(cfg)


def test_vit_translation_equivariance_without_pos_embed():
    model = make_vit()
    model.eval()
    with torch.no_grad():
        model.pos_embed.zero_()
    img = torch.rand(1, 3, 32, 32)
    rolled = torch.roll(img, shifts=8, dims=3)  # one full patch to the right
    with torch.no_grad():
        _, base = model(img)
        _, moved = model(rolled)
    base_grid = base.reshape(1, 4, 4, 32)
    moved_grid = moved.reshape(1, 4, 4, 32)
    assert torch.allclose(torch.roll(base_grid, shifts=1, dims=2), moved_grid, atol=1e-5)


def test_generator_head_and_mask_embedding():
    torch.manual_seed(0)
    gen = MaskedTokenGenerator(GeneratorConfig(image_size=32, patch=8, dim=32, depth=2, heads=2, vocab_size=64))
    logits = gen.predict_logits(torch.randn(2, 16, 32))
    assert logits.shape == (2, 16, 64)
    assert gen.mask_embedding.shape == (32,)


def test_resnet_grid_shape():
    model = make_resnet()
    out = model(torch.rand(2, 3, 32, 32))
    assert out.shape == (2, 32, 4, 4)
    grid = resnet_forward(model, torch.rand(3, 32, 32))
    assert grid.shape == (4, 4, 32)


def test_resnet_zero_input_deterministic():
    model = make_resnet()
    model.eval()
    a = model(torch.zeros(1, 3, 32, 32))
    b = model(torch.zeros(1, 3, 32, 32))
    assert torch.equal(a, b)


def test_resnet_receptive_field_spans_cells():
    model = make_resnet()
    model.eval()
    img = torch.zeros(1, 3, 32, 32)
    base = model(img)
    poked = img.clone()
    poked[:, :, 8:16, 8:16] = 1.0  # perturb exactly one token cell
    diff = (model(poked) - base).abs().sum(dim=1).squeeze(0)
    assert (diff > 1e-6).sum() > 1


def test_resnet_alignment_pool():
    torch.manual_seed(0)
    cfg = MiniResNetConfig(image_size=32, stage_widths=(8, 16), blocks_per_stage=(1, 1), token_stride=8)
    model = MiniResNet(cfg)
    assert model.align_pool == 2  # native stride 4 pooled onto the 8-stride grid
    assert model(torch.rand(1, 3, 32, 32)).shape == (1, 16, 4, 4)


def test_resnet_coarse_stride_rejected():
    with pytest.raises(ConfigurationError):
        MiniResNet(
            MiniResNetConfig(
                image_size=32, stage_widths=(8, 16, 32, 64), blocks_per_stage=(1, 1, 1, 1),
                token_stride=8,
            )
        )


def test_pixel_head_shapes_and_assemble():
    head = PixelHead(32, 8)
    feats = torch.rand(2, 16, 32)
    out = head(feats)
    assert out.shape == (2, 16, 8 * 8 * 3)
    img = head.assemble(out, 4, 4)
    assert img.shape == (2, 3, 32, 32)


def test_pixel_head_assemble_layout():
    # position p of the flattened grid must land in the matching image patch
    head = PixelHead(4, 2)
    pred = torch.zeros(1, 4, 2 * 2 * 3)
    pred[0, 1] = 1.0  # grid cell (0, 1)
    img = head.assemble(pred, 2, 2)
    assert img[0, :, 0:2, 2:4].min() == 1.0
    assert img[0, :, 0:2, 0:2].max() == 0.0


def test_heads_zero_weights_zero_output():
    head = PixelHead(32, 8)
    torch.nn.init.zeros_(head.proj.weight)
    torch.nn.init.zeros_(head.proj.bias)
    assert head(torch.rand(1, 16, 32)).abs().max() == 0.0
    det = DetectHead(32)
    torch.nn.init.zeros_(det.proj.weight)
    torch.nn.init.zeros_(det.proj.bias)
    logits = det(torch.rand(1, 16, 32))
    assert logits.shape == (1, 16)
    assert logits.abs().max() == 0.0
    # zero logits -> BCE = ln 2
    flags = torch.randint(0, 2, (1, 16)).float()
    bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, flags)
    assert torch.isclose(bce, torch.tensor(0.6931), atol=1e-4)


def test_heads_linear_additivity():
    head = DetectHead(16)
    torch.nn.init.zeros_(head.proj.bias)
    a, b = torch.randn(1, 4, 16), torch.randn(1, 4, 16)
    assert torch.allclose(head(a + b), head(a) + head(b), atol=1e-6)
    pix = PixelHead(16, 4)
    torch.nn.init.zeros_(pix.proj.bias)
    assert torch.allclose(pix(a + b), pix(a) + pix(b), atol=1e-6)


# ---- weight sharing ----


def test_share_zero_layers_disjoint():
    enhancer = make_vit(depth=4)
    gen, stem = build_backbone_pair(
        GeneratorConfig(image_size=32, patch=8, dim=32, depth=2, heads=2, vocab_size=16),
        enhancer,
        share_layers=0,
    )
    assert stem is None
    enh_ids = {id(p) for p in enhancer.parameters()}
    assert all(id(p) not in enh_ids for p in gen.parameters())


def test_share_two_layers_aliases_stem():
    enhancer = make_vit(depth=4)
    gen, stem = build_backbone_pair(
        GeneratorConfig(image_size=32, patch=8, dim=32, depth=3, heads=2, vocab_size=16),
        enhancer,
        share_layers=2,
    )
    assert gen.trunk.patch_embed is enhancer.patch_embed
    assert gen.trunk.blocks[0] is enhancer.blocks[0]
    assert gen.trunk.blocks[1] is enhancer.blocks[1]
    assert gen.trunk.blocks[2] is not enhancer.blocks[2]
    # closed-form aliasing count: patch embed + 2 blocks
    d = 32
    expected = (8 * 8 * 3) * d + d + 2 * block_param_count(d)
    assert stem.parameter_count() == expected
    shared_ids = stem.parameter_ids()
    gen_ids = {id(p) for p in gen.parameters()}
    enh_ids = {id(p) for p in enhancer.parameters()}
    assert shared_ids <= gen_ids and shared_ids <= enh_ids
    # everything outside the stem is disjoint
    assert (gen_ids & enh_ids) == shared_ids


def test_shared_stem_single_tensor_updated_through_either_path():
    enhancer = make_vit(depth=3)
    gen, stem = build_backbone_pair(
        GeneratorConfig(image_size=32, patch=8, dim=32, depth=2, heads=2, vocab_size=16),
        enhancer,
        share_layers=1,
    )
    weight = enhancer.patch_embed.proj.weight
    img = torch.rand(2, 3, 32, 32)
    loss = enhancer(img)[1].sum()
    loss.backward()
    assert weight.grad is not None and weight.grad.abs().sum() > 0
    weight.grad = None
    loss2 = gen.predict_logits(gen.embed_patches(img)).sum()
    loss2.backward()
    assert weight.grad is not None and weight.grad.abs().sum() > 0
    # an update through the generator is visible to the enhancer (same object)
    before = enhancer.patch_embed.proj.weight.detach().clone()
    opt = torch.optim.SGD(gen.parameters(), lr=0.1)
    opt.step()
    assert not torch.equal(before, enhancer.patch_embed.proj.weight)


def test_share_requires_vit():
    resnet = make_resnet()
    with pytest.raises(ConfigurationError):
        build_backbone_pair(
            GeneratorConfig(image_size=32, patch=8, dim=32, depth=2, heads=2, vocab_size=16),
            resnet,
            share_layers=2,
        )


def test_share_width_mismatch_rejected():
    enhancer = make_vit(depth=3, dim=64)
    with pytest.raises(ConfigurationError):
        build_backbone_pair(
            GeneratorConfig(image_size=32, patch=8, dim=32, depth=2, heads=2, vocab_size=16),
            enhancer,
            share_layers=1,
        )


def test_share_depth_bound():
    enhancer = make_vit(depth=3)
    with pytest.raises(ConfigurationError):
        build_backbone_pair(
            GeneratorConfig(image_size=32, patch=8, dim=32, depth=2, heads=2, vocab_size=16),
            enhancer,
            share_layers=3,
        )
    with pytest.raises(ConfigurationError):
        build_shared_stem(enhancer, 4)


# ---- probe feature helpers ----


def test_enhancer_positions_both_families():
    vit = make_vit()
    res = make_resnet()
    imgs = torch.rand(2, 3, 32, 32)
    assert enhancer_positions(vit, imgs).shape == (2, 16, 32)
    assert enhancer_positions(res, imgs).shape == (2, 16, 32)
    assert grid_shape(vit) == (4, 4)
    assert grid_shape(res) == (4, 4)


def test_pooled_features():
    vit = make_vit()
    imgs = torch.rand(2, 3, 32, 32)
    mean = pooled_features(vit, imgs, "mean")
    cls = pooled_features(vit, imgs, "cls")
    assert mean.shape == (2, 32) and cls.shape == (2, 32)
    assert not torch.allclose(mean, cls)
    res = make_resnet()
    assert pooled_features(res, imgs, "mean").shape == (2, 32)
    with pytest.raises(ConfigurationError):
        pooled_features(res, imgs, "cls")


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ViTConfig(dim=30, heads=4)
    with pytest.raises(ConfigurationError):
        ViTConfig(depth=0)
    with pytest.raises(ConfigurationError):
        ViTConfig(image_size=30, patch=8)
