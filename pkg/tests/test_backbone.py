import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cosine
from p3s.backbone import build_backbone
from p3s.backbone.base import (
    BackboneBundle,
    DiffusionSchedule,
    LatentImage,
    PatchEncoding,
    array_content_hash,
    load_asset_manifest,
    module_content_hash,
    to_float_image,
)
from p3s.backbone.toy import (
    ToyBackboneConfig,
    ToyInpainter,
    ToyLatentCodec,
    ToyPatchEncoder,
    ToyTextEncoder,
)
from p3s.errors import CompatibilityError, DimensionError, InputError, ParameterError


# ---------------------------------------------------------------- patch encoder

def test_uniform_image_gives_identical_patch_embeddings():
    enc = ToyPatchEncoder(grid_size=4)
    img = np.full((32, 32, 3), 0.5)
    grid = enc.encode(img).grid
    flat = grid.reshape(-1, grid.shape[-1])
    assert np.allclose(flat, flat[0])


def test_half_and_half_image_separates_in_embedding_space():
    img = np.zeros((32, 32, 3))
    img[:, :16] = (0.9, 0.1, 0.1)   # red left
    img[:, 16:] = (0.1, 0.1, 0.9)   # blue right
    grid = ToyPatchEncoder(grid_size=4).encode(img).grid
    left = [grid[r, c] for r in range(4) for c in range(2)]
    right = [grid[r, c] for r in range(4) for c in range(2, 4)]
    for group in (left, right):
        for v in group[1:]:
            assert cosine(group[0], v) >= 0.99
    for a in left:
        for b in right:
            assert abs(cosine(a, b)) <= 0.1


def test_patch_encoder_rejects_small_images():
    enc = ToyPatchEncoder(grid_size=8)
    with pytest.raises(DimensionError):
        enc.encode(np.zeros((4, 4, 3)))


def test_patch_encoding_token_sequence_layout():
    enc = ToyPatchEncoder(grid_size=4).encode(np.random.default_rng(0).random((16, 16, 3)))
    seq = enc.token_sequence()
    assert seq.shape[0] == 4 * 4 + 1
    assert np.array_equal(seq[0], enc.global_token)
    assert np.array_equal(seq[1], enc.grid[0, 0])
    assert np.array_equal(seq[-1], enc.grid[3, 3])


def test_patch_encoding_validates_grid():
    with pytest.raises(DimensionError):
        PatchEncoding(grid=np.zeros((1, 1, 8)), global_token=np.zeros(8),
                      source_dims=(8, 8))
    with pytest.raises(InputError):
        PatchEncoding(grid=np.full((2, 2, 8), np.nan), global_token=np.zeros(8),
                      source_dims=(8, 8))


# ------------------------------------------------------------------ text encoder

def test_identifier_span_is_found():
    enc = ToyTextEncoder(identifier="[V]")
    out = enc.encode("a photo of [V] dog")
    assert out.identifier_span is not None
    start, end = out.identifier_span
    assert out.prompt_text.split()[start:end] == ["[V]"]


def test_empty_prompt_is_unconditional():
    out = ToyTextEncoder().encode("")
    assert out.tokens.shape[0] == 1
    assert out.identifier_span is None


def test_long_prompt_truncates_with_warning():
    enc = ToyTextEncoder(max_tokens=4)
    with pytest.warns(UserWarning):
        out = enc.encode("one two three four five six")
    assert out.truncated
    assert out.tokens.shape[0] == 4


def test_text_embedding_deterministic_per_token():
    enc = ToyTextEncoder()
    a = enc.encode("dog cat dog")
    assert np.array_equal(a.tokens[0], a.tokens[2])
    assert not np.array_equal(a.tokens[0], a.tokens[1])


# ------------------------------------------------------------------------ codec

def test_codec_dimensions_at_scale_eight():
    codec = ToyLatentCodec(scale=8)
    img = np.random.default_rng(0).random((224, 224, 3))
    latent = codec.encode(img)
    assert latent.data.shape == (3 * 64, 28, 28)
    with pytest.raises(DimensionError):
        codec.encode(np.zeros((225, 225, 3)))


def test_codec_round_trip_is_exact():
    codec = ToyLatentCodec(scale=2, amplitude=4.0)
    img = np.random.default_rng(1).random((16, 16, 3))
    back = codec.decode(codec.encode(img))
    assert np.allclose(back, img, atol=1e-12)


def test_codec_amplitude_scales_latent():
    img = np.random.default_rng(2).random((8, 8, 3))
    lat1 = ToyLatentCodec(scale=2, amplitude=1.0).encode(img).data
    lat4 = ToyLatentCodec(scale=2, amplitude=4.0).encode(img).data
    assert np.allclose(lat4, 4.0 * lat1)


# -------------------------------------------------------------------- inpainter

def test_inpaint_fills_from_border_ring_mean():
    img = np.full((8, 8, 3), 0.2)
    img[2:5, 2:5] = (0.9, 0.9, 0.9)
    mask = np.zeros((8, 8), dtype=bool)
    mask[3, 3] = True
    out = ToyInpainter().inpaint(img, mask)
    # ring around (3,3) is all 0.9 blob pixels
    assert np.allclose(out[3, 3], 0.9)
    assert np.allclose(out[~mask], img[~mask])


def test_inpaint_larger_region_uses_surrounding_pixels():
    img = np.full((8, 8, 3), 0.2)
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 2:6] = True
    img[mask] = 1.0
    out = ToyInpainter().inpaint(img, mask)
    assert np.allclose(out[mask], 0.2)


def test_inpaint_refuses_all_true_mask():
    img = np.full((8, 8, 3), 0.2)
    with pytest.raises(InputError):
        ToyInpainter().inpaint(img, np.ones((8, 8), dtype=bool))


def test_inpaint_empty_mask_is_identity_with_warning():
    img = np.random.default_rng(0).random((8, 8, 3))
    with pytest.warns(UserWarning):
        out = ToyInpainter().inpaint(img, np.zeros((8, 8), dtype=bool))
    assert np.array_equal(out, img)


# --------------------------------------------------------------------- denoiser

def test_denoiser_output_shape_and_taps(toy8):
    den, codec = toy8.denoiser, toy8.codec
    x = torch.randn(codec.channels, 4, 4, dtype=torch.float64)
    ctx = torch.from_numpy(toy8.text_encoder.encode("a photo of sks subject").tokens)
    eps, taps = den(x, 300, ctx)
    assert eps.shape == x.shape
    assert len(taps.self_attention_hiddens) == len(den.blocks)
    assert len(taps.cross_attention_maps) == len(den.blocks)


def test_cross_attention_rows_sum_to_one(toy8):
    den, codec = toy8.denoiser, toy8.codec
    x = torch.randn(codec.channels, 4, 4, dtype=torch.float64)
    ctx = torch.from_numpy(toy8.text_encoder.encode("a photo of sks subject").tokens)
    _, taps = den(x, 100, ctx)
    for amap in taps.cross_attention_maps:
        sums = amap.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


def test_denoiser_rejects_out_of_range_timestep(toy8):
    den, codec = toy8.denoiser, toy8.codec
    x = torch.randn(codec.channels, 4, 4, dtype=torch.float64)
    ctx = torch.from_numpy(toy8.text_encoder.encode("x").tokens)
    eps, _ = den(x, 600, ctx)  # top of the range is valid
    assert torch.isfinite(eps).all()
    for bad_t in (0, -5, 601):
        with pytest.raises(ParameterError):
            den(x, bad_t, ctx)


def test_denoiser_parameters_are_frozen(toy8):
    assert all(not p.requires_grad for p in toy8.denoiser.parameters())


def test_denoiser_prior_pull_dominates_when_trunk_silent(toy8):
    # with the conv trunk contribution removed, eps inverts the closed-form
    # noising of a background-colored latent
    den = toy8.denoiser
    sched = toy8.schedule
    x0 = torch.full((toy8.codec.channels, 4, 4), den.prior_fill, dtype=torch.float64)
    noise = torch.randn_like(x0)
    t = 250
    x_t = sched.add_noise(x0, noise, t)
    eps, _ = den(x_t, t, torch.from_numpy(toy8.text_encoder.encode("x").tokens))
    acp = torch.as_tensor(sched.alphas_cumprod[t], dtype=torch.float64)
    trunkless = (x_t - torch.sqrt(acp) * den.prior_fill) / torch.sqrt(1.0 - acp)
    assert torch.allclose(trunkless, noise, atol=1e-9)
    # full eps deviates only by the small trunk term
    assert float((eps - trunkless).abs().max()) < 1.0


# -------------------------------------------------------------------- schedule

def test_schedule_alphas_cumprod_boundaries():
    sched = DiffusionSchedule(timesteps=600)
    assert sched.alphas_cumprod[0] == pytest.approx(1.0)
    assert sched.alphas_cumprod[-1] < 0.01
    assert np.all(np.diff(sched.alphas_cumprod) < 0)


def test_add_noise_closed_form():
    sched = DiffusionSchedule(timesteps=100)
    x0 = torch.randn(2, 3, 3, dtype=torch.float64)
    noise = torch.randn_like(x0)
    t = 40
    out = sched.add_noise(x0, noise, t)
    acp = float(sched.alphas_cumprod[t])
    expected = np.sqrt(acp) * x0.numpy() + np.sqrt(1 - acp) * noise.numpy()
    assert np.allclose(out.numpy(), expected, atol=1e-12)


# ---------------------------------------------------------------- image loading

def test_to_float_image_accepts_uint8_and_float():
    u8 = (np.random.default_rng(0).random((8, 8, 3)) * 255).astype(np.uint8)
    f = to_float_image(u8)
    assert f.dtype == np.float64 and f.max() <= 1.0
    same = to_float_image(f)
    assert np.array_equal(same, f)


def test_to_float_image_rejects_bad_inputs():
    with pytest.raises(InputError):
        to_float_image(np.full((4, 4, 3), 2.0))
    with pytest.raises(InputError):
        to_float_image(np.full((4, 4, 3), np.nan))
    with pytest.raises(DimensionError):
        to_float_image(np.zeros((4, 4)))


# --------------------------------------------------------------- hashing bundle

def test_module_content_hash_tracks_parameters(toy8):
    h1 = module_content_hash(toy8.denoiser)
    h2 = module_content_hash(toy8.denoiser)
    assert h1 == h2
    fresh = build_backbone("toy", ToyBackboneConfig(grid_size=8))
    assert module_content_hash(fresh.denoiser) == h1


def test_array_content_hash_distinguishes_values():
    a = np.zeros((3, 3))
    b = np.zeros((3, 3))
    assert array_content_hash(a) == array_content_hash(b)
    b[0, 0] = 1e-9
    assert array_content_hash(a) != array_content_hash(b)


def test_bundle_content_hash_stable_across_builds(toy8):
    again = build_backbone("toy", ToyBackboneConfig(grid_size=8))
    assert again.content_hash() == toy8.content_hash()
    other = build_backbone("toy", ToyBackboneConfig(grid_size=8, seed=7))
    assert other.content_hash() != toy8.content_hash()


def test_unknown_backbone_name_lists_registered():
    with pytest.raises(KeyError, match="toy"):
        build_backbone("no-such-backbone")


def test_asset_manifest_round_trip(tmp_path):
    payload = tmp_path / "weights.bin"
    payload.write_bytes(b"0123456789")
    import hashlib
    import json
    digest = hashlib.sha256(b"0123456789").hexdigest()
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"backbone": "demo", "assets": {
        "weights": {"path": "weights.bin", "sha256": digest}}}))
    info = load_asset_manifest(manifest)
    assert info["backbone"] == "demo"
    payload.write_bytes(b"tampered!!")
    with pytest.raises(CompatibilityError):
        load_asset_manifest(manifest)


def test_asset_manifest_accepts_empty_assets(tmp_path):
    import json
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"backbone": "stub", "assets": {}}))
    assert load_asset_manifest(manifest)["backbone"] == "stub"


# -------------------------------------------------------------------- property

@settings(max_examples=20, deadline=None)
@given(gray=st.floats(min_value=0.05, max_value=0.95))
def test_any_uniform_image_collapses_to_one_embedding(gray):
    enc = ToyPatchEncoder(grid_size=4)
    grid = enc.encode(np.full((16, 16, 3), gray)).grid
    flat = grid.reshape(-1, grid.shape[-1])
    assert np.allclose(flat, flat[0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=1000),
       scale=st.sampled_from([1, 2, 4]))
def test_codec_inverse_property(seed, scale):
    rng = np.random.default_rng(seed)
    img = rng.random((8 * scale, 8 * scale, 3))
    codec = ToyLatentCodec(scale=scale, amplitude=4.0)
    assert np.allclose(codec.decode(codec.encode(img)), img, atol=1e-12)
