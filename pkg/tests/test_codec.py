import numpy as np
import pytest

from calligen.codec import Codec, CodecSpec, ExternalCodec, decode, encode


def test_identity_roundtrip_and_range():
    spec = CodecSpec()
    img = np.random.default_rng(0).random((5, 1, 32, 32))
    z = encode(img, spec)
    assert z.shape == (5, 1, 32, 32)
    assert z.min() >= -1 and z.max() <= 1
    np.testing.assert_allclose(decode(z, spec), img, atol=1e-12)
    assert encode(np.zeros((1, 32, 32)), spec).min() == -1
    assert encode(np.ones((1, 32, 32)), spec).max() == 1


def test_decode_clamps():
    spec = CodecSpec(image_side=4, latent_side=4)
    out = decode(np.full((1, 4, 4), 3.0), spec)
    assert (out == 1.0).all()
    assert (decode(np.full((1, 4, 4), -7.0), spec) == 0.0).all()


def test_pooled_shapes_and_block_means():
    spec = CodecSpec(image_side=256, image_channels=1, latent_side=32, latent_channels=4, kind="pooled")
    img = np.zeros((1, 256, 256))
    img[:, :8, :8] = 1.0
    img[:, 8:16, :4] = 1.0
    z = encode(img, spec)
    assert z.shape == (4, 32, 32)
    assert z[0, 0, 0] == 1.0 and z[0, 1, 0] == 0.0 and z[0, 0, 1] == -1.0
    assert np.array_equal(z[0], z[3])  # channel replication
    back = decode(z, spec)
    assert back.shape == (1, 256, 256)
    assert (back[0, 8:16, :8] == 0.5).all()


def test_pooled_roundtrip_on_block_constant_images():
    spec = CodecSpec(image_side=64, latent_side=16, kind="pooled")
    blocks = np.random.default_rng(1).random((3, 1, 16, 16))
    img = blocks.repeat(4, -2).repeat(4, -1)
    np.testing.assert_allclose(decode(encode(img, spec), spec), img, atol=1e-12)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(kind="vae"),
        dict(image_side=0),
        dict(image_side=64, latent_side=32),
        dict(image_side=100, latent_side=32, kind="pooled"),
        dict(image_channels=3, latent_channels=1),
    ],
)
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        CodecSpec(**kwargs)


def test_shape_mismatch_messages():
    spec = CodecSpec()
    with pytest.raises(ValueError, match="image shape"):
        encode(np.zeros((1, 16, 16)), spec)
    with pytest.raises(ValueError, match="latent shape"):
        decode(np.zeros((2, 32, 32)), spec)


def test_external_codec_is_checked_at_registration():
    spec = CodecSpec(image_side=8, latent_side=4, latent_channels=2, kind="external")
    good = ExternalCodec(spec, lambda x: np.zeros((x.shape[0], 2, 4, 4)), lambda z: np.zeros((z.shape[0], 1, 8, 8)))
    codec = Codec(spec, good)
    assert codec.encode(np.zeros((3, 1, 8, 8))).shape == (3, 2, 4, 4)
    assert codec.decode(np.zeros((3, 2, 4, 4))).shape == (3, 1, 8, 8)
    with pytest.raises(ValueError, match="encoder"):
        ExternalCodec(spec, lambda x: np.zeros((1, 4, 4)), lambda z: z)
    with pytest.raises(ValueError, match="decoder"):
        ExternalCodec(spec, lambda x: np.zeros((1, 2, 4, 4)), lambda z: np.zeros((1, 1, 4, 4)))
    with pytest.raises(ValueError):
        Codec(spec)


@pytest.mark.parametrize("kind, side", [("identity", 32), ("pooled", 128)])
def test_zero_latent_is_mid_gray(kind, side):
    spec = CodecSpec(image_side=side, latent_side=32, kind=kind)
    assert (decode(np.zeros((2, 1, 32, 32)), spec) == 0.5).all()


def test_pooled_encode_decode_encode_is_idempotent():
    spec = CodecSpec(image_side=96, image_channels=3, latent_side=24, latent_channels=4, kind="pooled")
    img = np.random.default_rng(2).random((2, 3, 96, 96))
    z = encode(img, spec)
    np.testing.assert_allclose(encode(decode(z, spec), spec)[:, :3], z[:, :3], atol=1e-12)
    # decoding the block-mean latent gives the block-mean image
    block_mean = img.reshape(2, 3, 24, 4, 24, 4).mean(axis=(3, 5)).repeat(4, -2).repeat(4, -1)
    np.testing.assert_allclose(decode(z, spec), block_mean, atol=1e-12)
