import struct
import warnings

import numpy as np
import pytest

from rpmkit.datagen import (
    BouncingBallConfig,
    gen_peer_pairs,
    gen_structured_ball,
    gen_synthetic_digits,
    gen_texture_corpus,
    gen_textured_ball,
    load_idx,
    read_pgm,
    read_rpmd,
    write_idx,
    write_pgm,
    write_rpmd,
)

# ---------------------------------------------------------------------------
# bouncing ball


def test_textured_ball_marginal_moments():
    # 2000 sequences x 50 steps = 1e5 frames
    ds = gen_textured_ball(BouncingBallConfig(n_sequences=2000, T=50, seed=0))
    x = ds.observations[0].reshape(-1, 32)
    assert x.shape[0] == 100_000
    assert np.max(np.abs(x.mean(axis=0))) < 0.02
    assert np.max(np.abs(x.var(axis=0) - 1.0)) < 0.05


def test_textured_ball_moments_do_not_depend_on_latent():
    ds = gen_textured_ball(BouncingBallConfig(n_sequences=2000, T=50, seed=1))
    x = ds.observations[0].reshape(-1, 32)
    z = ds.z_true.ravel()
    for mask in (z < -0.5, z > 0.5):
        assert np.max(np.abs(x[mask].mean(axis=0))) < 0.05
        assert np.max(np.abs(x[mask].var(axis=0) - 1.0)) < 0.1


def test_textured_ball_shows_in_third_moment():
    # latent fixed at 0 puts the ball on pixel 15.5; the mixture is symmetric there
    cfg = BouncingBallConfig(n_sequences=4000, T=2, seed=2, dynamics=np.eye(2), noise_scale=0.0, init_scale=0.0)
    ds = gen_textured_ball(cfg)
    assert np.all(ds.z_true == 0.0)
    third = (ds.observations[0].reshape(-1, 32) ** 3).mean(axis=0)
    assert max(abs(third[15]), abs(third[16])) < 0.2
    assert third[0] > 3.0 and third[31] > 3.0


def test_constant_latent_without_noise_or_rotation():
    cfg = BouncingBallConfig(n_sequences=3, T=20, seed=3, dynamics=np.eye(2), noise_scale=0.0)
    ds = gen_textured_ball(cfg)
    assert np.all(ds.z_true == ds.z_true[:, :1])


def test_generators_are_deterministic():
    for gen in (gen_textured_ball, gen_structured_ball):
        a = gen(BouncingBallConfig(n_sequences=3, T=10, seed=5))
        b = gen(BouncingBallConfig(n_sequences=3, T=10, seed=5))
        c = gen(BouncingBallConfig(n_sequences=3, T=10, seed=6))
        assert np.array_equal(a.observations[0], b.observations[0])
        assert not np.array_equal(a.observations[0], c.observations[0])
        assert a.observations[0].shape == (3, 10, 32) and a.z_true.shape == (3, 10)
        assert np.array_equal(a.times, np.arange(10.0))


def test_structured_ball_bump_tracks_latent():
    cfg = BouncingBallConfig(n_sequences=4, T=30, seed=7, variant="structured", stripe_amplitude=0.0,
                             pixel_noise=0.0)
    ds = gen_structured_ball(cfg)
    x = ds.observations[0]
    centre = 31 * (0.5 + 0.4 * np.tanh(ds.z_true))
    assert np.all(np.abs(x.argmax(axis=2) - centre) <= 0.5 + 1e-9)


def test_structured_ball_without_bump_ignores_latent():
    cfg = dict(n_sequences=2, T=10, seed=8, variant="structured", bump_amplitude=0.0)
    a = gen_structured_ball(BouncingBallConfig(noise_scale=0.05, **cfg))
    b = gen_structured_ball(BouncingBallConfig(noise_scale=0.5, **cfg))
    assert not np.allclose(a.z_true, b.z_true)
    assert np.array_equal(a.observations[0], b.observations[0])


def test_config_validation():
    with pytest.raises(ValueError, match="T"):
        BouncingBallConfig(T=1)
    with pytest.raises(ValueError, match="variant"):
        BouncingBallConfig(variant="plain")
    with pytest.raises(ValueError, match="texture_floor"):
        BouncingBallConfig(texture_floor=0.5)
    with pytest.raises(ValueError, match="dynamics"):
        _ = BouncingBallConfig(dynamics=np.eye(3)).transition
    A = BouncingBallConfig(rho=0.5, phi=0.0).transition
    assert np.allclose(A, 0.5 * np.eye(2))


# ---------------------------------------------------------------------------
# peer pairs and digits


def test_peer_pairs_even_classes():
    images = np.arange(8.0)[:, None]
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ds = gen_peer_pairs(images, labels, seed=0)
    assert ds.X.shape == (4, 2, 1)
    assert sorted(ds.X.ravel()) == list(range(8))
    for pair, c in zip(ds.X[:, :, 0], ds.labels):
        assert np.all(labels[pair.astype(int)] == c)


def test_peer_pairs_odd_class_warns():
    labels = np.array([0, 0, 0, 1, 1])
    with pytest.warns(UserWarning, match="odd"):
        ds = gen_peer_pairs(np.arange(5.0)[:, None], labels, seed=1)
    assert ds.X.shape == (2, 2, 1)
    with pytest.raises(ValueError, match="pair"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            gen_peer_pairs(np.arange(2.0)[:, None], np.array([0, 1]))


def test_synthetic_digits_without_noise_are_templates():
    images, labels, templates = gen_synthetic_digits(n_classes=4, per_class=5, side=8, noise=0.0, seed=0)
    assert images.shape == (20, 8, 8) and np.bincount(labels).tolist() == [5] * 4
    assert np.array_equal(images, templates[labels])
    assert np.allclose(templates.reshape(4, -1).std(axis=1), 1.0)


def test_synthetic_digits_are_separable():
    images, labels, templates = gen_synthetic_digits(per_class=50, seed=1)
    d = ((images.reshape(len(images), 1, -1) - templates.reshape(1, len(templates), -1)) ** 2).sum(axis=2)
    assert np.mean(d.argmin(axis=1) == labels) >= 0.95


def test_texture_corpus_layout():
    corpus = gen_texture_corpus(n_images=5, grid=2, patch_size=4, noise=0.0, seed=0)
    assert corpus.images.shape == (5, 8, 8)
    assert corpus.patch_labels.shape == (5, 4)
    assert np.allclose(corpus.topic_weights.sum(axis=1), 1.0)
    # without noise, patches with the same label are identical
    patches = corpus.images.reshape(5, 2, 4, 2, 4).transpose(0, 1, 3, 2, 4).reshape(5, 4, 16)
    flat, lab = patches.reshape(-1, 16), corpus.patch_labels.ravel()
    for k in np.unique(lab):
        assert np.allclose(flat[lab == k], flat[lab == k][0])


# ---------------------------------------------------------------------------
# file formats


def test_idx_image_bytes(tmp_path):
    p = tmp_path / "img.idx"
    header = struct.pack(">IIII", 0x00000803, 1, 2, 2)
    p.write_bytes(header + bytes([0, 255, 128, 64]))
    img = load_idx(p)
    assert img.shape == (1, 2, 2)
    assert np.allclose(img.ravel(), [0.0, 1.0, 128 / 255, 64 / 255])


def test_idx_round_trip(tmp_path):
    labels = np.array([3, 1, 4, 1, 5], dtype=np.uint8)
    write_idx(tmp_path / "lab.idx", labels)
    assert np.array_equal(load_idx(tmp_path / "lab.idx"), labels)
    imgs = np.random.default_rng(0).integers(0, 256, (3, 4, 5)).astype(np.uint8)
    write_idx(tmp_path / "img.idx", imgs)
    assert np.array_equal(np.round(load_idx(tmp_path / "img.idx") * 255), imgs)


def test_idx_errors(tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(struct.pack(">II", 0x12345678, 1) + b"\x00")
    with pytest.raises(ValueError, match="magic"):
        load_idx(bad)
    short = tmp_path / "short.idx"
    short.write_bytes(struct.pack(">IIII", 0x00000803, 2, 2, 2) + b"\x00" * 5)
    with pytest.raises(ValueError, match="truncated"):
        load_idx(short)
    with pytest.raises(ValueError):
        write_idx(tmp_path / "x.idx", np.zeros((2, 2)))


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (5, 7)) / 255.0
    write_pgm(tmp_path / "a.pgm", img)
    assert np.allclose(read_pgm(tmp_path / "a.pgm"), img)
    commented = tmp_path / "c.pgm"
    commented.write_bytes(b"P5\n# note\n2 1\n255\n" + bytes([10, 20]))
    assert np.allclose(read_pgm(commented), [[10 / 255, 20 / 255]])
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError, match="P5"):
        read_pgm(tmp_path / "p2.pgm")


def test_rpmd_round_trip(tmp_path):
    arrays = {"x0": np.random.default_rng(2).normal(size=(2, 3, 4)), "z_true": np.arange(6.0).reshape(2, 3)}
    write_rpmd(tmp_path / "d.rpmd", arrays)
    out = read_rpmd(tmp_path / "d.rpmd")
    assert list(out) == ["x0", "z_true"]
    for k, v in arrays.items():
        assert np.array_equal(out[k], v)
    data = (tmp_path / "d.rpmd").read_bytes()
    (tmp_path / "t.rpmd").write_bytes(data[:-8])
    with pytest.raises(ValueError, match="truncated"):
        read_rpmd(tmp_path / "t.rpmd")
    (tmp_path / "m.rpmd").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError, match="RPMD"):
        read_rpmd(tmp_path / "m.rpmd")
