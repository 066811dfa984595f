import numpy as np
import pytest

from icoformer.checkpoint import CheckpointError
from icoformer.resample import (ErpImage, SphereSignal, bilinear_erp_weights, erp_to_sphere, load_image, load_pfm,
                                load_png, nearest_erp_pixel, pixel_directions, save_image, save_pfm, save_png,
                                sphere_to_erp)
from icoformer.sphere import icosphere, node_coords


@pytest.mark.parametrize("nt", ["hex", "ico"])
def test_constant_roundtrip(nt):
    img = ErpImage(np.full((32, 64, 3), [0.2, 0.4, 0.9], np.float32))
    sig = erp_to_sphere(img, icosphere(3), nt)
    assert np.max(np.abs(sig.values - [0.2, 0.4, 0.9])) < 1e-6
    back = sphere_to_erp(sig, 64, 32, "nearest")
    assert np.max(np.abs(back.values - img.values)) < 1e-6
    if nt == "hex":
        bary = sphere_to_erp(sig, 64, 32, "barycentric")
        assert np.max(np.abs(bary.values - img.values)) < 1e-6


def test_bilinear_exact_on_affine_rasters():
    h, w = 40, 80
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = ErpImage((0.3 * ii + 0.05 * jj)[:, :, None], "depth")
    c = node_coords(icosphere(4), "hex")
    u = c[:, 0] * w / (2 * np.pi) - 0.5
    v = c[:, 1] * h / np.pi - 0.5
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    got = erp_to_sphere(img, icosphere(4), "hex").values[:, 0]
    np.testing.assert_allclose(got[inside], (0.3 * v + 0.05 * u)[inside], atol=1e-4)


def test_bilinear_weights_wrap_and_clamp():
    idx, w = bilinear_erp_weights(np.array([0.0]), np.array([0.0]), 8, 4)
    np.testing.assert_allclose(w.sum(), 1.0)
    # theta = 0 sits between the last and first column
    cols = set((idx[0] % 8).tolist())
    assert cols == {0, 7}
    assert np.all(idx[0] // 8 == 0)
    assert nearest_erp_pixel(2 * np.pi - 1e-9, np.pi, 8, 4) == 3 * 8 + 7


def test_pixel_directions_unit():
    d = pixel_directions(16, 8)
    assert d.shape == (128, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    assert d[0, 2] > 0.9 and d[-1, 2] < -0.9


def test_smooth_roundtrip_error():
    h, w = 128, 256
    dirs = pixel_directions(w, h).reshape(h, w, 3)
    img = ErpImage(0.5 + 0.4 * dirs[..., 2:] * dirs[..., :1], "depth")
    sig = erp_to_sphere(img, icosphere(5), "hex")
    nearest = sphere_to_erp(sig, w, h, "nearest")
    bary = sphere_to_erp(sig, w, h, "barycentric")
    e_n = np.abs(nearest.values - img.values).mean()
    e_b = np.abs(bary.values - img.values).mean()
    assert e_b < e_n < 0.01


def test_labels_are_not_interpolated():
    rng = np.random.default_rng(0)
    lab = rng.integers(0, 6, size=(32, 64, 1)).astype(np.float32)
    sig = erp_to_sphere(ErpImage(lab, "label"), icosphere(3), "hex")
    assert set(np.unique(sig.values)) <= set(range(6))
    out = sphere_to_erp(sig, 64, 32, "nearest", kind="label")
    assert set(np.unique(out.values)) <= set(range(6))


def test_validation():
    with pytest.raises(ValueError):
        ErpImage(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        ErpImage(np.full((2, 2), -1.0), "depth")
    with pytest.raises(ValueError):
        ErpImage(np.full((2, 2), 0.5), "label")
    with pytest.raises(ValueError):
        ErpImage(np.zeros((0, 2, 3)))
    with pytest.raises(ValueError):
        SphereSignal(2, "hex", np.zeros((10, 3)))
    sig = SphereSignal(1, "ico", np.zeros(80))
    with pytest.raises(ValueError):
        sphere_to_erp(sig, 8, 4, "barycentric")


def test_png_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    rgb = ErpImage(rng.integers(0, 256, size=(16, 32, 3)) / 255.0)
    save_png(rgb, tmp_path / "a.png")
    assert load_png(tmp_path / "a.png").values.tobytes() == rgb.values.tobytes()
    lab = ErpImage(rng.integers(0, 13, size=(16, 32)).astype(np.float32), "label")
    save_image(lab, tmp_path / "l.png")
    assert load_image(tmp_path / "l.png", "label").values.tobytes() == lab.values.tobytes()
    with pytest.raises(ValueError):
        save_png(ErpImage(np.ones((2, 2)), "depth"), tmp_path / "d.png")


@pytest.mark.parametrize("channels", [1, 3])
def test_pfm_roundtrip_bit_exact(tmp_path, channels):
    vals = np.random.default_rng(1).random((9, 17, channels)).astype(np.float32)
    img = ErpImage(vals * 10, "depth") if channels == 1 else ErpImage(vals, "rgb")
    save_pfm(img, tmp_path / "a.pfm")
    back = load_pfm(tmp_path / "a.pfm", img.kind)
    assert back.values.tobytes() == img.values.tobytes()
    header = (tmp_path / "a.pfm").read_bytes()[:2]
    assert header == (b"Pf" if channels == 1 else b"PF")


def test_pfm_row_order(tmp_path):
    vals = np.arange(6, dtype=np.float32).reshape(2, 3)
    save_pfm(ErpImage(vals, "depth"), tmp_path / "a.pfm")
    raw = (tmp_path / "a.pfm").read_bytes()
    body = np.frombuffer(raw[-24:], "<f4")
    # PFM stores the bottom row first
    np.testing.assert_array_equal(body, [3, 4, 5, 0, 1, 2])


def test_signal_file_roundtrip(tmp_path):
    sig = SphereSignal(2, "hex", np.random.default_rng(0).random((162, 2)).astype(np.float32))
    sig.save(tmp_path / "s.sufm")
    back = SphereSignal.load(tmp_path / "s.sufm")
    assert back.rank == 2 and back.node_type.value == "hex"
    assert back.values.tobytes() == sig.values.tobytes()
    (tmp_path / "bad.sufm").write_bytes(b"junk")
    with pytest.raises(CheckpointError):
        SphereSignal.load(tmp_path / "bad.sufm")
