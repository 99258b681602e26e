import filecmp

import numpy as np
import pytest
import torch

from tres_iqa.data import (DataError, DatasetManifest, PatchBatch, Record, SyntheticSpec, augment, concat_batches,
                           distort, equivariant_transform, flip_augment, level_score, load_images, load_manifest,
                           read_image, read_ppm, sample_patches, split, synth_generate, to_tensor, translate,
                           write_manifest, write_ppm)


def _manifest(n_refs, per_ref=2):
    recs = [Record(f"img_{r}_{k}.ppm", float(r + k), f"r{r}") for r in range(n_refs) for k in range(per_ref)]
    return DatasetManifest(recs, "m")


def test_load_manifest_rows_defaults_and_errors(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,score,ref_id\na.ppm,1.5,x\nb.ppm,2,\n/abs/c.ppm,3,y\n")
    m = load_manifest(p)
    assert len(m) == 3 and m.name == "m"
    assert m.records[0].path == str(tmp_path / "a.ppm")
    assert m.records[1].ref_id == "b.ppm" and m.records[2].path == "/abs/c.ppm"
    assert m.score_range == (1.5, 3.0)
    bad = tmp_path / "bad.csv"
    bad.write_text("path,score,ref_id\na,1,x\nb,2,x\nc,3,x\nd,oops,x\n")
    with pytest.raises(DataError, match="line 5"):
        load_manifest(bad)
    with pytest.raises(DataError, match="not found"):
        load_manifest(tmp_path / "missing.csv")
    nocol = tmp_path / "nocol.csv"
    nocol.write_text("file,mos\na,1\n")
    with pytest.raises(DataError, match="missing column"):
        load_manifest(nocol)
    with pytest.raises(DataError, match="outside range"):
        load_manifest(p, score_range=(0, 2))


def test_manifest_roundtrip_and_duplicates(tmp_path):
    m = _manifest(3)
    write_manifest(m, tmp_path / "out.csv")
    back = load_manifest(tmp_path / "out.csv")
    assert [r.score for r in back.records] == [r.score for r in m.records]
    assert [r.ref_id for r in back.records] == [r.ref_id for r in m.records]
    with pytest.raises(DataError, match="duplicate"):
        DatasetManifest([Record("a", 1, "x"), Record("a", 2, "y")])


def test_ppm_roundtrip_and_errors(tmp_path, rng):
    img = rng.integers(0, 256, (16, 24, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "x.ppm"), img)
    assert np.array_equal(read_image(tmp_path / "x.ppm"), img)
    (tmp_path / "bad.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(DataError):
        read_ppm(tmp_path / "bad.ppm")
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "y.ppm", np.zeros((4, 4), dtype=np.uint8))


def test_to_tensor_range():
    t = to_tensor(np.array([[[[0, 255, 128]]]], dtype=np.uint8))
    assert t.shape == (1, 3, 1, 1)
    assert torch.allclose(t.flatten(), torch.tensor([-0.5, 0.5, 128 / 255 - 0.5]))


def test_split_counts_disjoint_and_seeded():
    m = _manifest(10)
    tr, te = split(m, 0, 0.8)
    assert len(tr.ref_ids) == 8 and len(te.ref_ids) == 2
    assert not set(tr.ref_ids) & set(te.ref_ids)
    assert len(tr) + len(te) == len(m)
    again = split(m, 0, 0.8)
    assert again[0].ref_ids == tr.ref_ids
    big = _manifest(100, 1)
    assert any(split(big, a, 0.8)[0].ref_ids != split(big, a + 1, 0.8)[0].ref_ids for a in range(5))
    with pytest.raises(ValueError):
        split(m, 0, 1.0)
    with pytest.raises(DataError):
        split(_manifest(1), 0, 0.5)


def test_synth_counts_scores_and_determinism(tmp_path):
    spec = SyntheticSpec(n_refs=5, image_size=(32, 32), families=("gaussian_blur", "white_noise"), levels=4, seed=3)
    a = synth_generate(spec, tmp_path / "a")
    b = synth_generate(spec, tmp_path / "b")
    assert len(a) == 45 == len(load_manifest(tmp_path / "a" / "manifest.csv"))
    files = sorted(p.name for p in (tmp_path / "a" / "images").iterdir())
    assert len(files) == 45
    for name in files:
        assert filecmp.cmp(tmp_path / "a" / "images" / name, tmp_path / "b" / "images" / name, shallow=False)
    assert filecmp.cmp(tmp_path / "a" / "manifest.csv", tmp_path / "b" / "manifest.csv", shallow=False)
    by_name = {r.path.rsplit("/", 1)[-1]: r.score for r in a.records}
    assert by_name["ref000_gaussian_blur_4.ppm"] < by_name["ref000_gaussian_blur_1.ppm"]
    assert by_name["ref000_pristine.ppm"] == 100.0
    assert level_score(4, 4) == 10.0 and level_score(1, 4) == 100.0


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(levels=1)
    with pytest.raises(ValueError):
        SyntheticSpec(image_size=(40, 40))
    with pytest.raises(ValueError):
        SyntheticSpec(families=("jpeg",))


def test_distortions_change_image(rng):
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    for family, param in (("gaussian_blur", 2.0), ("white_noise", 20.0), ("quantize_blocks", 4),
                          ("contrast_shift", 2.0)):
        out = distort(img, family, param, np.random.default_rng(0))
        assert out.shape == img.shape and out.dtype == np.uint8 and not np.array_equal(out, img)
    with pytest.raises(ValueError):
        distort(img, "jpeg", 1, rng)


def test_patches_inherit_scores_and_shapes(rng):
    img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    whole = sample_patches(img, 3, 64, rng, score=42.0)
    assert all(torch.equal(p, to_tensor(img[None])[0]) for p in whole.patches)
    batch = sample_patches(img, 5, 32, rng, score=17.5, source=4)
    assert batch.patches.shape == (5, 3, 32, 32)
    assert torch.all(batch.scores == 17.5) and np.all(batch.sources == 4)
    big = np.zeros((500, 500, 3), dtype=np.uint8)
    assert sample_patches(big, 50, 224, rng).patches.shape == (50, 3, 224, 224)
    c1 = sample_patches(img, 4, 16, np.random.default_rng(9)).corners
    c2 = sample_patches(img, 4, 16, np.random.default_rng(9)).corners
    assert np.array_equal(c1, c2)
    merged = concat_batches([batch, sample_patches(img, 2, 32, rng, score=3.0)])
    assert len(merged) == 7 and merged.corners.shape == (7, 2)
    assert merged.scores.tolist() == [17.5] * 5 + [3.0] * 2
    with pytest.raises(ValueError, match="patch sizes"):
        concat_batches([whole, batch])
    with pytest.raises(DataError):
        sample_patches(img, 1, 65, rng)


def test_flip_augment_policies(rng):
    x = torch.rand(6, 3, 8, 8)
    assert torch.equal(flip_augment(x, rng, {}), x)
    twice = x.flip(-1).flip(-1)
    assert torch.equal(twice, x)
    big = torch.arange(20000.0).view(10000, 1, 1, 2).expand(10000, 3, 1, 2).contiguous()
    out = flip_augment(big, np.random.default_rng(5), {"hflip": 0.5})
    frac = (out[:, 0, 0, 0] != big[:, 0, 0, 0]).float().mean().item()
    assert abs(frac - 0.5) <= 0.02
    with pytest.raises(ValueError):
        flip_augment(x, rng, {"rotate": 0.5})
    pb = PatchBatch(x, torch.zeros(6), np.zeros(6, dtype=int))
    assert augment(pb, rng, {}).patches.shape == x.shape


def test_equivariant_transforms(rng):
    half = torch.rand(2, 3, 8, 4)
    sym = torch.cat((half, half.flip(-1)), dim=-1)
    assert torch.equal(equivariant_transform(sym, "hflip"), sym)
    x = torch.rand(2, 3, 8, 8)
    y = x
    for _ in range(4):
        y = equivariant_transform(y, "rot90")
    assert torch.equal(y, x)
    assert torch.equal(equivariant_transform(x, "vflip"), x.flip(-2))
    for kind in ("translate", "crop"):
        assert equivariant_transform(torch.rand(2, 3, 64, 64), kind, rng).shape == (2, 3, 64, 64)
    with pytest.raises(ValueError):
        equivariant_transform(x, "shear")


def test_translate_roundtrip_interior(rng):
    x = torch.rand(1, 3, 64, 64)
    back = translate(translate(x, 16, 16), -16, -16)
    assert torch.equal(back[..., 16:-16, 16:-16], x[..., 16:-16, 16:-16])
    shifted = translate(x, 3, -5)
    assert torch.equal(shifted[..., 3:, :-5], x[..., :-3, 5:])


def test_load_images_from_synth(small_synth):
    manifest, _ = small_synth
    images = load_images(manifest)
    assert len(images) == len(manifest) == 5 * (1 + 2 * 3)
    assert images[0].shape == (32, 32, 3)
