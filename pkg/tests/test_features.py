import numpy as np
import pytest

from anodet.errors import DegenerateInputError, ManifestError, ParameterError
from anodet.features import (
    FeatureStack,
    apply_filter_bank,
    learn_patch_pca_filters,
    load_external_features,
    make_gabor_bank,
    multilight_pca,
    pca_reduce_features,
)
from anodet.image import Image, convolve2d, save_float_map


def noise_image(seed, shape=(1, 128, 128), std=0.1):
    rng = np.random.default_rng(seed)
    return Image(rng.normal(0.5, std, size=shape))


class TestPatchPca:
    def test_default_texture_configuration(self):
        # m=45, s=17 is the stock configuration for textured inputs
        img = noise_image(0)
        bank = learn_patch_pca_filters(img.channel(0), 17, 45)
        assert len(bank) == 45
        assert bank.source == "patch_pca"
        assert bank.kernels[0].shape == (17, 17)
        assert np.all(np.diff(bank.eigenvalues) <= 1e-12)

    def test_kernels_orthonormal(self):
        img = noise_image(1, shape=(1, 96, 96))
        bank = learn_patch_pca_filters(img.channel(0), 9, 30)
        flat = np.stack([k.ravel() for k in bank.kernels])
        gram = flat @ flat.T
        assert np.abs(gram - np.eye(30)).max() <= 1e-8

    def test_constant_channel_degenerate(self):
        with pytest.raises(DegenerateInputError) as exc:
            learn_patch_pca_filters(np.full((64, 64), 0.7), 5, 4)
        assert exc.value.code == "no_texture"

    def test_eigenvalue_sum_is_scaled_pixel_variance(self):
        # trace identity: the s^2 eigenvalues sum to s^2 times the pixel
        # variance of white noise, up to sampling error
        s = 5
        ok = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            x = rng.normal(0.0, 1.0, size=(64, 64))
            bank = learn_patch_pca_filters(x, s, s * s)
            ratio = bank.eigenvalues.sum() / (s * s * x.var())
            ok += abs(ratio - 1.0) <= 0.05
        assert ok == 50

    def test_deterministic(self):
        img = noise_image(2, shape=(1, 80, 80))
        b1 = learn_patch_pca_filters(img.channel(0), 7, 10, seed=3)
        b2 = learn_patch_pca_filters(img.channel(0), 7, 10, seed=3)
        for k1, k2 in zip(b1.kernels, b2.kernels):
            assert np.array_equal(k1, k2)

    def test_subsampled_path_deterministic(self):
        # interior patch count just above the 200k sampling cap
        img = noise_image(4, shape=(1, 454, 454))
        b1 = learn_patch_pca_filters(img.channel(0), 7, 5, seed=11)
        b2 = learn_patch_pca_filters(img.channel(0), 7, 5, seed=11)
        assert all(np.array_equal(a, b) for a, b in zip(b1.kernels, b2.kernels))

    def test_variance_fraction_selection(self):
        img = noise_image(5, shape=(1, 80, 80))
        full = learn_patch_pca_filters(img.channel(0), 5, 25)
        partial = learn_patch_pca_filters(img.channel(0), 5, 0.5)
        want = np.searchsorted(np.cumsum(full.eigenvalues) / full.eigenvalues.sum(), 0.5 - 1e-12) + 1
        assert len(partial) == want
        assert learn_patch_pca_filters(img.channel(0), 5, 1.0).kernels[0].shape == (5, 5)

    def test_too_few_patches_rejected(self):
        with pytest.raises(ParameterError):
            learn_patch_pca_filters(np.zeros((32, 32)), 17, 5)

    def test_even_patch_side_rejected(self):
        with pytest.raises(ParameterError):
            learn_patch_pca_filters(np.zeros((64, 64)), 4, 2)


class TestPatchPcaResponses:
    def test_response_variance_matches_eigenvalue(self):
        img = noise_image(6)
        bank = learn_patch_pca_filters(img.channel(0), 9, 15)
        fs = apply_filter_bank(img, bank)
        p = 4  # ignore a border band; the sample set was interior patches
        for i in range(15):
            v = fs.maps[0, i][p:-p, p:-p].var()
            assert abs(v / bank.eigenvalues[i] - 1.0) <= 0.10

    def test_responses_decorrelated(self):
        img = noise_image(7)
        bank = learn_patch_pca_filters(img.channel(0), 9, 8)
        fs = apply_filter_bank(img, bank)
        p = 4
        flat = fs.maps[0][:, p:-p, p:-p].reshape(8, -1)
        corr = np.corrcoef(flat)
        off = corr - np.diag(np.diag(corr))
        assert np.abs(off).max() <= 0.05


class TestGaborBank:
    def test_default_count_is_72(self):
        assert len(make_gabor_bank()) == 72

    def test_zero_mean_unit_norm(self):
        bank = make_gabor_bank()
        for k in bank.kernels:
            assert abs(k.mean()) <= 1e-10
            assert abs((k**2).sum() - 1.0) <= 1e-10

    def test_axis_pair_kernels_are_transposes(self):
        # 0 and 90 degrees, same size and wavelength
        bank = make_gabor_bank(sizes=(7, 15), orientations=6, wavelengths=3)
        per_size = 6 * 3
        for si in range(2):
            for wi in range(3):
                k0 = bank.kernels[si * per_size + 0 * 3 + wi]
                k90 = bank.kernels[si * per_size + 3 * 3 + wi]
                assert np.abs(k0.T - k90).max() <= 1e-10

    def test_even_size_rejected(self):
        with pytest.raises(ParameterError):
            make_gabor_bank(sizes=(8,))


class TestApplyFilterBank:
    def test_constant_image_zero_responses(self):
        bank = make_gabor_bank(sizes=(7,), orientations=2, wavelengths=2)
        fs = apply_filter_bank(Image(np.full((2, 32, 32), 0.3)), bank)
        assert np.abs(fs.maps).max() <= 1e-12

    def test_shape_contract(self):
        img = noise_image(8, shape=(3, 48, 48))
        bank = learn_patch_pca_filters(img.channel(0), 9, 10)
        fs = apply_filter_bank(img, bank)
        assert fs.maps.shape == (3, 10, 48, 48)
        assert fs.dof == 10 and fs.channel_count == 3

    def test_single_kernel_composition_identity(self):
        img = noise_image(9, shape=(1, 40, 40))
        bank = learn_patch_pca_filters(img.channel(0), 7, 1)
        fs = apply_filter_bank(img, bank)
        x = img.channel(0) - img.channel(0).mean()
        assert np.array_equal(fs.maps[0, 0], convolve2d(x, bank.kernels[0]))

    def test_commutes_with_channel_permutation(self):
        img = noise_image(10, shape=(3, 32, 32))
        bank = make_gabor_bank(sizes=(7,), orientations=2, wavelengths=1)
        fs = apply_filter_bank(img, bank)
        perm = Image(img.data[[2, 0, 1]])
        fs_perm = apply_filter_bank(perm, bank)
        assert np.array_equal(fs_perm.maps, fs.maps[[2, 0, 1]])

    def test_oversized_kernel_rejected(self):
        bank = make_gabor_bank(sizes=(31,), orientations=1, wavelengths=1)
        with pytest.raises(ParameterError):
            apply_filter_bank(Image(np.zeros((1, 16, 16))), bank)


class TestMultilightPca:
    def test_identical_images_rank_one(self):
        img = noise_image(11, shape=(1, 32, 32))
        out = multilight_pca([img] * 5, keep_last=3)
        assert out.channels == 3
        # everything beyond the first component is numerically zero
        assert out.data.std() <= 1e-10

    def test_output_channels_decorrelated(self):
        imgs = [noise_image(20 + i, shape=(1, 48, 48)) for i in range(5)]
        out = multilight_pca(imgs, keep_last=3)
        flat = out.data.reshape(3, -1)
        corr = np.corrcoef(flat)
        off = corr - np.diag(np.diag(corr))
        assert np.abs(off).max() <= 1e-6

    def test_components_ordered_by_variance(self):
        imgs = [noise_image(40 + i, shape=(1, 48, 48)) for i in range(5)]
        out = multilight_pca(imgs, keep_last=4)
        variances = out.data.reshape(4, -1).var(axis=1)
        assert np.all(np.diff(variances) <= 1e-12)

    def test_dimension_mismatch_rejected(self):
        a = noise_image(12, shape=(1, 16, 16))
        b = noise_image(13, shape=(1, 16, 17))
        with pytest.raises(ParameterError):
            multilight_pca([a, b], keep_last=1)

    def test_keep_last_bounds(self):
        imgs = [noise_image(14, shape=(1, 8, 8))] * 3
        with pytest.raises(ParameterError):
            multilight_pca(imgs, keep_last=4)


class TestExternalFeatures:
    def make_feature_dir(self, tmp_path, count=6, dims=(16, 16), seed=0):
        rng = np.random.default_rng(seed)
        names = []
        for i in range(count):
            name = f"feat_{i:03d}.pfm"
            save_float_map(rng.normal(size=dims).astype(np.float32), tmp_path / name)
            names.append(name)
        lines = [f"count={count}", f"dims={dims[0]}x{dims[1]}"] + names
        (tmp_path / "manifest.txt").write_text("\n".join(lines) + "\n")
        return tmp_path

    def test_shape_contract(self, tmp_path):
        d = self.make_feature_dir(tmp_path, count=6)
        fs = load_external_features(d)
        assert fs.channel_count == 1
        assert fs.dof == 6
        assert (fs.height, fs.width) == (16, 16)

    def test_count_mismatch(self, tmp_path):
        d = self.make_feature_dir(tmp_path, count=6)
        text = (d / "manifest.txt").read_text().replace("count=6", "count=7")
        (d / "manifest.txt").write_text(text)
        with pytest.raises(ManifestError):
            load_external_features(d)

    def test_dims_mismatch(self, tmp_path):
        d = self.make_feature_dir(tmp_path, count=3)
        save_float_map(np.zeros((8, 8), dtype=np.float32), d / "feat_001.pfm")
        with pytest.raises(ManifestError):
            load_external_features(d)

    def test_missing_listed_file(self, tmp_path):
        d = self.make_feature_dir(tmp_path, count=3)
        (d / "feat_002.pfm").unlink()
        with pytest.raises(ManifestError):
            load_external_features(d)


class TestPcaReduce:
    def test_full_fraction_preserves_dof(self):
        rng = np.random.default_rng(15)
        fs = FeatureStack(maps=rng.normal(size=(1, 8, 24, 24)))
        out = pca_reduce_features(fs, 1.0)
        assert out.dof == 8

    def test_retained_count_matches_eigenvalue_oracle(self):
        # maps with strongly uneven variances; verify the retained count
        # against an independent eigenvalue computation
        rng = np.random.default_rng(16)
        scales = np.array([10.0, 8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.1, 0.05, 0.01])
        maps = rng.normal(size=(10, 32 * 32)) * scales[:, None]
        fs = FeatureStack(maps=maps.reshape(1, 10, 32, 32))
        out = pca_reduce_features(fs, 0.9)
        data = maps.T - maps.T.mean(axis=0)
        eig = np.sort(np.linalg.eigvalsh(np.cov(data.T)))[::-1]
        frac = np.cumsum(eig) / eig.sum()
        want = int(np.searchsorted(frac, 0.9 - 1e-12) + 1)
        assert out.dof == want <= 10
        assert frac[out.dof - 1] >= 0.9 - 1e-9

    def test_output_decorrelated(self):
        rng = np.random.default_rng(17)
        base = rng.normal(size=(1, 6, 20, 20))
        base[0, 3] = base[0, 0] * 0.9 + base[0, 1] * 0.1  # correlated inputs
        out = pca_reduce_features(FeatureStack(maps=base), 1.0)
        flat = out.maps[0].reshape(out.dof, -1)
        corr = np.corrcoef(flat)
        off = corr - np.diag(np.diag(corr))
        assert np.abs(off).max() <= 1e-8

    def test_multichannel_rejected(self):
        with pytest.raises(ParameterError):
            pca_reduce_features(FeatureStack(maps=np.zeros((2, 3, 8, 8))), 0.9)
