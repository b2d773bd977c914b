import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmfuse import data
from ssmfuse.tensor import Tensor


def small_config(**overrides):
    base = dict(
        modalities=[data.ModalitySpec("audio", 3, 5),
                    data.ModalitySpec("video", 4, 6),
                    data.ModalitySpec("text", 2, 4)],
        num_classes=2,
        samples_per_class=20,
        seed=0,
    )
    base.update(overrides)
    return data.SynthConfig(**base)


class TestMat1:
    def test_roundtrip_f64(self, tmp_path):
        arr = np.arange(6.0).reshape(2, 3)
        path = tmp_path / "t.mat1"
        data.save_mat1(path, Tensor(arr))
        again = data.load_mat1(path)
        assert again.data.dtype == np.float64
        np.testing.assert_array_equal(again.data, arr)
        data.save_mat1(tmp_path / "t2.mat1", again)
        assert (tmp_path / "t.mat1").read_bytes() == (tmp_path / "t2.mat1").read_bytes()

    def test_f32_dtype_code_honored(self, tmp_path):
        arr = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
        path = tmp_path / "t.mat1"
        data.save_mat1(path, arr)
        assert path.read_bytes()[4] == 0
        again = data.load_mat1(path)
        assert again.data.dtype == np.float32
        np.testing.assert_array_equal(again.data, arr)

    @given(st.integers(0, 1), st.lists(st.integers(1, 5), min_size=1, max_size=4),
           st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_bit_exact_ranks_1_to_4(self, code, dims, seed):
        rng = np.random.default_rng(seed)
        dtype = np.float32 if code == 0 else np.float64
        arr = rng.standard_normal(dims).astype(dtype)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "prop.mat1"
            data.save_mat1(path, arr)
            again = data.load_mat1(path).data
        assert again.dtype == arr.dtype and again.shape == arr.shape
        assert again.tobytes() == arr.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mat1"
        path.write_bytes(b"NOPE" + bytes(10))
        with pytest.raises(data.Mat1Error) as exc:
            data.load_mat1(path)
        assert exc.value.offset == 0

    def test_truncated_payload_reports_lengths(self, tmp_path):
        path = tmp_path / "t.mat1"
        data.save_mat1(path, np.zeros((2, 3)))
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(data.Mat1Error, match=f"expected {len(raw)} bytes, found {len(raw) - 8}"):
            data.load_mat1(path)

    def test_unknown_dtype_code(self, tmp_path):
        path = tmp_path / "t.mat1"
        data.save_mat1(path, np.zeros(2))
        raw = bytearray(path.read_bytes())
        raw[4] = 7
        path.write_bytes(bytes(raw))
        with pytest.raises(data.Mat1Error) as exc:
            data.load_mat1(path)
        assert exc.value.offset == 4


class TestGenerate:
    def test_deterministic_given_seed(self):
        a = data.generate(small_config())
        b = data.generate(small_config())
        assert a.splits == b.splits
        for sa, sb in zip(a.samples, b.samples):
            assert sa.label == sb.label
            for name in sa.features:
                assert sa.features[name].tobytes() == sb.features[name].tobytes()

    def test_noise_scale_irrelevant_at_full_correlation(self):
        # rho = 1 zeroes the private-noise mixing, so sequences are
        # deterministic functions of the shared latents alone
        a = data.generate(small_config(rho=1.0, noise_scale=1.0))
        b = data.generate(small_config(rho=1.0, noise_scale=50.0))
        for sa, sb in zip(a.samples, b.samples):
            for name in sa.features:
                assert sa.features[name].tobytes() == sb.features[name].tobytes()

    def test_uncorrelated_across_modalities_at_rho_zero(self):
        cfg = small_config(rho=0.0, num_classes=1, samples_per_class=500)
        ds = data.generate(cfg)
        pooled_a = np.stack([s.features["audio"].mean(axis=0) for s in ds.samples])
        pooled_v = np.stack([s.features["video"].mean(axis=0) for s in ds.samples])
        worst = 0.0
        for j in range(3):
            for k in range(3):
                corr = np.corrcoef(pooled_a[:, j], pooled_v[:, k])[0, 1]
                worst = max(worst, abs(corr))
        assert worst < 0.1

    def test_split_sizes_and_class_balance(self):
        ds = data.generate(small_config(samples_per_class=20))
        for split, expect in (("train", 14), ("val", 3), ("test", 3)):
            members = ds.of_split(split)
            assert len(members) == 2 * expect
            per_class = [sum(1 for s in members if s.label == c) for c in (0, 1)]
            assert max(per_class) - min(per_class) <= 1

    def test_splits_disjoint_and_exhaustive(self):
        ds = data.generate(small_config())
        assert len(ds.splits) == len(ds.samples)
        assert set(ds.splits) == {"train", "val", "test"}

    def test_config_validation(self):
        with pytest.raises(ValueError, match="rho"):
            small_config(rho=1.5)
        with pytest.raises(ValueError):
            data.SynthConfig(modalities=[])
        with pytest.raises(ValueError):
            data.ModalitySpec("x", 0, 4)


class TestDatasetFiles:
    def test_save_load_roundtrip(self, tmp_path):
        ds = data.generate(small_config(samples_per_class=4))
        out = tmp_path / "ds"
        data.save_dataset(ds, out)
        again = data.load_dataset(out)
        assert again.num_classes == ds.num_classes
        assert again.splits == ds.splits
        assert [m.name for m in again.modalities] == [m.name for m in ds.modalities]
        for sa, sb in zip(ds.samples, again.samples):
            assert sa.label == sb.label
            for name in sa.features:
                assert sa.features[name].tobytes() == sb.features[name].tobytes()

    def test_identical_manifests_for_identical_config(self, tmp_path):
        ds = data.generate(small_config(samples_per_class=3))
        data.save_dataset(ds, tmp_path / "a")
        data.save_dataset(data.generate(small_config(samples_per_class=3)), tmp_path / "b")
        assert ((tmp_path / "a" / "manifest.json").read_text()
                == (tmp_path / "b" / "manifest.json").read_text())

    def test_dirty_output_dir_rejected(self, tmp_path):
        out = tmp_path / "ds"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        ds = data.generate(small_config(samples_per_class=2))
        with pytest.raises(FileExistsError):
            data.save_dataset(ds, out)
        data.save_dataset(ds, out, force=True)
        assert (out / "manifest.json").exists()
