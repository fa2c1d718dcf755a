import numpy as np
import pytest

from segens.niftiio import read_nifti, write_nifti
from segens.volume import CtVolume, LabelMask, list_patients, load_volume, save_patient


def random_hu(rng, shape=(5, 24, 24)):
    return rng.integers(-1024, 3072, size=shape).astype(np.int16)


class TestNiftiRoundTrip:
    @pytest.mark.parametrize("name", ["vol.nii", "vol.nii.gz"])
    def test_voxel_identity(self, tmp_path, rng, name):
        arr = random_hu(rng)
        write_nifti(tmp_path / name, arr, spacing=(5.0, 1.2, 1.2))
        back, spacing = read_nifti(tmp_path / name)
        np.testing.assert_array_equal(back, arr)
        assert spacing == pytest.approx((5.0, 1.2, 1.2))

    def test_uint8_mask_round_trip(self, tmp_path, rng):
        arr = rng.integers(0, 7, size=(4, 16, 16)).astype(np.uint8)
        write_nifti(tmp_path / "m.nii.gz", arr, spacing=(2.0, 1.0, 1.0))
        back, _ = read_nifti(tmp_path / "m.nii.gz")
        np.testing.assert_array_equal(back, arr)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_nifti(tmp_path / "absent.nii.gz")

    def test_garbage_file(self, tmp_path):
        bad = tmp_path / "bad.nii"
        bad.write_bytes(b"\x00" * 400)
        with pytest.raises(OSError):
            read_nifti(bad)

    def test_truncated_file(self, tmp_path, rng):
        arr = random_hu(rng)
        path = tmp_path / "t.nii"
        write_nifti(path, arr, spacing=(1.0, 1.0, 1.0))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(OSError):
            read_nifti(path)


class TestLoadVolume:
    def test_patient_layout_with_mask(self, tmp_path, rng):
        vol = CtVolume(voxels=random_hu(rng), spacing=(5.0, 1.2, 1.2), patient_id="pat_7")
        mask = LabelMask(labels=rng.integers(0, 7, vol.shape).astype(np.uint8), class_count=6)
        save_patient(tmp_path, vol, mask)

        loaded, loaded_mask = load_volume(tmp_path / "pat_7", class_count=6)
        np.testing.assert_array_equal(loaded.voxels, vol.voxels)
        assert loaded.spacing == pytest.approx((5.0, 1.2, 1.2))
        assert loaded.patient_id == "pat_7"
        np.testing.assert_array_equal(loaded_mask.labels, mask.labels)
        assert loaded_mask.class_count == 6

    def test_volume_without_mask(self, tmp_path, rng):
        vol = CtVolume(voxels=random_hu(rng), spacing=(1.0, 1.0, 1.0), patient_id="solo")
        save_patient(tmp_path, vol)
        _, mask = load_volume(tmp_path / "solo")
        assert mask is None

    def test_missing_patient(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_volume(tmp_path / "nobody")

    def test_out_of_range_hu_clamped_with_warning(self, tmp_path):
        arr = np.full((2, 8, 8), 40, np.int16)
        arr[0, 0, 0] = -2000  # padding value seen in real exports
        write_nifti(tmp_path / "p" / "data.nii.gz", arr, spacing=(1.0, 1.0, 1.0))
        with pytest.warns(UserWarning, match="clamping"):
            vol, _ = load_volume(tmp_path / "p")
        assert vol.voxels[0, 0, 0] == -1024

    def test_mask_shape_mismatch(self, tmp_path, rng):
        write_nifti(tmp_path / "x" / "data.nii.gz", random_hu(rng), spacing=(1, 1, 1))
        write_nifti(tmp_path / "x" / "label.nii.gz", np.zeros((2, 8, 8), np.uint8), spacing=(1, 1, 1))
        with pytest.raises(ValueError, match="shape"):
            load_volume(tmp_path / "x")

    def test_list_patients_sorted(self, tmp_path, rng):
        for pid in ("b", "a", "c"):
            save_patient(tmp_path, CtVolume(random_hu(rng), (1, 1, 1), pid))
        assert list_patients(tmp_path) == ["a", "b", "c"]


class TestTypeInvariants:
    def test_ct_volume_rejects_bad_spacing(self, rng):
        with pytest.raises(ValueError):
            CtVolume(voxels=random_hu(rng), spacing=(0.0, 1.0, 1.0), patient_id="x")

    def test_ct_volume_rejects_out_of_range(self):
        arr = np.full((1, 4, 4), 4000, np.int16)
        with pytest.raises(ValueError):
            CtVolume(voxels=arr, spacing=(1, 1, 1), patient_id="x")

    def test_label_mask_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            LabelMask(labels=np.full((1, 4, 4), 9, np.uint8), class_count=6)
