import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from calibra.errors import DomainError, FormatError, IoError, UnsupportedLayout, ValidationError
from calibra.tensor_core import (IGNORE_INDEX, LabelMap, LogitMap, ProbMap, TemperatureField,
                                 load_dataset, load_labels, load_npy, save_dataset, save_labels,
                                 save_npy)

from conftest import make_dataset


class TestLoadNpy:
    def test_single_zero(self, tmp_path):
        np.save(tmp_path / "a.npy", np.zeros((1, 1, 1), dtype=np.float32))
        out = load_npy(tmp_path / "a.npy")
        np.testing.assert_array_equal(out, np.zeros((1, 1, 1)))
        assert out.dtype == np.float32

    def test_reference_writer_roundtrip(self, tmp_path):
        ref = np.arange(60, dtype=np.float32).reshape(3, 4, 5) * 0.5
        np.save(tmp_path / "a.npy", ref)
        out = load_npy(tmp_path / "a.npy")
        assert out.shape == (3, 4, 5)
        assert out[2, 3, 4] == ref.ravel()[-1]
        np.testing.assert_array_equal(out, ref)

    def test_f8_cast(self, tmp_path):
        ref = np.linspace(0, 1, 7)
        np.save(tmp_path / "a.npy", ref)
        np.testing.assert_array_equal(load_npy(tmp_path / "a.npy", np.float64), ref)

    def test_corrupt_magic(self, tmp_path):
        np.save(tmp_path / "a.npy", np.ones(3, dtype=np.float32))
        raw = bytearray((tmp_path / "a.npy").read_bytes())
        raw[1:6] = b"NOPEY"
        (tmp_path / "a.npy").write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_npy(tmp_path / "a.npy")

    def test_truncated(self, tmp_path):
        np.save(tmp_path / "a.npy", np.ones(100, dtype=np.float32))
        raw = (tmp_path / "a.npy").read_bytes()
        (tmp_path / "a.npy").write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_npy(tmp_path / "a.npy")

    def test_fortran_rejected(self, tmp_path):
        np.save(tmp_path / "a.npy", np.asfortranarray(np.ones((3, 4), dtype=np.float32)))
        with pytest.raises(UnsupportedLayout):
            load_npy(tmp_path / "a.npy")

    def test_big_endian_rejected(self, tmp_path):
        np.save(tmp_path / "a.npy", np.ones(4, dtype=">f4"))
        with pytest.raises(UnsupportedLayout):
            load_npy(tmp_path / "a.npy")

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_npy(tmp_path / "nope.npy")


class TestSaveNpy:
    def test_resave_identical_bytes(self, tmp_path):
        save_npy(np.array([[1, 2], [3, 4]]), tmp_path / "a.npy")
        save_npy(load_npy(tmp_path / "a.npy"), tmp_path / "b.npy")
        assert (tmp_path / "a.npy").read_bytes() == (tmp_path / "b.npy").read_bytes()

    def test_readable_by_numpy(self, tmp_path):
        a = np.random.default_rng(0).normal(size=(2, 3, 4))
        save_npy(a, tmp_path / "a.npy", "<f8")
        np.testing.assert_array_equal(np.load(tmp_path / "a.npy"), a)

    def test_nan_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            save_npy(np.array([1.0, np.nan]), tmp_path / "a.npy")

    def test_zero_length_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            save_npy(np.zeros((2, 0, 3)), tmp_path / "a.npy")

    def test_integer_dtype_rejected(self, tmp_path):
        with pytest.raises(UnsupportedLayout):
            save_npy(np.ones(3), tmp_path / "a.npy", "<i4")

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(-1e6, 1e6, width=32)))
    def test_roundtrip_property(self, tmp_path_factory, a):
        path = tmp_path_factory.mktemp("rt") / "a.npy"
        save_npy(a, path)
        np.testing.assert_array_equal(load_npy(path), a)


class TestLabels:
    def test_roundtrip_with_ignore(self, tmp_path):
        lab = np.array([[0, 1], [IGNORE_INDEX, 2]])
        save_labels(lab, tmp_path / "l.npy")
        np.testing.assert_array_equal(load_labels(tmp_path / "l.npy"), lab)

    def test_uint8_sentinel_maps_to_ignore(self, tmp_path):
        np.save(tmp_path / "l.npy", np.array([[0, 255]], dtype=np.uint8))
        np.testing.assert_array_equal(load_labels(tmp_path / "l.npy"), [[0, IGNORE_INDEX]])

    def test_float_labels_rejected(self, tmp_path):
        np.save(tmp_path / "l.npy", np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(UnsupportedLayout):
            load_labels(tmp_path / "l.npy")


def _manifest(tmp_path, logits, labels, **extra):
    np.save(tmp_path / "z.npy", logits.astype(np.float32))
    np.save(tmp_path / "s.npy", labels.astype(np.int32))
    doc = {"split": "val", "samples": [{"logits": "z.npy", "labels": "s.npy"}], **extra}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    return tmp_path / "m.json"


class TestLoadDataset:
    def test_one_sample(self, tmp_path):
        ds = load_dataset(_manifest(tmp_path, np.zeros((3, 4, 4)), np.zeros((4, 4))))
        assert len(ds) == 1
        assert ds.n_classes == 3
        assert ds.split == "val"

    def test_spatial_mismatch(self, tmp_path):
        with pytest.raises(ValidationError, match="sample-0: spatial mismatch"):
            load_dataset(_manifest(tmp_path, np.zeros((3, 3, 4)), np.zeros((4, 4))))

    def test_label_out_of_range(self, tmp_path):
        with pytest.raises(ValidationError):
            load_dataset(_manifest(tmp_path, np.zeros((3, 2, 2)), np.full((2, 2), 3)))

    def test_declared_class_count_checked(self, tmp_path):
        with pytest.raises(ValidationError, match="expected 4 classes"):
            load_dataset(_manifest(tmp_path, np.zeros((3, 2, 2)), np.zeros((2, 2)), classes=4))

    def test_save_load_roundtrip(self, tmp_path, rng):
        ds = make_dataset([(rng.normal(size=(3, 5, 6)), rng.integers(0, 3, (5, 6))) for _ in range(2)])
        path = save_dataset(ds, tmp_path)
        back = load_dataset(path)
        assert back.ids == ds.ids
        for a, b in zip(ds, back):
            np.testing.assert_array_equal(a.logits.data, b.logits.data)
            np.testing.assert_array_equal(a.labels.data, b.labels.data)


class TestTypes:
    def test_logits_reject_nan(self):
        with pytest.raises(ValidationError):
            LogitMap(np.array([[[0.0]], [[np.nan]]]))

    def test_logits_immutable_copy(self):
        src = np.zeros((2, 2, 2))
        lm = LogitMap(src)
        src[0, 0, 0] = 5
        assert lm.data[0, 0, 0] == 0
        with pytest.raises(ValueError):
            lm.data[0, 0, 0] = 1

    def test_labels_reject_negative(self):
        with pytest.raises(ValidationError):
            LabelMap(np.array([[0, -1]]))

    def test_probmap_sum(self):
        with pytest.raises(ValidationError):
            ProbMap(np.full((2, 1, 1), 0.4))
        ProbMap(np.full((2, 1, 1), 0.5))

    def test_temperature_positive(self):
        with pytest.raises(DomainError):
            TemperatureField.scalar(0.0)
        with pytest.raises(DomainError):
            TemperatureField.per_image([1.0, -2.0])

    def test_temperature_above_cap(self):
        with pytest.raises(DomainError):
            TemperatureField.scalar(2.0, t_max=1.0)

    def test_for_sample(self):
        assert TemperatureField.scalar(2.0).for_sample(5) == 2.0
        assert TemperatureField.per_image([1.0, 3.0]).for_sample(1) == 3.0
        stack = TemperatureField.local(np.arange(1, 9, dtype=float).reshape(2, 2, 2))
        np.testing.assert_array_equal(stack.for_sample(1), [[5, 6], [7, 8]])
