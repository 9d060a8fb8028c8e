import io
import json
import struct

import numpy as np
import pytest
import torch

from avclues.feature_store import (
    MAGIC,
    BundleValidationError,
    FeatureBundle,
    FeatureDataset,
    FeatureFormatError,
    VocabSizes,
    collate_bundles,
    load_manifest,
    load_truth,
    read_sample,
    read_tensor,
    write_sample,
    write_tensor,
)


@pytest.fixture()
def bundle() -> FeatureBundle:
    rng = np.random.default_rng(0)
    return FeatureBundle(
        sample_id="clip-001",
        visual=rng.standard_normal((5, 8)),
        audio=rng.standard_normal((7, 8)),
        question_tokens=[1, 2, 3, 4, 13],
        type_id=2,
        keyword_ids=[2, 5],
        answer_id=3,
    )


def record_tensors(bundle):
    return {
        "visual": bundle.visual.astype("<f4"),
        "audio": bundle.audio.astype("<f4"),
        "question_tokens": bundle.question_tokens.astype("<i4"),
        "type_id": np.array([bundle.type_id], dtype="<i4"),
        "keyword_ids": bundle.keyword_ids.astype("<i4"),
        "answer_id": np.array([bundle.answer_id], dtype="<i4"),
    }


def sample_record(sample_id, tensors) -> bytes:
    """Packs a sample record by hand, bypassing the writer's validation."""

    def text(value):
        data = value.encode("utf-8")
        return struct.pack("<I", len(data)) + data

    out = MAGIC + struct.pack("<I", 1) + text(sample_id) + struct.pack("<I", len(tensors))
    for name, array in tensors.items():
        code = 1 if array.dtype.kind == "i" else 0
        out += text(name) + struct.pack("<II", code, array.ndim)
        out += struct.pack(f"<{array.ndim}I", *array.shape) + array.tobytes()
    return out


class TestSampleRecords:
    def test_roundtrip(self, bundle, tmp_path):
        path = write_sample(bundle, tmp_path)

        assert read_sample(path) == bundle

    def test_roundtrip_is_bit_exact(self, bundle, tmp_path):
        bundle.visual[0, 0] = np.float32(1e-38)
        restored = read_sample(write_sample(bundle, tmp_path))

        assert restored.visual.tobytes() == bundle.visual.tobytes()
        assert restored.audio.dtype == np.float32

    def test_two_writes_are_byte_identical(self, bundle, tmp_path):
        first = write_sample(bundle, tmp_path / "a").read_bytes()
        second = write_sample(bundle, tmp_path / "b").read_bytes()

        assert first == second
        assert first.startswith(MAGIC)

    def test_nan_is_rejected_naming_sample_and_field(self, bundle, tmp_path):
        bundle.visual[2, 3] = np.nan

        with pytest.raises(BundleValidationError) as e:
            write_sample(bundle, tmp_path)

        assert "clip-001" in str(e.value)
        assert e.value.field == "visual"

    def test_ids_outside_vocabulary_are_rejected(self, bundle, tmp_path):
        with pytest.raises(BundleValidationError) as e:
            write_sample(bundle, tmp_path, VocabSizes(token=10, type=3, keyword=9, answer=4))

        assert e.value.field == "question_tokens"

    def test_empty_question_is_rejected(self, bundle):
        bundle.question_tokens = np.zeros(0, dtype=np.int32)

        with pytest.raises(BundleValidationError):
            bundle.validate()

    @pytest.mark.parametrize(
        "field, ids", [("question_tokens", [5, 0, 7]), ("keyword_ids", [0])]
    )
    def test_padding_id_is_rejected(self, bundle, tmp_path, field, ids):
        setattr(bundle, field, np.array(ids, dtype=np.int32))

        with pytest.raises(BundleValidationError) as e:
            write_sample(bundle, tmp_path)

        assert e.value.field == field
        assert "padding" in str(e.value)

    def test_padding_id_in_file_raises_parse_error(self, bundle, tmp_path):
        tensors = dict(record_tensors(bundle), question_tokens=np.array([5, 0, 7], dtype=np.int32))
        path = tmp_path / "clip-001.mcdf"
        path.write_bytes(sample_record("clip-001", tensors))

        with pytest.raises(FeatureFormatError) as e:
            read_sample(path)

        assert "question_tokens" in str(e.value)

    @pytest.mark.parametrize("field", ["type_id", "answer_id"])
    def test_empty_scalar_id_raises_parse_error(self, bundle, tmp_path, field):
        tensors = dict(record_tensors(bundle), **{field: np.zeros(0, dtype=np.int32)})
        path = tmp_path / "clip-001.mcdf"
        path.write_bytes(sample_record("clip-001", tensors))

        with pytest.raises(FeatureFormatError) as e:
            read_sample(path)

        assert field in str(e.value)

    def test_mismatched_widths_are_rejected(self, bundle):
        bundle.audio = np.zeros((7, 4), dtype=np.float32)

        with pytest.raises(BundleValidationError):
            bundle.validate()

    def test_truncated_file_raises_parse_error(self, bundle, tmp_path):
        path = write_sample(bundle, tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 17])

        with pytest.raises(FeatureFormatError) as e:
            read_sample(path)

        assert "truncated" in str(e.value)

    def test_wrong_magic(self, bundle, tmp_path):
        path = write_sample(bundle, tmp_path)
        path.write_bytes(b"NOPE" + path.read_bytes()[4:])

        with pytest.raises(FeatureFormatError) as e:
            read_sample(path)

        assert "unrecognized format" in str(e.value)

    def test_unsupported_version(self, bundle, tmp_path):
        path = write_sample(bundle, tmp_path)
        data = bytearray(path.read_bytes())
        data[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(data))

        with pytest.raises(FeatureFormatError):
            read_sample(path)

    def test_trailing_bytes(self, bundle, tmp_path):
        path = write_sample(bundle, tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00")

        with pytest.raises(FeatureFormatError):
            read_sample(path)


class TestTensorRecords:
    def test_float_tensor(self):
        buffer = io.BytesIO()
        array = np.arange(12, dtype=np.float32).reshape(3, 4)
        write_tensor(buffer, array)
        buffer.seek(0)

        assert np.array_equal(read_tensor(buffer), array)

    def test_integer_tensor_is_stored_as_int32(self):
        buffer = io.BytesIO()
        write_tensor(buffer, np.array(5, dtype=np.int64))
        buffer.seek(0)

        restored = read_tensor(buffer)

        assert restored.dtype == np.int32
        assert restored.shape == ()
        assert int(restored) == 5

    def test_scalar_float_keeps_rank_zero(self):
        buffer = io.BytesIO()
        write_tensor(buffer, np.float64(0.25))

        assert buffer.getvalue()[12:16] == (0).to_bytes(4, "little")
        buffer.seek(0)
        restored = read_tensor(buffer)
        assert restored.shape == ()
        assert float(restored) == 0.25


class TestManifest:
    def test_load(self, synthetic_dir, synthetic_spec):
        manifest = load_manifest(synthetic_dir)

        assert len(manifest.samples) == synthetic_spec.n_samples
        assert manifest.dim == synthetic_spec.dim
        assert {entry.split for entry in manifest.samples} == {"train", "val", "test"}

    def test_missing_file(self, synthetic_dir, tmp_path):
        data = json.loads((synthetic_dir / "manifest.json").read_text())
        data["samples"].append(["ghost", "samples/ghost.mcdf", "train"])
        (tmp_path / "manifest.json").write_text(json.dumps(data))

        with pytest.raises(FeatureFormatError):
            load_manifest(tmp_path)

    def test_duplicate_sample_id(self, synthetic_dir, tmp_path):
        data = json.loads((synthetic_dir / "manifest.json").read_text())
        data["samples"].append(data["samples"][0])
        (tmp_path / "manifest.json").write_text(json.dumps(data))

        with pytest.raises(FeatureFormatError) as e:
            load_manifest(tmp_path, check_files=False)

        assert "duplicate" in str(e.value)

    def test_bad_split_tag(self, synthetic_dir, tmp_path):
        data = json.loads((synthetic_dir / "manifest.json").read_text())
        data["samples"][0][2] = "holdout"
        (tmp_path / "manifest.json").write_text(json.dumps(data))

        with pytest.raises(ValueError):
            load_manifest(tmp_path, check_files=False)

    def test_missing_truth(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_truth(tmp_path)


class TestLoading:
    def test_dataset_split(self, synthetic_dir, manifest):
        dataset = FeatureDataset(synthetic_dir, "val", manifest)

        assert len(dataset) == len(manifest.split("val"))
        assert dataset[0].sample_id.startswith("val-")

    def test_collate_pads_ids(self, bundle):
        other = FeatureBundle(
            sample_id="clip-002",
            visual=bundle.visual,
            audio=bundle.audio,
            question_tokens=[1, 2],
            type_id=0,
            keyword_ids=[3],
            answer_id=1,
        )

        batch = collate_bundles([bundle, other], question_max_len=6)

        assert batch.question_tokens.shape == (2, 6)
        assert batch.question_tokens[1].tolist() == [1, 2, 0, 0, 0, 0]
        assert batch.keyword_ids.tolist() == [[2, 5], [3, 0]]
        assert batch.visual.dtype == torch.float32
        assert len(batch) == 2

    def test_collate_rejects_ragged_features(self, bundle):
        other = FeatureBundle(
            sample_id="clip-002",
            visual=np.zeros((3, 8)),
            audio=bundle.audio,
            question_tokens=[1],
            type_id=0,
            keyword_ids=[1],
            answer_id=0,
        )

        with pytest.raises(ValueError):
            collate_bundles([bundle, other])
