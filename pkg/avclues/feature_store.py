"""
On-disk contract for pre-extracted audio-visual features.

A sample file is a sequence of little-endian records::

    b"MCDF"  u32 version  u32 id_len  utf-8 sample_id  u32 n_tensors
    per tensor:  u32 name_len  utf-8 name  u32 dtype  u32 rank  u32 dims[rank]  data

``dtype`` is 0 for 32-bit floats and 1 for 32-bit signed integers; data is row
major. A standalone tensor record (used inside checkpoints) is the same header
without the sample id and with a single unnamed tensor.
"""
import hashlib
import json
import logging
import os
import struct
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple

import attr
import numpy as np
import torch
from torch.utils.data import Dataset

logger = logging.getLogger(__name__)

MAGIC = b"MCDF"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
MANIFEST_FILE = "manifest.json"
TRUTH_FILE = "truth.json"
SPLITS = ("train", "val", "test")

DTYPE_FLOAT32 = 0
DTYPE_INT32 = 1
_NUMPY_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_INT32: np.dtype("<i4")}

_U32 = struct.Struct("<I")
MAX_RANK = 8

PAD_ID = 0
BUNDLE_TENSORS = (
    "visual",
    "audio",
    "question_tokens",
    "type_id",
    "keyword_ids",
    "answer_id",
)


class FeatureFormatError(ValueError):
    """A file could not be parsed as an MCDF record."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class BundleValidationError(ValueError):
    """A bundle violates the feature contract."""

    def __init__(self, sample_id: str, field: str, reason: str):
        self.sample_id = sample_id
        self.field = field
        super().__init__(f"sample {sample_id}: field {field} {reason}")


def _as_float_matrix(value) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(value, dtype=np.float32))


def _as_int_vector(value) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(value, dtype=np.int32).reshape(-1))


@attr.s(eq=False)
class FeatureBundle:
    """
    One question about one clip: visual sequence [L_v x D], audio sequence
    [L_a x D], question tokens, question type, keywords and answer label.
    """

    sample_id: str = attr.ib()
    visual: np.ndarray = attr.ib(converter=_as_float_matrix)
    audio: np.ndarray = attr.ib(converter=_as_float_matrix)
    question_tokens: np.ndarray = attr.ib(converter=_as_int_vector)
    type_id: int = attr.ib(converter=int)
    keyword_ids: np.ndarray = attr.ib(converter=_as_int_vector)
    answer_id: int = attr.ib(converter=int)

    def __eq__(self, other):
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.type_id == other.type_id
            and self.answer_id == other.answer_id
            and np.array_equal(self.question_tokens, other.question_tokens)
            and np.array_equal(self.keyword_ids, other.keyword_ids)
            and self.visual.shape == other.visual.shape
            and self.audio.shape == other.audio.shape
            and self.visual.tobytes() == other.visual.tobytes()
            and self.audio.tobytes() == other.audio.tobytes()
        )

    @property
    def dim(self) -> int:
        return int(self.visual.shape[1])

    def validate(self, vocab_sizes: Optional["VocabSizes"] = None) -> None:
        """
        Checks shapes, finiteness and (when vocabulary sizes are known) id ranges.

        :param vocab_sizes: Declared vocabulary sizes of the dataset.
        :raises BundleValidationError:
        """
        for name in ("visual", "audio"):
            matrix = getattr(self, name)
            if matrix.ndim != 2 or matrix.shape[0] < 1:
                raise BundleValidationError(
                    self.sample_id, name, f"must be a nonempty L x D matrix, got {matrix.shape}"
                )
            if not np.all(np.isfinite(matrix)):
                raise BundleValidationError(self.sample_id, name, "contains non-finite values")

        if self.visual.shape[1] != self.audio.shape[1]:
            raise BundleValidationError(
                self.sample_id,
                "audio",
                f"width {self.audio.shape[1]} differs from visual width {self.visual.shape[1]}",
            )

        if self.question_tokens.size == 0:
            raise BundleValidationError(self.sample_id, "question_tokens", "is empty")

        for name in ("question_tokens", "keyword_ids"):
            if np.any(getattr(self, name) == PAD_ID):
                raise BundleValidationError(
                    self.sample_id, name, f"uses the reserved padding id {PAD_ID}"
                )

        if vocab_sizes is None:
            return

        checks = (
            ("question_tokens", self.question_tokens, vocab_sizes.token),
            ("type_id", np.array([self.type_id]), vocab_sizes.type),
            ("keyword_ids", self.keyword_ids, vocab_sizes.keyword),
            ("answer_id", np.array([self.answer_id]), vocab_sizes.answer),
        )
        for name, ids, size in checks:
            if ids.size and (ids.min() < 0 or ids.max() >= size):
                raise BundleValidationError(
                    self.sample_id, name, f"has ids outside vocabulary of size {size}"
                )


@attr.s(frozen=True)
class VocabSizes:
    token: int = attr.ib()
    type: int = attr.ib()
    keyword: int = attr.ib()
    answer: int = attr.ib()


@attr.s(frozen=True)
class SampleEntry:
    sample_id: str = attr.ib()
    path: str = attr.ib()
    split: str = attr.ib()

    @split.validator
    def _check_split(self, attribute, value):
        if value not in SPLITS:
            raise ValueError(f"split tag {value!r} of {self.sample_id} is not one of {SPLITS}")


@attr.s
class DatasetManifest:
    """
    Index of a feature dataset.

    :param version: Manifest format version.
    :param dim: Feature width D shared by audio and visual.
    :param vocab_sizes: Token, type, keyword and answer vocabulary sizes.
    :param question_type_names: Names of the question types, indexed by type id.
    :param samples: Entries of (sample_id, relative path, split).
    :param question_type_scenarios: Scenario family (audio, visual,
        audio-visual) of each question type name.
    """

    version: int = attr.ib()
    dim: int = attr.ib()
    vocab_sizes: VocabSizes = attr.ib()
    question_type_names: List[str] = attr.ib()
    samples: List[SampleEntry] = attr.ib()
    question_type_scenarios: Dict[str, str] = attr.ib(factory=dict)

    def split(self, name: str) -> List[SampleEntry]:
        return [entry for entry in self.samples if entry.split == name]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "dim": self.dim,
            "vocab_sizes": attr.asdict(self.vocab_sizes),
            "question_type_names": list(self.question_type_names),
            "question_type_scenarios": dict(self.question_type_scenarios),
            "samples": [
                [entry.sample_id, entry.path, entry.split] for entry in self.samples
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        return cls(
            version=int(data["version"]),
            dim=int(data["dim"]),
            vocab_sizes=VocabSizes(**data["vocab_sizes"]),
            question_type_names=list(data["question_type_names"]),
            samples=[SampleEntry(*entry) for entry in data["samples"]],
            question_type_scenarios=dict(data.get("question_type_scenarios", {})),
        )


def _write_tensor_body(fp: BinaryIO, array: np.ndarray, dtype_code: int) -> None:
    # keeps 0-d arrays 0-d
    array = np.require(array, dtype=_NUMPY_DTYPES[dtype_code], requirements="C")
    fp.write(_U32.pack(dtype_code))
    fp.write(_U32.pack(array.ndim))
    for size in array.shape:
        fp.write(_U32.pack(size))
    fp.write(array.tobytes(order="C"))


def _read_exact(fp: BinaryIO, size: int, path) -> bytes:
    data = fp.read(size)
    if len(data) != size:
        raise FeatureFormatError(path, f"truncated: expected {size} bytes, got {len(data)}")
    return data


def _read_u32(fp: BinaryIO, path) -> int:
    return _U32.unpack(_read_exact(fp, 4, path))[0]


def _read_str(fp: BinaryIO, path) -> str:
    size = _read_u32(fp, path)
    try:
        return _read_exact(fp, size, path).decode("utf-8")
    except UnicodeDecodeError:
        raise FeatureFormatError(path, "string field is not valid utf-8")


def _write_str(fp: BinaryIO, value: str) -> None:
    encoded = value.encode("utf-8")
    fp.write(_U32.pack(len(encoded)))
    fp.write(encoded)


def _read_tensor_body(fp: BinaryIO, path) -> np.ndarray:
    dtype_code = _read_u32(fp, path)
    if dtype_code not in _NUMPY_DTYPES:
        raise FeatureFormatError(path, f"unknown dtype code {dtype_code}")
    rank = _read_u32(fp, path)
    if rank > MAX_RANK:
        raise FeatureFormatError(path, f"bad shape header: rank {rank}")
    shape = tuple(_read_u32(fp, path) for _ in range(rank))
    dtype = _NUMPY_DTYPES[dtype_code]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = _read_exact(fp, count * dtype.itemsize, path)
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def _read_header(fp: BinaryIO, path) -> None:
    magic = fp.read(4)
    if len(magic) < 4:
        raise FeatureFormatError(path, "truncated: missing header")
    if magic != MAGIC:
        raise FeatureFormatError(path, "unrecognized format")
    version = _read_u32(fp, path)
    if version != FORMAT_VERSION:
        raise FeatureFormatError(path, f"unsupported version {version}")


def write_tensor(fp: BinaryIO, array: np.ndarray) -> None:
    """
    Writes one standalone tensor record. Integer arrays are stored as int32,
    everything else as float32.
    """
    array = np.asarray(array)
    dtype_code = DTYPE_INT32 if np.issubdtype(array.dtype, np.integer) else DTYPE_FLOAT32
    fp.write(MAGIC)
    fp.write(_U32.pack(FORMAT_VERSION))
    _write_tensor_body(fp, array, dtype_code)


def read_tensor(fp: BinaryIO, path="<stream>") -> np.ndarray:
    _read_header(fp, path)
    return _read_tensor_body(fp, path)


def sample_filename(sample_id: str) -> str:
    return f"{sample_id}.mcdf"


def _bundle_tensors(bundle: FeatureBundle) -> Sequence[Tuple[str, np.ndarray, int]]:
    return (
        ("visual", bundle.visual, DTYPE_FLOAT32),
        ("audio", bundle.audio, DTYPE_FLOAT32),
        ("question_tokens", bundle.question_tokens, DTYPE_INT32),
        ("type_id", np.array([bundle.type_id]), DTYPE_INT32),
        ("keyword_ids", bundle.keyword_ids, DTYPE_INT32),
        ("answer_id", np.array([bundle.answer_id]), DTYPE_INT32),
    )


def write_sample(bundle: FeatureBundle, directory, vocab_sizes: Optional[VocabSizes] = None) -> Path:
    """
    Writes a bundle as one MCDF record file named after its sample id.

    :param bundle: FeatureBundle to write
    :param directory: Target directory, created when missing.
    :param vocab_sizes: Optional vocabulary sizes used for id validation.
    :return: Path of the written file.
    :raises BundleValidationError: on non-finite features or bad ids.
    """
    bundle.validate(vocab_sizes)

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / sample_filename(bundle.sample_id)

    tensors = _bundle_tensors(bundle)
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(_U32.pack(FORMAT_VERSION))
        _write_str(fp, bundle.sample_id)
        fp.write(_U32.pack(len(tensors)))
        for name, array, dtype_code in tensors:
            _write_str(fp, name)
            _write_tensor_body(fp, array, dtype_code)

    return path


def read_sample(path) -> FeatureBundle:
    """
    Reads a bundle written by :func:`write_sample`.

    :param path: File path
    :return: FeatureBundle
    :raises FeatureFormatError: on bad magic, version, shape header or truncation.
    """
    tensors = dict()
    with open(path, "rb") as fp:
        _read_header(fp, path)
        sample_id = _read_str(fp, path)
        n_tensors = _read_u32(fp, path)
        for _ in range(n_tensors):
            name = _read_str(fp, path)
            tensors[name] = _read_tensor_body(fp, path)
        if fp.read(1):
            raise FeatureFormatError(path, "trailing bytes after last record")

    missing = set(BUNDLE_TENSORS) - set(tensors)
    if missing:
        raise FeatureFormatError(path, f"missing tensors {sorted(missing)}")
    for name in ("type_id", "answer_id"):
        if tensors[name].size != 1:
            raise FeatureFormatError(
                path, f"{name} must hold exactly one id, got shape {tensors[name].shape}"
            )

    bundle = FeatureBundle(
        sample_id=sample_id,
        visual=tensors["visual"],
        audio=tensors["audio"],
        question_tokens=tensors["question_tokens"],
        type_id=int(tensors["type_id"].reshape(-1)[0]),
        keyword_ids=tensors["keyword_ids"],
        answer_id=int(tensors["answer_id"].reshape(-1)[0]),
    )
    try:
        bundle.validate()
    except BundleValidationError as e:
        raise FeatureFormatError(path, str(e))
    return bundle


def write_manifest(manifest: DatasetManifest, directory) -> Path:
    path = Path(directory) / MANIFEST_FILE
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(manifest.to_dict(), fp, indent=2, sort_keys=True)
        fp.write("\n")
    return path


def load_manifest(directory, check_files: bool = True) -> DatasetManifest:
    """
    Loads and checks ``manifest.json``: sample ids must be unique and every
    indexed file must exist.

    :param directory: Dataset directory
    :param check_files: Verify that the indexed files exist.
    :return: DatasetManifest
    """
    directory = Path(directory)
    path = directory / MANIFEST_FILE
    try:
        with open(path, encoding="utf-8") as fp:
            manifest = DatasetManifest.from_dict(json.load(fp))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise FeatureFormatError(path, f"malformed manifest: {e}")

    seen = set()
    for entry in manifest.samples:
        if entry.sample_id in seen:
            raise FeatureFormatError(path, f"duplicate sample_id {entry.sample_id}")
        seen.add(entry.sample_id)
        if check_files and not (directory / entry.path).is_file():
            raise FeatureFormatError(path, f"indexed file {entry.path} does not exist")

    return manifest


def load_truth(directory) -> Dict[str, dict]:
    path = Path(directory) / TRUTH_FILE
    if not path.is_file():
        raise FileNotFoundError(f"No truth sidecar {TRUTH_FILE} in {directory}")
    with open(path, encoding="utf-8") as fp:
        return json.load(fp)


class FeatureDataset(Dataset):
    """
    Map-style dataset over one split of a feature directory. Files are parsed on
    access so worker processes can read concurrently.
    """

    def __init__(self, directory, split: str, manifest: Optional[DatasetManifest] = None):
        if split not in SPLITS:
            raise ValueError(f"Unknown split {split!r}")
        self.directory = Path(directory)
        self.manifest = manifest or load_manifest(self.directory)
        self.split = split
        self.entries = self.manifest.split(split)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> FeatureBundle:
        entry = self.entries[index]
        bundle = read_sample(self.directory / entry.path)
        bundle.validate(self.manifest.vocab_sizes)
        return bundle


def _pad_ids(rows: Sequence[np.ndarray], length: Optional[int] = None) -> torch.Tensor:
    width = length or max(max(len(row) for row in rows), 1)
    out = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    for i, row in enumerate(rows):
        row = row[:width]
        out[i, : len(row)] = torch.from_numpy(row.astype(np.int64))
    return out


@attr.s
class FeatureBatch:
    sample_ids: List[str] = attr.ib()
    visual: torch.Tensor = attr.ib()
    audio: torch.Tensor = attr.ib()
    question_tokens: torch.Tensor = attr.ib()
    type_ids: torch.Tensor = attr.ib()
    keyword_ids: torch.Tensor = attr.ib()
    answers: torch.Tensor = attr.ib()

    def to(self, device=None, dtype=None) -> "FeatureBatch":
        return attr.evolve(
            self,
            visual=self.visual.to(device=device, dtype=dtype),
            audio=self.audio.to(device=device, dtype=dtype),
            question_tokens=self.question_tokens.to(device=device),
            type_ids=self.type_ids.to(device=device),
            keyword_ids=self.keyword_ids.to(device=device),
            answers=self.answers.to(device=device),
        )

    def __len__(self) -> int:
        return len(self.sample_ids)


def collate_bundles(bundles: Sequence[FeatureBundle], question_max_len: Optional[int] = None) -> FeatureBatch:
    """
    Stacks bundles into a batch. Question and keyword ids are right padded with
    0; feature sequences must share their length within a batch.
    """
    visual_shapes = {bundle.visual.shape for bundle in bundles}
    audio_shapes = {bundle.audio.shape for bundle in bundles}
    if len(visual_shapes) != 1 or len(audio_shapes) != 1:
        raise ValueError(
            f"Feature sequences differ in shape within a batch: "
            f"visual {sorted(visual_shapes)}, audio {sorted(audio_shapes)}"
        )

    return FeatureBatch(
        sample_ids=[bundle.sample_id for bundle in bundles],
        visual=torch.from_numpy(np.stack([bundle.visual for bundle in bundles])),
        audio=torch.from_numpy(np.stack([bundle.audio for bundle in bundles])),
        question_tokens=_pad_ids([bundle.question_tokens for bundle in bundles], question_max_len),
        type_ids=torch.tensor([bundle.type_id for bundle in bundles], dtype=torch.long),
        keyword_ids=_pad_ids([bundle.keyword_ids for bundle in bundles]),
        answers=torch.tensor([bundle.answer_id for bundle in bundles], dtype=torch.long),
    )


def directory_checksum(directory) -> str:
    """sha256 over relative paths and contents of every file, in sorted order."""
    digest = hashlib.sha256()
    root = Path(directory)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(os.fsencode(path.relative_to(root).as_posix()))
        digest.update(path.read_bytes())
    return digest.hexdigest()
