"""Tests for the binary shadow-record file format."""

import struct

import numpy as np
import pytest

from pialab import architectures as arch
from pialab import records
from pialab.errors import FormatError


def _small_record_file(n=4, arch_id="A9", seed=0):
    spec = arch.make_spec(arch_id)
    boundaries = arch.boundary_table(spec)
    pcount = arch.parameter_count(spec)
    rng = np.random.default_rng(seed)
    recs = [
        records.ShadowRecord(
            weights=rng.normal(size=pcount).astype(np.float32),
            property_label=i % 2,
            accuracy=float(rng.uniform(0.8, 1.0)),
            seed=1000 + i,
            shadow_index=i,
            retrain_count=i % 3,
        )
        for i in range(n)
    ]
    return records.RecordFile(arch_id, (3, 64, 64), 42, boundaries, recs)


class TestRoundTrip:
    def test_round_trip_exact(self, tmp_path):
        rf = _small_record_file()
        path = str(tmp_path / "s.pia")
        records.persist_records(rf, path)
        again = records.load_records(path)
        assert again.arch_id == rf.arch_id
        assert again.input_shape == rf.input_shape
        assert again.master_seed == rf.master_seed
        assert again.boundaries == tuple(rf.boundaries)
        assert again.records == rf.records

    def test_accuracy_survives_as_float32(self, tmp_path):
        rf = _small_record_file(n=1)
        rf.records[0].accuracy = 0.8512345678901
        path = str(tmp_path / "s.pia")
        records.persist_records(rf, path)
        again = records.load_records(path)
        assert np.float32(again.records[0].accuracy) == np.float32(0.8512345678901)

    def test_parameter_count_property(self):
        rf = _small_record_file()
        assert rf.parameter_count == 5857

    def test_rejects_wrong_weight_length(self, tmp_path):
        rf = _small_record_file(n=1)
        rf.records[0].weights = np.zeros(10, dtype=np.float32)
        with pytest.raises(FormatError, match="weight length"):
            records.persist_records(rf, str(tmp_path / "s.pia"))


class TestCorruption:
    def _bytes(self, tmp_path):
        rf = _small_record_file(n=2)
        path = tmp_path / "s.pia"
        records.persist_records(rf, str(path))
        return path, path.read_bytes()

    def test_bad_magic(self, tmp_path):
        path, blob = self._bytes(tmp_path)
        path.write_bytes(b"NOPE" + blob[4:])
        with pytest.raises(FormatError, match="byte offset 0"):
            records.load_records(str(path))

    def test_bad_version(self, tmp_path):
        path, blob = self._bytes(tmp_path)
        path.write_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
        with pytest.raises(FormatError, match="version 99"):
            records.load_records(str(path))

    def test_truncated_file(self, tmp_path):
        path, blob = self._bytes(tmp_path)
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="byte offset"):
            records.load_records(str(path))

    def test_trailing_garbage(self, tmp_path):
        path, blob = self._bytes(tmp_path)
        path.write_bytes(blob + b"\x00\x01")
        with pytest.raises(FormatError, match="trailing"):
            records.load_records(str(path))

    def test_bad_property_label(self, tmp_path):
        rf = _small_record_file(n=1)
        path = tmp_path / "s.pia"
        records.persist_records(rf, str(path))
        blob = bytearray(path.read_bytes())
        # the record body starts right after the u32 record count; its
        # first byte is the property label
        header = 4 + 4 + 2 + 2 + 6 + 8 + 4 + 4 + len(rf.boundaries) * 22 + 4
        blob[header] = 7
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="property label"):
            records.load_records(str(path))

    def test_boundary_sum_mismatch(self, tmp_path):
        rf = _small_record_file(n=1)
        path = tmp_path / "s.pia"
        records.persist_records(rf, str(path))
        blob = bytearray(path.read_bytes())
        # corrupt the u32 parameter count in the header
        offset = 4 + 4 + 2 + 2 + 6 + 8
        blob[offset:offset + 4] = struct.pack("<I", 12345)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="boundary table sums"):
            records.load_records(str(path))
