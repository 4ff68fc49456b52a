"""
Tests for checkpoint files, the metrics log and the report exports.
"""
import json
import math
import os
import shutil
import struct
import tempfile
import unittest

import numpy as np
import pandas as pd

from errors import (
    BadMagicError,
    TruncatedPayloadError,
    DuplicateTensorError,
    PayloadSizeError,
    TensorFormatError,
    MetricsFormatError,
    UnknownMetricError,
)
from models import MetricsRow, StorageDtype, METRICS_COLUMNS
from persistence import (
    MAGIC,
    ALIGNMENT,
    TensorStore,
    write_tensors,
    read_tensors,
    append_metrics_row,
    read_metrics,
    export_heatmap,
    write_aggregate,
    write_distribution,
)


def _row(step, layer, gap, entropy=None):
    return MetricsRow(
        step=step, layer=layer, variant="mha", m=64, d_in=64, gamma=1.0,
        lambda1=4.0 + gap, mp_gap=gap, outlier_count=int(gap > 0), outlier_energy=gap / 100.0,
        mp_soft_rank=(4.0 + gap) / 4.0, stable_rank=10.0 + 1.0 / 3.0,
        attention_entropy_bits=entropy,
    )


class TempDirTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def path(self, name):
        return os.path.join(self.tmp, name)


class TestTensorFiles(TempDirTestCase):
    """NTENSOR1 checkpoints"""

    def _store(self):
        rng = np.random.default_rng(0)
        store = TensorStore(metadata={"model": {"variant": "mha"}, "step": 7})
        store.add("layers.0.attn.wq", rng.standard_normal((3, 5)), StorageDtype.F32)
        store.add("layers.0.attn.wk", rng.standard_normal((3, 5)))
        store.add("embed", np.array([[np.pi, -0.0, 1e-310]]))
        return store

    def test_round_trip_bit_exact(self):
        """Values, dtypes, order and metadata survive a write/read"""
        store = self._store()
        write_tensors(store, self.path("a.nt"))
        loaded = read_tensors(self.path("a.nt"))
        self.assertEqual(loaded.names(), store.names())
        self.assertEqual(loaded.metadata, store.metadata)
        for name in store:
            self.assertEqual(loaded.entry(name).dtype, store.entry(name).dtype)
            self.assertEqual(loaded.entry(name).values.tobytes(), store.entry(name).values.tobytes())
        self.assertEqual(loaded.layer_count(), 1)

    def test_payloads_aligned(self):
        """Every payload starts on a 64-byte boundary"""
        store = self._store()
        write_tensors(store, self.path("a.nt"))
        with open(self.path("a.nt"), "rb") as f:
            blob = f.read()
        self.assertEqual(blob[:8], MAGIC)
        (header_len,) = struct.unpack_from("<Q", blob, 8)
        header = json.loads(blob[16:16 + header_len])
        data_start = -(-(16 + header_len) // ALIGNMENT) * ALIGNMENT
        for record in header["tensors"]:
            self.assertEqual(record["offset"] % ALIGNMENT, 0)
            start = data_start + record["offset"]
            self.assertEqual(blob[start:start + record["nbytes"]],
                             store.entry(record["name"]).values.tobytes())

    def test_bad_magic(self):
        with open(self.path("bad.nt"), "wb") as f:
            f.write(b"NOTATENSORFILE")
        with self.assertRaises(BadMagicError) as ctx:
            read_tensors(self.path("bad.nt"))
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_truncated(self):
        """Cutting the payload short is detected"""
        write_tensors(self._store(), self.path("a.nt"))
        with open(self.path("a.nt"), "rb") as f:
            blob = f.read()
        with open(self.path("cut.nt"), "wb") as f:
            f.write(blob[:-4])
        with self.assertRaises(TruncatedPayloadError):
            read_tensors(self.path("cut.nt"))

    def _rewrite_header(self, old, new):
        store = TensorStore()
        store.add("a", np.ones((2, 3)))
        store.add("b", np.zeros((2, 3)))
        write_tensors(store, self.path("a.nt"))
        with open(self.path("a.nt"), "rb") as f:
            blob = f.read()
        self.assertEqual(len(old), len(new))
        with open(self.path("edited.nt"), "wb") as f:
            f.write(blob.replace(old, new, 1))
        return self.path("edited.nt")

    def test_duplicate_name_in_file(self):
        """Two records with one name are refused"""
        path = self._rewrite_header(b'"name": "b"', b'"name": "a"')
        with self.assertRaises(DuplicateTensorError):
            read_tensors(path)

    def test_payload_size_mismatch(self):
        """Declared bytes must match shape x dtype"""
        path = self._rewrite_header(b'"dtype": "f64"', b'"dtype": "f32"')
        with self.assertRaises(PayloadSizeError):
            read_tensors(path)

    def test_negative_offset(self):
        """Offsets may not point back into the header"""
        path = self._rewrite_header(b'"offset": 64', b'"offset": -1')
        with self.assertRaises(TensorFormatError) as ctx:
            read_tensors(path)
        self.assertIn("negative offset", str(ctx.exception))

    def test_missing_file(self):
        with self.assertRaises(TensorFormatError) as ctx:
            read_tensors(self.path("nope.nt"))
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_unreadable_path(self):
        """A directory is a format error, not a crash"""
        os.mkdir(self.path("dir.nt"))
        with self.assertRaises(TensorFormatError) as ctx:
            read_tensors(self.path("dir.nt"))
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_duplicate_add(self):
        store = TensorStore()
        store.add("x", np.ones(2))
        with self.assertRaises(DuplicateTensorError):
            store.add("x", np.ones(2))


class TestMetricsLog(TempDirTestCase):
    """Append-only metrics CSV"""

    def test_exact_round_trip(self):
        """Floats come back bit-identical, blank entropy comes back as None"""
        rows = [_row(0, 0, 0.1 + 0.2, 1.0 / 3.0), _row(0, 1, 0.0), _row(50, 0, 1e-300, 2.5)]
        for row in rows:
            append_metrics_row(self.path("metrics.csv"), row)
        self.assertEqual(read_metrics(self.path("metrics.csv")), rows)

    def test_header_written_once(self):
        for step in (0, 1, 2):
            append_metrics_row(self.path("metrics.csv"), _row(step, 0, 1.0))
        with open(self.path("metrics.csv")) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], ",".join(METRICS_COLUMNS))
        self.assertEqual(len(lines), 4)

    def test_malformed(self):
        """Missing columns and garbage cells are format errors"""
        with open(self.path("bad.csv"), "w") as f:
            f.write("step,layer\n0,0\n")
        with self.assertRaises(MetricsFormatError) as ctx:
            read_metrics(self.path("bad.csv"))
        self.assertEqual(ctx.exception.exit_code, 2)

        append_metrics_row(self.path("garbage.csv"), _row(0, 0, 1.0))
        with open(self.path("garbage.csv"), "a") as f:
            f.write("zero,0,mha,64,64,1,4,0,0,0,1,10,\n")
        with self.assertRaises(MetricsFormatError):
            read_metrics(self.path("garbage.csv"))


class TestReports(TempDirTestCase):
    """Heatmap, aggregate and distribution exports"""

    def setUp(self):
        super().setUp()
        self.rows = [_row(50, 1, 2.0), _row(0, 1, 0.0), _row(0, 0, 1.0), _row(50, 0, 3.0), _row(100, 0, 4.0)]

    def test_heatmap_grid(self):
        """Layers ascending down, steps ascending across, missing cell empty"""
        export_heatmap(self.rows, "mp_gap", self.path("gap.csv"))
        with open(self.path("gap.csv")) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines, ["layer,0,50,100", "0,1,3,4", "1,0,2,"])

    def test_heatmap_normalized_stable_rank(self):
        """Stable rank over m, derived at export time"""
        export_heatmap(self.rows, "normalized_stable_rank", self.path("nsr.csv"))
        grid = pd.read_csv(self.path("nsr.csv"), index_col="layer")
        self.assertAlmostEqual(grid.loc[0, "0"], (10.0 + 1.0 / 3.0) / 64, delta=1e-15)
        self.assertTrue(math.isnan(grid.loc[1, "100"]))

    def test_heatmap_unknown_metric(self):
        with self.assertRaises(UnknownMetricError):
            export_heatmap(self.rows, "spectral_norm", self.path("x.csv"))

    def test_heatmap_duplicate_cells(self):
        with self.assertRaises(MetricsFormatError):
            export_heatmap(self.rows + [_row(0, 0, 9.0)], "mp_gap", self.path("x.csv"))

    def test_aggregate(self):
        """One line per step with population std"""
        self.assertEqual(write_aggregate(self.rows, self.path("agg.csv")), 3)
        with open(self.path("agg.csv")) as f:
            lines = f.read().splitlines()
        self.assertEqual(len(lines), 4)
        header = lines[0].split(",")
        self.assertEqual(header[:3], ["step", "mp_gap_mean", "mp_gap_std"])
        self.assertNotIn("attention_entropy_bits_mean", header)
        self.assertEqual(lines[2].split(",")[:3], ["50", "2.5", "0.5"])

    def test_aggregate_with_entropy(self):
        rows = [_row(0, 0, 1.0, 2.0), _row(0, 1, 1.0, 3.0)]
        write_aggregate(rows, self.path("agg.csv"))
        with open(self.path("agg.csv")) as f:
            header, line = f.read().splitlines()
        self.assertTrue(header.endswith("attention_entropy_bits_mean,attention_entropy_bits_std"))
        self.assertTrue(line.endswith("2.5,0.5"))

    def test_distribution_defaults_to_last_step(self):
        self.assertEqual(write_distribution(self.rows, self.path("dist.csv")), 100)
        with open(self.path("dist.csv")) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[1], "100,mp_gap,4,4,4,4,4")


if __name__ == "__main__":
    unittest.main()
