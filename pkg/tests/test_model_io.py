import struct
import zlib

import numpy as np
import pytest

from aqpcd import model_io
from aqpcd.heads import SCALES
from aqpcd.model import Detector, QuantizedDetector
from aqpcd.train import calibration_batches

from conftest import random_inputs


@pytest.fixture
def calibrated(tiny_model, rng):
    oi, dem = random_inputs(rng, 4, 32)
    tiny_model.calibrate(calibration_batches(oi, dem))
    return tiny_model, oi, dem


def test_float_round_trip_bit_exact(calibrated, tmp_path):
    model, oi, dem = calibrated
    n = model_io.save(model, tmp_path / "m.aqpm", {"seed": 3})
    assert n == (tmp_path / "m.aqpm").stat().st_size
    back = model_io.load(tmp_path / "m.aqpm")
    assert isinstance(back, Detector)
    a, b = model.state(), back.state()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    for s in SCALES:
        np.testing.assert_array_equal(model.predict(oi, dem)[s], back.predict(oi, dem)[s])
    hdr = model_io.read_header(tmp_path / "m.aqpm")
    assert hdr["kind"] == "float" and hdr["metadata"] == {"seed": 3}


def test_int8_round_trip_bit_exact(calibrated, tmp_path):
    model, oi, dem = calibrated
    q = QuantizedDetector.from_float(model)
    model_io.save(q, tmp_path / "q.aqpm")
    back = model_io.load(tmp_path / "q.aqpm")
    assert isinstance(back, QuantizedDetector)
    for s in SCALES:
        np.testing.assert_array_equal(q.predict(oi, dem)[s], back.predict(oi, dem)[s])
    for (na, ca), (nb, cb) in zip(q.named_convs(), back.named_convs()):
        assert na == nb
        for k, v in ca.tensors().items():
            np.testing.assert_array_equal(v, cb.tensors()[k])
    assert model_io.read_header(tmp_path / "q.aqpm")["graph"]["quantized"]


def test_qat_model_round_trip(calibrated, tmp_path, rng):
    model, oi, dem = calibrated
    model.enable_qat()
    model_io.save(model, tmp_path / "m.aqpm")
    back = model_io.load(tmp_path / "m.aqpm")
    assert back.qat and back.fused
    np.testing.assert_array_equal(model.predict(oi, dem)["p4"], back.predict(oi, dem)["p4"])


def test_layout_and_checksum(calibrated):
    blob = model_io.to_bytes(calibrated[0])
    assert blob[:4] == b"AQPM"
    assert struct.unpack_from("<HH", blob, 4) == (model_io.SCHEMA_VERSION, model_io.KIND_FLOAT)
    assert blob[8:12] == b"HEAD"
    assert blob[-12:-8] == b"CRC " and struct.unpack("<I", blob[-8:-4])[0] == 4
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-12])


def test_corruption_detected(calibrated):
    blob = bytearray(model_io.to_bytes(calibrated[0]))
    for pos in (20, len(blob) // 2, len(blob) - 20):
        bad = bytearray(blob)
        bad[pos] ^= 0x40
        with pytest.raises(model_io.ModelFormatError):
            model_io.from_bytes(bytes(bad))
    bad = bytearray(blob)
    bad[len(blob) // 2] ^= 1
    with pytest.raises(model_io.ChecksumError):
        model_io.from_bytes(bytes(bad))


def test_structural_errors(calibrated):
    blob = model_io.to_bytes(calibrated[0])
    with pytest.raises(model_io.ModelFormatError, match="magic"):
        model_io.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(model_io.ModelFormatError):
        model_io.from_bytes(blob[:3])
    with pytest.raises(model_io.ModelFormatError):
        model_io.from_bytes(blob[:-12])
    with pytest.raises(model_io.ModelFormatError):
        model_io.from_bytes(blob[:100])


def test_future_schema_version_rejected(calibrated):
    blob = bytearray(model_io.to_bytes(calibrated[0]))
    struct.pack_into("<H", blob, 4, 2)
    with pytest.raises(model_io.SchemaVersionError) as e:
        model_io.from_bytes(bytes(blob))
    assert (e.value.found, e.value.supported) == (2, 1)


def test_int8_file_is_much_smaller():
    # the default-size model: int8 file under 30% of the float file
    m = Detector()
    x = np.random.default_rng(0).normal(size=(2, 1, 64, 64)).astype(np.float32)
    m.calibrate([(x, x)])
    f = len(model_io.to_bytes(m))
    q = len(model_io.to_bytes(QuantizedDetector.from_float(m)))
    assert q / f < 0.30
