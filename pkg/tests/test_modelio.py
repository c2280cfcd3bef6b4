import json
import zipfile

import numpy as np
import pytest

from mspquant.assignment import quantize_model
from mspquant.core import Flatten, MaxPool2x2, NetworkIR, ReLU, conv2d, dense, mlp
from mspquant.errors import FormatError
from mspquant.modelio import load_model, model_files, pack_rows, save_model, unpack_rows
from mspquant.qmodel import MSP_RATIO, ActQuant, QuantizedModel


def cnn():
    return NetworkIR((conv2d(1, 4, 3, 1, 1, 0), ReLU(), MaxPool2x2(), Flatten(), dense(4 * 4 * 4, 3, 1)))


@pytest.mark.parametrize("name", ["m.msp", "m.zip", "mdir"])
def test_float_round_trip(tmp_path, name):
    net = cnn()
    save_model(net, tmp_path / name, (1, 8, 8))
    back, manifest = load_model(tmp_path / name)
    assert isinstance(back, NetworkIR)
    assert manifest["input_shape"] == [1, 8, 8]
    assert [l.kind for l in back.layers] == [l.kind for l in net.layers]
    for a, b in zip(net.layers, back.layers):
        if a.quantizable:
            assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)


def test_quantized_round_trip(tmp_path):
    net = cnn()
    q = quantize_model(net, MSP_RATIO, act=ActQuant(4, {0: 1.0, 4: 2.5}))
    save_model(q, tmp_path / "q.msp", (1, 8, 8))
    back, manifest = load_model(tmp_path / "q.msp")
    assert isinstance(back, QuantizedModel)
    assert back.ratio == q.ratio and back.act == q.act and back.finalized
    for i in q.layers:
        assert np.array_equal(back.layers[i].codes, q.layers[i].codes)
        assert np.array_equal(back.layers[i].tags, q.layers[i].tags)
        assert np.array_equal(back.layers[i].alpha, q.layers[i].alpha)
        assert np.array_equal(back.weight_matrix(i), q.weight_matrix(i))
    assert set(manifest["schemes"]) <= {"s", "f", "8"}
    assert manifest["schemes"]["s"] == {"kind": "spot", "bits": 4, "m1": 2, "m2": 1, "n_raw": 1.5}


def test_zip_bytes_are_deterministic(tmp_path):
    q = quantize_model(mlp([3, 9, 2], 2), MSP_RATIO)
    save_model(q, tmp_path / "a.msp", (3,))
    save_model(q, tmp_path / "b.msp", (3,))
    assert (tmp_path / "a.msp").read_bytes() == (tmp_path / "b.msp").read_bytes()
    with zipfile.ZipFile(tmp_path / "a.msp") as zf:
        names = zf.namelist()
        assert names == sorted(names)
        assert all(i.date_time == (1980, 1, 1, 0, 0, 0) for i in zf.infolist())


def test_codes_are_packed_per_row_width():
    codes = np.array([[1, 2, 3], [200, 17, 0]])
    data = pack_rows(codes, [4, 8])
    assert len(data) == 2 + 3
    assert np.array_equal(unpack_rows(data, [4, 8], 3), codes)
    with pytest.raises(FormatError):
        unpack_rows(data[:-1], [4, 8], 3)
    with pytest.raises(FormatError):
        unpack_rows(data + b"\0", [4, 8], 3)


def test_load_errors(tmp_path):
    with pytest.raises(FormatError):
        load_model(tmp_path / "missing.msp")
    (tmp_path / "junk.msp").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_model(tmp_path / "junk.msp")
    files = model_files(mlp([2, 3, 2], 0))
    manifest = json.loads(files["manifest.json"])
    manifest["version"] = 7
    d = tmp_path / "badver"
    d.mkdir()
    for k, v in files.items():
        (d / k).write_bytes(v)
    (d / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        load_model(d)
    (d / "manifest.json").write_bytes(files["manifest.json"])
    (d / "layer0.weight.mspt").unlink()
    with pytest.raises(FormatError):
        load_model(d)
