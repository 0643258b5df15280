import json
import struct

import numpy as np
import pytest

from rim.checkpoint import MAGIC, CheckpointError, config_hash, load_checkpoint, save_checkpoint
from rim.evaluation import reconstruct
from rim.likelihood import observe
from rim.models import RimConfig, rim_init
from rim.operators import make_gaussian_ensemble

CFG = RimConfig(widths=(2, 4, 2))


def _trained_like(config=CFG, seed=0):
    params = rim_init(config, seed)
    r = np.random.default_rng(seed)
    for t in params.values():
        t.data = (t.data + 0.05 * r.standard_normal(t.shape)).astype(np.float32)
    return params


def _manifest(path):
    data = path.read_bytes()
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    return json.loads(data[len(MAGIC) + 4:len(MAGIC) + 4 + n]), len(MAGIC) + 4 + n


def test_round_trip_is_byte_identical(tmp_path):
    params = _trained_like()
    save_checkpoint(tmp_path / "a.rim", params, step=7, extra={"train": {"steps": 4}})
    ck = load_checkpoint(tmp_path / "a.rim", expected=CFG)
    assert ck.step == 7 and ck.extra == {"train": {"steps": 4}}
    for name in params.names():
        np.testing.assert_array_equal(ck.params[name].data, params[name].data)
        assert ck.params[name].dtype == np.float32 and ck.params[name].requires_grad
    save_checkpoint(tmp_path / "b.rim", ck.params, step=7, extra={"train": {"steps": 4}})
    assert (tmp_path / "a.rim").read_bytes() == (tmp_path / "b.rim").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_reloaded_rollouts_are_bitwise_identical(tmp_path):
    params = _trained_like(RimConfig(widths=(2, 4, 2), variant="dilated"))
    save_checkpoint(tmp_path / "m.rim", params)
    again = load_checkpoint(tmp_path / "m.rim").params
    x = np.random.default_rng(1).uniform(size=(3, 1, 8, 8)).astype(np.float32)
    op = make_gaussian_ensemble((1, 8, 8), 32, seed=5)
    obs = observe(op, x, 0.1, seed=6)
    for a, b in zip(reconstruct(params, op, obs, 5), reconstruct(again, op, obs, 5)):
        np.testing.assert_array_equal(a, b)


def test_manifest_layout(tmp_path):
    save_checkpoint(tmp_path / "a.rim", _trained_like(), step=3)
    manifest, start = _manifest(tmp_path / "a.rim")
    assert manifest["format_version"] == 1
    assert manifest["config_hash"] == config_hash(CFG)
    assert manifest["model"] == CFG.to_dict()
    total = sum(int(np.prod(e["shape"])) for e in manifest["params"])
    assert (tmp_path / "a.rim").stat().st_size == start + 4 * total
    assert all(e["dtype"] == "float32" for e in manifest["params"])


def test_expected_architecture_mismatch(tmp_path):
    save_checkpoint(tmp_path / "a.rim", _trained_like())
    with pytest.raises(CheckpointError, match="does not match expected"):
        load_checkpoint(tmp_path / "a.rim", expected=RimConfig(widths=(2, 5, 2)))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.rim", expected=RimConfig(kind="gdn", widths=(2, 4, 2)))


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "version", "hash", "shape", "json"])
def test_corruption_is_detected(tmp_path, damage):
    path = tmp_path / "a.rim"
    save_checkpoint(path, _trained_like())
    data = bytearray(path.read_bytes())
    manifest, start = _manifest(path)
    if damage == "magic":
        data[:4] = b"XXXX"
    elif damage == "truncate":
        data = data[:-5]
    elif damage == "trailing":
        data += b"\0\0\0\0"
    elif damage == "json":
        data[len(MAGIC) + 6] = 0xFF
    else:
        if damage == "version":
            manifest["format_version"] = 2
        elif damage == "hash":
            manifest["model"]["widths"] = [2, 5, 2]
        else:
            manifest["params"][0]["shape"] = [1] + manifest["params"][0]["shape"][1:]
        header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        data = bytearray(MAGIC + struct.pack("<I", len(header)) + header) + data[start:]
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_failed_write_keeps_previous_file(tmp_path, monkeypatch):
    path = tmp_path / "a.rim"
    save_checkpoint(path, _trained_like(seed=0))
    before = path.read_bytes()

    def boom(*args):
        raise OSError("disk full")

    monkeypatch.setattr("rim.checkpoint.os.fsync", boom)
    with pytest.raises(OSError):
        save_checkpoint(path, _trained_like(seed=1))
    assert path.read_bytes() == before


def test_float64_params_are_stored_as_float32(tmp_path):
    import rim.autodiff as ad

    with ad.precision("float64"):
        params = rim_init(CFG, 0)
    save_checkpoint(tmp_path / "a.rim", params)
    back = load_checkpoint(tmp_path / "a.rim").params
    np.testing.assert_array_equal(back["conv_in.w"].data, params["conv_in.w"].data.astype(np.float32))
