import struct

import numpy as np
import pytest
import torch

from stainforge import archive
from stainforge.errors import ArchiveError


def test_round_trip_preserves_types(tmp_path):
    payload = {
        "t": torch.arange(6, dtype=torch.float64).reshape(2, 3),
        "a": np.array([1, 2, 3], dtype=np.int16),
        "nested": {"tuple": (1, 2.5, "x"), "list": [None, True], 3: "int key"},
        "raw": b"\x00\x01",
    }
    path = tmp_path / "x.sfa"
    archive.save(path, "vpgan", payload)
    back = archive.load(path, kind="vpgan")
    assert torch.equal(back["t"], payload["t"]) and back["t"].dtype == torch.float64
    assert back["a"].dtype == np.int16 and np.array_equal(back["a"], payload["a"])
    assert back["nested"] == payload["nested"] and back["raw"] == b"\x00\x01"
    assert archive.dumps("vpgan", payload) == archive.dumps("vpgan", payload)


def test_kind_and_version_checks():
    data = archive.dumps("prompt_bank", {"x": 1})
    with pytest.raises(ArchiveError, match="prompt_bank"):
        archive.loads(data, kind="diffusion")
    magic, _, hlen = struct.unpack_from("<8sIQ", data)
    bumped = struct.pack("<8sIQ", magic, archive.FORMAT_VERSION + 1, hlen) + data[20:]
    with pytest.raises(ArchiveError, match="version"):
        archive.loads(bumped)
    with pytest.raises(ArchiveError, match="magic"):
        archive.loads(b"NOTMAGIC" + data[8:])
    with pytest.raises(ArchiveError):
        archive.loads(data[:10])
    with pytest.raises(ArchiveError):
        archive.dumps("x", {"f": object()})
