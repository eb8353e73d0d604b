import json

import numpy as np
import pytest

from adiposeg.nets import build_network, net_forward
from adiposeg.patching import LabelMask, PatchBatch, Volume
from adiposeg.storage import (
    FormatError,
    load_weights,
    load_weights_into,
    read_mask,
    read_probabilities,
    read_volume,
    save_weights,
    write_mask,
    write_probabilities,
    write_volume,
)

SMALL = dict(stages=2, patch=4, widths=(4, 4, 4), bottlenecks=(4, 4, 4))


def test_volume_roundtrip(tmp_path):
    data = np.random.default_rng(0).random((2, 3, 4, 5)).astype(np.float32)
    v = Volume(data, (3.0, 1.4, 1.4), (1.0, -2.0, 5.5), "B", "Dixon-fat+water")
    stem = write_volume(tmp_path / "v", v)
    back = read_volume(stem.with_suffix(".json"))
    assert back.data.tobytes() == data.tobytes()
    assert (back.spacing, back.origin, back.cohort, back.channels) == (v.spacing, v.origin, "B", v.channels)


def test_mask_and_probability_roundtrip(tmp_path):
    m = LabelMask(np.random.default_rng(1).integers(0, 4, (4, 5, 6)), (10.0, 2.0, 2.0))
    back = read_mask(write_mask(tmp_path / "m", m))
    assert back.labels.tobytes() == m.labels.tobytes()
    p = np.random.default_rng(2).random((4, 3, 3, 3)).astype(np.float32)
    assert read_probabilities(write_probabilities(tmp_path / "p", p, (1, 1, 1))).tobytes() == p.tobytes()
    with pytest.raises(ValueError):
        write_probabilities(tmp_path / "q", p[0], (1, 1, 1))


def test_truncated_blob_and_bad_header(tmp_path):
    stem = write_volume(tmp_path / "v", Volume(np.ones((1, 2, 2, 2))))
    raw = stem.with_suffix(".raw")
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(FormatError, match="truncated"):
        read_volume(stem)
    stem = write_mask(tmp_path / "m", LabelMask(np.zeros((2, 2, 2))))
    with pytest.raises(FormatError):
        read_volume(stem)  # a mask is not a volume
    head = json.loads(stem.with_suffix(".json").read_text())
    head["spacing_mm"] = [1, 0, 1]
    stem.with_suffix(".json").write_text(json.dumps(head))
    with pytest.raises(FormatError):
        read_mask(stem)
    with pytest.raises(FormatError):
        read_mask(tmp_path / "missing")


def test_weights_bit_identical_forward(tmp_path):
    net = build_network("dcnet", SMALL, seed=3)
    rng = np.random.default_rng(0)
    batch = PatchBatch(rng.random((2, 1, 4, 4, 4)).astype(np.float32), rng.random((2, 3)))
    net_forward(net, batch, "train")  # move the running statistics off their init values
    stem = save_weights(tmp_path / "w", net)
    back = load_weights(stem, expect_kind="dcnet")
    a = net_forward(net, batch, "infer")[1].data
    b = net_forward(back, batch, "infer")[1].data
    assert a.tobytes() == b.tobytes()
    other = build_network("dcnet", SMALL, seed=9)
    load_weights_into(stem, other)
    assert net_forward(other, batch, "infer")[1].data.tobytes() == a.tobytes()


def test_weights_reject_wrong_kind_and_renamed_tensor(tmp_path):
    stem = save_weights(tmp_path / "w", build_network("dcnet", SMALL, seed=0))
    with pytest.raises(FormatError, match="unet"):
        load_weights(stem, expect_kind="unet")
    with pytest.raises(FormatError):
        load_weights_into(stem, build_network("unet", {"base_channels": 4}, seed=0))

    doc = json.loads(stem.with_suffix(".json").read_text())
    doc["tensors"][0]["name"] += "_renamed"
    stem.with_suffix(".json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="missing tensor"):
        load_weights(stem)


def test_weights_truncated_blob(tmp_path):
    stem = save_weights(tmp_path / "w", build_network("dcnet", SMALL, seed=0))
    blob = stem.with_suffix(".bin")
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_weights(stem)
