"""On-disk containers.

Volumes and masks: ``<stem>.json`` header + ``<stem>.raw`` blob
(little-endian float32 [C, Z, Y, X] for volumes, uint8 [Z, Y, X] for masks).
Weights: ``<stem>.json`` manifest + ``<stem>.bin`` little-endian float32
blob with per-tensor offsets (in elements).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nets import Network, build_network
from .patching import CHANNEL_KINDS, LabelMask, Volume

VOLUME_FORMAT = 1
WEIGHTS_FORMAT = 1


class FormatError(ValueError):
    pass


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".raw", ".bin") else p


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_header(stem: Path, kind: str) -> dict:
    try:
        head = json.loads(stem.with_suffix(".json").read_text())
    except FileNotFoundError:
        raise FormatError(f"missing header {stem.with_suffix('.json')}") from None
    if head.get("format_version") != VOLUME_FORMAT:
        raise FormatError(f"unsupported container version {head.get('format_version')!r}")
    if head.get("kind") != kind:
        raise FormatError(f"{stem} holds a {head.get('kind')!r}, expected {kind!r}")
    spacing = head.get("spacing_mm")
    if not spacing or len(spacing) != 3 or min(spacing) <= 0:
        raise FormatError(f"header spacing must be three positive values, got {spacing}")
    return head


def _read_blob(stem: Path, dtype, shape):
    raw = stem.with_suffix(".raw").read_bytes()
    want = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != want:
        raise FormatError(f"{stem.with_suffix('.raw')}: blob has {len(raw)} bytes, header implies {want} (truncated or padded)")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def write_volume(path, v: Volume) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    head = dict(format_version=VOLUME_FORMAT, kind="volume", shape=list(v.data.shape),
                spacing_mm=list(v.spacing), origin_mm=list(v.origin), cohort=v.cohort,
                channels=v.channels, dtype="<f4", order="C,Z,Y,X")
    stem.with_suffix(".raw").write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    _write_json(stem.with_suffix(".json"), head)
    return stem


def read_volume(path) -> Volume:
    stem = _stem(path)
    head = _read_header(stem, "volume")
    if head.get("channels") not in CHANNEL_KINDS:
        raise FormatError(f"unknown channel semantics {head.get('channels')!r}")
    data = _read_blob(stem, "<f4", tuple(head["shape"])).astype(np.float32)
    return Volume(data, tuple(head["spacing_mm"]), tuple(head["origin_mm"]), head.get("cohort", ""), head["channels"])


def write_mask(path, m: LabelMask) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    head = dict(format_version=VOLUME_FORMAT, kind="mask", shape=list(m.labels.shape),
                spacing_mm=list(m.spacing), origin_mm=list(m.origin), cohort=m.cohort,
                dtype="u1", order="Z,Y,X", classes=["BG", "LT", "VAT", "SAT"])
    stem.with_suffix(".raw").write_bytes(np.ascontiguousarray(m.labels, dtype=np.uint8).tobytes())
    _write_json(stem.with_suffix(".json"), head)
    return stem


def read_mask(path) -> LabelMask:
    stem = _stem(path)
    head = _read_header(stem, "mask")
    labels = _read_blob(stem, np.uint8, tuple(head["shape"]))
    return LabelMask(labels, tuple(head["spacing_mm"]), tuple(head["origin_mm"]), head.get("cohort", ""))


def write_probabilities(path, probs, spacing, origin=(0.0, 0.0, 0.0), cohort: str = "") -> Path:
    """Per-class probability volume [K, Z, Y, X] (float32 blob, volume-style header)."""
    probs = np.ascontiguousarray(probs, dtype="<f4")
    if probs.ndim != 4:
        raise ValueError(f"probabilities must be [K, Z, Y, X], got {probs.shape}")
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    head = dict(format_version=VOLUME_FORMAT, kind="probabilities", shape=list(probs.shape),
                spacing_mm=[float(s) for s in spacing], origin_mm=[float(o) for o in origin], cohort=cohort,
                dtype="<f4", order="K,Z,Y,X", classes=["BG", "LT", "VAT", "SAT"][: probs.shape[0]])
    stem.with_suffix(".raw").write_bytes(probs.tobytes())
    _write_json(stem.with_suffix(".json"), head)
    return stem


def read_probabilities(path) -> np.ndarray:
    stem = _stem(path)
    head = _read_header(stem, "probabilities")
    return _read_blob(stem, "<f4", tuple(head["shape"])).astype(np.float32)


# ---------------------------------------------------------------- weights

def _tensor_table(net: Network):
    rows = [(name, "param", t.data) for name, t in net.params.items()]
    rows += [(name, "buffer", a) for name, a in net.buffers.items()]
    return rows


def save_weights(path, net: Network) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, role, arr in _tensor_table(net):
        a = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append(dict(name=name, role=role, shape=list(a.shape), offset=offset, count=int(a.size)))
        chunks.append(a.tobytes())
        offset += a.size
    doc = dict(format_version=WEIGHTS_FORMAT, kind=net.kind, config=net.config,
               layers=net.manifest, census=net.census(), tensors=tensors, dtype="<f4")
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    _write_json(stem.with_suffix(".json"), doc)
    return stem


def _check_tensors(expected: Network, listed: list):
    want = {name: list(arr.shape) for name, _, arr in _tensor_table(expected)}
    got = {t["name"]: list(t["shape"]) for t in listed}
    problems = []
    for name in sorted(set(want) - set(got)):
        problems.append(f"missing tensor {name}")
    for name in sorted(set(got) - set(want)):
        problems.append(f"unexpected tensor {name}")
    for name in sorted(set(want) & set(got)):
        if want[name] != got[name]:
            problems.append(f"shape mismatch for {name}: file {got[name]} vs network {want[name]}")
    if problems:
        raise FormatError("weights do not match the network:\n  " + "\n  ".join(problems))


def load_weights(path, expect_kind: str | None = None) -> Network:
    """Rebuild the network from the manifest's config and fill in the stored
    tensors. ``expect_kind`` guards against loading into the wrong topology."""
    stem = _stem(path)
    doc = json.loads(stem.with_suffix(".json").read_text())
    if doc.get("format_version") != WEIGHTS_FORMAT:
        raise FormatError(f"unsupported weights version {doc.get('format_version')!r}")
    kind = doc.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"file holds {kind!r} weights, cannot load into a {expect_kind!r} network")
    net = build_network(kind, doc["config"], seed=0)
    if json.loads(json.dumps(net.manifest)) != doc["layers"]:
        raise FormatError("stored layer manifest differs from the one rebuilt from its config")
    _check_tensors(net, doc["tensors"])
    blob = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f4")
    total = sum(t["count"] for t in doc["tensors"])
    if blob.size != total:
        raise FormatError(f"weights blob holds {blob.size} values, manifest lists {total}")
    for t in doc["tensors"]:
        arr = blob[t["offset"]:t["offset"] + t["count"]].reshape(t["shape"]).astype(np.float32)
        if t["role"] == "param":
            net.params[t["name"]].data = arr
        else:
            net.buffers[t["name"]][...] = arr
    return net


def load_weights_into(path, net: Network) -> Network:
    """Load a weights file into an existing network of the same topology."""
    loaded = load_weights(path, expect_kind=net.kind)
    _check_tensors(net, [dict(name=n, shape=list(a.shape)) for n, _, a in _tensor_table(loaded)])
    for name, t in net.params.items():
        t.data = loaded.params[name].data.copy()
    for name, b in net.buffers.items():
        b[...] = loaded.buffers[name]
    return net
