"""Bit-exact tensor container and model / gram-bank serialization.

File layout:

    [uint64 little-endian: header length in bytes]
    [header: canonical JSON, UTF-8, sorted keys, no whitespace]
    [zero padding to an 8-byte boundary]
    [payload: raw little-endian IEEE-754 tensors, row-major]

The header carries the format name/version, a kind tag, free-form meta,
and a tensor directory mapping each name to {shape, dtype, offset} with
offsets relative to the payload start. Tensors are written in sorted name
order and each starts on an 8-byte boundary, so saving is canonical: the
same tensors and meta always produce identical bytes, and load followed
by save reproduces a file exactly.

Model bundles use tensor names: "embed", "head", "final_norm",
"m{i}.attn_norm", "m{i}.mlp_norm", and per linear layer either the dense
"m{i}.{kind}" or the factored "m{i}.{kind}.down" / ".up" / ".bias".
Gram banks store "m{i}.{kind}.gram" / ".input_sum" with per-layer column
counts in meta. Weights default to float32 on disk (decomposition math
stays float64 in memory); gram statistics are stored float64.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .linalg import GramAccumulator
from .model import Block, DecoderModel, DenseLayer, FactoredLayer, LayerId, ModelConfig

FORMAT_NAME = "tensor-bundle"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class Bundle:
    kind: str
    meta: dict
    tensors: dict  # name -> np.ndarray (float64 in memory)
    dtypes: dict   # name -> "f32" | "f64"


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _align8(n: int) -> int:
    return (n + 7) // 8 * 8


def save_bundle(path, kind: str, tensors: dict, meta: dict | None = None,
                dtypes: dict | None = None) -> None:
    """Write tensors canonically; identical inputs give identical bytes."""
    meta = meta or {}
    dtypes = dtypes or {}
    directory = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = dtypes.get(name, "f64")
        if code not in _DTYPES:
            raise ValueError(f"unsupported dtype code {code!r} for tensor {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        directory[name] = {"shape": list(arr.shape), "dtype": code, "offset": offset}
        blobs.append(raw)
        offset = _align8(offset + len(raw))
    header = _canonical_json({
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": directory,
    })
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(b"\x00" * (_align8(8 + len(header)) - 8 - len(header)))
        pos = 0
        for raw in blobs:
            fh.write(raw)
            pos += len(raw)
            pad = _align8(pos) - pos
            fh.write(b"\x00" * pad)
            pos += pad


def load_bundle(path) -> Bundle:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read bundle {path}: {exc}") from exc
    if len(blob) < 8:
        raise DataError(f"bundle {path} is truncated")
    header_len = int.from_bytes(blob[:8], "little")
    header_end = 8 + header_len
    if header_end > len(blob):
        raise DataError(f"bundle {path}: header length exceeds file size")
    try:
        header = json.loads(blob[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"bundle {path}: bad header: {exc}") from exc
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise DataError(f"bundle {path}: unknown format/version")
    payload_start = _align8(header_end)
    payload = blob[payload_start:]

    tensors, dtypes = {}, {}
    spans = []
    for name, entry in header["tensors"].items():
        code = entry["dtype"]
        if code not in _DTYPES:
            raise DataError(f"bundle {path}: tensor {name!r} has unknown dtype {code!r}")
        dt = _DTYPES[code]
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + count * dt.itemsize
        if end > len(payload):
            raise DataError(f"bundle {path}: tensor {name!r} exceeds payload")
        spans.append((start, end, name))
        arr = np.frombuffer(payload[start:end], dtype=dt).reshape(shape)
        tensors[name] = arr.astype(np.float64)
        dtypes[name] = code
    spans.sort()
    for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise DataError(f"bundle {path}: tensors {n1!r} and {n2!r} overlap")
    return Bundle(kind=header["kind"], meta=header.get("meta", {}),
                  tensors=tensors, dtypes=dtypes)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# model bundles
# ---------------------------------------------------------------------------

def save_model(model: DecoderModel, path, weight_dtype: str = "f32",
               tokenizer: str = "byte") -> None:
    tensors = {
        "embed": model.embedding,
        "head": model.head,
        "final_norm": model.final_norm,
    }
    for mi, block in enumerate(model.blocks):
        tensors[f"m{mi}.attn_norm"] = block.attn_norm
        tensors[f"m{mi}.mlp_norm"] = block.mlp_norm
        for kind, layer in block.layers.items():
            base = f"m{mi}.{kind}"
            if isinstance(layer, DenseLayer):
                tensors[base] = layer.weight
            else:
                tensors[f"{base}.down"] = layer.w_down
                tensors[f"{base}.up"] = layer.w_up
                if layer.bias is not None:
                    tensors[f"{base}.bias"] = layer.bias
    meta = {"config": asdict(model.config), "tokenizer": tokenizer}
    save_bundle(path, kind="model", tensors=tensors, meta=meta,
                dtypes={name: weight_dtype for name in tensors})


def load_model(path) -> DecoderModel:
    bundle = load_bundle(path)
    if bundle.kind != "model":
        raise DataError(f"{path} is a {bundle.kind!r} bundle, expected a model")
    try:
        config = ModelConfig(**bundle.meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad model config in header: {exc}") from exc

    missing = []

    def take(name):
        if name not in bundle.tensors:
            missing.append(name)
            return None
        return bundle.tensors[name]

    embed = take("embed")
    head = take("head")
    final_norm = take("final_norm")
    blocks = []
    for mi in range(config.n_layers):
        attn_norm = take(f"m{mi}.attn_norm")
        mlp_norm = take(f"m{mi}.mlp_norm")
        layers = {}
        for kind in "qkvogud":
            base = f"m{mi}.{kind}"
            if base in bundle.tensors:
                layers[kind] = DenseLayer(bundle.tensors[base])
            elif f"{base}.down" in bundle.tensors and f"{base}.up" in bundle.tensors:
                layers[kind] = FactoredLayer(
                    w_down=bundle.tensors[f"{base}.down"],
                    w_up=bundle.tensors[f"{base}.up"],
                    bias=bundle.tensors.get(f"{base}.bias"),
                )
            else:
                missing.append(base)
        if attn_norm is not None and mlp_norm is not None and len(layers) == 7:
            blocks.append(Block(attn_norm=attn_norm, mlp_norm=mlp_norm, layers=layers))
    if missing:
        raise DataError(f"{path}: missing required tensors: {', '.join(sorted(missing))}")
    return DecoderModel(config=config, embedding=embed, blocks=blocks,
                        final_norm=final_norm, head=head)


def model_tokenizer(path) -> str:
    return load_bundle(path).meta.get("tokenizer", "byte")


# ---------------------------------------------------------------------------
# gram banks
# ---------------------------------------------------------------------------

def save_gram_bank(bank: dict, path, meta: dict | None = None) -> None:
    tensors = {}
    counts = {}
    for lid, acc in bank.items():
        tensors[f"{lid.name}.gram"] = acc.gram
        tensors[f"{lid.name}.input_sum"] = acc.input_sum
        counts[lid.name] = acc.sample_count
    full_meta = {"sample_counts": counts}
    full_meta.update(meta or {})
    save_bundle(path, kind="gram_bank", tensors=tensors, meta=full_meta)


def load_gram_bank(path) -> dict:
    bundle = load_bundle(path)
    if bundle.kind != "gram_bank":
        raise DataError(f"{path} is a {bundle.kind!r} bundle, expected a gram bank")
    counts = bundle.meta.get("sample_counts", {})
    bank = {}
    for name, count in counts.items():
        lid = LayerId.parse(name)
        gram = bundle.tensors.get(f"{name}.gram")
        input_sum = bundle.tensors.get(f"{name}.input_sum")
        if gram is None or input_sum is None:
            raise DataError(f"{path}: incomplete gram record for {name}")
        bank[lid] = GramAccumulator(
            dim_out=gram.shape[0], dim_in=input_sum.shape[0],
            gram=gram, input_sum=input_sum, sample_count=int(count),
        )
    return bank
