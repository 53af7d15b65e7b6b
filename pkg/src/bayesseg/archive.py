"""Tensor archive: a directory holding a plain-text manifest plus raw little-endian blobs.

Manifest lines::

    @ key=value                                  archive-level attribute
    name dtype shape path [key=value ...]        one tensor per line

``dtype`` is ``f32`` or ``u8``; ``shape`` is comma separated (``-`` for a scalar).
Attribute values are stored verbatim and must not contain whitespace.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import SchemaError

MANIFEST = "manifest.txt"
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_CODES = {np.dtype("<f4"): "f32", np.dtype("u1"): "u8"}


def _check_token(text: str, what: str) -> str:
    text = str(text)
    if not text or any(ch.isspace() for ch in text):
        raise SchemaError(f"{what} {text!r} must be non-empty without whitespace")
    if what != "attribute value" and "=" in text:
        raise SchemaError(f"{what} {text!r} must not contain '='")
    return text


def _encode_attrs(attrs: dict) -> list[str]:
    out = []
    for k, v in attrs.items():
        _check_token(k, "attribute key")
        out.append(f"{k}={_check_token(v, 'attribute value')}")
    return out


def _decode_attrs(tokens: list[str], line_no: int) -> dict:
    attrs = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not key:
            raise SchemaError(f"manifest line {line_no}: malformed attribute {tok!r}")
        attrs[key] = value
    return attrs


class TensorArchive:
    """In-memory view of an archive: named arrays, per-array attributes, archive attributes."""

    def __init__(self, attrs: dict | None = None):
        self.attrs: dict[str, str] = dict(attrs or {})
        self.tensors: dict[str, np.ndarray] = {}
        self.tensor_attrs: dict[str, dict[str, str]] = {}

    def add(self, name: str, array: np.ndarray, **attrs) -> None:
        _check_token(name, "name")
        if name in self.tensors:
            raise SchemaError(f"duplicate tensor name {name!r}")
        array = np.asarray(array)
        if array.dtype == np.uint8:
            stored = array
        elif np.issubdtype(array.dtype, np.floating):
            stored = array.astype("<f4")
        else:
            raise SchemaError(f"tensor {name!r}: unsupported dtype {array.dtype}")
        self.tensors[name] = np.array(stored, order="C", copy=True)
        self.tensor_attrs[name] = {k: str(v) for k, v in attrs.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def save(self, directory: str | os.PathLike, force: bool = False) -> Path:
        directory = Path(directory)
        if (directory / MANIFEST).exists() and not force:
            raise FileExistsError(f"{directory} already holds an archive (use --force to overwrite)")
        directory.mkdir(parents=True, exist_ok=True)
        lines = [" ".join(["@", *_encode_attrs({k: v})]) for k, v in self.attrs.items()]
        for name, arr in self.tensors.items():
            rel = f"{name}.bin"
            shape = ",".join(str(d) for d in arr.shape) or "-"
            fields = [name, _CODES[arr.dtype], shape, rel, *_encode_attrs(self.tensor_attrs[name])]
            lines.append(" ".join(fields))
            (directory / rel).write_bytes(arr.tobytes(order="C"))
        (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "TensorArchive":
        directory = Path(directory)
        manifest = directory / MANIFEST
        if not manifest.exists():
            raise FileNotFoundError(f"no archive manifest at {manifest}")
        out = cls()
        for line_no, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "@":
                out.attrs.update(_decode_attrs(tokens[1:], line_no))
                continue
            if len(tokens) < 4:
                raise SchemaError(f"manifest line {line_no}: expected name dtype shape path")
            name, code, shape_txt, rel = tokens[:4]
            if code not in DTYPES:
                raise SchemaError(f"manifest line {line_no}: unknown dtype {code!r}")
            if name in out.tensors:
                raise SchemaError(f"manifest line {line_no}: duplicate tensor name {name!r}")
            try:
                shape = () if shape_txt == "-" else tuple(int(s) for s in shape_txt.split(","))
            except ValueError:
                raise SchemaError(f"manifest line {line_no}: bad shape {shape_txt!r}") from None
            dtype = DTYPES[code]
            raw = (directory / rel).read_bytes()
            expected = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
            if len(raw) != expected:
                raise SchemaError(f"{rel}: {len(raw)} bytes, manifest implies {expected}")
            out.tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            out.tensor_attrs[name] = _decode_attrs(tokens[4:], line_no)
        return out
