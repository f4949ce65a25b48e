"""On-disk formats: the LLMIMG image container and delimited text exports.

LLMIMG layout::

    b"LLMIMG01"                       8 bytes magic
    header length                     u32 little-endian
    header                            UTF-8 JSON object
    payload                           m*v float64 little-endian, column-major

Floats in CSV files are written with ``repr`` so they read back bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .algebra import SingularSpectrum
from .errors import ValidationError
from .image import ModelImage, prompts_digest

MAGIC = b"LLMIMG01"
FORMAT_VERSION = 1
_HEADER_KEYS = ("version", "v", "m", "d_estimate", "tolerance", "source_id", "created_at",
                "prompts_digest", "space")


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode_image(image):
    header = {
        "version": FORMAT_VERSION,
        "v": image.v,
        "m": image.m,
        "d_estimate": image.d_estimate,
        "tolerance": image.tolerance,
        "source_id": image.source_id,
        "created_at": image.created_at,
        "prompts_digest": prompts_digest(image.prompts),
        "space": "clr",
        # not required by readers; lets audits compare shared prompts
        "prompts": list(image.prompts),
    }
    blob = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    payload = np.asarray(image.matrix, dtype="<f8").tobytes(order="F")
    return MAGIC + struct.pack("<I", len(blob)) + blob + payload


def decode_image(data):
    if data[:8] != MAGIC or len(data) < 12:
        raise ValidationError("not an LLMIMG file (bad magic)")
    (length,) = struct.unpack_from("<I", data, 8)
    try:
        header = json.loads(data[12:12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"corrupt LLMIMG header: {exc}") from exc
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise ValidationError(f"LLMIMG header lacks {missing}")
    if header["version"] != FORMAT_VERSION or header["space"] != "clr":
        raise ValidationError(f"unsupported LLMIMG version/space: {header['version']}/{header['space']}")
    v, m = int(header["v"]), int(header["m"])
    payload = data[12 + length:]
    if len(payload) != 8 * v * m:
        raise ValidationError(f"LLMIMG payload has {len(payload)} bytes, expected {8 * v * m}")
    matrix = np.frombuffer(payload, dtype="<f8").reshape((v, m), order="F").astype(np.float64)
    prompts = header.get("prompts")
    if prompts is None:
        prompts = [f"#{i}" for i in range(m)]
    elif prompts_digest(prompts) != header["prompts_digest"]:
        raise ValidationError("LLMIMG prompts do not match prompts_digest")
    return ModelImage(matrix, prompts, int(header["d_estimate"]), header["source_id"],
                      header["created_at"], float(header["tolerance"]))


def write_image(path, image):
    atomic_write_bytes(path, encode_image(image))


def read_image(path):
    return decode_image(Path(path).read_bytes())


# -- delimited exports ------------------------------------------------------------

def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_vector_csv(path, values, tokens=None):
    values = np.asarray(values, dtype=np.float64)
    tokens = range(values.size) if tokens is None else tokens
    _write_rows(path, ("token_id", "value"), ((int(t), repr(float(x))) for t, x in zip(tokens, values)))


def read_vector_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["token_id", "value"]:
        raise ValidationError(f"{path}: expected a token_id,value header")
    tokens = np.array([int(r[0]) for r in rows[1:]], dtype=np.intp)
    values = np.array([float(r[1]) for r in rows[1:]])
    if not np.array_equal(tokens, np.arange(tokens.size)):
        raise ValidationError(f"{path}: token ids must run 0..v-1 in order")
    return values


def write_spectrum_csv(path, spectrum):
    values = spectrum.values if isinstance(spectrum, SingularSpectrum) else np.asarray(spectrum)
    _write_rows(path, ("index", "sigma"), ((i, repr(float(s))) for i, s in enumerate(values, start=1)))


def read_spectrum_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["index", "sigma"]:
        raise ValidationError(f"{path}: expected an index,sigma header")
    return np.array([float(r[1]) for r in rows[1:]])


def write_matrix_csv(path, matrix, column_names=None):
    matrix = np.asarray(matrix, dtype=np.float64)
    names = column_names or [f"c{j}" for j in range(matrix.shape[1])]
    _write_rows(path, ("token_id", *names),
                ([i, *(repr(float(x)) for x in row)] for i, row in enumerate(matrix)))


def read_matrix_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "token_id":
        raise ValidationError(f"{path}: expected a token_id header column")
    return np.array([[float(x) for x in r[1:]] for r in rows[1:]]), rows[0][1:]


def write_table_csv(path, rows, header):
    _write_rows(path, header, ([r[h] for h in header] for r in rows))
