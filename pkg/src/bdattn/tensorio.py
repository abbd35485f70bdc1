"""Binary tensor files and model-bundle manifests.

Tensor file layout (little-endian throughout):

    bytes 0-3   magic "BDT1"
    byte  4     dtype code: 0 = p32, 1 = p64
    byte  5     ndim, always 2
    bytes 6-21  two unsigned 64-bit dims (rows, cols)
    payload     rows*cols IEEE-754 values, row-major

Round trips are byte-exact. A manifest is a UTF-8 text file with the
header line ``bda-manifest v1`` followed by ``key = value`` lines,
including one ``tensor <role> = <filename>`` line per stored matrix;
filenames are resolved relative to the manifest. Loading checks that every
listed file exists and matches the declared geometry and precision.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .attention import BDAWeights, MHAWeights
from .decompose import Tag
from .errors import ManifestError, TensorFileError
from .tensor import Precision, Tensor2D

MAGIC = b"BDT1"
MANIFEST_HEADER = "bda-manifest v1"
_HEADER = struct.Struct("<4sBBQQ")
_DTYPE_CODES = {Precision.P32: 0, Precision.P64: 1}
_CODE_DTYPES = {0: Precision.P32, 1: Precision.P64}
_MAX_ELEMENTS = 1 << 48

MHA_ROLES = ("w_q", "w_k", "w_v", "w_o")
BDA_ROLES = ("b_qk", "c_qk", "c_vo", "b_vo")


def save_tensor(path, t: Tensor2D) -> None:
    path = Path(path)
    code = _DTYPE_CODES[t.precision]
    header = _HEADER.pack(MAGIC, code, 2, t.rows, t.cols)
    payload = t.data.astype(t.precision.dtype.newbyteorder("<"), copy=False).tobytes()
    path.write_bytes(header + payload)


def load_tensor(path) -> Tensor2D:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFileError(f"{path}: file shorter than header ({len(raw)} bytes)")
    magic, code, ndim, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFileError(f"{path}: bad magic {magic!r}")
    if code not in _CODE_DTYPES:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    if ndim != 2:
        raise TensorFileError(f"{path}: ndim must be 2, got {ndim}")
    if rows == 0 or cols == 0:
        raise TensorFileError(f"{path}: zero-size dims {rows}x{cols}")
    if rows * cols > _MAX_ELEMENTS:
        raise TensorFileError(f"{path}: dims {rows}x{cols} overflow the element budget")
    precision = _CODE_DTYPES[code]
    expected = rows * cols * precision.itemsize
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise TensorFileError(
            f"{path}: payload holds {len(payload)} bytes, expected {expected}"
        )
    arr = np.frombuffer(payload, dtype=precision.dtype.newbyteorder("<"))
    arr = arr.astype(precision.dtype).reshape(rows, cols)
    try:
        return Tensor2D._wrap(arr)
    except ValueError as exc:
        raise TensorFileError(f"{path}: {exc}") from exc


def _format_manifest(fields: dict[str, str], tensors: dict[str, str]) -> str:
    lines = [MANIFEST_HEADER]
    lines.extend(f"{k} = {v}" for k, v in fields.items())
    lines.extend(f"tensor {role} = {fname}" for role, fname in tensors.items())
    return "\n".join(lines) + "\n"


def _parse_manifest(path: Path) -> tuple[dict[str, str], dict[str, str]]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ManifestError(f"{path}: manifest not found") from None
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestError(f"{path}: missing header line {MANIFEST_HEADER!r}")
    fields: dict[str, str] = {}
    tensors: dict[str, str] = {}
    for ln in lines[1:]:
        if "=" not in ln:
            raise ManifestError(f"{path}: malformed line {ln!r}")
        key, value = (part.strip() for part in ln.split("=", 1))
        if key.startswith("tensor "):
            tensors[key[len("tensor ") :].strip()] = value
        else:
            fields[key] = value
    return fields, tensors


def _geometry(fields: dict[str, str], path: Path) -> tuple[int, int, int]:
    try:
        return int(fields["d"]), int(fields["d_h"]), int(fields["n_heads"])
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{path}: bad or missing geometry fields") from exc


def _load_role(
    tensors: dict[str, str], role: str, base: Path, path: Path, precision: Precision
) -> Tensor2D:
    if role not in tensors:
        raise ManifestError(f"{path}: missing tensor role {role!r}")
    tensor_path = base / tensors[role]
    if not tensor_path.exists():
        raise ManifestError(f"{path}: listed file {tensor_path} does not exist")
    t = load_tensor(tensor_path)
    if t.precision is not precision:
        raise ManifestError(
            f"{path}: {role} stored as {t.precision.value}, manifest says {precision.value}"
        )
    return t


def manifest_kind(path) -> str:
    """Peek at a manifest's kind ('mha' or 'bda') without loading tensors."""
    path = Path(path)
    fields, _ = _parse_manifest(path)
    kind = fields.get("kind", "")
    if kind not in ("mha", "bda"):
        raise ManifestError(f"{path}: unknown manifest kind {kind!r}")
    return kind


def save_mha_manifest(path, w: MHAWeights) -> None:
    path = Path(path)
    stem = path.stem
    fields = {
        "kind": "mha",
        "precision": w.precision.value,
        "d": str(w.d),
        "d_h": str(w.d_h),
        "n_heads": str(w.n_heads),
    }
    tensors = {role: f"{stem}.{role}.bdt" for role in MHA_ROLES}
    for role in MHA_ROLES:
        save_tensor(path.parent / tensors[role], getattr(w, role))
    path.write_text(_format_manifest(fields, tensors), encoding="utf-8")


def load_mha_manifest(path) -> MHAWeights:
    path = Path(path)
    fields, tensors = _parse_manifest(path)
    if fields.get("kind") != "mha":
        raise ManifestError(f"{path}: expected an mha manifest, got kind={fields.get('kind')!r}")
    d, d_h, n_heads = _geometry(fields, path)
    precision = Precision.parse(fields.get("precision", "p64"))
    loaded = {
        role: _load_role(tensors, role, path.parent, path, precision) for role in MHA_ROLES
    }
    try:
        return MHAWeights(d=d, n_heads=n_heads, d_h=d_h, **loaded)
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def save_bda_manifest(path, w: BDAWeights) -> None:
    path = Path(path)
    stem = path.stem
    fields = {
        "kind": "bda",
        "precision": w.precision.value,
        "d": str(w.d),
        "d_h": str(w.d_h),
        "n_heads": str(w.n_heads),
        "qk_tag": w.qk_tag.value,
        "vo_tag": w.vo_tag.value,
        "qk_residual_first": repr(w.qk_candidate_residuals[0]),
        "qk_residual_last": repr(w.qk_candidate_residuals[1]),
        "vo_residual_first": repr(w.vo_candidate_residuals[0]),
        "vo_residual_last": repr(w.vo_candidate_residuals[1]),
        "qk_deficient_heads": ",".join(map(str, w.qk_deficient_heads)),
        "vo_deficient_heads": ",".join(map(str, w.vo_deficient_heads)),
    }
    tensors = {role: f"{stem}.{role}.bdt" for role in BDA_ROLES}
    for role in BDA_ROLES:
        save_tensor(path.parent / tensors[role], getattr(w, role))
    path.write_text(_format_manifest(fields, tensors), encoding="utf-8")


def _parse_heads(value: str, path: Path) -> tuple[int, ...]:
    if not value:
        return ()
    try:
        return tuple(int(part) for part in value.split(","))
    except ValueError as exc:
        raise ManifestError(f"{path}: bad head list {value!r}") from exc


def load_bda_manifest(path) -> BDAWeights:
    path = Path(path)
    fields, tensors = _parse_manifest(path)
    if fields.get("kind") != "bda":
        raise ManifestError(f"{path}: expected a bda manifest, got kind={fields.get('kind')!r}")
    d, d_h, n_heads = _geometry(fields, path)
    precision = Precision.parse(fields.get("precision", "p64"))
    loaded = {
        role: _load_role(tensors, role, path.parent, path, precision) for role in BDA_ROLES
    }
    try:
        qk_tag = Tag(fields["qk_tag"])
        vo_tag = Tag(fields["vo_tag"])
        qk_res = (float(fields["qk_residual_first"]), float(fields["qk_residual_last"]))
        vo_res = (float(fields["vo_residual_first"]), float(fields["vo_residual_last"]))
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{path}: bad or missing tag/residual fields") from exc
    try:
        return BDAWeights(
            d=d,
            n_heads=n_heads,
            d_h=d_h,
            qk_tag=qk_tag,
            vo_tag=vo_tag,
            qk_candidate_residuals=qk_res,
            vo_candidate_residuals=vo_res,
            qk_deficient_heads=_parse_heads(fields.get("qk_deficient_heads", ""), path),
            vo_deficient_heads=_parse_heads(fields.get("vo_deficient_heads", ""), path),
            **loaded,
        )
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
