"""Density and monochromatic radiance networks with appearance embedding.

The density MLP maps hash features to a non-negative density (softplus with
a negative initial bias so scenes start mostly transparent) plus a geometry
embedding.  The radiance MLP maps that embedding, the SH-encoded view
direction and a per-training-image appearance vector to one radiance value
in (0, 1) via a sigmoid — the model predicts tone-mapped radiance directly.
Density never sees the view direction or the appearance vector.

Checkpoint container format (all integers little-endian):

    magic   4 bytes  b"SRCK"
    version u32      1
    meta    u32 length + UTF-8 JSON blob
    count   u32      number of array sections
    section repeated:
        name   u16 length + UTF-8 bytes
        dtype  u8   0=float64 1=float32 2=int64
        ndim   u8
        dims   ndim * u64
        data   raw little-endian array bytes

Round-trips byte-exactly for identical inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoders import HashGridConfig, hash_encode, init_tables


@dataclass
class FieldConfig:
    grid: HashGridConfig = dc_field(default_factory=HashGridConfig)
    sh_degree: int = 4
    geo_features: int = 15
    appearance_dim: int = 8
    hidden: int = 64
    hidden_layers: int = 2
    density_bias: float = -3.0

    @property
    def sh_dim(self) -> int:
        return self.sh_degree ** 2


@dataclass
class FieldParams:
    cfg: FieldConfig
    tables: Tensor
    density_layers: list          # [(w, b), ...]
    radiance_layers: list
    appearance: Tensor            # (n_images, appearance_dim)

    def named_parameters(self) -> dict:
        out = {"hash_tables": self.tables}
        for i, (w, b) in enumerate(self.density_layers):
            out[f"density.w{i}"] = w
            out[f"density.b{i}"] = b
        for i, (w, b) in enumerate(self.radiance_layers):
            out[f"radiance.w{i}"] = w
            out[f"radiance.b{i}"] = b
        out["appearance"] = self.appearance
        return out

    @property
    def n_images(self) -> int:
        return self.appearance.data.shape[0]


def _xavier(rng, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def _mlp(rng, sizes, dtype):
    layers = []
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        w = Tensor(_xavier(rng, fi, fo, dtype), requires_grad=True)
        b = Tensor(np.zeros(fo, dtype=dtype), requires_grad=True)
        layers.append((w, b))
    return layers


def create_field(cfg: FieldConfig, n_images: int, rng: np.random.Generator,
                 dtype=np.float64) -> FieldParams:
    tables = init_tables(cfg.grid, rng, dtype)
    d_sizes = [cfg.grid.out_dim] + [cfg.hidden] * cfg.hidden_layers + [1 + cfg.geo_features]
    r_in = cfg.geo_features + cfg.sh_dim + cfg.appearance_dim
    r_sizes = [r_in] + [cfg.hidden] * cfg.hidden_layers + [1]
    density_layers = _mlp(rng, d_sizes, dtype)
    radiance_layers = _mlp(rng, r_sizes, dtype)
    appearance = Tensor(np.zeros((n_images, cfg.appearance_dim), dtype=dtype),
                        requires_grad=True)
    return FieldParams(cfg=cfg, tables=tables, density_layers=density_layers,
                       radiance_layers=radiance_layers, appearance=appearance)


def _mlp_forward(layers, x: Tensor) -> Tensor:
    for w, b in layers[:-1]:
        x = dc.tanh(dc.affine(x, w, b))
    w, b = layers[-1]
    return dc.affine(x, w, b)


def density_geometry(params: FieldParams, feats: Tensor) -> tuple[Tensor, Tensor]:
    """Hash features (n, L*F) -> (sigma (n, 1) >= 0, geometry embedding (n, G))."""
    out = _mlp_forward(params.density_layers, feats)
    sigma = dc.softplus(dc.slice_axis(out, 1, 0, 1) + params.cfg.density_bias)
    geo = dc.slice_axis(out, 1, 1, 1 + params.cfg.geo_features)
    return sigma, geo


def radiance(params: FieldParams, geo: Tensor, sh: Tensor, app: Tensor) -> Tensor:
    """Monochromatic radiance in (0, 1), shape (n, 1)."""
    x = dc.concat([geo, sh, app], axis=1)
    return dc.sigmoid(_mlp_forward(params.radiance_layers, x))


def make_field_eval(params: FieldParams, level_weights: np.ndarray,
                    sh_per_ray: Tensor | None = None,
                    app_index_per_ray: np.ndarray | None = None):
    """Bind a field evaluation callable for the renderer.

    The callable maps object-frame positions (n, 3) plus the ray index of
    each sample to (sigma, radiance); radiance needs the per-ray SH encoding
    and appearance indices bound here.
    """
    def field_eval(x_obj: Tensor, sample_ray_idx: np.ndarray, need_radiance: bool):
        feats = hash_encode(x_obj + 0.5, params.cfg.grid, params.tables, level_weights)
        sigma, geo = density_geometry(params, feats)
        if not need_radiance:
            return sigma, None
        sh_s = dc.gather(sh_per_ray, sample_ray_idx)
        app_rows = app_index_per_ray[sample_ray_idx]
        app_s = dc.gather(params.appearance, app_rows)
        return sigma, radiance(params, geo, sh_s, app_s)

    return field_eval


# ---------------------------------------------------------------------------
# checkpoint I/O

_MAGIC = b"SRCK"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, meta: dict, arrays: dict):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise ValueError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(mlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            dtype = _CODE_DTYPES[code]
            data = np.frombuffer(fh.read(int(np.prod(shape)) * dtype.itemsize),
                                 dtype=dtype.newbyteorder("<")).astype(dtype)
            arrays[name] = data.reshape(shape)
        return meta, arrays


def field_to_arrays(params: FieldParams) -> dict:
    return {name: t.data for name, t in params.named_parameters().items()}


def field_meta(params: FieldParams) -> dict:
    cfg = params.cfg
    return {
        "grid": {
            "levels": cfg.grid.levels,
            "min_resolution": cfg.grid.min_resolution,
            "growth": cfg.grid.growth,
            "table_size": cfg.grid.table_size,
            "features_per_level": cfg.grid.features_per_level,
            "always_on_levels": cfg.grid.always_on_levels,
        },
        "sh_degree": cfg.sh_degree,
        "geo_features": cfg.geo_features,
        "appearance_dim": cfg.appearance_dim,
        "hidden": cfg.hidden,
        "hidden_layers": cfg.hidden_layers,
        "density_bias": cfg.density_bias,
        "n_images": params.n_images,
    }


def field_from_arrays(meta: dict, arrays: dict) -> FieldParams:
    g = meta["grid"]
    cfg = FieldConfig(
        grid=HashGridConfig(levels=g["levels"], min_resolution=g["min_resolution"],
                            growth=g["growth"], table_size=g["table_size"],
                            features_per_level=g["features_per_level"],
                            always_on_levels=g["always_on_levels"]),
        sh_degree=meta["sh_degree"], geo_features=meta["geo_features"],
        appearance_dim=meta["appearance_dim"], hidden=meta["hidden"],
        hidden_layers=meta["hidden_layers"], density_bias=meta["density_bias"])
    params = create_field(cfg, meta["n_images"], np.random.default_rng(0),
                          dtype=arrays["hash_tables"].dtype)
    for name, t in params.named_parameters().items():
        t.data = arrays[name].copy()
    return params
