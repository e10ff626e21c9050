"""JSON scene configuration: schema, defaults and conversion to library objects.

Example::

    {
      "mesh": {"icosphere": 2},
      "cameras": [{"azimuth": 0}, {"azimuth": 90}],
      "render": {"s": 25, "o": 25},
      "seed": 7
    }

Cameras are either explicit ``{"eye", "look_at", "up", ...}`` or orbiting
``{"azimuth", "elevation", "distance", ...}`` around the origin. Angles
in the config are in degrees. Unknown keys are rejected at every level.
"""

import copy
import json

import jsonschema
import numpy as np

from .camera import Camera, orbit_camera
from .losses import LossWeights
from .mesh import SymmetrySpec, ShapeParams, icosphere, load_obj
from .optim import AdamConfig
from .renderer import Lighting, RenderParams


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}
_OPT_POS = {"anyOf": [_POS, {"type": "null"}]}
_INT_POS = {"type": "integer", "minimum": 1}

_CAMERA_COMMON = {
    "fov_y_deg": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
    "width": _INT_POS,
    "height": _INT_POS,
    "near": _POS,
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mesh": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["icosphere"],
                    "properties": {"icosphere": {"type": "integer", "minimum": 0, "maximum": 6}},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["path"],
                    "properties": {"path": {"type": "string"}},
                },
            ]
        },
        "cameras": {
            "type": "array",
            "minItems": 1,
            "items": {
                "oneOf": [
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["eye"],
                        "properties": {"eye": _VEC3, "look_at": _VEC3, "up": _VEC3, **_CAMERA_COMMON},
                    },
                    {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["azimuth"],
                        "properties": {
                            "azimuth": _NUM,
                            "elevation": _NUM,
                            "distance": _POS,
                            "target": _VEC3,
                            **_CAMERA_COMMON,
                        },
                    },
                ]
            },
        },
        "render": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "s": _POS,
                "o": _POS,
                "light_dir": _VEC3,
                "k_ambient": _UNIT,
                "k_diffuse": _UNIT,
                "k_specular": _UNIT,
                "shininess": _POS,
                "background_intensity": _UNIT,
                "background_depth": _OPT_POS,
                "eps": _POS,
                "cull_log_ratio": _OPT_POS,
                "orientation_invariant": {"type": "boolean"},
                "double_sided": {"type": "boolean"},
                "clamp_sharpness": _POS,
                "extrapolation_margin": _OPT_POS,
                "visibility_decay": _OPT_POS,
            },
        },
        "losses": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "number", "minimum": 0} for k in ("image", "normal", "edge", "laplacian")},
        },
        "adam": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": _POS,
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps_hat": {"type": "number", "minimum": 0},
                "max_iterations": {"type": "integer", "minimum": 0},
                "log_every": {"type": "integer", "minimum": 0},
                "snapshot_every": {"type": "integer", "minimum": 0},
            },
        },
        "shape": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"symmetry": {"type": "boolean"}, "max_offset": _POS},
        },
        "gradcheck": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"probes": _INT_POS, "step": _POS, "threshold": {"type": "number", "minimum": 0}},
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "output_dir": {"type": "string"},
    },
}

_LIGHT = Lighting()
DEFAULTS = {
    "mesh": {"icosphere": 2},
    "cameras": [{"azimuth": a} for a in (0.0, 90.0, 180.0, 270.0)],
    "render": {
        "s": 25.0,
        "o": 25.0,
        "light_dir": list(_LIGHT.light_dir),
        "k_ambient": _LIGHT.k_ambient,
        "k_diffuse": _LIGHT.k_diffuse,
        "k_specular": _LIGHT.k_specular,
        "shininess": _LIGHT.shininess,
        "background_intensity": 1.0,
        "background_depth": None,
        "eps": 1e-12,
        "cull_log_ratio": 37.0,
        "orientation_invariant": True,
        "double_sided": True,
        "clamp_sharpness": 32.0,
        "extrapolation_margin": 30.0,
        "visibility_decay": None,
    },
    "losses": {"image": 1.0, "normal": 0.03, "edge": 0.01, "laplacian": 0.003},
    "adam": {
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps_hat": 1e-8,
        "max_iterations": 2000,
        "log_every": 100,
        "snapshot_every": 500,
    },
    "shape": {"symmetry": False, "max_offset": 1.0},
    "gradcheck": {"probes": 8, "step": 1e-5, "threshold": 1e-3},
    "seed": 0,
    "output_dir": "runs",
}

_CAMERA_DEFAULTS = {"fov_y_deg": 45.0, "width": 64, "height": 64, "near": 0.1}
_EXPLICIT_DEFAULTS = {"look_at": [0.0, 0.0, 0.0], "up": [0.0, 1.0, 0.0]}
_ORBIT_DEFAULTS = {"elevation": 20.0, "distance": 3.5, "target": [0.0, 0.0, 0.0]}


def validate(raw):
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None


def resolve(raw):
    """Validate ``raw`` and return the effective config with every default filled in."""
    validate(raw)
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if isinstance(cfg.get(key), dict) and key != "mesh":
            cfg[key].update(value)
        else:
            cfg[key] = copy.deepcopy(value)
    cams = []
    for cam in cfg["cameras"]:
        extra = _ORBIT_DEFAULTS if "azimuth" in cam else _EXPLICIT_DEFAULTS
        cams.append({**_CAMERA_DEFAULTS, **extra, **cam})
    cfg["cameras"] = cams
    return cfg


def load(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve(raw)


def dump(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# conversion


def build_cameras(cfg):
    out = []
    for cam in cfg["cameras"]:
        common = dict(fov_y=np.radians(cam["fov_y_deg"]), width=cam["width"], height=cam["height"], near=cam["near"])
        try:
            if "azimuth" in cam:
                out.append(orbit_camera(cam["azimuth"], cam["elevation"], cam["distance"], tuple(cam["target"]), **common))
            else:
                out.append(Camera(tuple(cam["eye"]), tuple(cam["look_at"]), tuple(cam["up"]), **common))
        except ValueError as exc:
            raise ConfigError(f"camera {len(out)}: {exc}") from None
    return out


def build_render_params(cfg):
    r = cfg["render"]
    norm = np.linalg.norm(r["light_dir"])
    if not norm > 0:
        raise ConfigError("render: light_dir must be a nonzero vector")
    try:
        light = Lighting(
            tuple(np.asarray(r["light_dir"], dtype=float) / norm),
            r["k_ambient"],
            r["k_diffuse"],
            r["k_specular"],
            r["shininess"],
        )
        keys = [k for k in r if k not in ("light_dir", "k_ambient", "k_diffuse", "k_specular", "shininess")]
        return RenderParams(lighting=light, **{k: r[k] for k in keys})
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"render: {exc}") from None


def build_loss_weights(cfg):
    return LossWeights(**cfg["losses"])


def build_adam(cfg):
    return AdamConfig(**cfg["adam"])


def build_mesh(cfg):
    """Base mesh; OBJ read errors propagate as OSError / ObjFormatError."""
    spec = cfg["mesh"]
    if "icosphere" in spec:
        return icosphere(spec["icosphere"])
    return load_obj(spec["path"])


def build_init(cfg, base):
    shape = cfg["shape"]
    symmetry = SymmetrySpec.build(base) if shape["symmetry"] else None
    return ShapeParams.zeros(base, symmetry, shape["max_offset"])
