"""TOML configuration loading for scenes and experiments."""

from __future__ import annotations

import math
import sys
from importlib import resources

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .room import ArrayLayout, MicNode, Roi, RoomSpec, Scene


def default_scene_path():
    return resources.files("confloc").joinpath("data/default_scene.toml")


def _read_toml(path):
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def scene_from_dict(raw: dict, t60=None, snr_db=None, seed=None) -> Scene:
    """Build a Scene from parsed config data, with optional overrides."""
    try:
        room_raw = raw["room"]
        room = RoomSpec(
            dimensions=room_raw["dimensions"],
            t60=float(t60 if t60 is not None else room_raw["t60"]),
            sample_rate=float(room_raw.get("sample_rate", 16000.0)),
            speed_of_sound=float(room_raw.get("speed_of_sound", 343.0)),
        )
        nodes = [MicNode(n["mic1"], n["mic2"]) for n in raw["nodes"]]
        roi = Roi(tuple(raw["roi"]["x"]), tuple(raw["roi"]["y"]))
        sim = raw.get("simulation", {})
        return Scene(
            room=room,
            array=ArrayLayout(nodes),
            source_pos=np.asarray(raw["source"]["position"], dtype=float),
            roi=roi,
            snr_db=float(snr_db if snr_db is not None else sim.get("snr_db", math.inf)),
            seed=int(seed if seed is not None else sim.get("seed", 0)),
            source_height=float(raw["source"].get("height", 1.5)),
        )
    except KeyError as exc:
        raise ConfigError(f"scene config is missing key {exc}") from exc


def load_scene(path=None, t60=None, snr_db=None, seed=None) -> Scene:
    """Scene from a TOML file; path=None loads the packaged default."""
    if path is None:
        with resources.as_file(default_scene_path()) as p:
            raw = _read_toml(p)
    else:
        raw = _read_toml(path)
    return scene_from_dict(raw, t60=t60, snr_db=snr_db, seed=seed)


def load_experiment(path, scene_path=None):
    """ExperimentConfig from a TOML file (single [experiment] table).

    The scene template comes from scene_path, the experiment file's
    scene_config key, or the packaged default, in that order.
    """
    from .harness import ExperimentConfig

    raw = _read_toml(path)
    exp = raw.get("experiment", raw)
    scene_ref = scene_path or exp.get("scene_config")
    scene = load_scene(scene_ref)
    known = {
        "t60_list",
        "snr_list",
        "delta_list",
        "methods",
        "repeats",
        "seed",
        "gamma",
        "grid",
        "n_unlabeled",
        "n_test",
        "sigma_p2",
        "signal_duration_s",
        "labeled_signal",
        "test_signal",
        "workers",
        "fft_size",
        "overlap",
        "f_low",
        "f_high",
    }
    unknown = set(exp) - known - {"scene_config"}
    if unknown:
        raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
    kwargs = {k: exp[k] for k in known & set(exp)}
    if "grid" in kwargs:
        kwargs["grid"] = tuple(kwargs["grid"])
    return ExperimentConfig(scene=scene, **kwargs)
