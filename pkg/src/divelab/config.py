"""Run configuration: nested sections, strict key checking and a stable hash."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ArgumentError, ConfigError

THREADS_ENV = "DIVELAB_THREADS"

DEFAULTS = {
    "world": {
        "categories": ["face", "place", "body", "word", "food"],
        "families": ["blobs", "grid", "stripes", "glyphs", "patches"],
        "size": 24,
        "n_images": 2000,
        "pixel_noise": 0.02,
    },
    "features": {"n_components": 64, "shrinkage": 1.0},
    "subject": {
        "region_size": 100,
        "n_nonselective": 100,
        "kappa": 50.0,
        "amplitude": [3.0, 5.0],
        "nonselective_amplitude": 0.5,
        "bias_sd": 1.0,
        "subclusters": {"food": 2},
        "subcluster_angle": 60.0,
        "subcluster_axis": "saturation",
        "noise_ratio": 1.0,
        "session_offset_sd": 0.1,
        "sessions": 4,
        "repeats": 3,
        "heldout_fraction": 0.1,
        "t_threshold": 5.0,
    },
    "encoder": {
        "lr_init": 3e-4,
        "lr_end": 1.5e-4,
        "epochs": 100,
        "weight_decay": 2e-2,
        "batch_size": 4,
        "augment": {"scale_range": [0.95, 1.05], "max_offset": None, "noise_sd": 0.05,
                    "enabled": True},
    },
    "autoencoder": {"mode": "affine", "latent_channels": 4, "width": 32, "steps": 1500,
                    "batch_size": 32, "lr": 2e-3, "threshold": 0.01},
    "diffusion": {
        "schedule": "linear-beta",
        "T": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "steps": 3000,
        "batch_size": 64,
        "lr": 2e-3,
        "lr_final": 2e-4,
        "width": 16,
        "hidden": [128, 128, 128],
        "emb_dim": 32,
        "ema": 0.995,
        "grad_clip": 1.0,
    },
    "guidance": {"gamma": None, "steps": 50, "eta": 1.0, "trace_every": 4,
                 "calibration_target": 0.15, "n_samples": 100, "snapshot_chains": 4},
    "clustering": {"regions": ["food"], "k": 2, "n_restarts": 10, "max_iters": 100,
                   "silhouette_ks": [2, 3, 4, 5]},
    "evaluation": {"exemplars_per_category": 9, "prototype_mode": "all",
                   "recorded_tiers": [0.01, 0.02], "generated_tiers": [0.1, 0.2],
                   "bootstrap": 1000, "rank_top_k": 100},
}

GLOBAL_KEYS = ("seed", "threads", "out")


def _merge(base, override, path):
    out = copy.deepcopy(base)
    for key, value in override.items():
        kp = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key {kp!r}", kp)
        # free-form maps (e.g. sub-cluster counts) are replaced wholesale
        if isinstance(base[key], dict) and isinstance(value, dict) and key != "subclusters":
            out[key] = _merge(base[key], value, kp)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    seed: int = 0
    threads: int | None = None
    out: str = "run"

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        glob = {k: data.pop(k) for k in GLOBAL_KEYS if k in data}
        cfg = cls(_merge(DEFAULTS, data, ""), **glob)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found", "--config") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}", "--config") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object", "")
        return cls.from_dict(data)

    def __getitem__(self, section):
        return self.sections[section]

    def override(self, dotted, value):
        """Set ``section.key`` (e.g. ``guidance.gamma``) and re-validate."""
        section, _, key = dotted.partition(".")
        if section not in self.sections or key not in self.sections[section]:
            raise ConfigError(f"unknown configuration key {dotted!r}", dotted)
        self.sections[section][key] = value
        self.validate()

    def to_dict(self):
        d = copy.deepcopy(self.sections)
        d["seed"] = self.seed
        return d

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.blake2b(blob, digest_size=16).hexdigest()

    def resolved_threads(self):
        if self.threads is not None:
            return int(self.threads)
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                return max(1, int(env))
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer", THREADS_ENV) from None
        return 1

    # ------------------------------------------------------------ builders

    def world_config(self):
        from .world import WorldConfig
        w = self["world"]
        return WorldConfig(tuple(w["categories"]), tuple(w["families"]), int(w["size"]),
                           int(w["n_images"]), float(w["pixel_noise"]))

    def subject_config(self):
        from .subject import SubjectConfig
        s = {k: v for k, v in self["subject"].items()
             if k not in ("sessions", "repeats", "heldout_fraction", "t_threshold")}
        s["amplitude"] = tuple(s["amplitude"])
        return SubjectConfig(**s)

    def fit_config(self):
        from .encoder import AugmentConfig, FitConfig
        e = dict(self["encoder"])
        aug = dict(e.pop("augment"))
        aug["scale_range"] = tuple(aug["scale_range"])
        return FitConfig(**e, augment=AugmentConfig(**aug), seed=self.seed)

    def autoencoder_config(self):
        from .autoencoder import AutoencoderConfig
        return AutoencoderConfig(**self["autoencoder"])

    def schedule(self):
        from .diffusion import build_schedule
        d = self["diffusion"]
        return build_schedule(int(d["T"]), d["schedule"], d["beta_start"], d["beta_end"])

    def denoiser_config(self):
        from .diffusion import DenoiserConfig
        d = {k: v for k, v in self["diffusion"].items()
             if k not in ("schedule", "T", "beta_start", "beta_end")}
        d["hidden"] = tuple(d["hidden"])
        return DenoiserConfig(**d)

    def guidance_config(self):
        from .guidance import GuidanceConfig
        g = self["guidance"]
        return GuidanceConfig(g["gamma"], int(g["steps"]), float(g["eta"]), int(g["trace_every"]),
                              float(g["calibration_target"]))

    # ------------------------------------------------------------ validation

    def validate(self):
        """Check every section against its module's preconditions before any work."""
        from .world import validate_world_config
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
        if self.threads is not None and (not isinstance(self.threads, int) or self.threads < 1):
            raise ConfigError("threads must be a positive integer", "threads")
        validate_world_config(self.world_config())
        f = self["features"]
        if not 1 <= int(f["n_components"]) <= 105:
            raise ConfigError("n_components must lie in [1, 105]", "features.n_components")
        if f["shrinkage"] < 0:
            raise ConfigError("shrinkage must be non-negative", "features.shrinkage")
        sub = self["subject"]
        self.subject_config().validate()
        for key in ("sessions", "repeats"):
            if int(sub[key]) < 1:
                raise ConfigError(f"{key} must be >= 1", f"subject.{key}")
        if not 0 < sub["heldout_fraction"] < 1:
            raise ConfigError("heldout_fraction must lie in (0, 1)", "subject.heldout_fraction")
        cats = list(self["world"]["categories"])
        for name in sub["subclusters"]:
            if name not in cats:
                raise ConfigError(f"unknown category {name!r}", f"subject.subclusters.{name}")
        checks = (("encoder", self.fit_config), ("autoencoder", self.autoencoder_config),
                  ("diffusion", self.schedule), ("diffusion", self.denoiser_config),
                  ("guidance", self.guidance_config))
        for section, build in checks:
            try:
                build()
            except ConfigError:
                raise
            except (ArgumentError, TypeError, ValueError) as err:
                raise ConfigError(str(err), section) from None
        if self["autoencoder"]["mode"] not in ("identity", "affine", "learned"):
            raise ConfigError("mode must be 'identity', 'affine' or 'learned'", "autoencoder.mode")
        g = self["guidance"]
        if int(g["n_samples"]) < 2:
            raise ConfigError("n_samples must be >= 2", "guidance.n_samples")
        if int(g["steps"]) > int(self["diffusion"]["T"]):
            raise ConfigError("more sampling steps than schedule steps", "guidance.steps")
        c = self["clustering"]
        for name in c["regions"]:
            if name not in cats:
                raise ConfigError(f"unknown category {name!r}", "clustering.regions")
        if int(c["k"]) < 2:
            raise ConfigError("k must be >= 2", "clustering.k")
        ev = self["evaluation"]
        if int(ev["exemplars_per_category"]) < 1:
            raise ConfigError("need at least one exemplar", "evaluation.exemplars_per_category")
        for key in ("recorded_tiers", "generated_tiers"):
            tiers = ev[key]
            if len(tiers) != 2 or not all(0 < float(t) <= 1 for t in tiers):
                raise ConfigError("tiers are two fractions in (0, 1]", f"evaluation.{key}")
