"""Synthetic latent-event corpus generator.

Each category owns a prototype vector per modality. A segment's feature is
the background vector plus the prototypes of its active events plus Gaussian
noise. Events are audio-visual, audio-only or visual-only; instances active
in only one modality use a slightly drifted prototype in that modality, so
they stay above the migration similarity thresholds while remaining
distinguishable from fully audio-visual instances. Text features are the
clean prototypes.

Generation is a pure, deterministic function of the spec.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .io import write_tensor

# Drift of uni-modal prototype variants, as a multiple of the noise level.
# Audio variants sit close to the shared prototype (audio features are the
# more discriminative ones); visual variants sit further out but still above
# the visual migration threshold.
DRIFT_AUDIO = 2.0
DRIFT_VISUAL = 8.0

# Share of uni-modal events that are audio-only; the rest are visual-only.
# Visual-heavy: silent visible objects are more common than unseen sounds.
AUDIO_ONLY_SHARE = 1.0 / 3.0

TEXT_TEMPLATES = {
    "visual": "A photo of <event>",
    "audio": "This is the sound of <event>",
}


@dataclass
class SyntheticSpec:
    seed: int = 0
    num_train: int = 200
    num_test: int = 50
    segments: int = 10
    num_classes: int = 5
    dim_audio: int = 16
    dim_visual: int = 16
    proto_scale: float = 3.0
    noise: float = 0.1
    occurrence: float = 0.45
    dur_min: int = 2
    dur_max: int = 4
    asymmetry: float = 0.3
    orthogonal: bool = True
    background_logit: float = -1.75

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        if self.orthogonal and self.num_classes > min(self.dim_audio, self.dim_visual):
            raise ConfigError(
                f"orthogonal prototypes need num_classes <= feature dim, "
                f"got C={self.num_classes}, dims=({self.dim_audio}, {self.dim_visual})"
            )
        if not 0 < self.dur_min <= self.dur_max <= self.segments:
            raise ConfigError(
                f"duration range [{self.dur_min}, {self.dur_max}] invalid for {self.segments} segments"
            )
        if not 0.0 <= self.asymmetry <= 1.0:
            raise ConfigError(f"asymmetry rate must lie in [0, 1], got {self.asymmetry}")


@dataclass
class SyntheticVideo:
    video_id: str
    audio: np.ndarray
    visual: np.ndarray
    gt_audio: np.ndarray
    gt_visual: np.ndarray
    label: np.ndarray


@dataclass
class SyntheticWorld:
    spec: SyntheticSpec
    protos_audio: np.ndarray   # (C, D_a)
    protos_visual: np.ndarray  # (C, D_v)
    bg_audio: np.ndarray
    bg_visual: np.ndarray
    drift_audio: np.ndarray    # (C, D_a) prototype offsets for audio-only instances
    drift_visual: np.ndarray


def _prototypes(rng: np.random.Generator, c: int, dim: int, scale: float, orthogonal: bool) -> np.ndarray:
    raw = rng.normal(size=(dim, c))
    if orthogonal:
        q, _ = np.linalg.qr(raw)
        return q[:, :c].T * scale
    unit = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    return unit * scale


def build_world(spec: SyntheticSpec) -> SyntheticWorld:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    pa = _prototypes(rng, spec.num_classes, spec.dim_audio, spec.proto_scale, spec.orthogonal)
    pv = _prototypes(rng, spec.num_classes, spec.dim_visual, spec.proto_scale, spec.orthogonal)
    # background inner product with every prototype equals background_logit,
    # so categories absent from a segment get a fixed negative text logit
    scale2 = spec.proto_scale**2
    bg_a = (spec.background_logit / scale2) * pa.sum(axis=0)
    bg_v = (spec.background_logit / scale2) * pv.sum(axis=0)

    def drifts(protos: np.ndarray, dim: int, mult: float) -> np.ndarray:
        d = rng.normal(size=(spec.num_classes, dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * (mult * spec.noise)

    da = drifts(pa, spec.dim_audio, DRIFT_AUDIO)
    dv = drifts(pv, spec.dim_visual, DRIFT_VISUAL)
    return SyntheticWorld(spec, pa, pv, bg_a, bg_v, da, dv)


def _sample_video(world: SyntheticWorld, rng: np.random.Generator, video_id: str) -> SyntheticVideo:
    spec = world.spec
    t, c = spec.segments, spec.num_classes
    gt_a = np.zeros((t, c))
    gt_v = np.zeros((t, c))
    kinds = np.full(c, "none", dtype=object)
    for cat in range(c):
        if rng.random() >= spec.occurrence:
            continue
        dur = int(rng.integers(spec.dur_min, spec.dur_max + 1))
        start = int(rng.integers(0, t - dur + 1))
        u = rng.random()
        if u < spec.asymmetry * AUDIO_ONLY_SHARE:
            kind = "audio"
        elif u < spec.asymmetry:
            kind = "visual"
        else:
            kind = "av"
        kinds[cat] = kind
        if kind in ("audio", "av"):
            gt_a[start : start + dur, cat] = 1.0
        if kind in ("visual", "av"):
            gt_v[start : start + dur, cat] = 1.0

    audio = np.tile(world.bg_audio, (t, 1))
    visual = np.tile(world.bg_visual, (t, 1))
    for cat in range(c):
        proto_a = world.protos_audio[cat]
        proto_v = world.protos_visual[cat]
        if kinds[cat] == "audio":
            proto_a = proto_a + world.drift_audio[cat]
        if kinds[cat] == "visual":
            proto_v = proto_v + world.drift_visual[cat]
        audio += gt_a[:, [cat]] * proto_a
        visual += gt_v[:, [cat]] * proto_v
    audio += rng.normal(0.0, spec.noise, size=audio.shape) if spec.noise > 0 else 0.0
    visual += rng.normal(0.0, spec.noise, size=visual.shape) if spec.noise > 0 else 0.0

    label = np.maximum(gt_a.max(axis=0), gt_v.max(axis=0))
    return SyntheticVideo(video_id, audio, visual, gt_a, gt_v, label)


def generate_videos(world: SyntheticWorld, count: int, prefix: str, stream_seed: int) -> list[SyntheticVideo]:
    rng = np.random.default_rng(stream_seed)
    return [_sample_video(world, rng, f"{prefix}_{i:04d}") for i in range(count)]


def synthesize_corpus(spec: SyntheticSpec, out_dir: str | Path) -> tuple[Path, Path]:
    """Materialize train and test manifests plus tensor files under out_dir."""
    out = Path(out_dir)
    world = build_world(spec)
    train = generate_videos(world, spec.num_train, "train", spec.seed + 1)
    test = generate_videos(world, spec.num_test, "test", spec.seed + 2)

    (out / "feats").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    (out / "text").mkdir(exist_ok=True)
    write_tensor(out / "text" / "audio.eart", world.protos_audio)
    write_tensor(out / "text" / "visual.eart", world.protos_visual)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")

    categories = [f"event_{i:02d}" for i in range(spec.num_classes)]
    paths = []
    for split, videos in (("train", train), ("test", test)):
        entries = []
        for v in videos:
            write_tensor(out / "feats" / f"{v.video_id}_a.eart", v.audio)
            write_tensor(out / "feats" / f"{v.video_id}_v.eart", v.visual)
            write_tensor(out / "gt" / f"{v.video_id}_a.eart", v.gt_audio)
            write_tensor(out / "gt" / f"{v.video_id}_v.eart", v.gt_visual)
            entries.append(
                {
                    "id": v.video_id,
                    "segments": spec.segments,
                    "audio": f"feats/{v.video_id}_a.eart",
                    "visual": f"feats/{v.video_id}_v.eart",
                    "label": v.label.astype(int).tolist(),
                    "gt_audio": f"gt/{v.video_id}_a.eart",
                    "gt_visual": f"gt/{v.video_id}_v.eart",
                }
            )
        manifest = {
            "schema": 1,
            "categories": categories,
            "feature_dims": {"audio": spec.dim_audio, "visual": spec.dim_visual},
            "text_features": {"audio": "text/audio.eart", "visual": "text/visual.eart"},
            "text_templates": TEXT_TEMPLATES,
            "videos": entries,
        }
        path = out / f"{split}.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        paths.append(path)
    return paths[0], paths[1]
