"""Deterministic synthetic video: backgrounds, bouncing sprites, drift, pan, noise.

Frame ``t`` is built as follows, then clamped to [0, 1]:

1. background (constant level, or a horizontal ramp from ``level`` to
   ``level + gradient``);
2. the sprite pasted at its bounced position for frame ``t``;
3. the whole canvas rolled by ``t * pan`` pixels with wrap-around (pixels
   leaving one edge re-enter at the opposite edge);
4. ``t * drift`` added everywhere;
5. uniform noise in ``[-noise, noise]`` drawn from ``numpy.random.default_rng(seed)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Mapping

import numpy as np

from .errors import SceneError
from .tensor import DTYPE


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    frames: int = 40
    background: str = "gradient"
    level: float = 0.2
    gradient: float = 0.3
    sprite: str | None = "square"
    sprite_size: int = 6
    sprite_intensity: float = 0.9
    position: tuple[int, int] = (4, 3)
    velocity: tuple[float, float] = (0.0, 1.0)
    drift: float = 0.0
    pan: tuple[int, int] = (0, 0)
    noise: float = 0.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.frames < 1:
            raise SceneError("scene needs positive height, width and frame count")
        if self.background not in ("constant", "gradient"):
            raise SceneError(f"unknown background {self.background!r}")
        if self.sprite not in (None, "square", "bar"):
            raise SceneError(f"unknown sprite {self.sprite!r}")
        if self.sprite is not None:
            if self.sprite_size < 1 or self.sprite_size > self.width or (
                    self.sprite == "square" and self.sprite_size > self.height):
                raise SceneError(f"sprite of size {self.sprite_size} does not fit {self.height}x{self.width}")
        if self.noise < 0:
            raise SceneError("noise amplitude must be >= 0")
        object.__setattr__(self, "position", tuple(int(p) for p in self.position))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "pan", tuple(int(p) for p in self.pan))

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SceneSpec":
        return cls(**doc)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("position", "velocity", "pan"):
            out[key] = list(out[key])
        return out

    @property
    def shape(self) -> tuple[int, int, int]:
        return (1, self.height, self.width)


def _bounce(start: float, velocity: float, t: np.ndarray, span: int) -> np.ndarray:
    """Reflect a 1-D trajectory into [0, span]."""
    p = start + velocity * t
    if span == 0:
        return np.zeros_like(p)
    m = np.mod(p, 2 * span)
    return np.where(m <= span, m, 2 * span - m)


def sprite_track(spec: SceneSpec) -> np.ndarray:
    """Integer top-left sprite position per frame, shape (frames, 2)."""
    t = np.arange(spec.frames, dtype=np.float64)
    span_y = spec.height - (spec.sprite_size if spec.sprite == "square" else spec.height)
    span_x = spec.width - spec.sprite_size
    y = _bounce(spec.position[0], spec.velocity[0], t, span_y)
    x = _bounce(spec.position[1], spec.velocity[1], t, span_x)
    return np.stack([np.floor(y + 0.5), np.floor(x + 0.5)], axis=1).astype(int)


def reversal_frames(spec: SceneSpec) -> list[int]:
    """Frames at which the sprite's horizontal or vertical motion changes sign."""
    track = sprite_track(spec)
    step = np.diff(track, axis=0)
    out = []
    for axis in (0, 1):
        s = np.sign(step[:, axis])
        nonzero = np.flatnonzero(s)
        for prev, cur in zip(nonzero[:-1], nonzero[1:]):
            if s[prev] != s[cur]:
                out.append(int(cur) + 1)
    return sorted(set(out))


def _background(spec: SceneSpec) -> np.ndarray:
    if spec.background == "constant":
        return np.full((spec.height, spec.width), spec.level, dtype=np.float64)
    ramp = np.linspace(0.0, 1.0, spec.width) if spec.width > 1 else np.zeros(1)
    return np.broadcast_to(spec.level + spec.gradient * ramp, (spec.height, spec.width)).copy()


def scene_generate(spec: SceneSpec, seed: int = 0, clamp: bool = True) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    bg = _background(spec)
    track = sprite_track(spec)
    frames = []
    for t in range(spec.frames):
        canvas = bg.copy()
        if spec.sprite is not None:
            y, x = track[t]
            if spec.sprite == "square":
                canvas[y:y + spec.sprite_size, x:x + spec.sprite_size] = spec.sprite_intensity
            else:
                canvas[:, x:x + spec.sprite_size] = spec.sprite_intensity
        if spec.pan != (0, 0):
            canvas = np.roll(canvas, (t * spec.pan[0], t * spec.pan[1]), axis=(0, 1))
        canvas = canvas + spec.drift * t
        if spec.noise:
            canvas = canvas + rng.uniform(-spec.noise, spec.noise, canvas.shape)
        if clamp:
            canvas = np.clip(canvas, 0.0, 1.0)
        frames.append(canvas.astype(DTYPE)[None])
    return frames


PRESETS: dict[str, dict[str, Any]] = {
    "static": dict(velocity=(0.0, 0.0)),
    "moving_sprite": dict(velocity=(0.5, 1.0)),
    "drift_sprite": dict(velocity=(0.5, 1.0), background="constant", level=0.0, drift=0.02, noise=0.01),
    "pan": dict(sprite=None, pan=(0, 1)),
    "bar": dict(sprite="bar", sprite_size=3, velocity=(0.0, 2.0)),
}


def preset(name: str, frames: int = 40, size: int = 32, **overrides) -> SceneSpec:
    if name not in PRESETS:
        raise SceneError(f"unknown scene preset {name!r}; choose from {sorted(PRESETS)}")
    return SceneSpec(height=size, width=size, frames=frames, **{**PRESETS[name], **overrides})
