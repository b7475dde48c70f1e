"""Dataset I/O, augmentation, synthetic landmark motion and train/validation splits."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .landmarks import (
    FULL_POINTS,
    NOSE_FULL,
    NOSE_INDEX,
    LandmarkSequence,
)

CSV_HEADER = ["sequence_id", "frame_idx", "landmark_idx", "x", "y", "label"]


class DatasetError(ValueError):
    pass


# ----------------------------------------------------------------------------
# CSV


def parse_dataset(text: str) -> list[LandmarkSequence]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError("dataset file is empty") from None
    if [h.strip() for h in header] != CSV_HEADER:
        raise DatasetError(f"row 1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
    seqs: dict[str, dict] = {}
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise DatasetError(f"row {rowno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        sid = row[0].strip()
        try:
            frame = int(row[1])
            lm = int(row[2])
            x = float(row[3])
            y = float(row[4])
            label = int(row[5])
        except ValueError as exc:
            raise DatasetError(f"row {rowno}: malformed value ({exc})") from None
        if not 0 <= lm < FULL_POINTS:
            raise DatasetError(f"row {rowno}: landmark_idx {lm} outside [0, {FULL_POINTS})")
        if frame < 0:
            raise DatasetError(f"row {rowno}: negative frame_idx {frame}")
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DatasetError(f"row {rowno}: non-finite coordinate")
        if label < 0:
            raise DatasetError(f"row {rowno}: negative label {label}")
        entry = seqs.setdefault(sid, {"label": label, "frames": {}})
        if entry["label"] != label:
            raise DatasetError(
                f"row {rowno}: sequence {sid!r} has label {label}, earlier rows said {entry['label']}"
            )
        points = entry["frames"].setdefault(frame, {})
        if lm in points:
            raise DatasetError(f"row {rowno}: duplicate landmark {lm} in sequence {sid!r} frame {frame}")
        points[lm] = (x, y)

    out = []
    for sid, entry in seqs.items():
        frames = []
        for fidx in sorted(entry["frames"]):
            points = entry["frames"][fidx]
            missing = [i for i in range(FULL_POINTS) if i not in points]
            if missing:
                raise DatasetError(
                    f"sequence {sid!r} frame {fidx}: missing landmark(s) {missing[:5]}"
                    + ("..." if len(missing) > 5 else "")
                )
            frames.append([points[i] for i in range(FULL_POINTS)])
        out.append(LandmarkSequence(np.array(frames), entry["label"], sid))
    return out


def load_dataset(path) -> list[LandmarkSequence]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_dataset(fh.read())


def format_dataset(sequences) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for n, seq in enumerate(sequences):
        sid = seq.sequence_id or f"seq{n:05d}"
        for t, frame in enumerate(seq.frames):
            for i, (x, y) in enumerate(frame):
                buf.write(f"{sid},{t},{i},{x:.17g},{y:.17g},{seq.label}\n")
    return buf.getvalue()


def save_dataset(path, sequences):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_dataset(sequences))


# ----------------------------------------------------------------------------
# frame count


def tile_frames(sequence: LandmarkSequence, target: int) -> LandmarkSequence:
    """Repeat the frame list cyclically up to ``target`` frames; no-op if already long enough."""
    if target < 1:
        raise ValueError(f"target frame count must be >= 1, got {target}")
    T = sequence.num_frames
    if T >= target:
        return sequence
    idx = np.arange(target) % T
    return sequence.with_frames(sequence.frames[idx])


# ----------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    noise_sigmas: tuple[float, ...] = (0.5, 1.0, 1.5)
    rotation_max_degrees: float = 10.0
    flip_probability: float = 0.5
    target_frames: int | None = None
    seed: int = 0
    include_flipped_original: bool = True

    def __post_init__(self):
        self.noise_sigmas = tuple(float(s) for s in self.noise_sigmas)
        if any(s < 0 for s in self.noise_sigmas):
            raise ValueError("noise sigmas must be non-negative")
        if not 0 <= self.rotation_max_degrees <= 45:
            raise ValueError("rotation_max_degrees must lie in [0, 45]")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip_probability must lie in [0, 1]")

    @property
    def multiplicity(self) -> int:
        return 1 + int(self.include_flipped_original) + 4 * len(self.noise_sigmas)


def _nose_index(points: int) -> int:
    return NOSE_FULL if points == FULL_POINTS else NOSE_INDEX


def flip(frames: np.ndarray) -> np.ndarray:
    """Mirror each frame about the vertical line through its nose (x negation on centred data)."""
    nose = frames[:, _nose_index(frames.shape[1]), 0][:, None]
    out = frames.copy()
    out[:, :, 0] = 2.0 * nose - frames[:, :, 0]
    return out


def rotate(frames: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate every frame by ``degrees`` about its nose landmark."""
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s], [s, c]])
    nose = frames[:, _nose_index(frames.shape[1]) : _nose_index(frames.shape[1]) + 1]
    return (frames - nose) @ R.T + nose


def augment(sequence: LandmarkSequence, config: AugmentConfig | None = None,
            rng: np.random.Generator | None = None) -> list[LandmarkSequence]:
    """Expand one sequence into ``config.multiplicity`` sequences (14 by default).

    Output order: original, flipped original, then for each noise level a
    noise-only, noise+rotation, noise+flip and noise+rotation+flip variant.
    Flip variants are mirrored with probability ``flip_probability``.
    """
    config = config or AugmentConfig()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    base = sequence
    if config.target_frames is not None:
        base = tile_frames(base, config.target_frames)
    frames = base.frames
    out = [base.with_frames(frames.copy())]

    def maybe_flip(f):
        return flip(f) if rng.random() < config.flip_probability else f

    def angle():
        return rng.uniform(-config.rotation_max_degrees, config.rotation_max_degrees)

    if config.include_flipped_original:
        out.append(base.with_frames(maybe_flip(frames)))
    for sigma in config.noise_sigmas:
        for rot, flp in ((False, False), (True, False), (False, True), (True, True)):
            f = frames + rng.normal(0.0, sigma, frames.shape) if sigma > 0 else frames.copy()
            if rot:
                f = rotate(f, angle())
            if flp:
                f = maybe_flip(f)
            out.append(base.with_frames(f))
    return out


def augment_dataset(sequences, config: AugmentConfig | None = None) -> list[LandmarkSequence]:
    config = config or AugmentConfig()
    out = []
    for n, seq in enumerate(sequences):
        rng = np.random.default_rng([config.seed, n])
        for k, aug in enumerate(augment(seq, config, rng)):
            sid = f"{seq.sequence_id or n}_aug{k:02d}"
            out.append(LandmarkSequence(aug.frames, aug.label, sid))
    return out


# ----------------------------------------------------------------------------
# synthetic landmark motion


def face_template() -> np.ndarray:
    """A neutral 68-point face, ~100 px wide, in image coordinates (y down)."""
    pts = np.zeros((FULL_POINTS, 2))
    phi = np.linspace(0.0, np.pi, 17)
    pts[0:17] = np.c_[100 - 48 * np.cos(phi), 95 + 55 * np.sin(phi)]
    arc = 5 * np.sin(np.linspace(0.3, np.pi - 0.3, 5))
    pts[17:22] = np.c_[np.linspace(62, 90, 5), 70 - arc]
    pts[22:27] = np.c_[np.linspace(110, 138, 5), 70 - arc[::-1]]
    pts[27:31] = np.c_[np.full(4, 100.0), np.linspace(75, 102, 4)]
    pts[31:36] = np.c_[np.linspace(90, 110, 5), [106, 108, 109, 108, 106]]
    theta = np.array([np.pi, 2 * np.pi / 3, np.pi / 3, 0.0, -np.pi / 3, -2 * np.pi / 3])
    pts[36:42] = np.c_[76 + 7 * np.cos(theta), 82 - 3 * np.sin(theta)]
    pts[42:48] = np.c_[124 - 7 * np.cos(theta[[3, 2, 1, 0, 5, 4]]), 82 - 3 * np.sin(theta[[3, 2, 1, 0, 5, 4]])]
    theta = np.pi - np.arange(12) * 2 * np.pi / 12
    pts[48:60] = np.c_[100 + 22 * np.cos(theta), 128 - 8 * np.sin(theta)]
    theta = np.pi - np.arange(8) * 2 * np.pi / 8
    pts[60:68] = np.c_[100 + 14 * np.cos(theta), 128 - 3 * np.sin(theta)]
    # break the exact mirror symmetry so the triangulation has no cocircular ties
    pts += np.random.default_rng(68).normal(0.0, 0.3, pts.shape)
    return pts


MOUTH = np.arange(48, 68)
BROWS = np.arange(17, 27)
EYES = np.arange(36, 48)
UPPER_LIDS = np.array([37, 38, 43, 44])
LOWER_LIP = np.array([55, 56, 57, 58, 59, 65, 66, 67])


def _motion(program: str, template: np.ndarray) -> np.ndarray:
    """Full-amplitude displacement field (68 x 2) for one motion program."""
    d = np.zeros_like(template)
    cx = template[MOUTH, 0].mean()
    if program == "mouth_spread":
        d[MOUTH, 0] = 0.4 * (template[MOUTH, 0] - cx)
        d[[48, 54, 60, 64], 1] = -3.0
    elif program == "mouth_squeeze":
        d[MOUTH, 0] = -0.3 * (template[MOUTH, 0] - cx)
        d[MOUTH, 1] = -2.0
    elif program == "brow_raise":
        d[BROWS, 1] = -8.0
        d[UPPER_LIDS, 1] = -2.0
    elif program == "brow_lower":
        d[BROWS, 1] = 5.0
        d[BROWS, 0] = np.where(template[BROWS, 0] < 100, 3.0, -3.0)
    elif program == "mouth_open":
        d[LOWER_LIP, 1] = 10.0
        d[0:17, 1] = 6.0 * np.sin(np.linspace(0, np.pi, 17))
    elif program == "eyes_close":
        d[UPPER_LIDS, 1] = 4.0
        d[[40, 41, 46, 47], 1] = -1.5
    else:
        raise ValueError(f"unknown motion program {program!r}")
    return d


MOTION_PROGRAMS = ("mouth_spread", "brow_raise", "mouth_open", "brow_lower", "mouth_squeeze", "eyes_close")


@dataclass
class SyntheticSpec:
    class_count: int = 3
    sequences_per_class: int = 20
    frames: int = 4
    jitter: float = 1.0
    amplitude: float = 1.0
    max_phase: float = 0.4
    seed: int = 0
    programs: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.sequences_per_class < 1 or self.frames < 1:
            raise ValueError("sequences_per_class and frames must be >= 1")
        if self.jitter < 0 or self.amplitude <= 0 or not 0 <= self.max_phase < 1:
            raise ValueError("invalid jitter, amplitude or max_phase")
        if self.programs is None:
            if self.class_count > len(MOTION_PROGRAMS):
                raise ValueError(f"at most {len(MOTION_PROGRAMS)} classes without explicit programs")
            self.programs = MOTION_PROGRAMS[: self.class_count]
        self.programs = tuple(self.programs)
        if len(self.programs) != self.class_count:
            raise ValueError("need exactly one motion program per class")
        if len(set(self.programs)) != len(self.programs):
            raise ValueError("motion programs must be distinct across classes")
        for p in self.programs:
            if p not in MOTION_PROGRAMS:
                raise ValueError(f"unknown motion program {p!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["programs"] = list(self.programs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SyntheticSpec keys: {sorted(unknown)}")
        return cls(**d)


def motion_profile(frames: int, phase: float) -> np.ndarray:
    """Expression intensity per frame: 0 at the first frame, 1 at the last."""
    if frames == 1:
        return np.ones(1)
    t = np.arange(frames) / (frames - 1)
    return np.clip((t - phase) / (1.0 - phase), 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec | None = None) -> list[LandmarkSequence]:
    """Sequences of 68-point faces, each class animating a different landmark group.

    Every sequence starts at the neutral face, so the first frame carries no
    class information; the class is only visible in the motion.  Per-sequence
    variation: onset phase, a static identity offset and a global translation
    (both scaled by ``jitter``), plus per-frame jitter noise.
    """
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    template = face_template()
    fields = [_motion(p, template) * spec.amplitude for p in spec.programs]
    out = []
    for c in range(spec.class_count):
        for k in range(spec.sequences_per_class):
            phase = rng.uniform(0.0, spec.max_phase)
            identity = rng.normal(0.0, 1.0, template.shape) * spec.jitter
            shift = rng.normal(0.0, 10.0, 2) * spec.jitter
            noise = rng.normal(0.0, 0.5, (spec.frames,) + template.shape) * spec.jitter
            s = motion_profile(spec.frames, phase)
            frames = template + identity + shift + s[:, None, None] * fields[c] + noise
            out.append(LandmarkSequence(frames, c, f"c{c}_s{k:03d}"))
    return out


# ----------------------------------------------------------------------------
# splitting


def _by_class(sequences) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(sequences):
        groups.setdefault(s.label, []).append(i)
    return dict(sorted(groups.items()))


def split(sequences, validation_fraction: float = 0.2, seed: int = 0):
    """Label-stratified seeded holdout; returns ``(train, validation)``."""
    if not 0 < validation_fraction < 1:
        raise ValueError("validation_fraction must lie in (0, 1)")
    sequences = list(sequences)
    rng = np.random.default_rng(seed)
    val_idx = []
    for label, idx in _by_class(sequences).items():
        if len(idx) < 2:
            raise DatasetError(f"class {label} has fewer than 2 sequences")
        n_val = min(max(1, int(round(len(idx) * validation_fraction))), len(idx) - 1)
        perm = rng.permutation(idx)
        val_idx.extend(int(i) for i in perm[:n_val])
    val_set = set(val_idx)
    train = [s for i, s in enumerate(sequences) if i not in val_set]
    val = [s for i, s in enumerate(sequences) if i in val_set]
    return train, val


def kfold(sequences, k: int = 10, seed: int = 0):
    """Yield ``(train, validation)`` pairs of a stratified ``k``-fold partition."""
    if k < 2:
        raise ValueError("k must be >= 2")
    sequences = list(sequences)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(sequences), dtype=np.int64)
    offset = 0
    for _, idx in _by_class(sequences).items():
        perm = rng.permutation(idx)
        for j, i in enumerate(perm):
            fold_of[i] = (offset + j) % k
        offset += len(idx)
    for f in range(k):
        yield ([s for i, s in enumerate(sequences) if fold_of[i] != f],
               [s for i, s in enumerate(sequences) if fold_of[i] == f])


def load_synthetic_spec(path) -> SyntheticSpec:
    with open(path, encoding="utf-8") as fh:
        return SyntheticSpec.from_dict(json.load(fh))
