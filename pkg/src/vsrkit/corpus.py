"""Synthetic audio-visual corpus with parameterized visual degradations.

A clip renders a schematic face whose mouth (an ellipse) follows a
deterministic aperture/width trajectory derived from the phoneme-like
characters of the transcript; every character holds the mouth for a
fixed number of frames.  Audio features are a noisy linear readout of
the same trajectory sampled at four times the frame rate, so the audio
stream genuinely corresponds to the visible mouth motion while staying
untouched by any visual corruption.

Degradation factors and their bins:
    illumination  B / M / D  -> pixel gain 1.6 / 1.0 / 0.45
    occlusion     N / Y      -> opaque block over 20-40% of the mouth box
    blur          C / M / B  -> Gaussian sigma 0 / 0.8 / 1.8
    pose          S / M / L  -> yaw drawn from 0-30 / 30-60 / 60-90 deg,
                                realized as horizontal compression+shear

Dataset layout under an output directory:
    manifest.tsv       one row per clip: clip_id, relative frames path,
                       transcript, the four condition bins, clip seed
    clips/<id>.vsrt    frames tensor (T, 1, 32, 32)
    clips/<id>.audio.vsrt  audio features (4T, 8)
Split membership is carried by the clip id prefix (train-/val-/test-)
and is a pure function of the corpus seed.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .tensorio import read_tensor, write_tensor

RESOLUTION = 32
AUDIO_DIM = 8
AUDIO_RATE = 4  # audio feature rows per video frame

PHONEME_CHARS = "abdegikmnopt"
REST_CHAR = " "
CHARS = PHONEME_CHARS + REST_CHAR  # recognizer alphabet
REST_INDEX = len(PHONEME_CHARS)

# aperture(s) = base_a + amp_a * sin(pi * s), width(s) = base_w +
# amp_w * sin(pi * (s + phase)); one row per phoneme, rest pose last.
# Each phoneme owns one cell of a 4x3 (aperture base, width base) grid
# spread over several pixels, so the classes stay separable after
# spatial downsampling; the sine bumps add per-phoneme motion on top.
PHONEME_PARAMS = np.array(
    [[1.6 + 1.8 * (i % 4),            # base_a
      0.5 + 0.3 * ((i // 4) % 3),     # amp_a
      4.5 + 2.5 * (i // 4),           # base_w
      0.6 + 0.4 * (i % 2),            # amp_w
      0.25 * (i % 3)]                 # phase
     for i in range(12)] + [[0.7, 0.0, 5.5, 0.0, 0.0]])

LEXICON = (
    "bat", "dog", "kip", "mate", "pond", "gab", "tide", "nomad",
    "pig", "oak", "dim", "tag", "bead", "kit", "mop", "gain",
    "toad", "nap", "edit", "bog", "pane", "kid", "atom", "gem",
    "dip", "note", "bake", "mind", "pod", "gate", "pike", "dome",
)

ILLUMINATION_GAIN = {"B": 1.6, "M": 1.0, "D": 0.45}
BLUR_SIGMA = {"C": 0.0, "M": 0.8, "B": 1.8}
POSE_YAW_RANGE = {"S": (0.0, 30.0), "M": (30.0, 60.0), "L": (60.0, 90.0)}
OCCLUSION_FRAC_RANGE = (0.2, 0.4)
OCCLUDER_VALUE = 0.6

MOUTH_BOX = (10, 28, 4, 28)  # rows [10, 28), cols [4, 28)
MOUTH_CENTER = (19.0, 16.0)
FACE_VALUE = 0.55
OUTSIDE_VALUE = 0.25
MOUTH_VALUE = 0.08

# fixed readout from (aperture, width, aperture-slope) to audio space;
# corpus-independent so identical trajectories always map identically
_AUDIO_READOUT = np.random.default_rng(7381).normal(
    0.0, 1.0, (3, AUDIO_DIM)) / np.sqrt(3.0)
AUDIO_NOISE_SIGMA = 0.03


@dataclass(frozen=True)
class ConditionLabel:
    illumination: str = "M"
    occlusion: str = "N"
    blur: str = "C"
    pose: str = "S"
    yaw_deg: float = None        # None -> drawn from the pose bin
    occlusion_frac: float = None  # None -> drawn from 0.2-0.4

    def __post_init__(self):
        checks = [(self.illumination, "BMD"), (self.occlusion, "NY"),
                  (self.blur, "CMB"), (self.pose, "SML")]
        for value, levels in checks:
            if value not in levels:
                raise ConfigError(
                    f"condition bin {value!r} not one of {tuple(levels)}")


CLEAN_CONDITION = ConditionLabel("M", "N", "C", "S", yaw_deg=0.0)


@dataclass
class VideoClip:
    frames: np.ndarray       # (T, 1, 32, 32) in [0, 1]
    audio_feats: np.ndarray  # (4T, AUDIO_DIM)
    transcript: str
    condition: ConditionLabel
    clip_id: str
    seed: int


def phoneme_template(index, s):
    """Closed-form (aperture, width) of one phoneme at position s in
    [0, 1]."""
    base_a, amp_a, base_w, amp_w, phase = PHONEME_PARAMS[index]
    aperture = base_a + amp_a * math.sin(math.pi * s)
    width = base_w + amp_w * math.sin(math.pi * (s + phase))
    return aperture, width


def transcript_to_phonemes(transcript):
    out = []
    for ch in transcript:
        if ch == REST_CHAR:
            out.append(REST_INDEX)
        elif ch in PHONEME_CHARS:
            out.append(PHONEME_CHARS.index(ch))
        else:
            raise ConfigError(f"unknown character {ch!r} in transcript")
    return out


def mouth_trajectory(phoneme_ids, frames_per_phoneme):
    """Per-frame (aperture, width): each phoneme sampled at its frame
    midpoints."""
    rows = []
    for idx in phoneme_ids:
        for j in range(frames_per_phoneme):
            s = (j + 0.5) / frames_per_phoneme
            rows.append(phoneme_template(idx, s))
    return np.array(rows)


def audio_trajectory(phoneme_ids, total_frames):
    """(4T, 3) noiseless readout inputs: aperture, width, aperture
    slope, sampled at the audio rate across the same timeline."""
    p = len(phoneme_ids)
    n = AUDIO_RATE * total_frames
    rows = np.empty((n, 3))
    delta = 1e-3
    for m in range(n):
        pos = (m + 0.5) / n * p
        idx = min(int(pos), p - 1)
        s = pos - idx
        a, w = phoneme_template(phoneme_ids[idx], s)
        a2, _ = phoneme_template(phoneme_ids[idx], min(s + delta, 1.0))
        a1, _ = phoneme_template(phoneme_ids[idx], max(s - delta, 0.0))
        rows[m] = (a, w, (a2 - a1) / (2 * delta))
    return rows


def render_frames(trajectory):
    """Rasterize the schematic face for each (aperture, width) row.

    Rendering is exactly deterministic in the trajectory: any per-clip
    pixel fingerprint would hand memorization a shortcut, so stochastic
    variation comes only from training-time augmentation.
    """
    t = len(trajectory)
    rr, cc = np.mgrid[0:RESOLUTION, 0:RESOLUTION].astype(np.float64)
    face = (((rr - 16.0) / 14.0) ** 2 + ((cc - 16.0) / 12.0) ** 2) <= 1.0
    frames = np.empty((t, 1, RESOLUTION, RESOLUTION))
    cy, cx = MOUTH_CENTER
    for i, (aperture, width) in enumerate(trajectory):
        img = np.where(face, FACE_VALUE, OUTSIDE_VALUE)
        img[8:10, 12:14] = 0.2   # left nostril
        img[8:10, 19:21] = 0.2   # right nostril
        mouth = (((rr - cy) / max(aperture, 0.3)) ** 2
                 + ((cc - cx) / max(width, 0.3)) ** 2) <= 1.0
        img = np.where(mouth, MOUTH_VALUE, img)
        frames[i, 0] = img
    return np.clip(frames, 0.0, 1.0)


def gaussian_blur(frames, sigma):
    if sigma <= 0.0:
        return frames
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (xs / sigma) ** 2)
    kern /= kern.sum()
    out = np.pad(frames, ((0, 0), (0, 0), (radius, radius), (0, 0)),
                 mode="reflect")
    out = sum(out[:, :, i:i + frames.shape[2], :] * kern[i]
              for i in range(len(xs)))
    out = np.pad(out, ((0, 0), (0, 0), (0, 0), (radius, radius)),
                 mode="reflect")
    out = sum(out[:, :, :, i:i + frames.shape[3]] * kern[i]
              for i in range(len(xs)))
    return out


def occlusion_mask(shape, frac, start_row):
    """Boolean mask covering exactly floor(frac * mouth area) pixels,
    filled row-major inside the mouth box from ``start_row``."""
    r0, r1, c0, c1 = MOUTH_BOX
    box_w = c1 - c0
    area = (r1 - r0) * box_w
    k = int(math.floor(frac * area))
    mask = np.zeros(shape, dtype=bool)
    flat = np.zeros((r1 - r0) * box_w, dtype=bool)
    offset = start_row * box_w
    flat[offset:offset + k] = True
    if offset + k > flat.size:  # wrap inside the box
        flat[: offset + k - flat.size] = True
        flat[offset:] = True
    mask[r0:r1, c0:c1] = flat.reshape(r1 - r0, box_w)
    return mask


def apply_pose(frames, yaw_deg):
    """Horizontal compression + shear emulating a yaw rotation."""
    if yaw_deg == 0.0:
        return frames
    yaw = math.radians(yaw_deg)
    scale = max(math.cos(yaw), 0.05)
    shear = 0.3 * math.sin(yaw)
    t, c, h, w = frames.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    src_c = cx + ((cc - cx) - shear * (rr - cy)) / scale
    src_r = rr
    c0 = np.floor(src_c).astype(int)
    fc = src_c - c0
    c0c = np.clip(c0, 0, w - 1)
    c1c = np.clip(c0 + 1, 0, w - 1)
    inside = (src_c >= 0) & (src_c <= w - 1)
    out = np.empty_like(frames)
    for i in range(t):
        img = frames[i, 0]
        interp = img[src_r.astype(int), c0c] * (1 - fc) \
            + img[src_r.astype(int), c1c] * fc
        out[i, 0] = np.where(inside, interp, OUTSIDE_VALUE)
    return out


def degrade(frames, cond, seed):
    """Apply the condition's visual corruption; deterministic in
    (cond, seed).  Identity for gain 1.0, no occlusion, sigma 0, yaw 0."""
    rng = np.random.default_rng([seed, 0xDE6])
    yaw = cond.yaw_deg
    if yaw is None:
        lo, hi = POSE_YAW_RANGE[cond.pose]
        yaw = float(rng.uniform(lo, hi))
    occ_frac = cond.occlusion_frac
    if occ_frac is None:
        occ_frac = float(rng.uniform(*OCCLUSION_FRAC_RANGE))
    r0, r1, _, _ = MOUTH_BOX
    start_row = int(rng.integers(0, r1 - r0))

    out = apply_pose(frames, yaw)
    out = gaussian_blur(out, BLUR_SIGMA[cond.blur])
    if cond.occlusion == "Y":
        mask = occlusion_mask(out.shape[2:], occ_frac, start_row)
        out = np.where(mask[None, None], OCCLUDER_VALUE, out)
    gain = ILLUMINATION_GAIN[cond.illumination]
    if gain != 1.0:
        out = out * gain
    return np.clip(out, 0.0, 1.0)


def sample_words(rng):
    """1-3 lexicon words whose transcript has 4-12 characters."""
    while True:
        n = int(rng.integers(1, 4))
        words = [LEXICON[int(i)] for i in rng.integers(0, len(LEXICON), n)]
        p = len(" ".join(words))
        if 4 <= p <= 12:
            return words


def generate_clip(word_seq, seed, cond):
    """Render one clip: clean frames, degradation per ``cond``, audio
    features from the pre-degradation trajectory."""
    for word in word_seq:
        if word not in LEXICON:
            raise ConfigError(f"unknown lexicon token {word!r}")
    transcript = " ".join(word_seq)
    phonemes = transcript_to_phonemes(transcript)
    p = len(phonemes)
    rng = np.random.default_rng([seed, 0xC11])
    duration = int(rng.integers(2, 4)) if p <= 8 else 2
    t = duration * p
    trajectory = mouth_trajectory(phonemes, duration)
    frames = render_frames(trajectory)
    audio = audio_trajectory(phonemes, t) @ _AUDIO_READOUT
    audio += np.random.default_rng([seed, 0xA0D]).normal(
        0.0, AUDIO_NOISE_SIGMA, audio.shape)
    frames = degrade(frames, cond, seed)
    return VideoClip(frames=frames, audio_feats=audio, transcript=transcript,
                     condition=cond, clip_id="", seed=seed)


def augment(frames, rng, crop_offset=None, mask_frames=None,
            mild_gain=None, mild_sigma=None):
    """Training-time augmentation: random 32->28 crop resized back
    (nearest neighbor), mild gain/blur jitter, then time masking of up
    to ceil(T/8) frames with the clip mean.  Explicit keyword values
    override the draws (used by tests); evaluation never calls this."""
    t = frames.shape[0]
    crop = RESOLUTION - 4
    if crop_offset is None:
        crop_offset = (int(rng.integers(0, 5)), int(rng.integers(0, 5)))
    r, c = crop_offset
    cropped = frames[:, :, r:r + crop, c:c + crop]
    idx = (np.arange(RESOLUTION) * crop) // RESOLUTION
    out = cropped[:, :, idx][:, :, :, idx]
    if mild_gain is None:
        mild_gain = float(rng.uniform(0.85, 1.15))
    if mild_sigma is None:
        mild_sigma = float(rng.uniform(0.0, 0.5))
    out = np.clip(gaussian_blur(out, mild_sigma) * mild_gain, 0.0, 1.0)
    if mask_frames is None:
        count = int(rng.integers(0, math.ceil(t / 8) + 1))
        mask_frames = rng.choice(t, size=count, replace=False)
    mask_frames = np.asarray(mask_frames, dtype=np.int64)
    if mask_frames.size:
        out[mask_frames] = out.mean()
    return out


# ------------------------- dataset on disk -------------------------

@dataclass
class ManifestRow:
    clip_id: str
    path: str
    transcript: str
    condition: ConditionLabel
    seed: int

    def serialize(self):
        c = self.condition
        return "\t".join([self.clip_id, self.path, self.transcript,
                          c.illumination, c.occlusion, c.blur, c.pose,
                          str(self.seed)])

    @staticmethod
    def parse(line):
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 8:
            raise ShapeError(f"manifest row has {len(fields)} fields, want 8")
        cid, path, transcript, il, oc, bl, po, seed = fields
        return ManifestRow(cid, path, transcript,
                           ConditionLabel(il, oc, bl, po), int(seed))

    @property
    def split(self):
        return self.clip_id.split("-")[0]

    def audio_path(self):
        return self.path.replace(".vsrt", ".audio.vsrt")


def _balanced_levels(count, levels, rng):
    """Level assignment with exactly balanced marginals (up to
    remainder), shuffled deterministically."""
    reps = [levels[i % len(levels)] for i in range(count)]
    return [reps[i] for i in rng.permutation(count)]


def _weighted_levels(count, levels, weights, rng):
    return [levels[i] for i in rng.choice(len(levels), size=count, p=weights)]


# evaluation splits are exactly stratified; training tilts toward the
# milder bins (harsh conditions stay present but are the tail, which
# keeps the task learnable at desk scale)
TRAIN_CONDITION_WEIGHTS = {
    "illumination": (0.25, 0.50, 0.25),
    "occlusion": (0.70, 0.30),
    "blur": (0.50, 0.30, 0.20),
    "pose": (0.50, 0.30, 0.20),
}


def generate_corpus(out_dir, num_clips=500, seed=0,
                    split_fracs=(0.64, 0.06, 0.30)):
    """Write a full dataset; returns the manifest rows.

    Evaluation splits are stratified so each factor level gets an equal
    share of that split's clips (e.g. every illumination bin holds 50
    of a 150-clip test set); the training split draws conditions from
    TRAIN_CONDITION_WEIGHTS.
    """
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    counts = [int(round(num_clips * f)) for f in split_fracs]
    counts[0] = num_clips - counts[1] - counts[2]
    rows = []
    index = 0
    for split_idx, (split, count) in enumerate(
            zip(("train", "val", "test"), counts)):
        srng = np.random.default_rng([seed, split_idx, 0x517])
        if split == "train":
            w = TRAIN_CONDITION_WEIGHTS
            ill = _weighted_levels(count, "BMD", w["illumination"], srng)
            occ = _weighted_levels(count, "NY", w["occlusion"], srng)
            blr = _weighted_levels(count, "CMB", w["blur"], srng)
            pos = _weighted_levels(count, "SML", w["pose"], srng)
        else:
            ill = _balanced_levels(count, "BMD", srng)
            occ = _balanced_levels(count, "NY", srng)
            blr = _balanced_levels(count, "CMB", srng)
            pos = _balanced_levels(count, "SML", srng)
        for i in range(count):
            clip_seed = seed * 1_000_003 + index
            crng = np.random.default_rng([seed, index, 0x5EED])
            words = sample_words(crng)
            cond = ConditionLabel(ill[i], occ[i], blr[i], pos[i])
            clip = generate_clip(words, clip_seed, cond)
            cid = f"{split}-{index:05d}"
            rel = f"clips/{cid}.vsrt"
            write_tensor(out / rel, clip.frames)
            write_tensor(out / f"clips/{cid}.audio.vsrt", clip.audio_feats)
            rows.append(ManifestRow(cid, rel, clip.transcript, cond,
                                    clip_seed))
            index += 1
    with open(out / "manifest.tsv", "w") as f:
        for row in rows:
            f.write(row.serialize() + "\n")
    return rows


def load_manifest(data_dir):
    rows = []
    with open(Path(data_dir) / "manifest.tsv") as f:
        for line in f:
            if line.strip():
                rows.append(ManifestRow.parse(line))
    return rows


def load_clip(data_dir, row):
    frames = read_tensor(Path(data_dir) / row.path)
    audio = read_tensor(Path(data_dir) / row.audio_path())
    return VideoClip(frames=frames, audio_feats=audio,
                     transcript=row.transcript, condition=row.condition,
                     clip_id=row.clip_id, seed=row.seed)
