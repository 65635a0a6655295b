"""
Seeded synthetic degradations for the five task families (noise, blur, rain,
haze, low light), procedural clean sources and paired-corpus generation.
"""
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import ndimage
from tqdm import tqdm

from models.errors import CorpusError, DegradationError, ImageFormatError, ShapeError
from models.image_io import read_rgb, write_image
from models.log import get_logger
from models.tensor import Tensor

logger = get_logger(__name__)

KINDS = ("gaussian_noise", "gaussian_blur", "rain_streaks", "haze", "low_light")

DEFAULT_PARAMS = {
    "gaussian_noise": {"sigma": 25.0},
    "gaussian_blur": {"radius": 3, "sigma_b": 1.5},
    "rain_streaks": {"density": 0.01, "length": 11, "angle": 60.0, "intensity": 0.6},
    "haze": {"t": 0.6, "A": 0.9},
    "low_light": {"gamma": 2.0, "scale": 0.5},
}

# (low, high, low inclusive, high inclusive)
PARAM_RANGES = {
    "gaussian_noise": {"sigma": (0.0, 255.0, True, True)},
    "gaussian_blur": {"radius": (0, 15, True, True), "sigma_b": (0.0, 10.0, False, True)},
    "rain_streaks": {
        "density": (0.0, 0.1, True, True),
        "length": (1, 31, True, True),
        "angle": (-90.0, 90.0, True, True),
        "intensity": (0.0, 1.0, True, True),
    },
    "haze": {"t": (0.0, 1.0, False, True), "A": (0.7, 1.0, True, True)},
    "low_light": {"gamma": (1.0, 5.0, True, True), "scale": (0.0, 1.0, False, True)},
}

MANIFEST_COLUMNS = ["clean", "degraded", "kind", "params", "seed"]


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFAULT_PARAMS:
            raise DegradationError(f"unknown degradation kind {self.kind!r}; expected one of {list(KINDS)}")
        params = {**DEFAULT_PARAMS[self.kind], **self.params}
        ranges = PARAM_RANGES[self.kind]
        unknown = set(params) - set(ranges)
        if unknown:
            raise DegradationError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        for name, (lo, hi, lo_in, hi_in) in ranges.items():
            value = params[name]
            ok_lo = value >= lo if lo_in else value > lo
            ok_hi = value <= hi if hi_in else value < hi
            if not (ok_lo and ok_hi):
                lb, rb = "[" if lo_in else "(", "]" if hi_in else ")"
                raise DegradationError(f"{self.kind}: {name}={value} outside {lb}{lo}, {hi}{rb}")
        if "radius" in params and int(params["radius"]) != params["radius"]:
            raise DegradationError(f"{self.kind}: radius must be an integer, got {params['radius']}")
        if "length" in params and int(params["length"]) != params["length"]:
            raise DegradationError(f"{self.kind}: length must be an integer, got {params['length']}")
        object.__setattr__(self, "params", params)

    def params_text(self):
        """ Sorted `key=value;...` form used in the manifest """
        return ";".join(f"{k}={self.params[k]}" for k in sorted(self.params))


def parse_params(text):
    params = {}
    for item in filter(None, str(text).split(";")):
        key, _, value = item.partition("=")
        number = float(value)
        params[key] = int(number) if key in ("radius", "length") else number
    return params


def gaussian_kernel1d(radius, sigma):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def streak_kernel(length, angle):
    """ Normalized line segment of `length` pixels; angle from the column axis toward the row axis """
    size = length if length % 2 else length + 1
    c = size // 2
    theta = np.deg2rad(angle)
    k = np.zeros((size, size))
    for t in np.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * length):
        k[int(round(c + t * np.sin(theta))), int(round(c + t * np.cos(theta)))] = 1.0
    return k / k.sum()


def _gaussian_noise(clean, p, rng):
    return clean + rng.normal(0.0, p["sigma"] / 255.0, clean.shape)


def _gaussian_blur(clean, p, rng):
    radius = int(p["radius"])
    if radius == 0:
        return clean.copy()
    k = gaussian_kernel1d(radius, p["sigma_b"])
    out = ndimage.correlate1d(clean, k, axis=1, mode="reflect")
    return ndimage.correlate1d(out, k, axis=2, mode="reflect")


def _rain_streaks(clean, p, rng):
    _, h, w = clean.shape
    seeds = (rng.random((h, w)) < p["density"]).astype(np.float64)
    streaks = ndimage.correlate(seeds, streak_kernel(int(p["length"]), p["angle"]), mode="wrap")
    peak = streaks.max()
    if peak > 0:
        streaks = streaks / peak
    return clean + p["intensity"] * streaks[None]


def _haze(clean, p, rng):
    return clean * p["t"] + p["A"] * (1.0 - p["t"])


def _low_light(clean, p, rng):
    return np.power(clean, p["gamma"]) * p["scale"]


_GENERATORS = {
    "gaussian_noise": _gaussian_noise,
    "gaussian_blur": _gaussian_blur,
    "rain_streaks": _rain_streaks,
    "haze": _haze,
    "low_light": _low_light,
}


def apply(spec, clean):
    """ Degrade a [C,H,W] image in [0,1]; the result is clamped to [0,1] """
    arr = clean.data if isinstance(clean, Tensor) else np.asarray(clean, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"apply expects a [C,H,W] image, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DegradationError("clean image must lie in [0,1]")
    rng = np.random.default_rng(spec.seed)
    return np.clip(_GENERATORS[spec.kind](arr, spec.params, rng), 0.0, 1.0)


# ------------------------------------------------------------ clean sources

def checkerboard(size, cells, rng):
    idx = (np.arange(size) * cells // size)
    board = ((idx[:, None] + idx[None, :]) % 2).astype(np.float64)
    lo, hi = np.sort(rng.uniform(0.1, 0.9, size=(3, 2)), axis=1).T
    return lo[:, None, None] + (hi - lo)[:, None, None] * board[None]


def texture(size, rng, sigma=2.0):
    """ Gaussian-filtered white noise stretched to [0,1] per channel """
    noise = rng.normal(size=(3, size, size))
    k = gaussian_kernel1d(int(3 * sigma), sigma)
    smooth = ndimage.correlate1d(noise, k, axis=1, mode="reflect")
    smooth = ndimage.correlate1d(smooth, k, axis=2, mode="reflect")
    lo = smooth.min(axis=(1, 2), keepdims=True)
    hi = smooth.max(axis=(1, 2), keepdims=True)
    return (smooth - lo) / (hi - lo)


def gradient(size, rng):
    theta = rng.uniform(0, 2 * np.pi)
    y, x = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ramp = (np.cos(theta) * x + np.sin(theta) * y)
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) or 1.0)
    tint = rng.uniform(0.3, 1.0, size=3)
    return tint[:, None, None] * ramp[None]


def procedural_source(index, size, seed):
    """ Deterministic clean image: cycles checkerboard, texture, gradient """
    rng = np.random.default_rng([seed, index])
    kind = index % 3
    if kind == 0:
        return checkerboard(size, int(rng.integers(2, 9)), rng)
    if kind == 1:
        return texture(size, rng)
    return gradient(size, rng)


def load_sources(source_dir):
    """ Readable PPM/PGM files under source_dir (sorted); unreadable files are skipped with a warning """
    sources = []
    for path in sorted(Path(source_dir).iterdir()):
        if path.suffix.lower() not in (".ppm", ".pgm"):
            continue
        try:
            sources.append((path.name, read_rgb(path)))
        except (OSError, ImageFormatError) as e:
            logger.warning("skipping %s: %s", path, e)
    return sources


def _make_pair(index, spec, clean, out_dir):
    degraded = apply(spec, clean)
    clean_name, degraded_name = f"clean_{index:05d}.ppm", f"degraded_{index:05d}.ppm"
    write_image(out_dir / clean_name, clean)
    write_image(out_dir / degraded_name, degraded)
    return {"clean": clean_name, "degraded": degraded_name, "kind": spec.kind,
            "params": spec.params_text(), "seed": spec.seed}


def generate_corpus(specs, source_dir, out_dir, count, seed, workers=1, size=64):
    """
    Write `count` (clean, degraded) PPM pairs and manifest.csv into out_dir.
    Item i uses specs[i % len(specs)] with seed `seed ^ i` and clean source
    i modulo the available sources; without source_dir, procedural sources of
    `size` x `size` are used. Returns the manifest DataFrame.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not specs:
        raise ValueError("generate_corpus needs at least one degradation spec")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if source_dir is not None:
        sources = [arr for _, arr in load_sources(source_dir)]
        if not sources:
            raise CorpusError(f"no readable PPM/PGM images in {source_dir}")

        def pick(i):
            return sources[i % len(sources)]
    else:
        def pick(i):
            return procedural_source(i, size, seed)

    jobs = (delayed(_make_pair)(i, replace(specs[i % len(specs)], seed=seed ^ i), pick(i), out_dir)
            for i in tqdm(range(count), desc="corpus", disable=None))
    rows = Parallel(n_jobs=workers, prefer="threads")(jobs)
    if not rows:
        raise CorpusError("corpus generation produced no pairs")

    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    manifest.to_csv(out_dir / "manifest.csv", index=False)
    logger.info("wrote %d pairs to %s", len(manifest), out_dir)
    return manifest


def read_manifest(path):
    """ Manifest rows with image paths resolved against the manifest's directory """
    path = Path(path)
    manifest = pd.read_csv(path, dtype={"params": str}, keep_default_na=False)
    missing = set(MANIFEST_COLUMNS) - set(manifest.columns)
    if missing:
        raise CorpusError(f"{path}: manifest is missing columns {sorted(missing)}")
    for column in ("clean", "degraded"):
        manifest[column] = [str(path.parent / p) for p in manifest[column]]
    return manifest
