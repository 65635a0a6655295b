"""
Training loop: seeded batch assembly, train_step, loss log and periodic
checkpoints. Everything derives from (config, seed), so a rerun reproduces the
loss CSV and checkpoints byte for byte.
"""
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from models.checkpoint import load_checkpoint, save_checkpoint
from models.config import emit_config, parse_config
from models.d3net import ModelState, train_step
from models.degradations import DegradationSpec, apply, procedural_source, read_manifest
from models.errors import NonFiniteError
from models.image_io import read_rgb
from models.log import get_logger

logger = get_logger(__name__)

LOSS_COLUMNS = ["step", "loss", "lr", "tau", "active_stage_rate"]


def checkpoint_interval(total_steps):
    return max(1, total_steps // 10)


def random_crop(arrays, size, rng):
    _, h, w = arrays[0].shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return [a[:, top:top + size, left:left + size] for a in arrays]


class BatchSource:
    """
    Yields lists of (degraded, clean) patches. With a manifest, pairs are cropped
    from the listed files; otherwise clean patches are procedural and degraded on
    the fly with one of the configured kinds.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.rng = rng
        self.pairs = []
        if cfg.train_manifest:
            manifest = read_manifest(cfg.train_manifest)
            for clean_path, degraded_path in zip(manifest["clean"], manifest["degraded"]):
                clean, degraded = read_rgb(clean_path), read_rgb(degraded_path)
                if min(clean.shape[1:]) >= cfg.patch_size and clean.shape == degraded.shape:
                    self.pairs.append((degraded, clean))
                else:
                    logger.warning("skipping %s: smaller than patch size or mismatched", degraded_path)
            if not self.pairs:
                raise ValueError(f"no usable pairs in {cfg.train_manifest}")

    def synthetic_pair(self):
        size = self.cfg.patch_size
        clean = procedural_source(int(self.rng.integers(0, 2 ** 31)), size, self.cfg.seed)
        kind = self.cfg.kinds[int(self.rng.integers(0, len(self.cfg.kinds)))]
        params = {"sigma": self.cfg.noise_sigma} if kind == "gaussian_noise" else {}
        spec = DegradationSpec(kind, params, int(self.rng.integers(0, 2 ** 63)))
        return apply(spec, clean), clean

    def batch(self):
        if not self.pairs:
            return [self.synthetic_pair() for _ in range(self.cfg.batch_size)]
        out = []
        for _ in range(self.cfg.batch_size):
            degraded, clean = self.pairs[int(self.rng.integers(0, len(self.pairs)))]
            out.append(tuple(random_crop([degraded, clean], self.cfg.patch_size, self.rng)))
        return out


class Trainer:
    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.state = ModelState.create(cfg, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.data = BatchSource(cfg, np.random.default_rng([cfg.seed, 1]))
        self.gumbel_rng = np.random.default_rng([cfg.seed, 2])
        self.history = []

    def save(self, name):
        path = self.out_dir / name
        save_checkpoint(path, emit_config(self.cfg), self.state.tensors())
        logger.info("checkpoint %s", path)
        return path

    def write_loss_log(self):
        frame = pd.DataFrame([vars(r) for r in self.history], columns=LOSS_COLUMNS)
        frame.to_csv(self.out_dir / "loss.csv", index=False)
        return frame

    def run(self):
        """ Train for total_steps; returns the loss log DataFrame """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        total = self.cfg.total_steps
        if total == 0:
            self.save("ckpt_000000.d3nt")
            return self.write_loss_log()

        every = checkpoint_interval(total)
        progress = tqdm(range(total), desc="train", disable=None)
        for step in progress:
            try:
                result = train_step(self.data.batch(), self.state, step, total, self.gumbel_rng,
                                    self.cfg.lr_init, self.cfg.lr_final)
            except NonFiniteError:
                self.write_loss_log()
                logger.error("step %d aborted on a non-finite loss; loss.csv keeps %d completed steps", step,
                             len(self.history))
                raise
            self.history.append(result)
            progress.set_postfix(loss=f"{result.loss:.4f}", tau=f"{result.tau:.2f}")
            if (step + 1) % every == 0:
                self.save(f"ckpt_{step + 1:06d}.d3nt")
                self.write_loss_log()
        self.save("final.d3nt")
        logger.info("trained %d steps, final loss %.6f", total, self.history[-1].loss)
        return self.write_loss_log()


def load_state(path):
    """ Rebuild config and ModelState (weights and optimizer moments) from a checkpoint """
    config_text, tensors = load_checkpoint(path)
    cfg = parse_config(config_text)
    state = ModelState.create(cfg, cfg.beta1, cfg.beta2, cfg.adam_eps)
    state.load(tensors)
    return cfg, state
