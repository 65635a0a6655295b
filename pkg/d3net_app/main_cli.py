import logging
from pathlib import Path

import click
import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from models.config import load_config
from models.d3net import pad_to_multiple, restore_image
from models.degradations import KINDS, DegradationSpec, generate_corpus, read_manifest
from models.errors import D3NetError
from models.image_io import read_image, read_rgb, write_image
from models.log import get_logger, setup_logging
from models.metrics import MetricReport, psnr, ssim
from models.spectral import amplitude_map, band_bin_counts, band_edges, band_energy_profile
from models.trainer import Trainer, load_state

logger = get_logger(__name__)

GATE_MODES = click.Choice(["hard", "soft"])


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def cli(verbose):
    """ Desk-scale all-in-one image restoration: corpus, training, evaluation and analysis """
    setup_logging(logging.DEBUG if verbose else logging.INFO)


@cli.command("generate-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory")
@click.option("--count", default=16, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--kinds", default=",".join(KINDS), show_default=True, help="Comma-separated degradation kinds")
@click.option("--source-dir", default=None, type=click.Path(file_okay=False),
              help="Directory of clean PPM/PGM images (procedural sources when omitted)")
@click.option("--size", default=64, show_default=True, type=click.IntRange(min=8),
              help="Extent of procedural sources")
@click.option("--sigma", default=None, type=float, help="Noise level for gaussian_noise (0-255 scale)")
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
def generate_corpus_cmd(out_dir, count, seed, kinds, source_dir, size, sigma, workers):
    """ Write seeded (clean, degraded) PPM pairs and manifest.csv """
    specs = []
    for kind in filter(None, (k.strip() for k in kinds.split(","))):
        params = {"sigma": sigma} if kind == "gaussian_noise" and sigma is not None else {}
        specs.append(DegradationSpec(kind, params))
    if not specs:
        raise click.BadParameter("no degradation kinds given", param_hint="--kinds")
    generate_corpus(specs, source_dir, out_dir, count, seed, workers, size)


@cli.command()
@click.option("--config", "config_path", default=None, type=click.Path(dir_okay=False),
              help="key = value config file")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Directory for loss.csv and checkpoints")
@click.option("--total-steps", default=None, type=click.IntRange(min=0))
@click.option("--batch-size", default=None, type=click.IntRange(min=1))
@click.option("--patch-size", default=None, type=click.IntRange(min=8))
@click.option("--seed", default=None, type=click.IntRange(min=0))
def train(config_path, out_dir, total_steps, batch_size, patch_size, seed):
    """ Train from a config; D3NET_SEED overrides the seed """
    cfg = load_config(config_path, total_steps=total_steps, batch_size=batch_size, patch_size=patch_size,
                      seed=seed)
    Trainer(cfg, out_dir).run()


def _score_pair(network, degraded_path, clean_path, gate_mode):
    degraded, clean = read_rgb(degraded_path), read_rgb(clean_path)
    restored = degraded if network is None else restore_image(network, degraded, gate_mode)[0]
    return Path(degraded_path).name, psnr(restored, clean), ssim(restored, clean)


@cli.command("eval")
@click.option("--manifest", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Metrics CSV")
@click.option("--checkpoint", default=None, type=click.Path(dir_okay=False),
              help="Restore before scoring; without it the degraded inputs are scored")
@click.option("--gate-mode", default=None, type=GATE_MODES)
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
def eval_cmd(manifest, out_path, checkpoint, gate_mode, workers):
    """ Per-image and mean PSNR / SSIM over a manifest """
    network = load_state(checkpoint)[1].network if checkpoint else None
    rows = read_manifest(manifest)
    scores = Parallel(n_jobs=workers, prefer="threads")(
        delayed(_score_pair)(network, d, c, gate_mode) for d, c in zip(rows["degraded"], rows["clean"])
    )
    report = MetricReport()
    for name, p, s in scores:
        report.add(name, p, s)
    report.to_frame().to_csv(out_path, index=False)
    logger.info("%d images: mean PSNR %.3f dB, mean SSIM %.4f", len(scores), report.mean_psnr,
                report.mean_ssim)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--input", "input_path", required=True, type=click.Path(dir_okay=False))
@click.option("--output", "output_path", required=True, type=click.Path(dir_okay=False))
@click.option("--gate-mode", default=None, type=GATE_MODES)
def restore(checkpoint, input_path, output_path, gate_mode):
    """ Restore one PPM/PGM image """
    _, state = load_state(checkpoint)
    restored, traces = restore_image(state.network, read_rgb(input_path), gate_mode)
    write_image(output_path, restored)
    logger.info("restored %s with %d/%d stages active", input_path, sum(t.activated for t in traces),
                len(traces))


@cli.command("analyze-spectrum")
@click.option("--input", "input_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--bands", default=4, show_default=True, type=click.IntRange(min=2))
def analyze_spectrum(input_path, out_dir, bands):
    """ Write the log-amplitude spectrum as PGM and the radial band-energy profile as CSV """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    M = amplitude_map(read_image(input_path)).data
    # raises SpectrumError before anything is written when there is no non-DC energy
    profile = band_energy_profile(M, bands)
    log_m = np.log1p(M)
    peak = log_m.max()
    write_image(out_dir / "amplitude.pgm", (log_m / peak if peak > 0 else log_m)[None])

    edges = band_edges(bands)
    frame = pd.DataFrame({
        "band": range(bands),
        "r_low": edges[:-1],
        "r_high": edges[1:],
        "bins": band_bin_counts(M.shape, bands),
        "energy_fraction": profile,
    })
    frame.to_csv(out_dir / "bands.csv", index=False)


@cli.command("gate-stats")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--gate-mode", default=None, type=GATE_MODES)
def gate_stats(checkpoint, manifest, out_path, gate_mode):
    """ Per-stage activation rates and decomposition-branch MAC savings over a manifest """
    _, state = load_state(checkpoint)
    network = state.network
    activations, stage_flops, stage_full, savings = [], [], [], []
    for path in read_manifest(manifest)["degraded"]:
        image = read_rgb(path)
        padded, _ = pad_to_multiple(image, network.cfg.multiple)
        h, w = padded.shape[1:]
        _, traces = restore_image(network, image, gate_mode)
        report = network.decomposition_flops(traces, h, w)
        activations.append([t.activated for t in traces])
        stage_flops.append(report.per_stage)
        stage_full.append(report.per_stage_full)
        savings.append(report.savings_fraction)

    active = np.mean(activations, axis=0)
    stage_savings = 1.0 - np.sum(stage_flops, axis=0) / np.sum(stage_full, axis=0)
    frame = pd.DataFrame({
        "stage": [str(i) for i in range(len(active))] + ["all"],
        "activation_rate": list(active) + [float(active.mean())],
        "savings_fraction": list(stage_savings) + [float(np.mean(savings))],
    })
    frame.to_csv(out_path, index=False)
    logger.info("mean activation %.3f, mean savings %.3f", active.mean(), np.mean(savings))


def main(argv=None):
    """ Run the CLI; returns 0 on success, 1 on usage errors, 2 on runtime errors """
    try:
        cli.main(args=argv, prog_name="d3net", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 2
    except (D3NetError, OSError, ValueError) as e:
        logger.error("%s", e)
        return 2
    return 0
