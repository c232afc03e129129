"""End-to-end experiment orchestration behind the CLI.

Each command writes one run directory containing a config snapshot, a
deterministic log, and its outputs (tensors + JSON + CSV).  Runs are
byte-reproducible: identical config and seeds give identical trees.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import analysis, embed, net as netmod, ridge, synth
from .errors import ConfigError, DataError
from .tensorio import (
    DatasetManifest, TimeSeries, average_repeats, load_manifest,
    read_tensor, validate_manifest, write_tensor,
)


# -- configuration -----------------------------------------------------------


@dataclass
class GenSpec:
    """Synthetic dataset shape and noise targets."""

    wave_rate_hz: float = 400.0
    latent_rate_hz: float = 100.0
    n_latents: int = 4
    carriers_hz: list = field(default_factory=lambda: [40.0, 80.0, 120.0, 160.0])
    n_nuisance: int = 2
    nuisance_carriers_hz: list = field(default_factory=lambda: [60.0, 140.0])
    nuisance_gain: float = 1.0
    latent_band_hz: list = field(default_factory=lambda: [0.01, 5.0])
    n_slow_channels: int = 48
    n_fast_channels: int = 48
    train_stories: int = 8
    story_duration_s: float = 300.0
    fast_duration_s: float = 480.0
    slow_rate_hz: float = 0.5
    fast_rate_hz: float = 20.0
    test_repeats: int = 10
    hrf: dict = field(default_factory=dict)
    fast_delay_range_s: list = field(default_factory=lambda: [0.2, 0.8])
    fast_smooth_s: float = 0.03
    slow_noise_bands: list = field(default_factory=lambda: [
        [0.0, 0.125, 0.5], [0.125, 0.25, 0.2]])
    fast_noise_bands: list = field(default_factory=lambda: [[0.0, 10.0, 1.0]])


@dataclass
class NetSpec:
    frontend_stride: int = 20
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    mlp_width: int = 128
    tap_layer: int = 3
    window_s: float = 2.0
    lora_rank: int = 4
    proj_rank: int = 100


@dataclass
class FitSpec:
    epochs: int = 12
    batch_trs: int = 10
    lr: float = 5e-4
    stories: int | None = None       # None = all train stories
    # across-channel pattern correlation is scale/offset-free per timepoint,
    # which under-constrains channel time courses at desk-scale channel
    # counts; the per-channel temporal mode pins them
    loss_mode: str = "temporal"


@dataclass
class RidgeSpec:
    alpha_lo_exp: float = 0.0
    alpha_hi_exp: float = 8.0
    alpha_count: int = 10
    n_folds: int = 4

    def grid(self) -> np.ndarray:
        return np.logspace(self.alpha_lo_exp, self.alpha_hi_exp, self.alpha_count)


@dataclass
class LagSpec:
    lo_s: float = -2.0
    hi_s: float = 2.0
    count: int = 81


@dataclass
class FeatSpec:
    slow_stride_s: float = 0.25
    fast_stride_s: float = 0.05
    delays: list = field(default_factory=lambda: [1, 2, 3, 4])


@dataclass
class AnalysisSpec:
    psd_segment: int = 512
    overlap: float = 0.5
    split_hz: float = 0.25
    snr_segment: int = 128
    snr_split_hz: float = 0.125
    n_boot: int = 1000
    rho_min: float = 0.1


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: GenSpec = field(default_factory=GenSpec)
    net: NetSpec = field(default_factory=NetSpec)
    finetune: FitSpec = field(default_factory=FitSpec)
    ridge: RidgeSpec = field(default_factory=RidgeSpec)
    lags: LagSpec = field(default_factory=LagSpec)
    features: FeatSpec = field(default_factory=FeatSpec)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


_SECTIONS = {
    "dataset": GenSpec, "net": NetSpec, "finetune": FitSpec,
    "ridge": RidgeSpec, "lags": LagSpec, "features": FeatSpec,
    "analysis": AnalysisSpec,
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key == "seed":
            cfg.seed = int(value)
        elif key in _SECTIONS:
            section = getattr(cfg, key)
            for k, v in value.items():
                if not hasattr(section, k):
                    raise ConfigError(f"unknown config key {key}.{k}")
                setattr(section, k, v)
        else:
            raise ConfigError(f"unknown config section {key!r}")
    return cfg


def load_config(path=None, seed_override: int | None = None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = config_from_dict(raw)
    if seed_override is not None:
        cfg.seed = int(seed_override)
    return cfg


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_csv_cell(c) for c in row])


def _csv_cell(c):
    if isinstance(c, (np.floating, float)):
        return repr(float(c))
    if isinstance(c, (np.integer, int)):
        return int(c)
    return c


def _derive_seeds(master: int, n: int) -> list[int]:
    children = np.random.SeedSequence(master).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


class RunDir:
    """One output directory per command run, with a deterministic log."""

    def __init__(self, out, config: ExperimentConfig, force: bool = False):
        self.path = Path(out)
        if self.path.exists() and any(self.path.iterdir()) and not force:
            raise ConfigError(f"output dir {out} exists; pass --force to overwrite")
        self.path.mkdir(parents=True, exist_ok=True)
        self.lines: list[str] = []
        _write_json(self.path / "config_snapshot.json", config.to_dict())

    def log(self, msg: str) -> None:
        self.lines.append(msg)

    def finish(self) -> None:
        (self.path / "log.txt").write_text("".join(l + "\n" for l in self.lines))


# -- synthetic dataset -------------------------------------------------------


def _story_names(gen: GenSpec) -> dict:
    return {
        "train": [f"train_{i + 1:02d}" for i in range(gen.train_stories)],
        "val": ["val_01", "val_02"],
        "test": ["test_01"],
        "fast": ["fast_01"],
    }


def cmd_synth(config: ExperimentConfig, out, force: bool = False) -> Path:
    """Generate the full dataset: waveforms, responses, repeats, manifests."""
    gen = config.dataset
    run = RunDir(out, config, force)
    stories_dir = run.path / "stories"
    truth_dir = run.path / "truth"
    stories_dir.mkdir(exist_ok=True)
    truth_dir.mkdir(exist_ok=True)

    names = _story_names(gen)
    all_stories = names["train"] + names["val"] + names["test"] + names["fast"]
    seeds = _derive_seeds(config.seed, 4 * len(all_stories) + 1)
    rng_mix = np.random.default_rng(seeds[-1])
    mixing_slow = synth.make_mixing(gen.n_latents, gen.n_slow_channels, rng_mix)
    mixing_fast = synth.make_mixing(gen.n_latents, gen.n_fast_channels, rng_mix)
    hrf = synth.HRFParams(**gen.hrf)
    slow_spec = synth.NoiseSpec([tuple(b) for b in gen.slow_noise_bands])
    fast_spec = synth.NoiseSpec([tuple(b) for b in gen.fast_noise_bands])
    slow_names = [f"voxel_{i:03d}" for i in range(gen.n_slow_channels)]
    fast_names = [f"elec_{i:03d}" for i in range(gen.n_fast_channels)]
    delays = np.linspace(gen.fast_delay_range_s[0], gen.fast_delay_range_s[1],
                         gen.n_fast_channels)

    n_tensors = 0
    for si, name in enumerate(all_stories):
        s_lat, s_nui, s_wav, s_noise = seeds[4 * si:4 * si + 4]
        is_fast = name in names["fast"]
        duration = gen.fast_duration_s if is_fast else gen.story_duration_s
        latent = synth.make_latent(duration, gen.n_latents, s_lat,
                                   rate_hz=gen.latent_rate_hz,
                                   band_hz=tuple(gen.latent_band_hz))
        latent.mixing_slow = mixing_slow
        latent.mixing_fast = mixing_fast
        nuisance = None
        if gen.n_nuisance:
            nuisance = synth.make_latent(duration, gen.n_nuisance, s_nui,
                                         rate_hz=gen.latent_rate_hz,
                                         band_hz=tuple(gen.latent_band_hz))
        wave = synth.synth_waveform(latent, gen.carriers_hz, gen.wave_rate_hz,
                                    s_wav, nuisance, gen.nuisance_carriers_hz,
                                    gen.nuisance_gain)
        write_tensor(stories_dir / f"{name}.wave.nst", wave.values)
        DatasetManifest(
            name=f"{name}.wave", rate_hz=wave.rate_hz, role="stimulus_waveform",
            channel_names=["waveform"], tensor_path=f"{name}.wave.nst",
        ).save(stories_dir / f"{name}.wave.json")
        n_tensors += 1

        if is_fast:
            fast_clean = synth.render_fast(latent, delays, gen.fast_rate_hz,
                                           gen.fast_smooth_s)
            fast_noisy = synth.add_noise(fast_clean, fast_spec, s_noise)
            write_tensor(stories_dir / f"{name}.fast.nst", fast_noisy.values)
            write_tensor(truth_dir / f"{name}.fast_clean.nst", fast_clean.values)
            write_tensor(truth_dir / f"{name}.latent.nst", latent.values)
            DatasetManifest(
                name=f"{name}.fast", rate_hz=gen.fast_rate_hz, role="responses",
                channel_names=fast_names, tensor_path=f"{name}.fast.nst",
            ).save(stories_dir / f"{name}.fast.json")
            n_tensors += 1
            continue

        slow_clean = synth.render_slow(latent, hrf, gen.slow_rate_hz)
        if name in names["test"]:
            rep_seeds = _derive_seeds(s_noise, gen.test_repeats)
            reps = synth.make_repeats(slow_clean, gen.test_repeats, slow_spec,
                                      rep_seeds)
            rep_paths = []
            for ri, rep in enumerate(reps):
                rel = f"{name}.slow_rep{ri:02d}.nst"
                write_tensor(stories_dir / rel, rep.values)
                rep_paths.append(rel)
                n_tensors += 1
            mean = np.mean([r.values for r in reps], axis=0)
            write_tensor(stories_dir / f"{name}.slow.nst", mean)
            write_tensor(truth_dir / f"{name}.slow_clean.nst", slow_clean.values)
            manifest = DatasetManifest(
                name=f"{name}.slow", rate_hz=gen.slow_rate_hz, role="responses",
                channel_names=slow_names, tensor_path=f"{name}.slow.nst",
                repeats=rep_paths,
            )
        else:
            noisy = synth.add_noise(slow_clean, slow_spec, s_noise)
            write_tensor(stories_dir / f"{name}.slow.nst", noisy.values)
            manifest = DatasetManifest(
                name=f"{name}.slow", rate_hz=gen.slow_rate_hz, role="responses",
                channel_names=slow_names, tensor_path=f"{name}.slow.nst",
            )
        manifest.save(stories_dir / f"{name}.slow.json")
        n_tensors += 1

    _write_json(run.path / "dataset.json", {
        "seed": config.seed,
        "stories": names,
        "slow_channels": slow_names,
        "fast_channels": fast_names,
    })
    run.log(f"wrote {n_tensors} tensors for {len(all_stories)} stories")
    validate_dataset(run.path)
    run.log("validation passed")
    run.finish()
    return run.path


def validate_dataset(data_dir) -> dict:
    """Check every manifest and tensor in a dataset directory."""
    data = Path(data_dir)
    index_path = data / "dataset.json"
    if not index_path.exists():
        raise DataError(f"{data}: missing dataset.json")
    index = json.loads(index_path.read_text())
    stories_dir = data / "stories"
    n = 0
    for mf in sorted(stories_dir.glob("*.json")):
        manifest = load_manifest(mf)
        validate_manifest(manifest, stories_dir)
        n += 1
    if n == 0:
        raise DataError(f"{data}: no manifests found")
    index["n_manifests"] = n
    return index


class Dataset:
    """Loader bound to one dataset directory."""

    def __init__(self, data_dir):
        self.dir = Path(data_dir)
        self.index = validate_dataset(self.dir)
        self.stories = self.index["stories"]

    def _load(self, name: str, kind: str) -> tuple[DatasetManifest, TimeSeries]:
        manifest = load_manifest(self.dir / "stories" / f"{name}.{kind}.json")
        arr, _ = read_tensor(self.dir / "stories" / manifest.tensor_path)
        return manifest, TimeSeries(arr, manifest.rate_hz)

    def waveform(self, name: str) -> TimeSeries:
        return self._load(name, "wave")[1]

    def slow(self, name: str) -> TimeSeries:
        return self._load(name, "slow")[1]

    def fast(self, name: str) -> TimeSeries:
        return self._load(name, "fast")[1]

    def test_repeats(self) -> list[TimeSeries]:
        name = self.stories["test"][0]
        manifest = self._load(name, "slow")[0]
        if not manifest.repeats:
            raise DataError(f"test story {name} has no repeats")
        out = []
        for rel in manifest.repeats:
            arr, _ = read_tensor(self.dir / "stories" / rel)
            out.append(TimeSeries(arr, manifest.rate_hz))
        return out

    def test_mean(self) -> TimeSeries:
        name = self.stories["test"][0]
        manifest = self._load(name, "slow")[0]
        return average_repeats(manifest, self.dir / "stories")


# -- nets and checkpoints ----------------------------------------------------


def build_net(config: ExperimentConfig) -> netmod.FeatureNet:
    net_seed, proj_seed, _ = _derive_seeds(config.seed, 3)
    ncfg = netmod.FeatureNetConfig(seed=net_seed, **asdict(config.net))
    net = netmod.FeatureNet(ncfg, config.dataset.wave_rate_hz)
    net.init_projection(config.dataset.n_slow_channels, proj_seed)
    return net


def net_from_checkpoint(checkpoint_dir, wave_rate_hz: float,
                        n_channels: int) -> netmod.FeatureNet:
    """Rebuild the exact net a checkpoint was trained from and load it."""
    ck = resolve_checkpoint(checkpoint_dir)
    meta = json.loads((ck / "meta.json").read_text())
    ncfg = netmod.FeatureNetConfig(**meta["config"])
    net = netmod.FeatureNet(ncfg, wave_rate_hz)
    net.init_projection(n_channels, meta.get("proj_seed", meta["seed"]))
    netmod.load_checkpoint(net, ck)
    return net


def resolve_checkpoint(path) -> Path:
    """Accept either a checkpoint dir or a finetune run dir (selected epoch)."""
    p = Path(path)
    if (p / "meta.json").exists():
        return p
    summary = p / "finetune.json"
    if summary.exists():
        info = json.loads(summary.read_text())
        return p / "checkpoints" / f"epoch_{info['selected_epoch']:03d}"
    raise DataError(f"{path}: neither a checkpoint nor a finetune run")


# -- commands ----------------------------------------------------------------


def _train_pairs(data: Dataset, config: ExperimentConfig,
                 downsample_factor: int = 1, n_stories: int | None = None):
    names = data.stories["train"]
    limit = n_stories if n_stories is not None else config.finetune.stories
    if limit is not None:
        if limit < 1 or limit > len(names):
            raise ConfigError(f"stories={limit} outside 1..{len(names)}")
        names = names[:limit]
    pairs = []
    for name in names:
        resp = data.slow(name)
        if downsample_factor > 1:
            resp = analysis.downsample_responses(resp, downsample_factor)
        pairs.append((data.waveform(name), resp))
    return pairs, names


def _val_pairs(data: Dataset):
    return [(data.waveform(n), data.slow(n)) for n in data.stories["val"]]


def cmd_finetune(config: ExperimentConfig, data_dir, out, force: bool = False,
                 downsample_factor: int = 1, n_stories: int | None = None) -> Path:
    """Tune on slow responses, select the best epoch on validation."""
    data = Dataset(data_dir)
    run = RunDir(out, config, force)
    _, _, train_seed = _derive_seeds(config.seed, 3)
    net = build_net(config)
    base_hash = net.base_hash()
    train_pairs, used = _train_pairs(data, config, downsample_factor, n_stories)
    val_pairs = _val_pairs(data)
    fs = config.finetune
    stride = config.features.slow_stride_s
    delays = config.features.delays
    alphas = config.ridge.grid()
    run.log(f"fine-tuning on {len(train_pairs)} stories "
            f"(downsample_factor={downsample_factor})")

    # pretrained ridge on validation fixes the per-channel alphas (stage 1)
    X, Y, mask = netmod.build_slow_design(net, val_pairs, stride, delays)
    pre_sol = ridge.fit_ridge_cv(X, Y, alphas=alphas,
                                 n_folds=config.ridge.n_folds, valid=mask)
    run.log(f"pretrained val score {pre_sol.cv_score_per_channel.mean():.6f}")

    ck_root = run.path / "checkpoints"
    init_meta = {
        "epoch": 0, "loss_curve": [], "seed": train_seed,
        "proj_seed": _derive_seeds(config.seed, 3)[1],
        "config": net.config.to_dict(),
    }
    netmod.save_checkpoint(net, ck_root / "epoch_000", init_meta)
    ck_dirs, losses = netmod.finetune(
        net, train_pairs, stride, epochs=fs.epochs, batch_trs=fs.batch_trs,
        lr=fs.lr, seed=train_seed, loss_mode=fs.loss_mode, ckpt_root=ck_root,
    )
    for ck in ck_dirs:  # record the projection seed for exact rebuilds
        meta = json.loads((ck / "meta.json").read_text())
        meta["proj_seed"] = init_meta["proj_seed"]
        _write_json(ck / "meta.json", meta)
    if net.base_hash() != base_hash:
        raise DataError("base weights changed during fine-tuning")

    # selection considers the initial state too, so the chosen model never
    # underperforms the pretrained features on validation
    candidates = [ck_root / "epoch_000"] + list(ck_dirs)
    best, refit, scores = netmod.select_epoch(
        net, candidates, val_pairs, stride, delays, alphas,
        fixed_alpha_per_channel=pre_sol.alpha_per_channel,
        n_folds=config.ridge.n_folds,
    )
    refit.save(run.path / "selected_ridge")
    _write_json(run.path / "finetune.json", {
        "train_stories": used,
        "downsample_factor": downsample_factor,
        "loss_curve": losses,
        "epoch_val_scores": scores,
        "selected_epoch": best,
        "selected_val_score": scores[best],
        "pretrained_val_score": float(pre_sol.cv_score_per_channel.mean()),
        "base_hash": base_hash,
    })
    run.log(f"selected epoch {best} (val score {scores[best]:.6f})")
    run.finish()
    return run.path


def _net_for(config: ExperimentConfig, data: Dataset, checkpoint):
    if checkpoint is None:
        return build_net(config), "pretrained"
    net = net_from_checkpoint(checkpoint, config.dataset.wave_rate_hz,
                              config.dataset.n_slow_channels)
    return net, str(checkpoint)


def cmd_encode_slow(config: ExperimentConfig, data_dir, out, checkpoint=None,
                    force: bool = False) -> Path:
    """Slow-response encoding: fit on train stories, score the test story."""
    data = Dataset(data_dir)
    run = RunDir(out, config, force)
    net, source = _net_for(config, data, checkpoint)
    stride = config.features.slow_stride_s
    delays = config.features.delays
    train_pairs, used = _train_pairs(data, config)
    X, Y, mask = netmod.build_slow_design(net, train_pairs, stride, delays)
    sol = ridge.fit_ridge_cv(X, Y, alphas=config.ridge.grid(),
                             n_folds=config.ridge.n_folds, valid=mask)
    test_name = data.stories["test"][0]
    test_pair = [(data.waveform(test_name), data.test_mean())]
    Xt, Yt, mt = netmod.build_slow_design(net, test_pair, stride, delays)
    pred = ridge.predict(sol, Xt[mt])
    scores = ridge.pearson_scores(pred, Yt[mt])
    sol.save(run.path / "ridge")
    write_tensor(run.path / "scores.nst", scores)
    _write_json(run.path / "encode_slow.json", {
        "checkpoint": source,
        "train_stories": used,
        "test_story": test_name,
        "mean_score": float(scores.mean()),
        "cv_mean_score": float(sol.cv_score_per_channel.mean()),
    })
    _write_csv(run.path / "scores.csv", ["channel", "score"],
               [(i, s) for i, s in enumerate(scores)])
    run.log(f"slow encoding mean score {scores.mean():.6f} ({source})")
    run.finish()
    return run.path


def cmd_encode_fast(config: ExperimentConfig, data_dir, out, checkpoint=None,
                    force: bool = False) -> Path:
    """Fast-response encoding: lag sweep with CV on the fast story."""
    data = Dataset(data_dir)
    run = RunDir(out, config, force)
    net, source = _net_for(config, data, checkpoint)
    name = data.stories["fast"][0]
    wave = data.waveform(name)
    resp = data.fast(name)
    feats = net.extract_features(wave, config.features.fast_stride_s)
    n = min(feats.n_samples, resp.n_samples)
    feats = embed.FeatureMatrix(feats.values[:n], feats.rate_hz)
    resp = TimeSeries(resp.values[:, :n], resp.rate_hz)
    lags = embed.lag_grid(config.lags.lo_s, config.lags.hi_s, config.lags.count,
                          config.dataset.fast_rate_hz)
    sweep = ridge.lag_sweep(feats, resp, lags, alphas=config.ridge.grid(),
                            n_folds=config.ridge.n_folds)
    resid, valid = ridge.cv_residuals_at_best_lags(
        feats, resp, sweep, alphas=config.ridge.grid(),
        n_folds=config.ridge.n_folds)
    sweep.save(run.path / "lag_sweep")
    write_tensor(run.path / "scores.nst", sweep.best_score_per_channel)
    write_tensor(run.path / "residuals.nst", resid.values)
    _write_json(run.path / "encode_fast.json", {
        "checkpoint": source,
        "fast_story": name,
        "rate_hz": resp.rate_hz,
        "mean_score": float(sweep.best_score_per_channel.mean()),
        "valid_rows": int(valid.sum()),
        "median_best_lag": float(np.median(sweep.best_lag_per_channel)),
    })
    _write_csv(run.path / "scores.csv", ["channel", "best_lag", "score"],
               [(i, int(l), s) for i, (l, s) in
                enumerate(zip(sweep.best_lag_per_channel,
                              sweep.best_score_per_channel))])
    run.log(f"fast encoding mean score {sweep.best_score_per_channel.mean():.6f} "
            f"({source})")
    run.finish()
    return run.path


def _load_fast_run(run_dir):
    p = Path(run_dir)
    info = json.loads((p / "encode_fast.json").read_text())
    resid, _ = read_tensor(p / "residuals.nst")
    scores, _ = read_tensor(p / "scores.nst")
    return info, TimeSeries(resid, info["rate_hz"]), scores


def cmd_spectrum(config: ExperimentConfig, run_a, run_b, out,
                 force: bool = False) -> Path:
    """Residual-PSD change between two fast-encoding runs (b minus a)."""
    run = RunDir(out, config, force)
    info_a, resid_a, scores_a = _load_fast_run(run_a)
    info_b, resid_b, scores_b = _load_fast_run(run_b)
    ana = config.analysis
    delta = analysis.residual_psd_delta(resid_a, resid_b, ana.psd_segment,
                                        ana.overlap, ana.split_hz)
    tt = analysis.paired_ttest(scores_b, scores_a)
    write_tensor(run.path / "delta_psd.nst", delta.delta)
    _write_json(run.path / "spectrum.json", {
        "run_a": info_a["checkpoint"],
        "run_b": info_b["checkpoint"],
        "split_hz": ana.split_hz,
        "mean_pct_below": float(delta.pct_below.mean()),
        "mean_pct_above": float(delta.pct_above.mean()),
        "score_ttest": {"t": tt.t, "p": tt.p, "dof": tt.dof,
                        "degenerate": tt.degenerate},
    })
    _write_csv(run.path / "spectrum_bands.csv",
               ["channel", "pct_below", "pct_above"],
               [(i, b, a) for i, (b, a) in
                enumerate(zip(delta.pct_below, delta.pct_above))])
    run.log(f"residual power change: {delta.pct_below.mean():+.4f}% below "
            f"{ana.split_hz} Hz, {delta.pct_above.mean():+.4f}% above")
    run.finish()
    return run.path


def cmd_snr(config: ExperimentConfig, data_dir, out, force: bool = False) -> Path:
    """Repeat-based SNR spectrum of the test story's slow responses."""
    data = Dataset(data_dir)
    run = RunDir(out, config, force)
    reps = data.test_repeats()
    ana = config.analysis
    spec = analysis.snr_spectrum(reps, ana.snr_segment, ana.overlap)
    nyq = reps[0].rate_hz / 2
    below = spec.band_mean(0.0, ana.snr_split_hz)
    above = spec.band_mean(ana.snr_split_hz, nyq)
    overall = spec.band_mean(0.0, nyq)
    write_tensor(run.path / "snr.nst", spec.snr)
    _write_json(run.path / "snr.json", {
        "n_repeats": spec.n_repeats,
        "split_hz": ana.snr_split_hz,
        "mean_snr_below": float(below.mean()),
        "mean_snr_above": float(above.mean()),
        "mean_snr_overall": float(overall.mean()),
    })
    _write_csv(run.path / "snr_bands.csv",
               ["channel", "snr_below", "snr_above", "snr_overall"],
               [(i, b, a, o) for i, (b, a, o) in
                enumerate(zip(below, above, overall))])
    run.log(f"mean SNR {below.mean():.4f} below {ana.snr_split_hz} Hz, "
            f"{above.mean():.4f} above")
    run.finish()
    return run.path


def cmd_scaling(config: ExperimentConfig, data_dir, counts, out,
                force: bool = False) -> Path:
    """Fine-tune on increasing story counts; fit the per-channel scaling law."""
    counts = sorted(int(c) for c in counts)
    if len(counts) < 2:
        raise ConfigError("need at least 2 story counts")
    data = Dataset(data_dir)
    run = RunDir(out, config, force)
    base_dir = cmd_encode_fast(config, data_dir, run.path / "baseline_fast",
                               checkpoint=None, force=True)
    _, _, baseline = _load_fast_run(base_dir)
    scores = {}
    for n in counts:
        ft = cmd_finetune(config, data_dir, run.path / f"finetune_n{n:02d}",
                          force=True, n_stories=n)
        enc = cmd_encode_fast(config, data_dir, run.path / f"fast_n{n:02d}",
                              checkpoint=ft, force=True)
        _, _, scores[n] = _load_fast_run(enc)
    fit = analysis.fit_scaling(scores, baseline)
    keep = analysis.threshold_channels(baseline, config.analysis.rho_min)
    se_per_n = {
        n: analysis.bootstrap_se_mean(scores[n] - baseline,
                                      config.analysis.n_boot, config.seed)
        for n in counts
    }
    write_tensor(run.path / "slopes.nst", fit.slope)
    _write_json(run.path / "scaling.json", {
        "story_counts": counts,
        "mean_slope": float(fit.slope.mean()),
        "mean_slope_thresholded": float(fit.slope[keep].mean()) if keep.size else 0.0,
        "n_thresholded": int(keep.size),
        "n_positive_slope_thresholded": int((fit.slope[keep] > 0).sum()),
        "mean_delta_per_count": {str(n): float((scores[n] - baseline).mean())
                                 for n in counts},
        "bootstrap_se_per_count": {str(n): se_per_n[n] for n in counts},
    })
    _write_csv(run.path / "scaling.csv",
               ["channel", "baseline", "slope", "intercept", "r2"],
               [(i, baseline[i], fit.slope[i], fit.intercept[i], fit.r2[i])
                for i in range(baseline.size)])
    run.log(f"scaling fit over N={counts}: mean slope {fit.slope.mean():+.6f}")
    run.finish()
    return run.path


def cmd_report(run_dir, out=None) -> Path:
    """Collect a run directory's JSON summaries into CSV tables."""
    src = Path(run_dir)
    dest = Path(out) if out else src / "report"
    dest.mkdir(parents=True, exist_ok=True)
    summaries = sorted(src.rglob("*.json"))
    rows = []
    for path in summaries:
        if path.name in ("config_snapshot.json", "meta.json", "solution.json",
                         "lag_sweep.json", "dataset.json"):
            continue
        info = json.loads(path.read_text())
        if not isinstance(info, dict):
            continue
        for key, value in sorted(info.items()):
            if isinstance(value, (int, float, str, bool)):
                rows.append((str(path.relative_to(src)), key, value))
    if not rows:
        raise DataError(f"{run_dir}: no summaries found to report")
    _write_csv(dest / "summary.csv", ["source", "key", "value"], rows)
    for csvfile in sorted(src.rglob("*.csv")):
        if csvfile.parent != dest:
            target = dest / csvfile.name
            if not target.exists():
                target.write_bytes(csvfile.read_bytes())
    return dest
