"""Command-line interface: ``treegan train|generate|evaluate|interpolate|parts|fpd-stats``.

Every option can also come from a ``--config`` file of ``KEY=VALUE`` lines
(``#`` starts a comment); flags override file values. Each command writes the
effective configuration to ``config.txt`` in its output directory, and that
file can be passed back with ``--config`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .critic import CriticConfig
from .data import FormatError, PointCloud, load_dataset, read_cloud, split_dataset, write_pcb, write_ply
from .metrics import (
    METRICS,
    FeatureExtractor,
    evaluate,
    extract_stats,
    fpd,
    read_fpds,
    stats_from_features,
    train_feature_extractor,
    write_fpds,
)
from .semantics import interpolate, parse_selection, part_labels
from .training import (
    CheckpointError,
    NumericError,
    TelemetryWriter,
    TrainConfig,
    Trainer,
    load_checkpoint,
    save_checkpoint,
)
from .treegcn import ConfigError, GeneratorConfig, generate

log = logging.getLogger("treegan")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SIX_ALPHAS = "0,0.2,0.4,0.6,0.8,1"


def _ints(s: str) -> list[int]:
    return [int(t) for t in str(s).split(",") if t.strip()]


def _floats(s: str) -> list[float]:
    return [float(t) for t in str(s).split(",") if t.strip()]


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# (name, type, default, help); names become --flags with dashes
OPTIONS = {
    "train": [
        ("data", str, "synth:sphere,cube,torus,cylinder", "synth:kind,... or a directory/file of PCB clouds"),
        ("points", int, 2048, "points per cloud"),
        ("per_class", int, 200, "synthetic clouds per class"),
        ("noise", float, 0.02, "synthetic surface jitter bound"),
        ("degrees", str, "1,2,2,2,2,2,64", "branching degree per layer"),
        ("features", str, "96,256,256,256,128,128,128,3", "feature width per layer, latent first"),
        ("support", int, 10, "K supports in the loop term"),
        ("slope", float, 0.2, "LeakyReLU negative slope"),
        ("branch_first", _bool, True, "branch before convolving inside each layer"),
        ("critic_point_widths", str, "3,64,128,256,512", "critic per-point widths"),
        ("critic_head_widths", str, "512,128,64,1", "critic head widths"),
        ("steps", int, 2000, "generator steps"),
        ("batch_size", int, 16, "clouds per batch"),
        ("critic_steps", int, 5, "critic updates per generator update"),
        ("lambda_gp", float, 10.0, "gradient penalty weight"),
        ("lr", float, 1e-4, "Adam learning rate"),
        ("beta1", float, 0.0, "Adam beta1"),
        ("beta2", float, 0.99, "Adam beta2"),
        ("seed", int, 0, "random seed"),
        ("precision", str, "float32", "float32 or float64"),
        ("eval_every", int, 0, "FPD every N generator steps (0 disables)"),
        ("extractor_epochs", int, 10, "feature extractor epochs when FPD is tracked"),
        ("sample_every", int, 0, "write a sample PLY every N steps (0: final only)"),
        ("out", str, "run", "output directory"),
    ],
    "generate": [
        ("checkpoint", str, None, "trained checkpoint"),
        ("count", int, 1, "number of clouds"),
        ("seed", int, 0, "latent seed"),
        ("format", str, "ply", "ply or pcb"),
        ("out", str, "generated", "output directory"),
    ],
    "evaluate": [
        ("ref", str, None, "reference clouds (PCB/PLY path or synth:...)"),
        ("gen", str, None, "generated clouds (PCB/PLY path)"),
        ("checkpoint", str, None, "generate the compared set from this checkpoint instead of --gen"),
        ("count", int, 100, "clouds to generate from --checkpoint"),
        ("seed", int, 0, "latent seed for --checkpoint"),
        ("points", int, 2048, "points per cloud for synth references"),
        ("per_class", int, 25, "clouds per class for synth references"),
        ("metrics", str, ",".join(METRICS), "comma-separated metric names"),
        ("extractor", str, None, "feature extractor for FPD"),
        ("ref_stats", str, None, "cached FPDS statistics of the reference set"),
        ("gen_stats", str, None, "cached FPDS statistics of the generated set"),
        ("resolution", int, 28, "JSD grid resolution"),
        ("emd_iterations", int, 200, "Sinkhorn iterations"),
        ("out", str, "evaluation", "output directory"),
    ],
    "interpolate": [
        ("checkpoint", str, None, "trained checkpoint"),
        ("seeds", str, "0,1", "two latent seeds"),
        ("alphas", str, SIX_ALPHAS, "interpolation weights in [0, 1]"),
        ("out", str, "interpolation", "output directory"),
    ],
    "parts": [
        ("checkpoint", str, None, "trained checkpoint"),
        ("select", str, None, "selections layer:index[,index...]; separate several with ';'"),
        ("seeds", str, "0", "latent seeds, one PLY each"),
        ("out", str, "parts", "output directory"),
    ],
    "fpd-stats": [
        ("clouds", str, None, "clouds to summarize (PCB/PLY path)"),
        ("features", str, None, "externally computed per-cloud features (.npy or .csv, N x F)"),
        ("extractor", str, None, "feature extractor for --clouds"),
        ("out", str, "stats.fpds", "output FPDS file"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treegan", description="Tree-structured GCN point-cloud GAN toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="KEY=VALUE config file")
        for name, typ, _default, help_ in opts:
            flag = "--" + name.replace("_", "-")
            if cmd == "parts" and name == "select":
                p.add_argument(flag, action="append", help=help_)
            else:
                p.add_argument(flag, type=str, default=None, help=help_)
    return parser


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected KEY=VALUE, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(cmd: str, args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags, converting and rejecting unknown keys."""
    opts = {name: (typ, default) for name, typ, default, _ in OPTIONS[cmd]}
    raw: dict = {}
    if args.config:
        file_vals = read_config_file(args.config)
        unknown = sorted(set(file_vals) - set(opts))
        if unknown:
            raise ConfigError(f"unknown config keys for {cmd}: {', '.join(unknown)}")
        raw.update(file_vals)
    for name in opts:
        val = getattr(args, name, None)
        if val is not None:
            raw[name] = ";".join(val) if isinstance(val, list) else val
    cfg = {}
    for name, (typ, default) in opts.items():
        val = raw.get(name, default)
        try:
            cfg[name] = typ(val) if val is not None else None
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}: {val!r} ({exc})") from exc
    return cfg


def echo_config(cfg: dict, outdir: Path) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in cfg.items() if v is not None]
    (outdir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _require(cfg: dict, *names: str) -> None:
    missing = [n for n in names if not cfg.get(n)]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _latents(seed: int, count: int, dim: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((count, dim))


def cmd_train(cfg: dict) -> int:
    gen_cfg = GeneratorConfig(degrees=_ints(cfg["degrees"]), feature_dims=_ints(cfg["features"]),
                              support=cfg["support"], latent_dim=_ints(cfg["features"])[0],
                              slope=cfg["slope"], branch_first=cfg["branch_first"])
    gen_cfg.validate(n_points=cfg["points"])
    pw, hw = _ints(cfg["critic_point_widths"]), _ints(cfg["critic_head_widths"])
    critic_cfg = CriticConfig(pw, hw, cfg["slope"])
    train_cfg = TrainConfig(lambda_gp=cfg["lambda_gp"], critic_steps=cfg["critic_steps"],
                            batch_size=cfg["batch_size"], total_gen_steps=cfg["steps"], seed=cfg["seed"],
                            lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"],
                            eval_every=cfg["eval_every"], precision=cfg["precision"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    ds = load_dataset(cfg["data"], n_points=cfg["points"], per_class=cfg["per_class"],
                      seed=cfg["seed"], noise_sigma=cfg["noise"])
    if ds.n_points != cfg["points"]:
        raise ConfigError(f"dataset clouds have {ds.n_points} points, --points is {cfg['points']}")
    evaluator = None
    if cfg["eval_every"] > 0:
        if len(set(ds.class_ids().tolist())) < 2:
            raise ConfigError("FPD tracking needs a labelled dataset with at least 2 classes")
        fx = train_feature_extractor(ds, epochs=cfg["extractor_epochs"], seed=cfg["seed"])
        fx.save(out / "extractor.tgn")
        log.info("feature extractor held-out accuracy %.3f", fx.accuracy or float("nan"))
        _, held = split_dataset(ds, 0.8, cfg["seed"])
        ref_stats = extract_stats(held.clouds, fx)
        write_fpds(out / "ref.fpds", ref_stats)
        z_eval = _latents(cfg["seed"] + 1, max(len(held), 2), gen_cfg.latent_dim)

        def evaluator(G):
            clouds, _ = generate(G, z_eval)
            return fpd(ref_stats, stats_from_features(fx.features(clouds)))

    trainer = Trainer(ds.points(), gen_cfg, critic_cfg, train_cfg, evaluator)
    samples = out / "samples"
    samples.mkdir(exist_ok=True)
    z_sample = _latents(cfg["seed"], 1, gen_cfg.latent_dim)[0]

    def write_sample(step: int) -> None:
        cloud, _ = generate(trainer.G, z_sample)
        write_ply(samples / f"step_{step:06d}.ply", PointCloud(cloud))

    def on_record(rec) -> None:
        if cfg["sample_every"] and rec.step % cfg["sample_every"] == 0:
            write_sample(rec.step)

    writer = TelemetryWriter(out / "telemetry.csv")
    try:
        trainer.run(cfg["steps"], telemetry=writer, callback=on_record)
    finally:
        writer.close()
    write_sample(trainer.step)
    save_checkpoint(out / "checkpoint.tgn", trainer.checkpoint())
    log.info("wrote %s", out / "checkpoint.tgn")
    return EXIT_OK


def cmd_generate(cfg: dict) -> int:
    _require(cfg, "checkpoint")
    if cfg["format"] not in ("ply", "pcb"):
        raise ConfigError(f"--format must be ply or pcb, got {cfg['format']!r}")
    G = load_checkpoint(cfg["checkpoint"]).generator()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    clouds, _ = generate(G, _latents(cfg["seed"], cfg["count"], G.config.latent_dim))
    pcs = [PointCloud(c) for c in clouds]
    if cfg["format"] == "pcb":
        write_pcb(out / "clouds.pcb", pcs)
    else:
        for i, pc in enumerate(pcs):
            write_ply(out / f"cloud_{i:04d}.ply", pc)
    return EXIT_OK


def _load_clouds(source: str, cfg: dict) -> list[PointCloud]:
    if source.startswith("synth:"):
        return load_dataset(source, n_points=cfg["points"], per_class=cfg["per_class"], seed=cfg["seed"]).clouds
    return read_cloud(source)


def cmd_evaluate(cfg: dict) -> int:
    metrics = [m.strip().lower() for m in cfg["metrics"].split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ConfigError(f"unknown metrics {bad}; choose from {list(METRICS)}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    ref_stats = read_fpds(cfg["ref_stats"]) if cfg["ref_stats"] else None
    gen_stats = read_fpds(cfg["gen_stats"]) if cfg["gen_stats"] else None
    need_clouds = any(m != "fpd" for m in metrics) or ref_stats is None or gen_stats is None
    extractor = FeatureExtractor.load(cfg["extractor"]) if cfg["extractor"] else None
    if "fpd" in metrics and extractor is None and (ref_stats is None or gen_stats is None):
        raise ConfigError("FPD requested but no --extractor (or both --ref-stats and --gen-stats) given")
    ref = gen = []
    if need_clouds:
        _require(cfg, "ref")
        ref = _load_clouds(cfg["ref"], cfg)
        if cfg["checkpoint"]:
            G = load_checkpoint(cfg["checkpoint"]).generator()
            clouds, _ = generate(G, _latents(cfg["seed"], cfg["count"], G.config.latent_dim))
            gen = [PointCloud(c) for c in clouds]
        else:
            _require(cfg, "gen")
            gen = _load_clouds(cfg["gen"], cfg)
    if "fpd" in metrics:
        if ref_stats is None:
            ref_stats = extract_stats(ref, extractor)
            write_fpds(out / "ref.fpds", ref_stats)
        if gen_stats is None:
            gen_stats = extract_stats(gen, extractor)
            write_fpds(out / "gen.fpds", gen_stats)
    report = evaluate(ref, gen, metrics, extractor, ref_stats, gen_stats, cfg["resolution"],
                      cfg["emd_iterations"], ref_id=cfg["ref"] or cfg["ref_stats"] or "ref",
                      gen_id=cfg["gen"] or cfg["checkpoint"] or cfg["gen_stats"] or "gen")
    report.write_csv(out / "report.csv")
    print(report.table())
    return EXIT_OK


def cmd_interpolate(cfg: dict) -> int:
    _require(cfg, "checkpoint")
    seeds = _ints(cfg["seeds"])
    if len(seeds) != 2:
        raise ConfigError("--seeds needs exactly two seeds")
    alphas = _floats(cfg["alphas"])
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ConfigError("alphas must lie in [0, 1]")
    G = load_checkpoint(cfg["checkpoint"]).generator()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    z1, z2 = (_latents(s, 1, G.config.latent_dim)[0] for s in seeds)
    for k, cloud in enumerate(interpolate(G, z1, z2, alphas)):
        write_ply(out / f"interp_{k:02d}.ply", PointCloud(cloud))
    return EXIT_OK


def cmd_parts(cfg: dict) -> int:
    _require(cfg, "checkpoint", "select")
    G = load_checkpoint(cfg["checkpoint"]).generator()
    degrees = G.config.degrees
    try:
        selections = [parse_selection(s, degrees) for s in cfg["select"].split(";") if s.strip()]
    except (ValueError, IndexError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    labels = part_labels(G.config.n_points, selections)
    for s in _ints(cfg["seeds"]):
        cloud, _ = generate(G, _latents(s, 1, G.config.latent_dim)[0])
        write_ply(out / f"parts_seed{s}.ply", PointCloud(cloud, labels))
    return EXIT_OK


def cmd_fpd_stats(cfg: dict) -> int:
    if bool(cfg["clouds"]) == bool(cfg["features"]):
        raise ConfigError("give exactly one of --clouds or --features")
    if cfg["features"]:
        path = Path(cfg["features"])
        feats = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, delimiter=",", ndmin=2)
        stats = stats_from_features(feats)
    else:
        _require(cfg, "extractor")
        stats = extract_stats(read_cloud(cfg["clouds"]), FeatureExtractor.load(cfg["extractor"]))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_fpds(out, stats)
    echo_config(cfg, out.parent)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "interpolate": cmd_interpolate,
    "parts": cmd_parts,
    "fpd-stats": cmd_fpd_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, IndexError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
