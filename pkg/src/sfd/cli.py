"""``sfd`` command line: synth, extract, pretrain, finetune and eval.

Every subcommand reads one shared configuration schema of flat dotted keys
(``"pretrain.optim.lr_max": 1e-3``). Values come from the built-in defaults,
then an optional ``--config`` JSON file, then command-line flags. The
effective configuration is written to ``<out>/<subcommand>_config.json`` and
can be passed back through ``--config``.

Exit codes: 0 success, 2 configuration error, 3 asset or I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from sfd.exceptions import AssetError, ConfigError, NumericalError
from sfd.features import FeatureKind, SpatialFeatureSeq, buffer_features, write_feature_cache
from sfd.scene import (
    BUILTIN_NOISE_TYPES,
    Assets,
    SynthConfig,
    child_rng,
    read_manifest,
    render_dataset,
    sample_scene,
    synthetic_speech,
)
from sfd.signal import AudioBuffer, StftConfig, read_wav, write_wav

log = logging.getLogger("sfd")

EXIT_OK, EXIT_CONFIG, EXIT_ASSET, EXIT_NUMERICAL = 0, 2, 3, 4
SUBCOMMANDS = ("synth", "extract", "pretrain", "finetune", "eval")


def _flatten(prefix: str, obj) -> dict:
    out = {}
    for key, value in obj.items():
        name = f"{prefix}.{key}"
        if isinstance(value, dict):
            out.update(_flatten(name, value))
        else:
            out[name] = value
    return out


def default_config() -> dict:
    """The complete flat configuration schema with its defaults."""
    from sfd.training import FinetuneConfig, PretrainConfig, config_to_dict

    pre = config_to_dict(PretrainConfig())
    fin = config_to_dict(FinetuneConfig())
    # these have CLI-friendly spellings below; the seed is global
    for key in ("snr_grid", "noise_types", "target_kind", "seed"):
        pre.pop(key)
    for key in ("snr_grid", "noise_types", "init", "input_kind", "seed"):
        fin.pop(key)
    cfg = {
        "seed": 0,
        "out": "out",
        "jobs": 1,
        "verbose": 0,
        "assets": None,
        "synth.count": 10,
        "synth.sources": None,
        "synth.duration": 2.0,
        "synth.azimuth_fixed": None,
        "synth.snr_grid": "-20:20:5",
        "synth.noise_types": ",".join(BUILTIN_NOISE_TYPES),
        "synth.split": "train",
        "synth.use_rirs": True,
        "synth.wav_format": "float32",
        "extract.data": None,
        "extract.kind": "stft-ri",
        "extract.max_lag": 14,
        "extract.which": "augmented",
        "pretrain.corpus": None,
        "pretrain.corpus_minutes": 20.0,
        "pretrain.target": "cps-phase",
        "pretrain.snr_grid": "-20:20:5",
        "pretrain.noise_types": ",".join(BUILTIN_NOISE_TYPES),
        "finetune.data": None,
        "finetune.validation_data": None,
        "finetune.init": "random",
        "finetune.input": "stft-ri",
        "finetune.snr_grid": "-20:20:5",
        "finetune.noise_types": ",".join(BUILTIN_NOISE_TYPES),
        "eval.data": None,
        "eval.baseline": None,
        "eval.models": None,
        "eval.snr_grid": "-20:20:10,clean",
        "eval.noise_types": ",".join(BUILTIN_NOISE_TYPES),
        "eval.format": "csv,md,svg",
        "eval.bootstrap": 1000,
    }
    cfg.update(_flatten("pretrain", pre))
    cfg.update(_flatten("finetune", fin))
    return cfg


_NULLABLE_FLOATS = {"synth.azimuth_fixed"}


def _coerce(key: str, value, default):
    if key in _NULLABLE_FLOATS and value is not None:
        default = 0.0
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            as_float = float(value)
            if as_float != int(as_float):
                raise ValueError(value)
            return int(as_float)
        if isinstance(default, float):
            return float(value)
        return str(value) if not isinstance(value, str) else value
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for {key}") from None


def load_config(path=None, overrides: dict | None = None) -> dict:
    defaults = default_config()
    cfg = dict(defaults)
    layers = []
    if path:
        try:
            layers.append(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise AssetError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    layers.append(overrides or {})
    for layer in layers:
        for key, value in layer.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value, defaults[key])
    return cfg


def parse_snr_grid(text) -> tuple:
    """``"-20:20:5"`` ranges, comma lists and ``clean``; returns floats and ``"clean"``."""
    if isinstance(text, (list, tuple)):
        parts = [str(p) for p in text]
    else:
        parts = [p.strip() for p in str(text).split(",") if p.strip()]
    grid = []
    for part in parts:
        if part.lower() in ("clean", "none", "inf"):
            grid.append("clean")
        elif ":" in part:
            try:
                lo, hi, step = (float(v) for v in part.split(":"))
            except ValueError:
                raise ConfigError(f"bad SNR range {part!r}") from None
            if step <= 0 or hi < lo:
                raise ConfigError(f"bad SNR range {part!r}")
            grid.extend(float(v) for v in np.arange(lo, hi + step / 2, step))
        else:
            try:
                grid.append(float(part))
            except ValueError:
                raise ConfigError(f"bad SNR value {part!r}") from None
    if not grid:
        raise ConfigError("empty SNR grid")
    return tuple(grid)


def _split_list(text) -> list:
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        return list(text)
    return [p.strip() for p in str(text).split(",") if p.strip()]


def _assets(cfg) -> Assets:
    if cfg["assets"]:
        root = Path(cfg["assets"])
        if not root.is_dir():
            raise AssetError(f"asset directory {root} not found", missing=[str(root)])
        return Assets.from_directory(root)
    return Assets.builtin()


def _echo(cfg: dict, out: Path, name: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}_config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path


def _section(cfg: dict, prefix: str) -> dict:
    """Nested dict of the keys under ``prefix.``."""
    out = {}
    for key, value in cfg.items():
        if not key.startswith(prefix + "."):
            continue
        parts = key[len(prefix) + 1:].split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _numeric_grid(text) -> tuple:
    return tuple(float("inf") if s == "clean" else s for s in parse_snr_grid(text))


def _require(cfg, key):
    if not cfg[key]:
        raise ConfigError(f"{key} is required")
    return cfg[key]


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_synth(cfg: dict) -> Path:
    out = Path(cfg["out"])
    assets = _assets(cfg)
    split = cfg["synth.split"]
    count = cfg["synth.count"]
    if count < 1:
        raise ConfigError("synth.count must be positive")
    if cfg["synth.sources"]:
        src_dir = Path(cfg["synth.sources"])
        pool = sorted(src_dir.glob("*.wav")) if src_dir.is_dir() else []
        if not pool:
            raise AssetError(f"no source WAV files in {src_dir}", missing=[str(src_dir)])
        sources = [pool[i % len(pool)] for i in range(count)]
    else:
        src_out = out / "sources"
        src_out.mkdir(parents=True, exist_ok=True)
        sources = []
        for i in range(count):
            rng = child_rng("synth-source", cfg["seed"], i)
            x = synthetic_speech(cfg["synth.duration"], rng, assets.sample_rate)
            sources.append(write_wav(src_out / f"src_{i:05d}.wav",
                                     AudioBuffer(x, assets.sample_rate)))
    rirs = tuple(sorted(assets.rirs)) + (None,) if cfg["synth.use_rirs"] else (None,)
    synth = SynthConfig(tuple(_split_list(cfg["synth.noise_types"])) or ("none",), rirs,
                        tuple(assets.subjects(split)), _numeric_grid(cfg["synth.snr_grid"]),
                        cfg["synth.azimuth_fixed"])
    rng = child_rng("synth-scenes", cfg["seed"])
    specs = [sample_scene(rng, synth) for _ in sources]
    missing = assets.with_split(split).missing(specs)
    if missing:
        raise AssetError(f"unresolvable assets: {', '.join(missing)}", missing=missing)
    manifest = render_dataset(zip(sources, specs), out, assets.with_split(split),
                              jobs=cfg["jobs"], wav_format=cfg["synth.wav_format"])
    failed = [e for e in read_manifest(manifest) if e.status != "ok"]
    if failed:
        log.warning("%d of %d utterances failed to render", len(failed), len(specs))
    print(f"wrote {len(specs)} scenes to {manifest}")
    return manifest


def cmd_extract(cfg: dict) -> list:
    manifest = Path(_require(cfg, "extract.data"))
    kind = FeatureKind.parse(cfg["extract.kind"])
    max_lag = cfg["extract.max_lag"]
    which = cfg["extract.which"]
    if which not in ("augmented", "clean"):
        raise ConfigError("extract.which must be 'augmented' or 'clean'")
    out = Path(cfg["out"]) / "features"
    out.mkdir(parents=True, exist_ok=True)
    entries = [e for e in read_manifest(manifest) if e.status == "ok"]
    stft = StftConfig()

    def work(entry):
        path = out / f"{entry.id}.{kind.value}.sfdf"
        if path.exists():
            return path, False
        buf = read_wav(getattr(entry, which))
        frames = buffer_features(buf, kind, stft, max_lag)
        lag = max_lag if kind in (FeatureKind.GCC, FeatureKind.GCC_PHAT) else None
        write_feature_cache(path, SpatialFeatureSeq(frames, kind), stft, buf.sample_rate, lag)
        return path, True

    if cfg["jobs"] > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
            results = list(pool.map(work, entries))
    else:
        results = [work(e) for e in entries]
    skipped = sum(1 for _, fresh in results if not fresh)
    if skipped:
        print(f"skipped {skipped} cached feature files in {out}")
    print(f"{len(results) - skipped} feature files written to {out}")
    return [p for p, _ in results]


def _training_threads():
    import torch

    torch.set_num_threads(1)


def cmd_pretrain(cfg: dict):
    from sfd.training import (PretrainConfig, config_from_dict, load_corpus, pretrain,
                              synthetic_corpus)

    _training_threads()
    out = Path(cfg["out"])
    section = _section(cfg, "pretrain")
    corpus_dir = section.pop("corpus")
    minutes = section.pop("corpus_minutes")
    section["target_kind"] = section.pop("target")
    section["snr_grid"] = _numeric_grid(section["snr_grid"])
    section["noise_types"] = tuple(_split_list(section["noise_types"]))
    section["seed"] = cfg["seed"]
    config = config_from_dict(PretrainConfig, section)
    if corpus_dir:
        paths = sorted(Path(corpus_dir).glob("*.wav"))
        if not paths:
            raise AssetError(f"no WAV files in {corpus_dir}", missing=[str(corpus_dir)])
        corpus = load_corpus(paths)
    else:
        corpus = synthetic_corpus(minutes, seed=cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = pretrain(corpus, _assets(cfg), config, log_path=out / "pretrain_log.jsonl")
    path = ckpt.save(out / "pretrain.bin")
    m = ckpt.header["metrics"]
    print(f"pretrain: val MSE {m['init_val_loss']:.4f} -> {m['best_val_loss']:.4f} "
          f"(step {m['best_step']}); checkpoint {path}")
    return path


def cmd_finetune(cfg: dict):
    from sfd.training import FinetuneConfig, config_from_dict, finetune, load_labeled

    _training_threads()
    out = Path(cfg["out"])
    section = _section(cfg, "finetune")
    data = load_labeled(_require(cfg, "finetune.data"))
    section.pop("data")
    val_path = section.pop("validation_data")
    validation = load_labeled(val_path) if val_path else None
    section["input_kind"] = section.pop("input")
    section["snr_grid"] = _numeric_grid(section["snr_grid"])
    section["noise_types"] = tuple(_split_list(section["noise_types"]))
    section["seed"] = cfg["seed"]
    config = config_from_dict(FinetuneConfig, section)
    out.mkdir(parents=True, exist_ok=True)
    result = finetune(data, config, _assets(cfg), validation,
                      log_path=out / "finetune_log.jsonl")
    path = result.checkpoint.save(out / "finetune.bin")
    m = result.checkpoint.header["metrics"]
    print(f"finetune: val CE {m['init_val_loss']:.4f} -> {m['best_val_loss']:.4f} "
          f"(step {m['best_step']}); checkpoint {path}")
    return path


def cmd_eval(cfg: dict) -> list:
    from sfd.evaluation import emit_report, parse_snr, run_baseline_suite

    out = Path(cfg["out"])
    configs = {}
    for name in _split_list(cfg["eval.baseline"]):
        if name.lower() != "gccphat-argmax":
            raise ConfigError(f"unknown baseline {name!r}")
        configs["GCCPHAT-Argmax"] = None
    for path in _split_list(cfg["eval.models"]):
        configs[Path(path).stem] = path
    if not configs:
        raise ConfigError("nothing to evaluate: pass --baseline and/or --models")
    import torch

    torch.set_num_threads(1)
    grid = [parse_snr(s) for s in parse_snr_grid(cfg["eval.snr_grid"])]
    report = run_baseline_suite(_require(cfg, "eval.data"), configs, snr_grid=grid,
                                noise_types=_split_list(cfg["eval.noise_types"]),
                                assets=_assets(cfg), seed=cfg["seed"], B=cfg["eval.bootstrap"],
                                jobs=cfg["jobs"])
    if not report.cells:
        raise ConfigError("no models could be evaluated")
    paths = emit_report(report, cfg["eval.format"], out)
    (out / "report_provenance.json").write_text(
        json.dumps(report.provenance, indent=2, sort_keys=True) + "\n")
    for p in paths:
        print(f"wrote {p}")
    return paths


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "eval": cmd_eval}


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

# flag -> config key, per subcommand
_FLAGS = {
    "synth": {"count": "synth.count", "sources": "synth.sources", "duration": "synth.duration",
              "azimuth_fixed": "synth.azimuth_fixed", "snr_grid": "synth.snr_grid",
              "noise_types": "synth.noise_types", "split": "synth.split",
              "wav_format": "synth.wav_format"},
    "extract": {"data": "extract.data", "kind": "extract.kind", "max_lag": "extract.max_lag",
                "which": "extract.which"},
    "pretrain": {"corpus": "pretrain.corpus", "corpus_minutes": "pretrain.corpus_minutes",
                 "target": "pretrain.target", "steps": "pretrain.steps",
                 "bucket_minutes": "pretrain.bucket_minutes", "max_lag": "pretrain.max_lag",
                 "snr_grid": "pretrain.snr_grid", "noise_types": "pretrain.noise_types",
                 "pipeline_prefetch": "pretrain.prefetch"},
    "finetune": {"data": "finetune.data", "validation_data": "finetune.validation_data",
                 "init": "finetune.init", "input": "finetune.input",
                 "steps": "finetune.steps", "batch_size": "finetune.batch_size",
                 "resolution": "finetune.resolution", "freeze_encoder": "finetune.freeze_encoder",
                 "snr_grid": "finetune.snr_grid", "noise_types": "finetune.noise_types"},
    "eval": {"data": "eval.data", "baseline": "eval.baseline", "models": "eval.models",
             "snr_grid": "eval.snr_grid", "noise_types": "eval.noise_types",
             "format": "eval.format", "bootstrap": "eval.bootstrap"},
}

_BOOL_FLAGS = {"freeze_encoder", "pipeline_prefetch"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flat dotted config keys")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="worker threads for synth/extract/eval")
    common.add_argument("--assets", help="asset directory (hrir/, rir/, noise/)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    common.add_argument("-v", "--verbose", action="count")

    parser = argparse.ArgumentParser(prog="sfd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        for flag in _FLAGS[name]:
            opt = "--" + flag.replace("_", "-")
            if flag in _BOOL_FLAGS:
                p.add_argument(opt, action="store_const", const=True, dest=flag)
            else:
                p.add_argument(opt, dest=flag)
    return parser


def _overrides(args) -> dict:
    out = {}
    for key in ("seed", "out", "jobs", "assets", "verbose"):
        if getattr(args, key) is not None:
            out[key] = getattr(args, key)
    for flag, key in _FLAGS[args.command].items():
        value = getattr(args, flag)
        if value is not None:
            out[key] = value
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = json.loads(value) if value[:1] in "[{\"" else value
    return out


def _attach_dash_values(argv: list) -> list:
    # "--snr-grid -20:20:5" would otherwise read the range as an option
    out = []
    it = iter(argv)
    for token in it:
        if token == "--snr-grid":
            value = next(it, None)
            out.append(token if value is None else f"{token}={value}")
        else:
            out.append(token)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_attach_dash_values(sys.argv[1:] if argv is None else list(argv)))
    try:
        cfg = load_config(args.config, _overrides(args))
        level = {0: logging.WARNING, 1: logging.INFO}.get(cfg["verbose"] or 0, logging.DEBUG)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        _echo(cfg, Path(cfg["out"]), args.command)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"sfd {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AssetError, OSError) as exc:
        print(f"sfd {args.command}: asset error: {exc}", file=sys.stderr)
        return EXIT_ASSET
    except NumericalError as exc:
        print(f"sfd {args.command}: numerical failure: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, indent=2, default=str), file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"sfd {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
