"""``dfinger`` command line: corpus, mixing, training, enhancement, evaluation, service, benchmark.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import datamix, dsp, evaluation, fpservice, metrics
from .datamix import MixSpec, StressMode, TrainRanges
from .errors import ConfigError, DataError, DfingerError, NumericError
from .model import DFingerNet, FusionMode, ModelConfig, variant_by_name
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .streaming import StreamState
from .trainer import TrainConfig, pretrain_baseline_result, train_variant_result

log = logging.getLogger("dfinger")

SUBCOMMANDS = ("gen-corpus", "mix", "train", "enhance", "eval", "sweep-staleness", "stress", "serve", "bench")


# -- configuration ----------------------------------------------------------------

def default_config() -> dict:
    text = resources.files("dfinger").joinpath("default_config.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def deep_merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("models",):
            out[k] = deep_merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file (``--config`` or ``$DFINGER_CONFIG``), then flags."""
    cfg = default_config()
    path = path or os.environ.get("DFINGER_CONFIG")
    if path:
        try:
            user = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        cfg = deep_merge(cfg, user)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    return cfg


class Run:
    """Resolved paths and shared helpers for one invocation."""

    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg["out"])
        self.reports = self.out / "reports"
        self.checkpoints = self.out / "checkpoints"
        self.audio = self.out / "audio"
        for d in (self.reports, self.checkpoints, self.audio):
            d.mkdir(parents=True, exist_ok=True)
        effective = dict(cfg, command=command)
        (self.out / "config.effective.yaml").write_text(
            yaml.safe_dump(effective, sort_keys=True), encoding="utf-8")

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    @property
    def corpus_dir(self) -> Path:
        d = self.cfg["corpus"]["dir"]
        return Path(d) if d else self.out / "corpus"

    @property
    def manifest_path(self) -> Path:
        m = self.cfg["manifest"]
        return Path(m) if m else self.corpus_dir / "manifest.jsonl"

    def manifest(self) -> datamix.Manifest:
        if not self.manifest_path.exists():
            raise DataError(f"manifest not found: {self.manifest_path} (run gen-corpus first)")
        return datamix.Manifest.load(self.manifest_path)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig.from_dict(self.cfg["model"])
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def resolve_checkpoint(self, path) -> Path:
        p = Path(path)
        if not p.is_absolute() and not p.exists():
            p = self.checkpoints / p
        if p.suffix != ".ckpt" and not p.exists():
            p = p.with_suffix(".ckpt")
        if not p.exists():
            raise DataError(f"checkpoint not found: {path}")
        return p

    def load_model(self, path, variant=None) -> DFingerNet:
        ckpt = load_checkpoint(self.resolve_checkpoint(path))
        return DFingerNet.from_checkpoint(ckpt, variant_by_name(variant) if variant else None)

    def write_csv(self, name, rows, columns):
        path = self.reports / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({c: _cell(r.get(c)) for c in columns})
        return path

    def write_json(self, name, doc):
        path = self.reports / name
        path.write_text(json.dumps(metrics._jsonable(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _cell(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else f"{v:.6f}"
    if isinstance(v, bool):
        return "1" if v else "0"
    return "" if v is None else v


def _eval_spec(run: Run, section="eval", **kw) -> MixSpec:
    return MixSpec(snr_db=0.0, fingerprint_len_s=float(run.cfg["eval"]["fingerprint_len_s"]), seed=run.seed, **kw)


def _mode_for(name: str) -> FusionMode | None:
    return {"fingerprint": None, "bypass": FusionMode.BYPASS}[name]


# -- subcommands ------------------------------------------------------------------

def cmd_gen_corpus(run: Run, args) -> int:
    c = run.cfg["corpus"]
    m = datamix.generate_synthetic_corpus(
        run.corpus_dir, int(c["n_speech"]), int(c["n_noise_profiles"]), run.seed,
        int(c["train_files_per_profile"]), int(c["eval_files_per_profile"]),
        float(c["noise_duration_s"]), float(c["speech_duration_s"]))
    print(f"wrote {len(m)} manifest records, categories: {', '.join(m.categories())}")
    print(f"manifest: {run.corpus_dir / 'manifest.jsonl'}")
    return 0


def cmd_mix(run: Run, args) -> int:
    manifest = run.manifest()
    ev = run.cfg["eval"]
    stress = StressMode(args.stress)
    if args.split == "train":
        t = run.cfg["train"]
        ranges = TrainRanges(tuple(t["snr_db"]), float(t["segment_s"]), float(t["fingerprint_len_s"]), stress)
        samples = list(datamix.build_training_set(manifest, ranges, run.seed, args.limit or int(t["n_samples"])))
    else:
        samples = datamix.build_eval_set(manifest, ev["snr_db"], _eval_spec(run, stress=stress),
                                         segment_s=float(ev["segment_s"]))
        if args.limit:
            samples = samples[:args.limit]
    out = run.audio / "mix" / args.split
    for s in samples:
        base = out / s.id.replace("@", "_").replace("+", "_")
        for part in ("clean", "noise", "fingerprint", "mixture"):
            dsp.write_wav(f"{base}.{part}.wav", getattr(s, part), "float32")
        Path(f"{base}.json").write_text(json.dumps(s.sidecar(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(samples)} mixtures to {out}")
    return 0


def _train_config(run: Run, variant: str, epochs: int, p: float, seed: int) -> TrainConfig:
    t = run.cfg["train"]
    return TrainConfig(epochs=epochs, samples_per_epoch=int(t["n_samples"]), batch=int(t["batch"]),
                       lr=float(t["lr"]), fingerprint_prob=p, variant=variant_by_name(variant), seed=seed,
                       warmup_frac=float(t["warmup_frac"]), clip_norm=float(t["clip_norm"]),
                       freeze_main=bool(t["freeze_main"]))


def cmd_train(run: Run, args) -> int:
    manifest = run.manifest()
    t = run.cfg["train"]
    ranges = TrainRanges(tuple(t["snr_db"]), float(t["segment_s"]), float(t["fingerprint_len_s"]))
    n = int(t["n_samples"])

    def data(seed):
        return lambda epoch: datamix.build_training_set(manifest, ranges, seed, n)

    only = set(args.stage or [])
    summary = {}
    pre_path = run.checkpoints / "baseline-pretrained.ckpt"
    if not only or "pretrain" in only:
        cfg = _train_config(run, "dfn", int(t["pretrain_epochs"]), 0.0, run.seed)
        t0 = time.time()
        res = pretrain_baseline_result(data(run.seed * 2 + 100), cfg, run.model_config(),
                                       run.reports / "train-pretrain.jsonl", pre_path)
        summary["pretrain"] = {"steps": res.steps, "epoch_losses": res.epoch_losses, "seconds": time.time() - t0}
        print(f"pretrain: {res.steps} steps, epoch losses {[round(x, 5) for x in res.epoch_losses]}, "
              f"{time.time() - t0:.0f}s")
    if not pre_path.exists():
        raise DataError(f"pretrained baseline missing: {pre_path}")
    init = load_checkpoint(pre_path)
    for stage in t["stages"]:
        name = stage["name"]
        if only and name not in only:
            continue
        variant = args.variant or stage["variant"]
        epochs = int(t["finetune_epochs"]) * int(stage.get("epoch_factor", 1))
        cfg = _train_config(run, variant, epochs, float(stage.get("fingerprint_prob", 1.0)), run.seed + 1)
        t0 = time.time()
        res = train_variant_result(init, data(run.seed * 2 + 200), cfg, run.reports / f"train-{name}.jsonl",
                                   run.checkpoints / f"{name}.ckpt")
        summary[name] = {"steps": res.steps, "epoch_losses": res.epoch_losses, "fp_fraction": res.fp_fraction,
                         "seconds": time.time() - t0}
        print(f"{name}: {res.steps} steps, fingerprint-active fraction {res.fp_fraction:.3f}, "
              f"epoch losses {[round(x, 5) for x in res.epoch_losses]}, {time.time() - t0:.0f}s")
    run.write_json("train-summary.json", summary)
    return 0


def _read_audio(path, sr) -> dsp.AudioBuffer:
    a = dsp.read_wav(path)
    if a.sample_rate != sr:
        raise ConfigError(f"{path}: sample rate {a.sample_rate} Hz, model expects {sr} Hz")
    return a


def cmd_enhance(run: Run, args) -> int:
    if not args.checkpoint:
        raise ConfigError("enhance needs --checkpoint")
    if not args.input:
        raise ConfigError("enhance needs --input")
    model = run.load_model(args.checkpoint[0], args.variant)
    sr = model.cfg.sample_rate
    x = _read_audio(args.input, sr)
    mode = FusionMode(args.mode) if args.mode else None
    fp = None
    if model.resolve_mode(mode) is not FusionMode.BYPASS:
        if args.fingerprint:
            fp = _read_audio(args.fingerprint, sr)
        else:
            log.warning("no --fingerprint given; enhancing in Bypass")
            mode = FusionMode.BYPASS
    if args.streaming:
        from .streaming import stream_file

        y = stream_file(model, x, fp, mode)
    else:
        y = model.enhance(x, fp, mode)
    out = Path(args.output) if args.output else run.audio / (Path(args.input).stem + ".enhanced.wav")
    dsp.write_wav(out, dsp.AudioBuffer(np.clip(y.samples, -1, 1), sr), "float32")
    print(f"wrote {out}")
    return 0


def _eval_models(run: Run, args) -> dict[str, Path]:
    named = {}
    for spec in args.checkpoint or []:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        named[name] = path
    if not named:
        named = dict(run.cfg["eval"]["models"] or {})
    if not named:
        named = {p.stem: p for p in sorted(run.checkpoints.glob("*.ckpt")) if p.stem != "baseline-pretrained"}
    if not named:
        raise DataError("no checkpoints to evaluate")
    resolved, missing = {}, []
    for name, path in named.items():
        try:
            resolved[name] = run.resolve_checkpoint(path)
        except DataError:
            missing.append(str(path))
    if missing:
        raise DataError(f"missing checkpoints: {', '.join(missing)}")
    return resolved


def cmd_eval(run: Run, args) -> int:
    models = _eval_models(run, args)
    ev = run.cfg["eval"]
    manifest = run.manifest()
    samples = datamix.build_eval_set(manifest, ev["snr_db"], _eval_spec(run), segment_s=float(ev["segment_s"]))
    if not samples:
        raise DataError("eval set is empty")
    rows = []
    for name, path in models.items():
        model = DFingerNet.from_checkpoint(load_checkpoint(path))
        conds = ["bypass"] if model.variant.fusion is FusionMode.BYPASS else list(ev["conditions"])
        if args.mode:
            conds = [args.mode if args.mode == "bypass" else "fingerprint"]
        for cond in conds:
            rows += evaluation.evaluate(model, samples, name, evaluation.Condition(cond, _mode_for(cond)),
                                        bool(ev["stoi"]), int(run.cfg["threads"]))
    report = metrics.MetricReport(rows)
    report.write_csv(run.reports / "eval.csv")
    table = evaluation.comparison_table(rows)
    mixture = {"model": "Mixture", "condition": "", "n": len(samples),
               "mixture_si_sdr": evaluation.mean_of(rows[:len(samples)], "si_sdr_noisy"),
               "delta_si_sdr": None, "delta_stoi": None}
    table = [mixture] + table
    run.write_csv("comparison.csv", table, ["model", "condition", "n", "mixture_si_sdr", "delta_si_sdr", "delta_stoi"])
    report.write_json(run.reports / "eval.json", {"comparison": table, "category_radar": metrics.aggregate(
        rows, ("model", "condition", "category"))})
    print(f"{'model':<14}{'condition':<13}{'dSI-SDR':>9}{'dSTOI':>9}")
    for r in table:
        d1 = "" if r["delta_si_sdr"] is None else f"{r['delta_si_sdr']:9.2f}"
        d2 = "" if r["delta_stoi"] is None or np.isnan(r["delta_stoi"]) else f"{r['delta_stoi']:9.3f}"
        if r["model"] == "Mixture":
            d1 = f"{r['mixture_si_sdr']:9.2f}"
        print(f"{r['model']:<14}{r['condition']:<13}{d1:>9}{d2:>9}")
    return 0


def _fingerprint_model(run: Run, args) -> DFingerNet:
    if not args.checkpoint:
        raise ConfigError(f"{run.command} needs --checkpoint")
    model = run.load_model(args.checkpoint[0], args.variant)
    if model.variant.fusion is FusionMode.BYPASS:
        raise ConfigError(f"{run.command} needs a fingerprint model, got a Bypass checkpoint")
    return model


def cmd_sweep_staleness(run: Run, args) -> int:
    model = _fingerprint_model(run, args)
    st = run.cfg["staleness"]
    samples = datamix.build_eval_set(run.manifest(), st["snr_db"], _eval_spec(run), offsets=st["offsets_s"],
                                     segment_s=float(run.cfg["eval"]["segment_s"]))
    rows = evaluation.evaluate(model, samples, Path(args.checkpoint[0]).stem, evaluation.Condition("fingerprint"),
                               with_stoi=False, threads=int(run.cfg["threads"]))
    curve = [{"offset_s": a["offset_s"], "delta_si_sdr_mean": a["delta_si_sdr"], "n": a["n"]}
             for a in metrics.aggregate(rows, "offset_s")]
    run.write_csv("staleness.csv", curve, ["offset_s", "delta_si_sdr_mean", "n"])
    metrics.MetricReport(rows).write_csv(run.reports / "staleness-samples.csv")
    vals = [c["delta_si_sdr_mean"] for c in curve]
    drop = max(vals) - min(vals)
    run.write_json("staleness.json", {"curve": curve, "max_drop_db": drop})
    for c in curve:
        print(f"offset {c['offset_s']:>6g}s  dSI-SDR {c['delta_si_sdr_mean']:7.3f}  n={c['n']}")
    print(f"max degradation across offsets: {drop:.3f} dB")
    return 0


STRESS_CONDITIONS = (("clean_as_fingerprint", StressMode.CLEAN_AS_FINGERPRINT),
                     ("normal", StressMode.NONE),
                     ("noise_as_fingerprint", StressMode.NOISE_AS_FINGERPRINT))


def cmd_stress(run: Run, args) -> int:
    model = _fingerprint_model(run, args)
    snrs = run.cfg["stress"]["snr_db"]
    seg = float(run.cfg["eval"]["segment_s"])
    manifest = run.manifest()
    result = {}
    rows = []
    for label, mode in STRESS_CONDITIONS:
        samples = datamix.build_eval_set(manifest, snrs, _eval_spec(run, stress=mode), segment_s=seg)
        if mode is StressMode.NOISE_AS_FINGERPRINT:
            bad = [s.id for s in samples if not np.array_equal(s.fingerprint.samples, s.noise.samples)]
            if bad:
                raise DataError(f"noise-as-fingerprint buffers differ from mixing noise: {bad[:3]}")
        r = evaluation.evaluate(model, samples, Path(args.checkpoint[0]).stem, evaluation.Condition(label),
                                with_stoi=False, threads=int(run.cfg["threads"]))
        rows += r
        result[label] = evaluation.mean_of(r)
    ordered = result["noise_as_fingerprint"] >= result["normal"] >= result["clean_as_fingerprint"]
    bounds_ok = result["noise_as_fingerprint"] >= result["clean_as_fingerprint"]
    doc = {"delta_si_sdr": result, "ordering_holds": ordered, "bounds_ordered": bounds_ok}
    if not ordered:
        log.warning("stress ordering violated: %s", result)
    run.write_json("stress.json", doc)
    run.write_csv("stress.csv", [dict(result)], [c for c, _ in STRESS_CONDITIONS])
    metrics.MetricReport(rows).write_csv(run.reports / "stress-samples.csv")
    print("  ".join(f"{k}: {v:.2f}" for k, v in result.items()), "(ordering ok)" if ordered else "(ORDER VIOLATED)")
    return 0


def cmd_serve(run: Run, args) -> int:
    model = _fingerprint_model(run, args)
    addr = args.addr or run.cfg["service"]["addr"]
    fpservice.serve(addr, model.astype(np.float32), float(run.cfg["service"]["timeout_s"]))
    return 0


def cmd_bench(run: Run, args) -> int:
    if not args.checkpoint:
        raise ConfigError("bench needs --checkpoint")
    model = run.load_model(args.checkpoint[0], args.variant)
    seconds = float(args.seconds if args.seconds is not None else run.cfg["bench"]["seconds"])
    sr, hop = model.cfg.sample_rate, model.cfg.hop_size
    n = int(round(seconds * sr))
    if n <= 0:
        raise DataError("bench needs a positive input duration")
    rng = np.random.default_rng(run.seed)
    from . import synth

    speech = synth.speech_surrogate(seconds, rng, sr)
    noise = synth.noise_recording(synth.family(0), seconds + 1.0, rng, sr)
    x = speech + noise[sr:sr + n]
    state = StreamState(model, model.variant.fusion)
    if model.variant.fusion is not FusionMode.BYPASS:
        fp = dsp.AudioBuffer(noise[:sr].astype(np.float32).astype(np.float64), sr)
        emb = model.fingerprint_embedding(fp)
        state.replace_fingerprint(emb if model.variant.fusion is FusionMode.ATTENTION else emb.mean(axis=0))
    k = -(-n // hop)
    padded = np.zeros(k * hop)
    padded[:n] = x
    lat = np.empty(k)
    outs = []
    t_all = time.perf_counter()
    for i in range(k):
        t0 = time.perf_counter()
        outs.append(state.push(padded[i * hop:(i + 1) * hop]))
        lat[i] = time.perf_counter() - t0
    outs.append(state.flush())
    total = time.perf_counter() - t_all
    y = np.concatenate(outs)
    rtf = total / seconds
    doc = {
        "audio_s": seconds, "frames": k, "processing_s": total, "rtf": rtf, "real_time": rtf < 1.0,
        "latency_ms": {q: float(np.percentile(lat, int(q[1:])) * 1e3) for q in ("p50", "p95", "p99")},
        "output_sha256": hashlib.sha256(np.ascontiguousarray(y, dtype="<f8").tobytes()).hexdigest(),
    }
    run.write_json("bench.json", doc)
    dsp.write_wav(run.audio / "bench.enhanced.wav", dsp.AudioBuffer(np.clip(y, -1, 1), sr), "float32")
    lm = doc["latency_ms"]
    print(f"RTF {rtf:.3f} ({'real-time' if rtf < 1 else 'NOT real-time'}); per-frame latency "
          f"p50 {lm['p50']:.2f} ms, p95 {lm['p95']:.2f} ms, p99 {lm['p99']:.2f} ms")
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "mix": cmd_mix, "train": cmd_train, "enhance": cmd_enhance,
    "eval": cmd_eval, "sweep-staleness": cmd_sweep_staleness, "stress": cmd_stress,
    "serve": cmd_serve, "bench": cmd_bench,
}

HELP = {
    "gen-corpus": "write the synthetic speech/noise corpus and its manifest",
    "mix": "render mixtures (clean, noise, fingerprint, mixture WAVs plus sidecar JSON)",
    "train": "pretrain the Bypass baseline, then fine-tune the configured variants",
    "enhance": "enhance one WAV file",
    "eval": "score checkpoints on the eval set; writes per-sample CSV, aggregates and a comparison table",
    "sweep-staleness": "delta SI-SDR as a function of fingerprint age",
    "stress": "clean-speech and true-noise fingerprint bounds against the normal fingerprint",
    "serve": "run the fingerprint embedding service",
    "bench": "streaming latency and real-time factor",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfinger", description="Fingerprint-conditioned speech enhancement toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="YAML config file (default: $DFINGER_CONFIG)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (reports/, checkpoints/, audio/)")
        p.add_argument("--checkpoint", action="append",
                       help="checkpoint path; eval accepts several, optionally as name=path")
        p.add_argument("--variant", help="model variant (dfn, dfin, dfin-sameinit, dfin-sharedenc, dfin-att)")
        p.add_argument("--threads", type=int, help="worker threads for scoring")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "mix":
            p.add_argument("--split", choices=("train", "eval"), default="eval")
            p.add_argument("--stress", choices=[m.value for m in StressMode], default="none")
            p.add_argument("--limit", type=int)
        if name == "train":
            p.add_argument("--stage", action="append", help="run only these stages (pretrain or a stage name)")
        if name == "enhance":
            p.add_argument("--input", help="noisy WAV")
            p.add_argument("--fingerprint", help="fingerprint WAV")
            p.add_argument("--output", help="output WAV (default: <out>/audio/<input>.enhanced.wav)")
            p.add_argument("--streaming", action="store_true", help="use the frame-by-frame path")
        if name in ("enhance", "eval"):
            p.add_argument("--mode", choices=[m.value for m in FusionMode], help="force a fusion mode")
        if name == "serve":
            p.add_argument("--addr", help="bind address host:port (default: $DFPN_ADDR or 127.0.0.1:7462)")
        if name == "bench":
            p.add_argument("--seconds", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.variant:
            variant_by_name(args.variant)
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "threads": args.threads})
        run = Run(cfg, args.command)
        return COMMANDS[args.command](run, args)
    except DfingerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, OverflowError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return NumericError.exit_code


if __name__ == "__main__":
    sys.exit(main())
