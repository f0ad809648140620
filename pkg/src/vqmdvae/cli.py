"""Command-line entry point: ``vqmdvae <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .container import write_json, write_tensor
from .errors import ConfigurationError, VQMDVAEError
from .features import SyntheticFactorSpec, generate_synthetic, load_corpus, save_corpus
from .mdvae import ModelConfig
from .train import TrainConfig, effective_seed, train_stage1, train_stage2
from .vq import VQConfig

log = logging.getLogger("vqmdvae")

COMMANDS = ("gen-data", "train-vq", "train-mdvae", "resynth", "swap", "denoise", "probe", "plot")

# config sections and the dataclass whose field names they accept
SECTIONS = {
    "data": SyntheticFactorSpec,
    "train": TrainConfig,
    "model": ModelConfig,
    "vq_audio": VQConfig,
    "vq_visual": VQConfig,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- config


def _field_names(section):
    return {f.name for f in fields(SECTIONS[section])}


def load_config(path) -> dict:
    """Read a JSON config with optional sections named as in ``SECTIONS``."""
    if path is None:
        return {}
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {p}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {p} must hold a JSON object")
    for section, body in data.items():
        if section not in SECTIONS:
            raise ConfigurationError(f"config {p}: unknown section {section!r}; expected {sorted(SECTIONS)}")
        unknown = set(body) - _field_names(section)
        if unknown:
            raise ConfigurationError(f"config {p}: unknown {section} keys {sorted(unknown)}")
    return data


def apply_overrides(config: dict, overrides) -> dict:
    """``section.key=value`` or a bare ``key=value`` that names exactly one section's field."""
    config = {k: dict(v) for k, v in config.items()}
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS or name not in _field_names(section):
                raise ConfigurationError(f"override {key!r} does not name a declared config key")
        else:
            owners = [s for s in SECTIONS if key in _field_names(s)]
            if not owners:
                raise ConfigurationError(f"override {key!r} does not name a declared config key")
            if len(owners) > 1:
                raise ConfigurationError(f"override {key!r} is ambiguous; prefix it with one of {owners}")
            section, name = owners[0], key
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        config.setdefault(section, {})[name] = value
    return config


def _build(section, config, **extra):
    body = {**config.get(section, {}), **extra}
    cls = SECTIONS[section]
    try:
        return cls.from_dict(body) if hasattr(cls, "from_dict") else cls(**body)
    except TypeError as exc:
        raise ConfigurationError(f"invalid {section} config: {exc}") from exc


def _train_config(args, config, stage):
    body = dict(config.get("train", {}))
    body["stage"] = stage
    body["seed"] = args.seed if args.seed is not None else effective_seed(body.get("seed", 0))
    if args.deterministic:
        body["deterministic"] = True
    return TrainConfig.from_dict(body)


# --------------------------------------------------------------------------- output dirs


def prepare_out(path, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not overwrite:
            raise UsageError(f"output directory {out} is not empty; pass --overwrite to replace it")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def _load_vqs(path):
    if path is None:
        return None
    root = Path(path)
    return load_checkpoint(root / "audio"), load_checkpoint(root / "visual")


def _pipeline(args):
    from .transform import Pipeline

    return Pipeline.from_checkpoints(load_checkpoint(args.model), _load_vqs(args.vq))


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args, config, out):
    seed = args.seed if args.seed is not None else effective_seed(config.get("data", {}).get("seed", 0))
    spec = _build("data", config, seed=seed)
    corpus = generate_synthetic(spec)
    save_corpus(corpus, out)
    log.info("wrote %d sequences to %s", len(corpus), out)


def cmd_train_vq(args, config, out):
    from .plotting import plot_loss_curves

    _require(args, "data")
    corpus = load_corpus(args.data)
    tc = _train_config(args, config, 1)
    vq_a = _build("vq_audio", config) if "vq_audio" in config else None
    vq_v = _build("vq_visual", config) if "vq_visual" in config else None
    ck_a, ck_v = train_stage1(tc, corpus, vq_a, vq_v)
    for name, ck in (("audio", ck_a), ("visual", ck_v)):
        save_checkpoint(ck, out / name)
        plot_loss_curves(ck.manifest["metrics"], out / "plots", name=f"loss_{name}")


def cmd_train_mdvae(args, config, out):
    from .plotting import plot_loss_curves

    _require(args, "data")
    corpus = load_corpus(args.data)
    tc = _train_config(args, config, 2)
    ck = train_stage2(tc, corpus, _load_vqs(args.vq), config.get("model"))
    save_checkpoint(ck, out / "model")
    plot_loss_curves(ck.manifest["metrics"], out / "plots", name="loss_mdvae")


def _limit(corpus, n):
    return corpus if n is None else corpus.subset(range(min(n, len(corpus))))


def cmd_resynth(args, config, out):
    from .eval.metrics import spectral_sisdr, visual_metrics
    from .plotting import write_metrics_csv
    from .transform import analyze_batch, resynthesize_batch

    _require(args, "data", "model")
    corpus = _limit(load_corpus(args.data), args.limit)
    pipe = _pipeline(args)
    mode = args.mode or ("raw" if pipe.has_vq else "feature")
    x_a, x_v = corpus.stacked()
    outputs = resynthesize_batch(analyze_batch(x_a, x_v, pipe), pipe, mode)
    rows = []
    side = int(round(np.sqrt(x_v.shape[-1])))
    for seq, rec in zip(corpus.features(), outputs):
        sid = seq.meta["id"]
        write_tensor(out / sid / "x_a.ten", rec.x_a)
        write_tensor(out / sid / "x_v.ten", rec.x_v)
        if mode == "raw":
            if rec.x_v.size:
                for k, v in visual_metrics(seq.x_v.reshape(-1, side, side),
                                           rec.x_v.reshape(-1, side, side)).items():
                    rows.append((sid, "resynth", k, v))
            if rec.x_a.size:
                rows.append((sid, "resynth", "SI-SDR", spectral_sisdr(seq.x_a, rec.x_a)))
        else:
            if rec.x_a.size:
                rows.append((sid, "resynth", "MSE_a", float(np.mean((seq.x_a - rec.x_a) ** 2))))
            if rec.x_v.size:
                rows.append((sid, "resynth", "MSE_v", float(np.mean((seq.x_v - rec.x_v) ** 2))))
    write_metrics_csv(out / "metrics.csv", rows)


def cmd_swap(args, config, out):
    from .eval.protocol import FactorExtractor, StaticClassifier, centered_pcc, swap_protocol
    from .plotting import write_metrics_csv
    from .transform import SwapSpec, analyze_batch, resynthesize_batch, swap

    _require(args, "data", "model")
    corpus = load_corpus(args.data)
    pipe = _pipeline(args)
    seed = args.seed if args.seed is not None else effective_seed(0)
    extractor = FactorExtractor().fit(corpus)
    scores = swap_protocol(pipe, corpus, args.variable, extractor, n_repeats=args.repeats, seed=seed)
    rows = [("repeat-mean", f"swap:{args.variable}", f"{fac}_{k}", v)
            for fac, d in scores.items() for k, v in d.items()]
    result = {"variable": args.variable, "protocol": scores}
    if args.variable.upper() == "W":
        # static transfer: donor class recovered, recipient dynamics preserved
        clf = StaticClassifier().fit(corpus)
        x_a, x_v = corpus.stacked()
        bundles = analyze_batch(x_a, x_v, pipe)
        facs = corpus.factors()
        rng = np.random.default_rng(seed)
        pairs = [tuple(int(i) for i in rng.choice(len(corpus), 2, replace=False)) for _ in range(args.pairs)]
        outputs = resynthesize_batch([swap(bundles[i], bundles[j], SwapSpec("W")) for i, j in pairs], pipe,
                                     "raw" if pipe.has_vq else "feature")
        pred = clf.predict(outputs)
        ids = corpus.features()
        for (i, j), p, o in zip(pairs, pred, outputs):
            pair_id = f"{ids[i].meta['id']}<-{ids[j].meta['id']}"
            rows.append((pair_id, "swap:W", "class_agreement", float(p == facs[j].s_cls)))
            rows.append((pair_id, "swap:W", "c_PCC_recipient", centered_pcc(extractor(o, "c"), facs[i].c)))
        result["class_agreement"] = float(np.mean([p == facs[j].s_cls for (i, j), p in zip(pairs, pred)]))
    write_metrics_csv(out / "metrics.csv", rows)
    write_json(out / "swap.json", result)


def cmd_denoise(args, config, out):
    from .eval.metrics import RegionBox, visual_metrics
    from .plotting import image_grid, plot_psnr_curves, read_csv, write_metrics_csv
    from .transform import STACK_LENGTH, VARIANCE_SWEEP, Pipeline, corrupt, denoise_batch

    _require(args, "data", "model", "vq")
    corpus = _limit(load_corpus(args.data), args.limit)
    vqs = _load_vqs(args.vq)
    models = {"multimodal": Pipeline.from_checkpoints(load_checkpoint(args.model), vqs)}
    if args.ablation:
        models["visual-only"] = Pipeline.from_checkpoints(load_checkpoint(args.ablation), vqs)
    x_a, x_v = corpus.stacked()
    if x_v.shape[1] < STACK_LENGTH:
        raise ConfigurationError(f"sequences need at least {STACK_LENGTH} frames")
    side = int(round(np.sqrt(x_v.shape[-1])))
    clean = x_v[:, :STACK_LENGTH].reshape(len(x_v), STACK_LENGTH, side, side)
    spectra = x_a[:, :STACK_LENGTH]
    ids = [s.meta["id"] for s in corpus.features()]
    rng = np.random.default_rng(args.seed if args.seed is not None else effective_seed(0))
    rows = []
    regions = args.regions.split(",")
    unknown = sorted(set(regions) - {"mouth", "eyes"})
    if unknown:
        raise UsageError(f"unknown regions {unknown}; choose from mouth, eyes")
    for region_name in regions:
        region = getattr(RegionBox, region_name)(side)
        for var in VARIANCE_SWEEP:
            noisy = np.stack([corrupt(c, region, var, rng) for c in clean])
            for name, pipe in models.items():
                recon = denoise_batch(noisy, spectra, pipe)
                for sid, ref, est in zip(ids, clean, recon):
                    m = visual_metrics(ref[2:8], est[2:8], region)
                    for k, v in m.items():
                        rows.append((sid, f"{name}/{region_name}/var={var}", k, v))
                if var == VARIANCE_SWEEP[-1]:
                    image_grid([clean[0], noisy[0], recon[0]], out / f"grid_{name}_{region_name}.png",
                               ["clean", "corrupted", name])
    write_metrics_csv(out / "metrics.csv", rows)
    plot_psnr_curves(read_csv(out / "metrics.csv"), out)


def cmd_probe(args, config, out):
    from .eval.probe import train_probe
    from .eval.transport import ot_domain_adapt
    from .transform import analyze_batch

    _require(args, "data", "model")
    corpus = load_corpus(args.data)
    pipe = _pipeline(args)
    x_a, x_v = corpus.stacked()
    w = np.stack([b.w for b in analyze_batch(x_a, x_v, pipe)])
    labels = corpus.labels("s_cls")
    seed = args.seed if args.seed is not None else effective_seed(0)
    adapt = (lambda src, tgt: ot_domain_adapt(src, tgt)) if args.ot else None
    _, report = train_probe(w, labels, args.kind, args.split, groups=corpus.labels("s_id"), seed=seed,
                            adapt=adapt)
    result = report.to_dict()
    write_json(out / "probe.json", result)
    print(json.dumps(result))


def cmd_plot(args, config, out):
    from .plotting import plot_loss_curves, plot_pca_scatter, plot_psnr_curves, read_csv
    from .transform import analyze_batch

    if args.model is None and args.metrics is None:
        raise UsageError("plot needs --model and/or --metrics")
    if args.metrics is not None:
        plot_psnr_curves(read_csv(args.metrics), out)
    if args.model is not None:
        ck = load_checkpoint(args.model)
        plot_loss_curves(ck.manifest["metrics"], out, name=f"loss_{ck.model_type}")
        if ck.model_type == "mdvae" and args.data is not None:
            corpus = load_corpus(args.data)
            pipe = _pipeline(args)
            x_a, x_v = corpus.stacked()
            w = np.stack([b.w for b in analyze_batch(x_a, x_v, pipe)])
            plot_pca_scatter(w, corpus.labels("s_cls"), out, name="pca_w")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-vq": cmd_train_vq,
    "train-mdvae": cmd_train_mdvae,
    "resynth": cmd_resynth,
    "swap": cmd_swap,
    "denoise": cmd_denoise,
    "probe": cmd_probe,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vqmdvae", description="Two-stage VQ-MDVAE toolkit on synthetic audiovisual data.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "gen-data": "generate a synthetic corpus",
        "train-vq": "train the audio and visual VQ-VAEs",
        "train-mdvae": "train the MDVAE on features or VQ encodings",
        "resynth": "analyze and resynthesize sequences",
        "swap": "run the latent-swap protocol",
        "denoise": "corruption / denoising sweep",
        "probe": "static-class probe on w",
        "plot": "emit loss, PSNR and PCA figures",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--override", action="append", default=[], metavar="K=V")
        p.add_argument("--overwrite", action="store_true")
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--data", help="corpus directory")
        p.add_argument("--vq", help="stage-1 directory holding audio/ and visual/ checkpoints")
        p.add_argument("--model", help="MDVAE checkpoint directory")
        p.add_argument("--limit", type=int, help="use only the first N sequences")
        if name == "resynth":
            p.add_argument("--mode", choices=("feature", "raw"))
        if name == "swap":
            p.add_argument("--variable", default="W", choices=("W", "ZAV", "ZA", "ZV"))
            p.add_argument("--repeats", type=int, default=5)
            p.add_argument("--pairs", type=int, default=100)
        if name == "denoise":
            p.add_argument("--ablation", help="audio-dropped MDVAE checkpoint")
            p.add_argument("--regions", default="mouth,eyes")
        if name == "probe":
            p.add_argument("--kind", default="MLR", choices=("MLR", "MLP"))
            p.add_argument("--split", default="person-dependent",
                           choices=("person-dependent", "person-independent"))
            p.add_argument("--ot", action="store_true", help="align held-out identities by optimal transport")
        if name == "plot":
            p.add_argument("--metrics", help="metrics.csv from a denoise run")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        close = difflib.get_close_matches(argv[0], COMMANDS, n=1)
        hint = f"; did you mean '{close[0]}'?" if close else ""
        print(f"vqmdvae: unknown command '{argv[0]}'{hint}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 1
    try:
        config = apply_overrides(load_config(args.config), args.override)
        out = prepare_out(args.out, args.overwrite)
        HANDLERS[args.command](args, config, out)
    except (UsageError, ConfigurationError) as exc:
        print(f"vqmdvae {args.command}: {exc}", file=sys.stderr)
        return 1
    except (VQMDVAEError, OSError, ValueError, ArithmeticError) as exc:
        print(f"vqmdvae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
