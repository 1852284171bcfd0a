"""Command-line interface.

Verbs: train, embed, extract, attack, localize, recover, verify, evaluate.
Every option can also be supplied through an environment variable named
``WMF_<OPTION>`` (for example ``WMF_SEED=3`` or ``WMF_CHECKPOINT=model.ckpt``);
explicit flags win over the environment. Exit status is 0 on success, 1 on a
usage error and 2 on a runtime error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .attacks import AttackConfig, arm_config, simulate_attack
from .checkpoint import CheckpointError, load_bundle
from .data import load_corpus, load_image, synthetic_corpus
from .datamodel import (
    ALLOWED_LATENT_DIMS,
    OwnershipCode,
    ValidationError,
    WatermarkError,
    WatermarkPayload,
    binarize_mask,
    code_to_hex,
    hex_to_code,
    load_mask_png,
    read_payload_sidecar,
    save_image_png,
    save_mask_png,
    validate_image,
    write_payload_sidecar,
)
from .evaluate import HELD_OUT_SUITE, evaluate, resolve_suite, write_reports
from .localizer import localize
from .metrics import bit_accuracy
from .pipeline import load_run_config, run_train
from .recovery import RecoveryInput, recover
from .rng import seed_torch, substream
from .urw import embed, extract

ENV_PREFIX = "WMF_"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
# below this bit accuracy against the sidecar the image is treated as not carrying our watermark
UNWATERMARKED_BELOW = 65.0

log = logging.getLogger("wmforensics")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _provenance(path: Path, args, extra: dict | None = None) -> None:
    """Write ``<file>.prov.json`` next to an output file."""
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    record = {
        "file": path.name,
        "command": args.command,
        "argv": sys.argv[1:],
        "config_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16],
        "seed": args.seed,
        "version": __version__,
        **(extra or {}),
    }
    Path(str(path) + ".prov.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bundle(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required (or set WMF_CHECKPOINT)")
    bundle = load_bundle(args.checkpoint)
    if bundle.urw is None:
        raise CheckpointError(f"{args.checkpoint} holds no watermark codec")
    return bundle


def _image(path, bundle=None, resolution=64):
    size = bundle.face_codec.cfg.image_size if bundle is not None else resolution
    return load_image(path, size)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed,
        "resolution": args.resolution,
        "ablation": args.ablation,
        "latent_dim": args.latent_dim,
        "output_dir": args.out if args.out_given else None,
        "corpus_dir": args.corpus,
    }
    cfg = load_run_config(args.config, overrides)
    steps = {k: v for k, v in (("urw_steps", args.urw_steps), ("heads_steps", args.heads_steps)) if v is not None}
    if steps:
        cfg.schedule = {**cfg.schedule, **steps}
    cfg.desk_schedule()
    if args.synthetic is not None:
        cfg.corpus_dir, cfg.synthetic_count = None, args.synthetic
    if cfg.corpus_dir and not Path(cfg.corpus_dir).is_dir():
        raise FileNotFoundError(f"corpus directory not found: {cfg.corpus_dir}")
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output_dir) / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def progress(rec):
        if rec["step"] % 50 == 0:
            log.info("%s step %d total %.4f", rec["stage"], rec["step"], rec["total"])

    final, log_path = run_train(cfg, progress)
    args.seed = cfg.seed
    _provenance(final, args, {"config_hash": cfg.digest(), "log": log_path.name})
    _emit({"checkpoint": str(final), "log": str(log_path)})
    return EXIT_OK


def cmd_embed(args) -> int:
    bundle = _bundle(args)
    img = _image(args.image, bundle)
    n = bundle.n_bits
    if args.random:
        code = OwnershipCode.random(n, substream(args.seed, 1))
    elif args.payload:
        code = hex_to_code(args.payload, n)
    else:
        raise UsageError("give --payload HEX or --random")
    z = bundle.face_codec.encode(img)
    payload = WatermarkPayload(code, z)
    protected = embed(img, payload, bundle.urw)
    out = _out_dir(args)
    stem = Path(args.image).stem
    img_path = out / f"{stem}_protected.png"
    side = out / f"{stem}_protected.payload.json"
    save_image_png(protected, img_path)
    ckpt = bundle.manifest.get("checkpoint_hash", "")
    write_payload_sidecar(side, payload, {"checkpoint": ckpt})
    for p in (img_path, side):
        _provenance(p, args, {"checkpoint": ckpt})
    _emit({"protected": str(img_path), "sidecar": str(side), "code_hex": code_to_hex(code)})
    return EXIT_OK


def _extraction_record(res, sidecar):
    record = {"code_hex": code_to_hex(res.code)}
    if sidecar:
        truth = read_payload_sidecar(sidecar)
        acc = bit_accuracy(res.code, truth.code)
        record["bit_accuracy"] = acc
        record["likely_unwatermarked"] = acc < UNWATERMARKED_BELOW
    return record


def cmd_extract(args) -> int:
    bundle = _bundle(args)
    img = _image(args.image, bundle)
    res = extract(img, bundle.urw)
    record = _extraction_record(res, args.sidecar)
    out = _out_dir(args)
    path = out / f"{Path(args.image).stem}_extract.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    _provenance(path, args, {"checkpoint": bundle.manifest.get("checkpoint_hash", "")})
    _emit(record)
    return EXIT_OK


def _attack_spec(args) -> AttackConfig:
    if args.spec:
        p = Path(args.spec)
        if not p.is_file():
            raise FileNotFoundError(f"attack spec not found: {p}")
        d = json.loads(p.read_text())
        if "arm" in d:
            return arm_config(d.pop("arm"), **d)
        return AttackConfig.from_dict(d)
    return arm_config(args.ablation or "full", blend_prob=1.0, mixing_prob=1.0)


def cmd_attack(args) -> int:
    cfg = _attack_spec(args)
    needs_source = cfg.enable_blending or cfg.enable_latent_mixing
    bundle = load_bundle(args.checkpoint) if args.checkpoint else None
    if cfg.enable_latent_mixing and bundle is None:
        raise UsageError("latent mixing needs --checkpoint for the face codec")
    img = _image(args.image, bundle, args.resolution or 64)
    if needs_source and not args.source:
        raise UsageError("this attack spec needs --source")
    source = _image(args.source, bundle, args.resolution or 64) if args.source else img
    rng = substream(args.seed, 2)
    outcome = simulate_attack(img, source, cfg, bundle.face_codec if bundle else None, rng)
    out = _out_dir(args)
    stem = Path(args.image).stem
    edited_path = out / f"{stem}_edited.png"
    mask_path = out / f"{stem}_truth_mask.png"
    save_image_png(outcome.edited, edited_path)
    save_mask_png(outcome.ground_truth_mask, mask_path)
    for p in (edited_path, mask_path):
        _provenance(p, args, {"attack": cfg.to_dict(), "stages": outcome.provenance})
    _emit({"edited": str(edited_path), "truth_mask": str(mask_path), "stages": outcome.provenance})
    return EXIT_OK


def _localize(bundle, img, res):
    if bundle.localizer is None:
        raise CheckpointError("checkpoint holds no localizer")
    return localize(img, res.wm_features, bundle.localizer)


def _recover(bundle, img, res, mask):
    if bundle.recovery is None:
        raise CheckpointError("checkpoint holds no recovery network")
    proxy = bundle.face_codec.decode(res.face_latent_hat)
    m_bin = binarize_mask(mask, bundle.recovery.cfg.tau).values
    masked = img.pixels * (1 - m_bin[..., None])
    inp = RecoveryInput(validate_image(masked), proxy, res.face_latent_hat, mask)
    return recover(inp, bundle.recovery)


def cmd_localize(args) -> int:
    bundle = _bundle(args)
    img = _image(args.image, bundle)
    mask = _localize(bundle, img, extract(img, bundle.urw))
    out = _out_dir(args)
    path = out / f"{Path(args.image).stem}_mask.png"
    save_mask_png(mask, path)
    _provenance(path, args, {"checkpoint": bundle.manifest.get("checkpoint_hash", "")})
    _emit({"mask": str(path), "tampered_fraction": float(binarize_mask(mask).values.mean())})
    return EXIT_OK


def cmd_recover(args) -> int:
    bundle = _bundle(args)
    img = _image(args.image, bundle)
    res = extract(img, bundle.urw)
    mask = load_mask_png(args.mask) if args.mask else _localize(bundle, img, res)
    out_img = _recover(bundle, img, res, mask)
    out = _out_dir(args)
    path = out / f"{Path(args.image).stem}_recovered.png"
    save_image_png(out_img, path)
    _provenance(path, args, {"checkpoint": bundle.manifest.get("checkpoint_hash", "")})
    _emit({"recovered": str(path)})
    return EXIT_OK


def cmd_verify(args) -> int:
    bundle = _bundle(args)
    if not args.sidecar:
        raise UsageError("verify needs --sidecar")
    img = _image(args.image, bundle)
    res = extract(img, bundle.urw)
    report = _extraction_record(res, args.sidecar)
    mask = _localize(bundle, img, res)
    recovered = _recover(bundle, img, res, mask)
    report["tampered_fraction"] = float(binarize_mask(mask).values.mean())
    report["checkpoint"] = bundle.manifest.get("checkpoint_hash", "")
    out = _out_dir(args)
    stem = Path(args.image).stem
    paths = {"report": out / f"{stem}_verify.json", "mask": out / f"{stem}_mask.png", "recovered": out / f"{stem}_recovered.png"}
    paths["report"].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    save_mask_png(mask, paths["mask"])
    save_image_png(recovered, paths["recovered"])
    for p in paths.values():
        _provenance(p, args, {"checkpoint": report["checkpoint"]})
    _emit({**report, **{k: str(v) for k, v in paths.items()}})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle = _bundle(args)
    size = bundle.face_codec.cfg.image_size
    if args.corpus:
        corpus, tag = load_corpus(args.corpus, size), f"dir:{args.corpus}"
        if not corpus:
            raise ValidationError(f"no PNG/JPEG images under {args.corpus}")
    else:
        corpus, tag = synthetic_corpus(args.synthetic, size, args.synthetic_seed), f"synthetic:{args.synthetic_seed}:{args.synthetic}"
    suite = {} if args.fidelity_only else resolve_suite(args.suite.split(",") if args.suite else list(HELD_OUT_SUITE))
    reports = evaluate(bundle, corpus, suite, seed=args.seed, dataset=tag, mask_source=args.mask_source)
    jl, txt = write_reports(reports, _out_dir(args))
    for p in (jl, txt):
        _provenance(p, args, {"checkpoint": bundle.manifest.get("checkpoint_hash", "")})
    print(txt.read_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _env(name, default=None, cast=str):
    v = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if v is None or v == "":
        return default
    try:
        return cast(v)
    except ValueError as exc:
        raise UsageError(f"environment variable {ENV_PREFIX}{name.upper()} has an invalid value {v!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=_env("config"), help="JSON run configuration")
    common.add_argument("--seed", type=int, default=_env("seed", 0, int))
    common.add_argument("--resolution", type=int, default=_env("resolution", None, int))
    common.add_argument("--ablation", choices=["none", "noise", "blend", "full"], default=_env("ablation"))
    common.add_argument("--latent-dim", type=int, choices=ALLOWED_LATENT_DIMS, default=_env("latent_dim", None, int))
    common.add_argument("--out", default=None, help="output directory (default: current directory)")
    common.add_argument("--checkpoint", default=_env("checkpoint"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="wmforensics", description="Proactive face watermarking: verify, localize and recover.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="pretrain the face codec if needed, then run the staged training schedule")
    t.add_argument("--corpus", default=_env("corpus"), help="directory of face images (PNG/JPEG)")
    t.add_argument("--synthetic", type=int, default=None, help="use N procedural faces instead of a directory")
    t.add_argument("--urw-steps", type=int, default=None, help="steps of the watermark-codec stage")
    t.add_argument("--heads-steps", type=int, default=None, help="steps of the localizer/recovery stage")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", parents=[common], help="embed an ownership code and face latent")
    e.add_argument("image")
    g = e.add_mutually_exclusive_group()
    g.add_argument("--payload", help="ownership code as hex (most significant bit first)")
    g.add_argument("--random", action="store_true", help="draw a fresh code from --seed")
    e.set_defaults(func=cmd_embed)

    x = sub.add_parser("extract", parents=[common], help="decode the ownership code")
    x.add_argument("image")
    x.add_argument("--sidecar", help="payload sidecar to score against")
    x.set_defaults(func=cmd_extract)

    a = sub.add_parser("attack", parents=[common], help="run the attack simulator on one image")
    a.add_argument("image")
    a.add_argument("--spec", help="JSON attack spec (AttackConfig fields, or {\"arm\": name, ...})")
    a.add_argument("--source", help="source face for blending/mixing")
    a.set_defaults(func=cmd_attack)

    lz = sub.add_parser("localize", parents=[common], help="predict the tamper mask")
    lz.add_argument("image")
    lz.set_defaults(func=cmd_localize)

    r = sub.add_parser("recover", parents=[common], help="reconstruct tampered content")
    r.add_argument("image")
    r.add_argument("--mask", help="mask PNG to use instead of the predicted one")
    r.set_defaults(func=cmd_recover)

    v = sub.add_parser("verify", parents=[common], help="extract + localize + recover in one pass")
    v.add_argument("image")
    v.add_argument("--sidecar", default=_env("sidecar"))
    v.set_defaults(func=cmd_verify)

    ev = sub.add_parser("evaluate", parents=[common], help="metrics over a corpus and attack suite")
    ev.add_argument("--corpus", default=_env("corpus"))
    ev.add_argument("--synthetic", type=int, default=200, help="procedural test faces when no --corpus")
    ev.add_argument("--synthetic-seed", type=int, default=1)
    ev.add_argument("--suite", help=f"comma-separated attacks from {sorted([*HELD_OUT_SUITE, 'splice'])}")
    ev.add_argument("--fidelity-only", action="store_true")
    ev.add_argument("--mask-source", choices=["predicted", "truth"], default="predicted")
    ev.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
    except UsageError as exc:
        print(f"wmforensics: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.out_given = args.out is not None or _env("out") is not None
    args.out = args.out or _env("out", ".")
    seed_torch(args.seed)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"wmforensics {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WatermarkError, CheckpointError, FileNotFoundError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"wmforensics {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
