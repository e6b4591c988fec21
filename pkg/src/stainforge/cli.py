"""``stainforge`` command line: one subcommand per pipeline stage.

Every stage writes a JSONL run log next to its artifact. The first line
carries the resolved config and the stage seed, then one line per
optimization step, then the artifact digests. No timestamps are logged, so
repeated runs with one seed give byte-identical logs.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import STAINS, __version__, stain_index
from .config import RunConfig, config_dict, derive_seed, validate_config
from .errors import ConfigError, StainforgeError

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class RunLog:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _set_path(data: dict, dotted: str, value) -> None:
    node = data
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError("expected a mapping", ".".join(parents))
    node[leaf] = value


def load_config(path, overrides: dict) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
    data = copy.deepcopy(data)
    for key, value in overrides.items():
        if value is not None:
            _set_path(data, key, value)
    return validate_config(data)


def to_model(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) uint8 -> (N, 3, H, W) float32 in [-1, 1]."""
    return torch.from_numpy(np.array(images, dtype=np.float32)).permute(0, 3, 1, 2) / 127.5 - 1


def from_model(x: torch.Tensor) -> np.ndarray:
    """(N, 3, H, W) in [-1, 1] -> (N, H, W, 3) uint8."""
    arr = ((x.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).numpy()


def _png_files(root: Path) -> list[Path]:
    files = sorted(p for p in Path(root).rglob("*.png"))
    if not files:
        raise StainforgeError(f"no PNG files under {root}")
    return files


def _backend(cfg: RunConfig):
    from .vlm_bridge import EncoderSpec, make_backend

    e = cfg.encoder
    return make_backend(EncoderSpec(kind=e.kind, dim=e.dim, seed=e.seed, weights_path=e.weights_path))


def _start(log: RunLog, command: str, cfg: RunConfig | None, seed: int | None, **extra) -> None:
    log({"event": "start", "command": command, "version": __version__,
         "config": config_dict(cfg) if cfg is not None else None, "seed": seed, **extra})


def _finish(log: RunLog, artifacts: dict) -> None:
    log({"event": "done", "artifacts": {k: _sha256(v) for k, v in sorted(artifacts.items())}})
    log.close()


def _log_path(out: Path) -> Path:
    out = Path(out)
    return out / "run_log.jsonl" if out.suffix == "" else out.with_name(out.name + ".log.jsonl")


# ---------------------------------------------------------------- stages


def cmd_prepare_data(args) -> int:
    from .data import TilingSpec, prepare_data

    cfg = load_config(args.config, {"tiling.patch_size": args.patch_size, "tiling.overlap": args.overlap,
                                    "filter.sat_threshold": args.sat_threshold, "filter.stat": args.stat})
    spec = TilingSpec(cfg.tiling.patch_size, cfg.tiling.overlap, cfg.filter.sat_threshold, cfg.filter.stat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = RunLog(_log_path(out))
    _start(log, "prepare-data", cfg, None, input_dir=str(args.input_dir))
    test = [s for s in (args.test_slides or "").split(",") if s]
    manifest = prepare_data(args.input_dir, out, spec, test_slides=test)
    log({"event": "summary", "patches": len(manifest)})
    _finish(log, {"manifest": out / "manifest.jsonl"})
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .data import synth_stain_dataset, synth_quality

    cfg = load_config(args.config, {"seed": args.seed, "synth.count": args.count, "synth.size": args.size})
    out = Path(args.out)
    stains = [STAINS[stain_index(s)] for s in args.stains.split(",")]
    manifest = synth_stain_dataset(cfg.seed, cfg.synth.count, cfg.synth.size, out, stains=stains,
                                   test_fraction=cfg.synth.test_fraction)
    log = RunLog(_log_path(out))
    _start(log, "synth-data", cfg, cfg.seed, stains=stains)
    artifacts = {"manifest": out / "manifest.jsonl"}
    if "H&E" in stains and len(stains) > 1:
        other = next(s for s in stains if s != "H&E")
        quality = synth_quality(manifest, _backend(cfg), "H&E", other)
        (out / "synth_quality.json").write_text(json.dumps(quality, sort_keys=True, indent=2) + "\n")
        log({"event": "quality", **quality})
        artifacts["quality"] = out / "synth_quality.json"
    _finish(log, artifacts)
    return EXIT_OK


def cmd_train_prompts(args) -> int:
    from .data import read_manifest
    from .prompt_lab import train_contrastive_prompts

    cfg = load_config(args.config, {"seed": args.seed, "prompts.steps": args.steps})
    seed = derive_seed(cfg.seed, "prompts")
    out = Path(args.out)
    log = RunLog(_log_path(out))
    _start(log, "train-prompts", cfg, seed)
    manifest = read_manifest(args.manifest)
    backend = _backend(cfg)
    p = cfg.prompts
    bank = train_contrastive_prompts(
        manifest.load_images(cfg.source, "train"), manifest.load_images(cfg.target, "train"), backend,
        n_tokens=p.n_tokens, init_std=p.init_std, steps=p.steps, lr=p.lr, seed=seed,
        source=cfg.source, target=cfg.target, log=log)
    bank.save(out, config=config_dict(cfg))
    _finish(log, {"prompts": out})
    return EXIT_OK


def cmd_make_anchors(args) -> int:
    from .prompt_lab import build_concept_anchors, default_concept_dir

    cfg = load_config(args.config, {})
    out = Path(args.out)
    log = RunLog(_log_path(out))
    concept_dir = Path(args.concept_dir) if args.concept_dir else default_concept_dir()
    _start(log, "make-anchors", cfg, None)
    anchors = build_concept_anchors(concept_dir, _backend(cfg))
    log({"event": "concepts", "digests": anchors.digests})
    anchors.save(out, config=config_dict(cfg))
    _finish(log, {"anchors": out})
    return EXIT_OK


def cmd_train_vpgan(args) -> int:
    from .data import read_manifest
    from .prompt_lab import ConceptAnchorSet, PromptBank
    from .vpgan import LossWeights, PromptGuidance, save_vpgan_checkpoint, train_vpgan

    overrides = {"seed": args.seed, "vpgan.iterations": args.iterations}
    if args.baseline:
        overrides.update({"vpgan.alpha": 0.0, "vpgan.beta": 0.0, "vpgan.gamma": 0.0})
    cfg = load_config(args.config, overrides)
    seed = derive_seed(cfg.seed, "vpgan")
    v = cfg.vpgan
    out = Path(args.out)
    log = RunLog(_log_path(out))
    _start(log, "train-vpgan", cfg, seed, baseline=bool(args.baseline))
    manifest = read_manifest(args.manifest)
    images_a = to_model(manifest.load_images(cfg.source, "train"))
    images_b = to_model(manifest.load_images(cfg.target, "train"))
    guidance, provenance = None, {}
    if not args.baseline:
        if not args.prompts or not args.anchors:
            raise StainforgeError("--prompts and --anchors are required unless --baseline is given")
        bank, anchors = PromptBank.load(args.prompts), ConceptAnchorSet.load(args.anchors)
        guidance = PromptGuidance(bank, anchors, _backend(cfg), stain_index(cfg.target), cfg.icr.softmax_on)
        provenance = {"prompts": bank.digest(), "anchors": anchors.digest()}

    def on_checkpoint(it, state):
        save_vpgan_checkpoint(out.with_name(f"{out.stem}_it{it:06d}{out.suffix}"), state,
                              config_dict(cfg), provenance)

    weights = LossWeights(v.alpha, v.beta, v.gamma, v.nu)
    _, report = train_vpgan(images_a, images_b, weights, guidance=guidance, iterations=v.iterations,
                            batch_size=v.batch_size, lr=v.lr, betas=v.betas, seed=seed, ngf=v.ngf,
                            n_blocks=v.n_blocks, ndf=v.ndf, eval_size=v.eval_size, log=log,
                            checkpoint_every=v.checkpoint_every, on_checkpoint=on_checkpoint)
    if guidance is not None:
        log({"event": "guidance", "initial": report["initial"], "final": report["final"]})
    save_vpgan_checkpoint(out, report["state"], config_dict(cfg), provenance, report["trace"])
    _finish(log, {"vpgan": out})
    return EXIT_OK


def _translate_files(pair, files, root: Path, out: Path, direction: str) -> dict:
    from .data import read_image, write_image
    from .vpgan import translate

    written = {}
    for path in files:
        x = to_model(read_image(path)[None])
        with torch.no_grad():
            y = translate(x, pair, direction)
        rel = path.relative_to(root)
        write_image(out / rel, from_model(y)[0])
        written[rel.as_posix()] = out / rel
    return written


def cmd_translate(args) -> int:
    from .vpgan import load_vpgan_checkpoint

    pair, payload = load_vpgan_checkpoint(args.vpgan_ckpt)
    out = Path(args.out)
    log = RunLog(_log_path(out))
    _start(log, "translate", None, None, checkpoint=_sha256(args.vpgan_ckpt), direction=args.direction,
           checkpoint_config=payload.get("config"))
    written = _translate_files(pair, _png_files(args.input), Path(args.input), out, args.direction)
    _finish(log, written)
    return EXIT_OK


def cmd_train_diffusion(args) -> int:
    from .data import read_manifest
    from .harbor import DiffusionSchedule, save_diffusion, train_toy_diffusion

    cfg = load_config(args.config, {"seed": args.seed, "diffusion.iterations": args.iterations})
    seed = derive_seed(cfg.seed, "diffusion")
    d = cfg.diffusion
    out = Path(args.out)
    log = RunLog(_log_path(out))
    _start(log, "train-diffusion", cfg, seed)
    manifest = read_manifest(args.manifest)
    images = {s: to_model(manifest.load_images(s, "train")) for s in manifest.stains()}
    schedule = DiffusionSchedule(d.train_steps, d.beta_start, d.beta_end, d.steps)
    predictor, schedule, losses = train_toy_diffusion(
        images, schedule, iterations=d.iterations, batch_size=d.batch_size, lr=d.lr, channels=d.channels,
        cond_dropout=d.cond_dropout, crop=d.crop, seed=seed, log=log)
    save_diffusion(out, predictor, schedule, config_dict(cfg), losses)
    _finish(log, {"diffusion": out})
    return EXIT_OK


def cmd_enhance(args) -> int:
    from .data import read_image, write_image
    from .harbor import EnhanceWeights, enhance, load_diffusion
    from .prompt_lab import ConceptAnchorSet
    from .vpgan import icr_probabilities, translate, load_vpgan_checkpoint

    cfg = load_config(args.config, {"harbor.mu": args.mu, "harbor.lambda": args.lam, "harbor.steps": args.steps})
    h = cfg.harbor
    weights = EnhanceWeights(h.mu, h.lam, tuple(h.delta), cfg.struct.comparand, h.reading)
    pair, _ = load_vpgan_checkpoint(args.vpgan_ckpt)
    predictor, schedule, _ = load_diffusion(args.diffusion_ckpt)
    backend = _backend(cfg)
    anchors = ConceptAnchorSet.load(args.anchors) if args.anchors else None
    target = stain_index(cfg.target)
    out = Path(args.out)
    log = RunLog(_log_path(out))
    _start(log, "enhance", cfg, None, vpgan=_sha256(args.vpgan_ckpt), diffusion=_sha256(args.diffusion_ckpt))
    root = Path(args.input)
    written, summary = {}, []
    for path in _png_files(root):
        i_pre = to_model(read_image(path)[None])
        with torch.no_grad():
            i_post = translate(i_pre, pair, "A->B")
        res = enhance(i_pre, i_post, predictor, schedule, backend, cfg.source, cfg.target, weights,
                      steps=h.steps, step_size=h.step_size)
        rel = path.relative_to(root)
        write_image(out / rel, from_model(res.image)[0])
        written[rel.as_posix()] = out / rel
        row = {"name": rel.as_posix(), "objective_initial": res.trace[0], "objective_final": res.trace[-1],
               "accepted_steps": len(res.trace) - 1}
        if anchors is not None:
            with torch.no_grad():
                row["p_target_post"] = float(icr_probabilities(i_post, anchors, backend, cfg.icr.softmax_on)[0, target])
                row["p_target_enhanced"] = float(
                    icr_probabilities(res.image, anchors, backend, cfg.icr.softmax_on)[0, target])
        summary.append(row)
        log({"event": "enhanced", **row})
    report = out / "enhance_report.json"
    report.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    written["enhance_report.json"] = report
    _finish(log, written)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_pairset
    from .vlm_bridge import default_cache

    cfg = load_config(args.config, {})
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    backend = _backend(cfg) if "fid" in metrics else None
    cache = default_cache(cfg.encoder.dim) if backend is not None else None
    report = evaluate_pairset(args.pred_dir, args.ref_dir, metrics, backend=backend,
                              data_range=args.data_range, cache=cache)
    out = Path(args.report)
    report.save(out)
    log = RunLog(_log_path(out))
    _start(log, "evaluate", cfg, None, pred_dir=str(args.pred_dir), ref_dir=str(args.ref_dir))
    log({"event": "aggregates", **report.aggregates, "fid": report.fid})
    _finish(log, {"report": out})
    for name, agg in sorted(report.aggregates.items()):
        print(f"{name}: {agg['mean']:.6f} (std {agg['std']:.6f}, n={agg['count']})")
    if report.fid is not None:
        print(f"fid: {report.fid:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stainforge", description="Prompt-guided virtual staining pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run config")
        p.set_defaults(func=fn)
        return p

    p = add("prepare-data", cmd_prepare_data, "tile slides into a patch manifest")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--sat-threshold", type=float)
    p.add_argument("--stat", choices=("mean", "max", "median"))
    p.add_argument("--test-slides", help="comma-separated slide stems for the test split")

    p = add("synth-data", cmd_synth_data, "generate the synthetic stain dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--stains", default="H&E,MAS,PAS,PASM")
    p.add_argument("--out", required=True)

    p = add("train-prompts", cmd_train_prompts, "fit the contrastive prompt pair")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)

    p = add("make-anchors", cmd_make_anchors, "encode concept texts into anchors")
    p.add_argument("--concept-dir")
    p.add_argument("--out", required=True)

    p = add("train-vpgan", cmd_train_vpgan, "train the prompt-guided translator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prompts")
    p.add_argument("--anchors")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--baseline", action="store_true", help="plain CycleGAN: all prompt weights zero")

    p = add("translate", cmd_translate, "apply a trained generator to a directory of PNGs")
    p.add_argument("--vpgan-ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--direction", choices=("A->B", "B->A"), default="A->B")

    p = add("train-diffusion", cmd_train_diffusion, "train the toy noise predictor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)

    p = add("enhance", cmd_enhance, "translate and enhance a directory of source PNGs")
    p.add_argument("--input", required=True)
    p.add_argument("--vpgan-ckpt", required=True)
    p.add_argument("--diffusion-ckpt", required=True)
    p.add_argument("--anchors", help="optional anchors for target-probability diagnostics")
    p.add_argument("--mu", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "score predictions against references")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--metrics", default="ssim,css,msssim,psnr,fid")
    p.add_argument("--data-range", type=float, default=1.0)
    p.add_argument("--report", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (StainforgeError, OSError, ValueError) as exc:
        print(f"stainforge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
