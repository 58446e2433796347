"""Command-line entry point: reproducible runs from strict JSON configs.

Subcommands: run-session, bench-drift, bench-locality, bench-ebm, train,
verify.  Global flags: --seed (overrides the config), --out (output
directory), --json (machine-readable reports where applicable).

Exit codes: 0 success, 1 check or experiment failure, 2 configuration error.
Unknown config keys are rejected; error messages name the offending field
path.  Every command is a pure function of (config, seed): outputs are
byte-identical across reruns.  Per-edit wall-clock timings are only written
when --timings is passed, so default session logs stay deterministic.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import bench as bench_mod
from . import editor as editor_mod
from . import training as training_mod
from . import verify as verify_mod
from .codec import CodecConfig
from .denoiser import EditInstruction, GMMPrior
from .fixtures import fixture_path
from .grid import GridParseError, LatentGrid, Mask, mean_stat, read_grid, read_mask, write_grid
from .sampler import MASK_MODES, METHODS, LangevinConfig, SamplerConfig
from .schedule import build_schedule


class ConfigError(ValueError):
    """Configuration problem; message names the offending field path."""


def _expect_mapping(obj, path: str, required: tuple[str, ...], optional: tuple[str, ...] = ()):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    allowed = set(required) | set(optional)
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key (allowed: {sorted(allowed)})")
    for key in required:
        if key not in obj:
            raise ConfigError(f"{path}.{key}: missing required key")
    return obj


def _number(obj, path: str) -> float:
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise ConfigError(f"{path}: expected a number")
    return float(obj)


def _integer(obj, path: str) -> int:
    if isinstance(obj, bool) or not isinstance(obj, int):
        raise ConfigError(f"{path}: expected an integer")
    return obj


def _string(obj, path: str) -> str:
    if not isinstance(obj, str):
        raise ConfigError(f"{path}: expected a string")
    return obj


def _existing_file(path_value: str, field: str, base_dir: str) -> str:
    resolved = path_value if os.path.isabs(path_value) else os.path.join(base_dir, path_value)
    if not os.path.isfile(resolved):
        raise ConfigError(f"{field}: file not found: {path_value}")
    return resolved


def load_config(path: str) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config: file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON: {exc}") from None
    _expect_mapping(
        cfg, "config",
        required=("seed",),
        optional=("out_dir", "schedule", "sampler", "codec", "session", "bench", "training"),
    )
    _integer(cfg["seed"], "config.seed")
    return cfg


def _build_schedule_block(cfg: dict, override_T: int | None = None):
    block = _expect_mapping(
        cfg.get("schedule", {}), "config.schedule",
        required=(), optional=("kind", "T", "beta_start", "beta_end"),
    )
    kind = _string(block.get("kind", "linear"), "config.schedule.kind")
    T = override_T if override_T is not None else _integer(block.get("T", 200), "config.schedule.T")
    beta_start = _number(block.get("beta_start", 1e-4), "config.schedule.beta_start")
    beta_end = _number(block.get("beta_end", 0.02), "config.schedule.beta_end")
    try:
        return build_schedule(kind, T, beta_start, beta_end)
    except ValueError as exc:
        raise ConfigError(f"config.schedule: {exc}") from None


def _build_sampler_block(cfg: dict, seed: int, args=None) -> SamplerConfig:
    block = _expect_mapping(
        cfg.get("sampler", {}), "config.sampler",
        required=(), optional=("method", "mask_mode", "add_final_noise"),
    )
    method = _string(block.get("method", "ddpm_full"), "config.sampler.method")
    mask_mode = _string(block.get("mask_mode", "pin"), "config.sampler.mask_mode")
    if args is not None and args.method is not None:
        method = args.method
    if args is not None and args.mask_mode is not None:
        mask_mode = args.mask_mode
    if method not in METHODS:
        raise ConfigError(f"config.sampler.method: must be one of {METHODS}")
    if mask_mode not in MASK_MODES:
        raise ConfigError(f"config.sampler.mask_mode: must be one of {MASK_MODES}")
    add_final = block.get("add_final_noise", False)
    if not isinstance(add_final, bool):
        raise ConfigError("config.sampler.add_final_noise: expected a boolean")
    return SamplerConfig(method=method, mask_mode=mask_mode, add_final_noise=add_final, seed=seed)


def _build_codec_block(cfg: dict) -> CodecConfig:
    block = _expect_mapping(
        cfg.get("codec", {}), "config.codec",
        required=(), optional=("downsample", "levels", "clamp", "unsharp"),
    )
    try:
        return CodecConfig(
            downsample=_integer(block.get("downsample", 2), "config.codec.downsample"),
            levels=_integer(block.get("levels", 32), "config.codec.levels"),
            clamp=_number(block.get("clamp", 4.0), "config.codec.clamp"),
            unsharp=_number(block.get("unsharp", 0.15), "config.codec.unsharp"),
        )
    except ValueError as exc:
        raise ConfigError(f"config.codec: {exc}") from None


def _build_edit(block, path: str, base_dir: str) -> tuple[EditInstruction, str | None]:
    _expect_mapping(block, path, required=("id",), optional=("gain", "bias", "bias_file", "scale", "mask"))
    if "bias" in block and "bias_file" in block:
        raise ConfigError(f"{path}: give either bias or bias_file, not both")
    gain = block.get("gain", 1.0)
    if isinstance(gain, list):
        gain = [_number(g, f"{path}.gain[{i}]") for i, g in enumerate(gain)]
    else:
        gain = _number(gain, f"{path}.gain")
    if "bias_file" in block:
        bias = read_grid(_existing_file(_string(block["bias_file"], f"{path}.bias_file"),
                                        f"{path}.bias_file", base_dir))
    else:
        bias = _number(block.get("bias", 0.0), f"{path}.bias")
    scale = _number(block.get("scale", 0.0), f"{path}.scale")
    try:
        edit = EditInstruction(id=_string(block["id"], f"{path}.id"), gain=gain,
                               bias=bias, target_scale=scale)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    mask_file = block.get("mask")
    if mask_file is not None:
        mask_file = _existing_file(_string(mask_file, f"{path}.mask"), f"{path}.mask", base_dir)
    return edit, mask_file


def _build_prior(block, path: str) -> GMMPrior:
    _expect_mapping(block, path, required=("weights", "means", "scales"), optional=("label",))
    for key in ("weights", "means", "scales"):
        if not isinstance(block[key], list):
            raise ConfigError(f"{path}.{key}: expected a list of numbers")
    try:
        return GMMPrior.scalar(
            [_number(v, f"{path}.weights") for v in block["weights"]],
            [_number(v, f"{path}.means") for v in block["means"]],
            [_number(v, f"{path}.scales") for v in block["scales"]],
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _resolve_fixture(bench_block: dict, base_dir: str) -> LatentGrid:
    name = bench_block.get("fixture", "shipped")
    if name == "shipped":
        return read_grid(fixture_path())
    return read_grid(_existing_file(_string(name, "config.bench.fixture"),
                                    "config.bench.fixture", base_dir))


def _out_dir(cfg: dict, args) -> str:
    out = args.out or cfg.get("out_dir")
    if out is None:
        raise ConfigError("config.out_dir: missing (or pass --out)")
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(payload, path: str) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_run_session(cfg: dict, args, base_dir: str) -> int:
    seed = args.seed if args.seed is not None else cfg["seed"]
    sched = _build_schedule_block(cfg, args.T)
    sampler_cfg = _build_sampler_block(cfg, seed, args)
    codec_cfg = _build_codec_block(cfg)
    block = _expect_mapping(
        cfg.get("session"), "config.session",
        required=("input", "edits"), optional=("strategy", "reuse_init"),
    )
    input_path = _existing_file(_string(block["input"], "config.session.input"),
                                "config.session.input", base_dir)
    image = read_grid(input_path)
    strategy = _string(block.get("strategy", "latent_iteration"), "config.session.strategy")
    if strategy not in editor_mod.STRATEGIES:
        raise ConfigError(f"config.session.strategy: must be one of {editor_mod.STRATEGIES}")
    reuse_init = block.get("reuse_init", False)
    if not isinstance(reuse_init, bool):
        raise ConfigError("config.session.reuse_init: expected a boolean")
    if not isinstance(block["edits"], list) or not block["edits"]:
        raise ConfigError("config.session.edits: expected a nonempty list")

    edits, masks, any_mask = [], [], False
    for i, edit_block in enumerate(block["edits"]):
        edit, mask_file = _build_edit(edit_block, f"config.session.edits[{i}]", base_dir)
        edits.append(edit)
        if mask_file is not None:
            any_mask = True
            masks.append(read_mask(mask_file))
        else:
            masks.append(None)

    try:
        session = editor_mod.open_session(
            image, edits, masks if any_mask else None,
            sched=sched, sampler_cfg=sampler_cfg, codec_cfg=codec_cfg,
            strategy=strategy, seed=seed, reuse_init=reuse_init,
        )
    except ValueError as exc:
        raise ConfigError(f"config.session: {exc}") from None

    out = _out_dir(cfg, args)
    log_edits = []
    for i in range(len(edits)):
        start = time.perf_counter()
        output = editor_mod.apply_edit(session)
        elapsed = time.perf_counter() - start
        name = f"edit_{i + 1:03d}.grid"
        write_grid(output, os.path.join(out, name))
        entry = {
            "index": i + 1,
            "edit_id": edits[i].id,
            "output_file": name,
            "renorm_factor": session.f_history[i],
            "latent_mean": mean_stat(session.prev_latent),
            "latent_std": float(session.prev_latent.data.std()),
        }
        if args.timings:
            entry["duration_s"] = elapsed
        log_edits.append(entry)
    _write_json(
        {"strategy": strategy, "seed": seed, "num_edits": len(edits), "edits": log_edits},
        os.path.join(out, "session_log.json"),
    )
    print(f"wrote {len(edits)} edited grids and session_log.json to {out}")
    return 0


def _report_lines(lines) -> int:
    failures = 0
    for name, ok, detail in lines:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 1


def cmd_bench_drift(cfg: dict, args, base_dir: str) -> int:
    seed = args.seed if args.seed is not None else cfg["seed"]
    sched = _build_schedule_block(cfg, args.T)
    sampler_cfg = _build_sampler_block(cfg, seed, args)
    codec_cfg = _build_codec_block(cfg)
    block = _expect_mapping(
        cfg.get("bench", {}), "config.bench",
        required=(), optional=("fixture", "drift", "locality", "ebm"),
    )
    drift = _expect_mapping(
        block.get("drift", {}), "config.bench.drift",
        required=(), optional=("steps", "edit_noise", "strategies"),
    )
    steps = _integer(drift.get("steps", 16), "config.bench.drift.steps")
    noise = _number(drift.get("edit_noise", bench_mod.DEFAULT_EDIT_NOISE),
                    "config.bench.drift.edit_noise")
    strategies = drift.get("strategies", list(editor_mod.STRATEGIES))
    for s in strategies:
        if s not in editor_mod.STRATEGIES:
            raise ConfigError(f"config.bench.drift.strategies: unknown strategy {s!r}")
    fixture = _resolve_fixture(block, base_dir)

    report = bench_mod.drift_experiment(
        fixture, strategies, steps, sched=sched, sampler_cfg=sampler_cfg,
        codec_cfg=codec_cfg, seed=seed, edit_noise=noise,
    )
    out = _out_dir(cfg, args)
    fmt = "json" if args.json else "csv"
    path = os.path.join(out, f"drift.{fmt}")
    bench_mod.write_report(report, path, fmt)
    print(f"wrote {path}")

    by = {}
    for row in report.rows:
        by.setdefault(row[0], []).append(row[2])
    lines = []
    if "image_iteration" in by:
        img = by["image_iteration"]
        mono = all(img[i + 1] >= img[i] - 1e-12 for i in range(len(img) - 1))
        lines.append(("image-iteration-rmse-non-decreasing", mono,
                      f"final {img[-1]:.4f}"))
        if "latent_iteration" in by:
            lat = by["latent_iteration"]
            ordered = all(lat[e] <= img[e] for e in range(1, len(lat)))
            lines.append(("latent-below-image-from-step-2", ordered,
                          f"latent final {lat[-1]:.4f} vs image final {img[-1]:.4f}"))
            lines.append(("latent-final-below-image-step-4", lat[-1] <= img[3],
                          f"{lat[-1]:.4f} <= {img[3]:.4f}"))
    return _report_lines(lines)


def cmd_bench_locality(cfg: dict, args, base_dir: str) -> int:
    seed = args.seed if args.seed is not None else cfg["seed"]
    sched = _build_schedule_block(cfg, args.T)
    sampler_cfg = _build_sampler_block(cfg, seed, args)
    codec_cfg = _build_codec_block(cfg)
    block = _expect_mapping(
        cfg.get("bench", {}), "config.bench",
        required=(), optional=("fixture", "drift", "locality", "ebm"),
    )
    loc = _expect_mapping(
        block.get("locality", {}), "config.bench.locality",
        required=(), optional=("edit", "mask", "modes"),
    )
    fixture = _resolve_fixture(block, base_dir)
    lat_h = fixture.h // codec_cfg.downsample
    lat_w = fixture.w // codec_cfg.downsample
    if "mask" in loc and loc["mask"] is not None:
        mask = read_mask(_existing_file(_string(loc["mask"], "config.bench.locality.mask"),
                                        "config.bench.locality.mask", base_dir))
    else:
        block_mask = np.zeros((lat_h, lat_w))
        block_mask[lat_h // 4 : 3 * lat_h // 4, lat_w // 4 : 3 * lat_w // 4] = 1.0
        mask = Mask(block_mask)
    if "edit" in loc:
        edit, _ = _build_edit(loc["edit"], "config.bench.locality.edit", base_dir)
    else:
        edit = EditInstruction(id="brighten", gain=1.0, bias=0.6, target_scale=0.08)
    modes = loc.get("modes", list(MASK_MODES))
    for m in modes:
        if m not in MASK_MODES:
            raise ConfigError(f"config.bench.locality.modes: unknown mode {m!r}")

    report = bench_mod.locality_experiment(
        fixture, edit, mask, modes, sched=sched, sampler_cfg=sampler_cfg,
        codec_cfg=codec_cfg, seed=seed,
    )
    out = _out_dir(cfg, args)
    fmt = "json" if args.json else "csv"
    path = os.path.join(out, f"locality.{fmt}")
    bench_mod.write_report(report, path, fmt)
    print(f"wrote {path}")

    rows = {row[0]: row for row in report.rows}
    lines = []
    if "pin" in rows:
        lines.append(("pin-outside-exactly-zero", rows["pin"][2] == 0.0,
                      f"outside rms {rows['pin'][2]!r}"))
    control = rows.get("unmasked")
    if control is not None and control[3] is not None:
        lines.append(("unmasked-ratio-near-one", 0.8 <= control[3] <= 1.25,
                      f"ratio {control[3]:.4f}"))
    if all(k in rows for k in ("pin", "direction")) and control is not None:
        ratios = (rows["pin"][3] or 0.0, rows["direction"][3] or 0.0, control[3] or 0.0)
        lines.append(("ratio-ordering-pin-direction-unmasked",
                      ratios[0] < ratios[1] < ratios[2],
                      "ratios " + " < ".join(f"{r:.4f}" for r in ratios)))
    return _report_lines(lines)


def cmd_bench_ebm(cfg: dict, args, base_dir: str) -> int:
    seed = args.seed if args.seed is not None else cfg["seed"]
    sched = _build_schedule_block(cfg, args.T)
    sampler_cfg = _build_sampler_block(cfg, seed, args)
    block = _expect_mapping(
        cfg.get("bench", {}), "config.bench",
        required=(), optional=("fixture", "drift", "locality", "ebm"),
    )
    ebm = _expect_mapping(
        block.get("ebm", {}), "config.bench.ebm",
        required=(), optional=("chains", "priors", "langevin"),
    )
    chains = _integer(ebm.get("chains", 10000), "config.bench.ebm.chains")
    lang = _expect_mapping(
        ebm.get("langevin", {}), "config.bench.ebm.langevin",
        required=(), optional=("step_size", "noise_scale", "steps"),
    )
    try:
        lang_cfg = LangevinConfig(
            step_size=_number(lang.get("step_size", 0.05), "config.bench.ebm.langevin.step_size"),
            noise_scale=lang.get("noise_scale"),
            steps=_integer(lang.get("steps", 2000), "config.bench.ebm.langevin.steps"),
        )
    except ValueError as exc:
        raise ConfigError(f"config.bench.ebm.langevin: {exc}") from None
    priors_cfg = ebm.get("priors")
    if priors_cfg is None:
        priors = [
            ("single_gaussian", GMMPrior.scalar([1.0], [3.0], [1.0])),
            ("bimodal", GMMPrior.scalar([0.5, 0.5], [-2.0, 2.0], [0.25, 0.25])),
        ]
    else:
        priors = []
        for i, p in enumerate(priors_cfg):
            label = p.get("label", f"prior_{i}") if isinstance(p, dict) else f"prior_{i}"
            priors.append((label, _build_prior(p, f"config.bench.ebm.priors[{i}]")))

    rows = []
    lines = []
    for label, prior in priors:
        report = bench_mod.ebm_equivalence_experiment(
            prior, sched, lang_cfg, chains,
            sampler_cfg=sampler_cfg, seed=seed, label=label,
        )
        row = report.rows[0]
        rows.append(row)
        lines.append((f"moment-equivalence-{label}", bool(row[8]),
                      f"|dmean|={row[6]:.4f} |dvar|/var={row[7]:.4f}"))
    out = _out_dir(cfg, args)
    fmt = "json" if args.json else "csv"
    path = os.path.join(out, f"ebm.{fmt}")
    bench_mod.write_report(bench_mod.EbmReport(rows), path, fmt)
    print(f"wrote {path}")
    return _report_lines(lines)


def cmd_train(cfg: dict, args, base_dir: str) -> int:
    seed = args.seed if args.seed is not None else cfg["seed"]
    sched = _build_schedule_block(cfg, args.T)
    block = _expect_mapping(
        cfg.get("training"), "config.training",
        required=("prior",),
        optional=("hidden", "embed", "learning_rate", "batch_size", "steps", "optimizer"),
    )
    prior = _build_prior(block["prior"], "config.training.prior")
    try:
        train_cfg = training_mod.TrainConfig(
            learning_rate=_number(block.get("learning_rate", 0.004), "config.training.learning_rate"),
            batch_size=_integer(block.get("batch_size", 128), "config.training.batch_size"),
            steps=_integer(block.get("steps", 20000), "config.training.steps"),
            seed=seed,
            optimizer=_string(block.get("optimizer", "adam"), "config.training.optimizer"),
        )
        model = training_mod.TinyDenoiser.init(
            d=prior.dim,
            T=sched.T,
            hidden=_integer(block.get("hidden", 64), "config.training.hidden"),
            embed_dim=_integer(block.get("embed", 8), "config.training.embed"),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"config.training: {exc}") from None

    trained, trace = training_mod.train(model, prior, sched, train_cfg)
    out = _out_dir(cfg, args)
    model_path = os.path.join(out, "model.params")
    training_mod.save_model(trained, model_path)
    trace_path = os.path.join(out, "loss_trace.csv")
    with open(trace_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("step,loss\n")
        for i, value in enumerate(trace, start=1):
            fh.write(f"{i},{float(value)!r}\n")
    final = float(trace[-1]) if len(trace) else float("nan")
    print(f"wrote {model_path} and {trace_path} (final loss {final:.6f})")
    return 0


def cmd_verify(cfg: dict | None, args, base_dir: str) -> int:
    results = verify_mod.run_checks()
    if args.json:
        print(json.dumps(
            [{"name": r.name, "ok": r.ok, "detail": r.detail} for r in results],
            indent=2, sort_keys=True,
        ))
    else:
        width = max(len(r.name) for r in results)
        for r in results:
            print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="override the config seed")
    shared.add_argument("--out", type=str, default=None, help="output directory")
    shared.add_argument("--json", action="store_true", help="machine-readable output")
    shared.add_argument("--timings", action="store_true",
                        help="include wall-clock timings in session logs (non-deterministic)")
    shared.add_argument("--method", choices=METHODS, default=None,
                        help="override the reverse-step method")
    shared.add_argument("--mask-mode", choices=MASK_MODES, default=None,
                        help="override the mask enforcement mode")
    shared.add_argument("--T", type=int, default=None,
                        help="override the number of diffusion steps")
    parser = argparse.ArgumentParser(
        prog="latentedit",
        description="Iterative multi-granular latent editing engine",
        parents=[shared],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run-session", "bench-drift", "bench-locality", "bench-ebm", "train"):
        p = sub.add_parser(name, parents=[shared])
        p.add_argument("config", help="path to the JSON run config")
    sub.add_parser("verify", parents=[shared])
    return parser


_COMMANDS = {
    "run-session": cmd_run_session,
    "bench-drift": cmd_bench_drift,
    "bench-locality": cmd_bench_locality,
    "bench-ebm": cmd_bench_ebm,
    "train": cmd_train,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(None, args, os.getcwd())
        cfg = load_config(args.config)
        base_dir = os.path.dirname(os.path.abspath(args.config))
        return _COMMANDS[args.command](cfg, args, base_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except GridParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
