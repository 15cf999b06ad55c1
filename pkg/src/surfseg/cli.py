"""Command-line entry point: ``surfseg <command> [--flags]``.

Exit codes: 0 ok, 1 usage/invalid config, 2 I/O, 3 file format, 4 infeasible.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from . import baseline, infer, metrics, model, overlay, pipeline, synthdata
from .errors import ContractError, FormatError, InfeasibleError
from .numerics import make_rng

log = logging.getLogger("surfseg")

EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_INFEASIBLE = 1, 2, 3, 4


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _paths(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


@dataclass(frozen=True)
class Param:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


COMMON = [Param("seed", int, 0, "seed for every random draw"),
          Param("out", str, None, "output path")]

COMMANDS: dict[str, list[Param]] = {
    "generate": [
        Param("x", int, 128), Param("y", int, 4), Param("z", int, 64), Param("lambda", int, 2),
        Param("mode", str, "normal", "normal | amd"), Param("noise", float, 0.05),
        Param("delta-min", float, 4.0), Param("delta-max", float, 24.0),
        Param("bump-sign", int, 1),
    ],
    "preprocess": [Param("in", str, None, "input volume")],
    "extract": [
        Param("volumes", _paths, None, "comma-separated volume files"),
        Param("surfaces", _paths, None, "comma-separated surface files, same order"),
        Param("n", int, 32), Param("stride", int, 0, "0 means N/2"),
        Param("augment", _bool, True), Param("t-range", int, 0, "0 means Z/2"),
        Param("max-angle", float, 45.0),
        Param("border", _bool, True, "also emit zero-padded edge strips as inference sees them"),
        Param("edge-stride", int, 1, "spacing of the edge strips, 0 means --stride"),
    ],
    "train": [
        Param("dataset", str, None), Param("conv-channels", _ints, (16, 32, 32)),
        Param("kernel", _ints, (5, 5)), Param("fc-hidden", int, 512),
        Param("lr", float, 1e-3), Param("momentum", float, 0.9), Param("batch", int, 32),
        Param("epochs", int, 30), Param("lr-decay", float, 0.5), Param("decay-every", int, 10),
        Param("dtype", str, "float32"),
    ],
    "infer": [Param("model", str, None), Param("volume", str, None), Param("report", str, None)],
    "baseline": [
        Param("volume", str, None), Param("report", str, None), Param("delta-max", int, 2),
        Param("smooth-weight", _floats, (0.1, 0.1)), Param("delta-min-sep", int, 1),
        Param("delta-max-sep", int, 40), Param("cost-sign", _ints, (1, -1)),
    ],
    "eval": [
        Param("pred", _paths, None, "comma-separated predicted surface files"),
        Param("ref", _paths, None, "comma-separated reference surface files"),
        Param("compare", _paths, None, "second method's surfaces for a paired t-test"),
        Param("n", int, 0, "patch width used at inference (enables seam statistics)"),
        Param("published", _bool, True, "print the published clinical numbers for context"),
    ],
    "plot": [
        Param("volume", str, None), Param("surfaces", _paths, None), Param("slice", int, 0),
    ],
}


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def resolve(command: str, flags: dict[str, str | None], config_path: str | None) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    params = {p.name: p for p in COMMON + COMMANDS[command]}
    raw: dict[str, str] = {}
    if config_path:
        for key, value in read_config_file(config_path).items():
            if key not in params:
                raise UsageError(f"unknown config key {key!r} for '{command}'")
            raw[key] = value
    raw.update({k: v for k, v in flags.items() if v is not None})
    resolved = {}
    for name, p in params.items():
        if name in raw:
            try:
                resolved[name] = p.parse(raw[name])
            except ValueError as exc:
                raise UsageError(f"--{name}: {exc}") from exc
        else:
            resolved[name] = p.default
    return resolved


def format_config(command: str, cfg: dict[str, Any]) -> str:
    lines = [f"# surfseg {command}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in cfg.items() if v is not None]
    return "\n".join(lines) + "\n"


def _need(cfg: dict[str, Any], *names: str) -> None:
    missing = [n for n in names if cfg.get(n) in (None, ())]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join(f"--{n}" for n in missing))


# -- commands -----------------------------------------------------------------

def cmd_generate(cfg):
    _need(cfg, "out")
    sc = synthdata.SynthConfig(
        X=cfg["x"], Y=cfg["y"], Z=cfg["z"], lam=cfg["lambda"], mode=cfg["mode"],
        noise=cfg["noise"], delta_min=cfg["delta-min"], delta_max=cfg["delta-max"],
        bump_sign=cfg["bump-sign"], seed=cfg["seed"],
        layer_means=tuple(np.linspace(0.2, 0.8, cfg["lambda"] + 1)) if cfg["lambda"] != 2 else (0.2, 0.8, 0.4),
    )
    vol, surf = synthdata.generate(sc)
    synthdata.write_volume(vol, cfg["out"] + ".lcv")
    synthdata.write_surfaces(surf, cfg["out"] + ".lcs")
    print(f"wrote {cfg['out']}.lcv and {cfg['out']}.lcs ({sc.X}x{sc.Y}x{sc.Z}, {sc.mode})")


def cmd_preprocess(cfg):
    _need(cfg, "in", "out")
    synthdata.write_volume(pipeline.preprocess(synthdata.read_volume(cfg["in"])), cfg["out"])
    print(f"wrote {cfg['out']}")


def cmd_extract(cfg):
    _need(cfg, "volumes", "surfaces", "out")
    if len(cfg["volumes"]) != len(cfg["surfaces"]):
        raise UsageError("--volumes and --surfaces need the same number of files")
    items = [(synthdata.read_volume(v), synthdata.read_surfaces(s))
             for v, s in zip(cfg["volumes"], cfg["surfaces"])]
    ds = pipeline.build_dataset(
        items, cfg["n"], cfg["augment"], make_rng(cfg["seed"]), stride=cfg["stride"] or None,
        t_range=cfg["t-range"] or None, max_angle=cfg["max-angle"], border=cfg["border"],
        edge_stride=cfg["edge-stride"] or None)
    pipeline.write_dataset(ds, cfg["out"])
    stats = " ".join(f"{k}={v}" for k, v in sorted(ds.stats.items()))
    print(f"wrote {len(ds)} records to {cfg['out']} ({stats})")


def cmd_train(cfg):
    _need(cfg, "dataset", "out")
    ds = pipeline.read_dataset(cfg["dataset"])
    mc = model.ModelConfig(N=ds.N, Z=ds.Z, lam=ds.lam, conv_channels=cfg["conv-channels"],
                           kernel=cfg["kernel"], fc_hidden=cfg["fc-hidden"])
    tc = model.TrainConfig(lr=cfg["lr"], momentum=cfg["momentum"], batch=cfg["batch"],
                           epochs=cfg["epochs"], lr_decay=cfg["lr-decay"],
                           decay_every=cfg["decay-every"], dtype=cfg["dtype"])
    rng = make_rng(cfg["seed"])
    net = model.build_net(mc, rng, tc.dtype)

    def report(e):
        print(f"epoch {e.epoch + 1}/{tc.epochs} lr {e.lr:.4g} loss {e.loss:.4f} vox^2 "
              f"train_umspe {e.umspe:.4f} vox", flush=True)

    model.train(net, ds.patches, ds.targets.astype(np.float64), tc, rng, report)
    model.save_model(net, cfg["out"])
    print(f"wrote {cfg['out']}")


def cmd_infer(cfg):
    _need(cfg, "model", "volume", "out")
    net = model.load_model(cfg["model"])
    res = infer.segment_volume(net, synthdata.read_volume(cfg["volume"]))
    synthdata.write_surfaces(res.surfaces, cfg["out"])
    text = res.report()
    if cfg["report"]:
        infer.write_report(text, cfg["report"])
    sys.stdout.write(text)


def cmd_baseline(cfg):
    _need(cfg, "volume", "out")
    dp = baseline.DpConfig(delta_max=cfg["delta-max"], smooth_weight=cfg["smooth-weight"],
                           delta_min_sep=cfg["delta-min-sep"], delta_max_sep=cfg["delta-max-sep"],
                           cost_sign=cfg["cost-sign"])
    try:
        dp.validate()
    except ContractError as exc:
        raise UsageError(str(exc)) from exc
    res = baseline.segment_volume_dp(synthdata.read_volume(cfg["volume"]), dp)
    synthdata.write_surfaces(res.surfaces, cfg["out"])
    lines = [f"slice{y}_objective = {obj!r}" for y, obj in enumerate(res.objectives)]
    lines.append(f"constraint_violations = {res.violations}")
    text = "\n".join(lines) + "\n"
    if cfg["report"]:
        infer.write_report(text, cfg["report"])
    sys.stdout.write(text)


def cmd_eval(cfg):
    _need(cfg, "pred", "ref")
    preds = [synthdata.read_surfaces(p) for p in cfg["pred"]]
    refs = [synthdata.read_surfaces(p) for p in cfg["ref"]]
    if len(preds) != len(refs):
        raise UsageError("--pred and --ref need the same number of files")
    for p, r in zip(preds, refs):
        if p.positions.shape != r.positions.shape:
            raise UsageError(f"surface grids differ: {p.positions.shape} vs {r.positions.shape}")
    others = [synthdata.read_surfaces(p) for p in cfg["compare"]] if cfg["compare"] else None
    plan = infer.plan_tiling(refs[0].X, cfg["n"]) if cfg["n"] else None
    rep = metrics.evaluate(preds, refs, plan, others)
    sys.stdout.write(rep.text(published=cfg["published"]))
    if cfg["out"]:
        infer.write_report(rep.key_values(), cfg["out"])


def cmd_plot(cfg):
    _need(cfg, "volume", "surfaces", "out")
    vol = synthdata.read_volume(cfg["volume"])
    if not 0 <= cfg["slice"] < vol.Y:
        raise UsageError(f"--slice must be in [0, {vol.Y})")
    sets = []
    for path in cfg["surfaces"]:
        s = synthdata.read_surfaces(path)
        if (s.X, s.Y) != (vol.X, vol.Y):
            raise UsageError(f"{path}: surface grid does not match the volume")
        sets.append(s.positions[:, cfg["slice"], :])
    overlay.write_ppm(overlay.render_overlay(vol.slice(cfg["slice"]), sets), cfg["out"])
    print(f"wrote {cfg['out']} ({vol.X}x{vol.Z})")


HANDLERS = {
    "generate": cmd_generate, "preprocess": cmd_preprocess, "extract": cmd_extract,
    "train": cmd_train, "infer": cmd_infer, "baseline": cmd_baseline, "eval": cmd_eval,
    "plot": cmd_plot,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surfseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, params in COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key = value file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true")
        for param in COMMON + params:
            p.add_argument(f"--{param.name}", dest=param.name, default=None, help=param.help)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = resolve(args.command, flags, args.config)
        sys.stderr.write(format_config(args.command, cfg))
        HANDLERS[args.command](cfg)
    except (UsageError, ContractError) as exc:
        print(f"surfseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"surfseg: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except InfeasibleError as exc:
        print(f"surfseg: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"surfseg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
