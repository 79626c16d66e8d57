"""Command-line entry point: ``generate``, ``train``, ``eval``, ``sweep`` and ``render``.

Every ``--key value`` flag overrides the matching :class:`RunConfig` field
(flags > ``--config`` file > defaults).  Each command writes
``run_manifest.<command>.txt`` into its output directory; the manifest is a
valid config file, so ``--config run_manifest.train.txt`` repeats the run.

Exit codes: 0 ok, 1 usage or missing file, 2 config, 3 data format,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as C
from . import evaluation as V
from . import model as M
from . import synthdata as S
from .config import RunConfig, coerce, load_config
from .errors import ConfigError, DataFormatError, I2CError
from .locmap import BBox, box_from_map
from .train import train

log = logging.getLogger("i2c_wsol")

COMMANDS = ("generate", "train", "eval", "sweep", "render")
METRIC_COLUMNS = ("top1_loc_err", "top5_loc_err", "gtknown_loc_err", "top1_cls_err", "top5_cls_err", "tau")


# ---------------------------------------------------------------------------
# Provenance
# ---------------------------------------------------------------------------


def code_version() -> str:
    """Package version plus a digest of its sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:16]}"


def write_manifest(cfg: RunConfig, command: str, out_dir: Path) -> Path:
    data_dir = cfg.path("data_dir")
    digest = S.dataset_hash(data_dir) if (data_dir / "train.bin").exists() else "none"
    pinned = cfg if cfg.checkpoint else cfg.replace(checkpoint=str(Path(cfg.out_dir) / "model.ckpt"))
    header = [
        f"# run manifest: re-run with `i2c-wsol {command} --config <this file>`",
        f"# command = {command}",
        f"# code_version = {code_version()}",
        f"# dataset_sha256 = {digest}",
    ]
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"run_manifest.{command}.txt"
    path.write_text("\n".join(header) + "\n" + pinned.to_text(), encoding="utf-8", newline="\n")
    return path


def check_manifest_dataset(config_path: Path, cfg: RunConfig) -> None:
    """Warn when a manifest's recorded dataset digest disagrees with the data on disk."""
    for line in config_path.read_text(encoding="utf-8").splitlines():
        if line.startswith("# dataset_sha256 = "):
            recorded = line.split("=", 1)[1].strip()
            data_dir = cfg.path("data_dir")
            if recorded != "none" and (data_dir / "train.bin").exists() and recorded != S.dataset_hash(data_dir):
                log.warning("dataset in %s differs from the one recorded in %s", data_dir, config_path)


# ---------------------------------------------------------------------------
# CSV writers (header row, %.6f, LF)
# ---------------------------------------------------------------------------


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)] + [",".join(r) for r in rows]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_metrics_csv(path: Path, report: V.EvalReport) -> None:
    _write_csv(path, ("metric", "value"), [(k, f"{v:.6f}") for k, v in report.metrics().items()])


def write_per_sample_csv(path: Path, report: V.EvalReport) -> None:
    rows = [
        (str(j.sample_id), str(j.pred_label), f"{j.iou:.6f}", str(int(j.top1_hit)), str(int(j.top5_hit)), str(int(j.gtknown_hit)))
        for j in report.judgements
    ]
    _write_csv(path, ("sample_id", "pred_label", "iou", "top1_hit", "top5_hit", "gtknown_hit"), rows)


def write_history_csv(path: Path, history) -> None:
    rows = [
        (str(e.epoch), f"{e.cls:.6f}", f"{e.sc:.6f}", f"{e.gc:.6f}", f"{e.train_cls_err:.6f}", f"{e.fallback_rate:.6f}")
        for e in history
    ]
    _write_csv(path, ("epoch", "L_cls", "L_sc", "L_gc", "train_cls_err", "seed_fallback"), rows)


def write_tau_csv(path: Path, errs: dict) -> None:
    _write_csv(path, ("tau", "gtknown_loc_err"), [(f"{t:.6f}", f"{e:.6f}") for t, e in errs.items()])


# ---------------------------------------------------------------------------
# Data and checkpoint access with dimension checks
# ---------------------------------------------------------------------------


def load_data(cfg: RunConfig, split: str) -> S.Dataset:
    data = S.load_split(cfg.path("data_dir"), split, cfg.num_classes)
    if data.images.shape[-1] != cfg.image_size or data.images.shape[-2] != cfg.image_size:
        raise DataFormatError(f"{split} images are {data.images.shape[-2:]} but image_size={cfg.image_size}")
    if data.labels.max() >= cfg.num_classes:
        raise DataFormatError(f"{split} has label {data.labels.max()} but num_classes={cfg.num_classes}")
    return data


def load_checkpoint(cfg: RunConfig):
    params, bank = C.load(cfg.path("checkpoint"))
    try:
        M.check_params(params, cfg.model_config())
    except ConfigError as exc:
        raise DataFormatError(f"checkpoint does not fit the configured model: {exc}") from exc
    return params, bank


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> dict[str, str]:
    data_dir = cfg.path("data_dir")
    hashes = S.write_dataset(cfg.dataset_spec(), data_dir)
    write_manifest(cfg, "generate", data_dir)
    for split, h in hashes.items():
        print(f"{split}: {cfg.dataset_spec().counts[split]} samples sha256={h}")
    return hashes


def cmd_train(cfg: RunConfig):
    out = cfg.path("out_dir")
    train_set = load_data(cfg, "train")
    write_manifest(cfg, "train", out)
    result = train(cfg, train_set, on_epoch=lambda e: print(e.line(), flush=True))
    C.save(cfg.path("checkpoint"), result.params, result.bank)
    write_history_csv(out / "train_log.csv", result.history)
    return result


def evaluate_run(cfg: RunConfig, params, out: Path, val=None, test=None) -> V.EvalReport:
    """Pick tau on the validation split (unless fixed), then score the test split."""
    mcfg = cfg.model_config()
    tau = cfg.tau
    if tau == 0.0:
        val = val if val is not None else load_data(cfg, "val")
        tau, errs = V.tune_threshold(params, val, mcfg)
        write_tau_csv(out / "tau_sweep.csv", errs)
    test = test if test is not None else load_data(cfg, "test")
    report = V.evaluate(params, test, mcfg, tau, min(cfg.k_top, cfg.num_classes))
    write_metrics_csv(out / "metrics.csv", report)
    write_per_sample_csv(out / "per_sample.csv", report)
    return report


def _print_report(report: V.EvalReport) -> None:
    print(" ".join(f"{k}={v:.6f}" for k, v in report.metrics().items()))
    if report.low_discrimination_top5:
        print(f"note: top-{report.k_top} over {report.num_classes} classes has low discriminative power")


def cmd_eval(cfg: RunConfig) -> V.EvalReport:
    out = cfg.path("out_dir")
    params, _ = load_checkpoint(cfg)
    write_manifest(cfg, "eval", out)
    report = evaluate_run(cfg, params, out)
    _print_report(report)
    return report


def cmd_sweep(cfg: RunConfig) -> list[tuple[object, V.EvalReport]]:
    """Train and evaluate once per value of ``sweep_param``; writes ``sweep_<param>.csv``."""
    out = cfg.path("out_dir")
    write_manifest(cfg, "sweep", out)
    train_set, val, test = (load_data(cfg, s) for s in S.SPLITS)
    results = []
    for value in cfg.sweep_grid():
        sub_dir = out / f"sweep_{cfg.sweep_param}" / f"{cfg.sweep_param}={value}"
        sub = cfg.replace(**{cfg.sweep_param: value}, out_dir=str(sub_dir), checkpoint="")
        print(f"{cfg.sweep_param}={value}", flush=True)
        res = train(sub, train_set, on_epoch=lambda e: print("  " + e.line(), flush=True))
        C.save(sub.path("checkpoint"), res.params, res.bank)
        write_history_csv(sub_dir / "train_log.csv", res.history)
        report = evaluate_run(sub, res.params, sub_dir, val, test)
        _print_report(report)
        results.append((value, report))
    rows = [(cfg.sweep_param, str(v), *(f"{r.metrics()[k]:.6f}" for k in METRIC_COLUMNS)) for v, r in results]
    _write_csv(out / f"sweep_{cfg.sweep_param}.csv", ("param", "value", *METRIC_COLUMNS), rows)
    return results


# -- rendering ----------------------------------------------------------------


def color_ramp() -> np.ndarray:
    """Fixed 256-entry blue-cyan-yellow-red ramp as uint8 RGB."""
    x = np.linspace(0.0, 1.0, 256)
    r = np.clip(1.5 - np.abs(4.0 * x - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * x - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * x - 1.0), 0.0, 1.0)
    return np.round(255.0 * np.stack([r, g, b], axis=1)).astype(np.uint8)


RAMP = color_ramp()
BOX_COLOR = np.array([0, 255, 0], dtype=np.uint8)
GT_COLOR = np.array([255, 255, 255], dtype=np.uint8)


def draw_box(canvas: np.ndarray, box: BBox | None, color) -> None:
    """1-pixel outline along the box's outermost pixels, in place."""
    if box is None:
        return
    x2, y2 = box.x2 - 1, box.y2 - 1
    canvas[box.y1, box.x1 : x2 + 1] = color
    canvas[y2, box.x1 : x2 + 1] = color
    canvas[box.y1 : y2 + 1, box.x1] = color
    canvas[box.y1 : y2 + 1, x2] = color


def heatmap_rgb(normalized: np.ndarray) -> np.ndarray:
    idx = np.clip(np.floor(normalized * 255.0 + 0.5), 0, 255).astype(np.intp)
    return RAMP[idx]


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def render_panel(image: np.ndarray, normalized: np.ndarray, pred_box, gt_boxes) -> np.ndarray:
    """Input image (left) and heatmap (right), predicted box in green, ground truth in white."""
    photo = np.round(255.0 * np.clip(image.transpose(1, 2, 0), 0.0, 1.0)).astype(np.uint8)
    heat = heatmap_rgb(normalized)
    for canvas in (photo, heat):
        for g in gt_boxes:
            draw_box(canvas, g, GT_COLOR)
        draw_box(canvas, pred_box, BOX_COLOR)
    return np.concatenate([photo, heat], axis=1)


def cmd_render(cfg: RunConfig) -> list[Path]:
    out = cfg.path("out_dir")
    params, _ = load_checkpoint(cfg)
    data = load_data(cfg, cfg.render_split)
    ids = cfg.render_ids()
    if max(ids) >= len(data):
        raise ConfigError(f"render_samples {ids} exceed the {len(data)} samples of split {cfg.render_split!r}")
    tau = cfg.tau if cfg.tau > 0 else 0.5
    write_manifest(cfg, "render", out)
    mcfg = cfg.model_config()
    logits, maps = V.predict(params, data.images[ids], mcfg)
    paths = []
    for row, i in enumerate(ids):
        sample = data.samples[i]
        pred = int(np.argmax(logits[row]))
        norm = V.full_size_map(maps[row, pred], data.images.shape[-2:])
        panel = render_panel(sample.image, norm, box_from_map(norm, tau), sample.gt_boxes)
        path = out / "render" / f"{cfg.render_split}_{i:05d}_pred{pred}.ppm"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_ppm(panel))
        paths.append(path)
        print(path)
    return paths


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "render": cmd_render}


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="i2c-wsol",
        description="Train and evaluate a CAM localizer with cross-image seed consistency.",
        epilog="Any RunConfig field can be overridden with --<key> <value>.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="key = value config file (e.g. a run manifest)")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def parse_overrides(tokens: list[str]) -> dict[str, object]:
    """Turn ``--key value`` / ``--key=value`` tokens into typed config values."""
    overrides: dict[str, object] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, raw = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {tok} needs a value")
            key, raw = tok[2:], tokens[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key in overrides:
            raise ConfigError(f"flag --{key} given twice")
        overrides[key] = coerce(key, raw)
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, parse_overrides(rest))
        if args.config is not None:
            check_manifest_dataset(args.config, cfg)
        HANDLERS[args.command](cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except I2CError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
