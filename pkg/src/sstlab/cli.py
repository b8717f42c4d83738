"""Operator command line: train, eval, explain, sweep, cross, oracle.

Every command reads a JSON run config, writes its artifacts atomically
(temp file + rename) into the output directory, and exits 0 on success,
1 on runtime failure, 2 on usage or config errors.  Artifacts carry a
schema string in their header.  Given the same config and seed, outputs
are reproducible byte for byte (wall-clock timing fields aside).
"""

from __future__ import annotations

import argparse
import gzip
import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from .data import (
    ConfigError,
    Dataset,
    FormatError,
    SyntheticSpec,
    gen_synthetic,
    load_cache,
    load_idx,
    split,
)
from .evaluation import (
    MetricsReport,
    cross_to_csv,
    eval_accuracy,
    eval_cross,
    eval_faithfulness,
    eval_size_and_time,
    metrics_report,
    model_subsets,
)
from .masking import (
    BaselineMasking,
    MaskingStrategy,
    ProbabilisticMasking,
    RobustMasking,
    strategy_name,
)
from .model import (
    ModelParams,
    extract_subset,
    forward,
    load_checkpoint,
    predict_class,
    save_checkpoint,
    subset_indices,
)
from .oracle import (
    CapacityError,
    FrozenChecker,
    OracleConfig,
    brute_force_msr,
    greedy_sufficient_reason,
)
from .training import TrainConfig, train

RUNCONFIG_SCHEMA = "sstlab.runconfig.v1"
SWEEP_SCHEMA = "sstlab.sweep.v1"
EXPLAIN_SCHEMA = "sstlab.explain.v1"
ORACLE_SCHEMA = "sstlab.oracle.v1"
PGM_SCHEMA = "sstlab.mask.v1"
MNIST_ENV = "SSTLAB_MNIST_DIR"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def write_atomic(path: Path, payload: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode() if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- config ------------------------------------------------------------------


class ConfigFileError(ConfigError):
    """Config error carrying a best-effort source location."""


def _locate(text: str, key: str) -> str:
    for lineno, line in enumerate(text.splitlines(), start=1):
        if f'"{key}"' in line:
            return f"line {lineno}"
    return "unknown line"


_ALLOWED = {
    "": {"schema", "seed", "out_dir", "dataset", "split", "model", "train", "masking", "eval"},
    "dataset": {
        "kind", "rule", "n", "c", "count", "seed", "support",
        "glyph_pixels", "background_high", "glyph_low", "dir", "path",
    },
    "split": {"ratios", "seed"},
    "model": {"hidden", "group"},
    "train": {
        "mode", "lam", "xi", "tau", "lr", "batch", "epochs",
        "grad_mode", "clip_norm", "val_fraction",
    },
    "masking": {"kind", "z", "epsilon", "delta", "samples", "steps", "step_size", "restarts"},
    "eval": {"checks", "baseline", "probabilistic", "robust", "timing_instances", "limit"},
    "eval.baseline": {"z"},
    "eval.probabilistic": {"epsilon", "delta", "samples"},
    "eval.robust": {"epsilon", "steps", "step_size", "restarts"},
}


def _reject_unknown(tree: dict, prefix: str, text: str) -> None:
    allowed = _ALLOWED.get(prefix)
    if allowed is None:
        return
    for key in tree:
        if key not in allowed:
            raise ConfigFileError(
                f"unknown config key {prefix + '.' if prefix else ''}{key!r} ({_locate(text, key)})"
            )
        sub = f"{prefix}.{key}" if prefix else key
        if isinstance(tree[key], dict) and sub in _ALLOWED:
            _reject_unknown(tree[key], sub, text)


def _masking_from(tree: dict, text: str, defaults_kind: str | None = None) -> MaskingStrategy:
    kind = tree.get("kind", defaults_kind)
    if kind == "baseline":
        z = tree.get("z", 0.0)
        return BaselineMasking(z=np.asarray(z, dtype=np.float64) if isinstance(z, list) else float(z))
    if kind == "probabilistic":
        eps = tree.get("epsilon")
        return ProbabilisticMasking(
            epsilon=None if eps is None else float(eps),
            delta=float(tree.get("delta", 0.01)),
            samples=int(tree.get("samples", 100)),
        )
    if kind == "robust":
        return RobustMasking(
            epsilon=float(tree.get("epsilon", 0.12)),
            steps=int(tree.get("steps", 10)),
            step_size=float(tree.get("step_size", 1e-2)),
            restarts=int(tree.get("restarts", 1)),
        )
    raise ConfigFileError(f"unknown masking kind {kind!r} ({_locate(text, 'kind')})")


class RunConfig:
    """Validated view over the JSON config tree; defaults baked in."""

    def __init__(self, tree: dict, text: str = "", path: str = "<config>"):
        if not isinstance(tree, dict):
            raise ConfigFileError(f"{path}: top level must be an object")
        _reject_unknown(tree, "", text)
        self.tree = tree
        self.text = text
        self.seed = int(tree.get("seed", 0))
        self.out_dir = Path(tree.get("out_dir", "out"))
        self.dataset_tree = tree.get("dataset", {"kind": "synthetic", "rule": "glyphs"})
        self.split_tree = tree.get("split", {})
        self.model_tree = tree.get("model", {})
        self.train_tree = tree.get("train", {})
        self.masking_tree = tree.get("masking", {"kind": "baseline"})
        self.eval_tree = tree.get("eval", {})

    @staticmethod
    def load(path: str) -> "RunConfig":
        text = Path(path).read_text()
        try:
            tree = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return RunConfig(tree, text, path)

    def masking(self) -> MaskingStrategy:
        return _masking_from(self.masking_tree, self.text, "baseline")

    def train_config(self) -> TrainConfig:
        t = self.train_tree
        return TrainConfig(
            lam=float(t.get("lam", 1.0)),
            xi=float(t.get("xi", 1e-7)),
            tau=float(t.get("tau", 0.5)),
            lr=float(t.get("lr", 1e-4)),
            batch=int(t.get("batch", 64)),
            epochs=int(t.get("epochs", 10)),
            seed=self.seed,
            masking=self.masking(),
            mode=t.get("mode", "sst"),
            grad_mode=t.get("grad_mode", "hard"),
            hidden=tuple(self.model_tree.get("hidden", [128, 64])),
            group=int(self.model_tree.get("group", 1)),
            clip_norm=t.get("clip_norm", 10.0),
            val_fraction=float(t.get("val_fraction", 0.1)),
        )

    def checks(self) -> dict[str, MaskingStrategy]:
        names = self.eval_tree.get("checks", [strategy_name(self.masking())])
        out: dict[str, MaskingStrategy] = {}
        for name in names:
            sub = self.eval_tree.get(name, {})
            out[name] = _masking_from({"kind": name, **sub}, self.text)
        return out

    def datasets(self) -> tuple[Dataset, Dataset]:
        """Returns (training pool, test set)."""
        tree = dict(self.dataset_tree)
        kind = tree.get("kind", "synthetic")
        if kind == "mnist":
            directory = tree.get("dir") or os.environ.get(MNIST_ENV)
            if not directory:
                raise ConfigFileError(
                    f"dataset.kind=mnist needs 'dir' or ${MNIST_ENV} ({_locate(self.text, 'kind')})"
                )
            return _load_mnist_dir(Path(directory))
        if kind == "cache":
            full = load_cache(tree["path"])
        elif kind == "synthetic":
            spec = SyntheticSpec(
                n=int(tree.get("n", 64)),
                c=int(tree.get("c", 10 if tree.get("rule", "glyphs") == "glyphs" else 2)),
                support=tuple(tree["support"]) if tree.get("support") else None,
                rule=tree.get("rule", "glyphs"),
                count=int(tree.get("count", 6000)),
                seed=int(tree.get("seed", self.seed)),
                glyph_pixels=int(tree.get("glyph_pixels", 12)),
                background_high=float(tree.get("background_high", 0.4)),
                glyph_low=float(tree.get("glyph_low", 0.7)),
            )
            full = gen_synthetic(spec)
        else:
            raise ConfigFileError(f"unknown dataset kind {kind!r} ({_locate(self.text, 'kind')})")
        ratios = tuple(self.split_tree.get("ratios", (0.9, 0.0, 0.1)))
        train_set, _, test_set = split(full, ratios, int(self.split_tree.get("seed", self.seed)))
        return train_set, test_set

    def limited_test(self, test_set: Dataset) -> Dataset:
        limit = self.eval_tree.get("limit")
        if limit is None or limit >= len(test_set):
            return test_set
        return test_set.take(np.arange(int(limit)), test_set.name)


def _open_maybe_gz(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _find_idx(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise ConfigFileError(f"missing {stem}[.gz] under {directory}")


def _load_mnist_dir(directory: Path) -> tuple[Dataset, Dataset]:
    def load_pair(images: str, labels: str, name: str) -> Dataset:
        img_path = _find_idx(directory, images)
        lab_path = _find_idx(directory, labels)
        if img_path.suffix == ".gz" or lab_path.suffix == ".gz":
            # decompress to temp files so the IDX parser stays byte-oriented
            with tempfile.TemporaryDirectory() as tmp:
                ip, lp = Path(tmp, "img"), Path(tmp, "lab")
                ip.write_bytes(_open_maybe_gz(img_path).read())
                lp.write_bytes(_open_maybe_gz(lab_path).read())
                return load_idx(str(ip), str(lp), name=name)
        return load_idx(str(img_path), str(lab_path), name=name)

    return (
        load_pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "mnist-train"),
        load_pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "mnist-test"),
    )


# --- commands ----------------------------------------------------------------


def cmd_train(cfg: RunConfig, out_dir: Path) -> int:
    train_set, test_set = cfg.datasets()
    params, log = train(train_set, cfg.train_config())
    test_set = cfg.limited_test(test_set)
    report = metrics_report(
        params,
        test_set,
        cfg.checks(),
        seed=cfg.seed,
        timing_instances=cfg.eval_tree.get("timing_instances"),
    )
    ckpt = out_dir / "checkpoint.sstm"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    tmp = ckpt.with_name(ckpt.name + ".tmp")
    save_checkpoint(params, str(tmp))
    os.replace(tmp, ckpt)
    write_atomic(out_dir / "trainlog.csv", log.to_csv())
    write_atomic(out_dir / "metrics.json", report.to_json())
    print(f"trained {len(train_set)} examples, artifacts in {out_dir}")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str, out_dir: Path) -> int:
    params = load_checkpoint(checkpoint)
    _, test_set = cfg.datasets()
    test_set = cfg.limited_test(test_set)
    report = metrics_report(
        params,
        test_set,
        cfg.checks(),
        seed=cfg.seed,
        timing_instances=cfg.eval_tree.get("timing_instances"),
    )
    write_atomic(out_dir / "metrics.json", report.to_json())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_explain(
    cfg: RunConfig | None,
    checkpoint: str,
    out_dir: Path,
    index: int | None,
    input_file: str | None,
) -> int:
    params = load_checkpoint(checkpoint)
    if input_file is not None:
        x = np.asarray(json.loads(Path(input_file).read_text()), dtype=np.float64)
        if x.shape != (params.n,):
            raise ConfigFileError(
                f"instance file holds {x.shape} values, model expects {params.n}"
            )
    else:
        if cfg is None or index is None:
            raise ConfigFileError("explain needs --input FILE or --config plus --index")
        _, test_set = cfg.datasets()
        if not 0 <= index < len(test_set):
            raise ConfigFileError(f"--index {index} out of range [0, {len(test_set)})")
        x = test_set.x[index]

    logits, scores = forward(params, x[None, :])
    mask = extract_subset(scores[0], params.tau, params.group, params.image_shape)
    payload = {
        "schema": EXPLAIN_SCHEMA,
        "predicted_class": int(np.argmax(logits[0])),
        "subset_indices": subset_indices(mask),
        "size_pct": round(float(mask.mean() * 100.0), 4),
        "scores": [round(float(s), 6) for s in scores[0]],
    }
    write_atomic(out_dir / "explain.json", json.dumps(payload, indent=2) + "\n")
    if params.image_shape:
        write_atomic(out_dir / "mask.pgm", mask_to_pgm(mask, params.image_shape))
    print(json.dumps({k: payload[k] for k in ("predicted_class", "subset_indices", "size_pct")}))
    return EXIT_OK


def mask_to_pgm(mask: np.ndarray, image_shape: tuple[int, int]) -> bytes:
    h, w = image_shape
    header = f"P5\n# schema: {PGM_SCHEMA}\n{w} {h}\n255\n".encode()
    payload = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    return header + payload.reshape(h, w).tobytes()


_SWEEP_AXES = {"xi", "epsilon", "alpha", "tau"}


def _apply_axis(cfg: RunConfig, axis: str, value: float) -> tuple[TrainConfig, MaskingStrategy]:
    tc = cfg.train_config()
    masking = tc.masking
    if axis == "xi":
        tc = replace(tc, xi=value)
    elif axis == "tau":
        tc = replace(tc, tau=value)
    elif axis == "alpha":
        if not isinstance(masking, RobustMasking):
            raise ConfigFileError("axis 'alpha' needs robust masking")
        masking = replace(masking, step_size=value)
        tc = replace(tc, masking=masking)
    elif axis == "epsilon":
        if isinstance(masking, RobustMasking) or isinstance(masking, ProbabilisticMasking):
            masking = replace(masking, epsilon=value)
            tc = replace(tc, masking=masking)
        else:
            raise ConfigFileError("axis 'epsilon' needs robust or probabilistic masking")
    return tc, tc.masking


def cmd_sweep(cfg: RunConfig, axis: str, values: list[float], out_dir: Path) -> int:
    if axis not in _SWEEP_AXES:
        raise ConfigFileError(f"unknown sweep axis {axis!r} (choose from {sorted(_SWEEP_AXES)})")
    train_set, test_set = cfg.datasets()
    test_set = cfg.limited_test(test_set)
    std_config = replace(cfg.train_config(), mode="standard")
    std_params, _ = train(train_set, std_config)
    std_acc = eval_accuracy(std_params, test_set)

    lines = [f"# schema: {SWEEP_SCHEMA}", f"# axis: {axis}", "value,acc_gain_pct,faithfulness_pct,size_pct"]
    for value in values:
        try:
            tc, masking = _apply_axis(cfg, axis, value)
            params, _ = train(train_set, tc)
            acc = eval_accuracy(params, test_set)
            faith = eval_faithfulness(params, test_set, "model", masking, seed=cfg.seed)
            size_pct, _ = eval_size_and_time(params, test_set, timing_instances=0)
            lines.append(f"{value:g},{acc - std_acc:.4f},{faith:.4f},{size_pct:.4f}")
        except Exception as exc:  # noqa: BLE001 - keep sweeping
            lines.append(f"{value:g},nan,nan,nan")
            lines.append(f"# cell {value:g} failed: {type(exc).__name__}: {exc}")
    write_atomic(out_dir / "sweep.csv", "\n".join(lines) + "\n")
    print(f"sweep over {axis} written to {out_dir / 'sweep.csv'}")
    return EXIT_OK


def cmd_cross(cfg: RunConfig, masks: list[str], out_dir: Path) -> int:
    train_set, test_set = cfg.datasets()
    test_set = cfg.limited_test(test_set)
    checks = cfg.checks()
    params_by_mask: dict[str, ModelParams] = {}
    for name in masks:
        sub = cfg.eval_tree.get(name, {})
        masking = _masking_from({"kind": name, **sub}, cfg.text)
        tc = replace(cfg.train_config(), masking=masking)
        params_by_mask[name], _ = train(train_set, tc)
        ckpt = out_dir / f"checkpoint-{name}.sstm"
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        tmp = ckpt.with_name(ckpt.name + ".tmp")
        save_checkpoint(params_by_mask[name], str(tmp))
        os.replace(tmp, ckpt)
    matrix = eval_cross(params_by_mask, test_set, checks, seed=cfg.seed)
    write_atomic(out_dir / "cross.csv", cross_to_csv(matrix))
    print(cross_to_csv(matrix))
    return EXIT_OK


def cmd_oracle(
    cfg: RunConfig,
    checkpoint: str,
    check_name: str,
    out_dir: Path,
    k: int | None,
    limit: int | None,
    method: str,
) -> int:
    params = load_checkpoint(checkpoint)
    _, test_set = cfg.datasets()
    count = len(test_set) if limit is None else min(limit, len(test_set))
    sub = cfg.eval_tree.get(check_name, {})
    check = _masking_from({"kind": check_name, **sub}, cfg.text)
    oc = OracleConfig(check=check, k=k)
    if method in ("brute", "both") and params.n > oc.max_n:
        raise CapacityError(f"{params.n} features exceeds brute-force cap {oc.max_n}")

    results = []
    for i in range(count):
        x = test_set.x[i]
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        checker = FrozenChecker(params, x, check, rng)
        entry: dict[str, Any] = {"index": i}
        if method in ("greedy", "both"):
            gmask = greedy_sufficient_reason(params, x, check, rng, checker=checker)
            entry["greedy"] = subset_indices(gmask)
            entry["greedy_passes"] = bool(checker.passes(gmask))
        if method in ("brute", "both"):
            bmask = brute_force_msr(params, x, check, oc, rng, checker=checker)
            if bmask is None:
                entry["brute"] = None
                entry["note"] = f"no subset of size <= {k}"
            else:
                entry["brute"] = subset_indices(bmask)
                entry["brute_passes"] = bool(checker.passes(bmask))
        results.append(entry)

    payload = {"schema": ORACLE_SCHEMA, "check": check_name, "k": k, "instances": results}
    write_atomic(out_dir / "oracle.json", json.dumps(payload, indent=2) + "\n")
    lines = ["# schema: " + ORACLE_SCHEMA, "index,greedy_size,brute_size"]
    for entry in results:
        g = len(entry.get("greedy", [])) if "greedy" in entry else ""
        b = "" if entry.get("brute") is None else len(entry.get("brute", []))
        lines.append(f"{entry['index']},{g},{b}")
    write_atomic(out_dir / "oracle.csv", "\n".join(lines) + "\n")
    print(f"oracle results for {count} instances written to {out_dir}")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sst", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=False, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")

    p = sub.add_parser("train", help="train a model and emit checkpoint, log, metrics")
    common(p)
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("explain", help="explain one instance")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=None)
    p.add_argument("--input", default=None, help="JSON file with one feature vector")
    p = sub.add_parser("sweep", help="train/eval across one hyperparameter axis")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(_SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated numbers")
    p = sub.add_parser("cross", help="cross-mask faithfulness matrix")
    common(p)
    p.add_argument("--masks", default="baseline,probabilistic,robust")
    p = sub.add_parser("oracle", help="greedy / brute-force reference subsets")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--check", required=True, choices=["baseline", "probabilistic", "robust"])
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--method", default="both", choices=["greedy", "brute", "both"])
    return parser


def _load_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigFileError("--config is required for this command")
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = Path(args.out)
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    try:
        if args.command == "explain" and args.input is not None and args.config is None:
            cfg = None
            out_dir = Path(args.out) if args.out else Path("out")
        else:
            cfg = _load_config(args)
            out_dir = cfg.out_dir

        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, out_dir)
        if args.command == "explain":
            return cmd_explain(cfg, args.checkpoint, out_dir, args.index, args.input)
        if args.command == "sweep":
            values = [float(v) for v in args.values.split(",") if v.strip()]
            if not values:
                raise ConfigFileError("--values must list at least one number")
            return cmd_sweep(cfg, args.axis, values, out_dir)
        if args.command == "cross":
            masks = [m.strip() for m in args.masks.split(",") if m.strip()]
            return cmd_cross(cfg, masks, out_dir)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.checkpoint, args.check, out_dir, args.k, args.limit, args.method)
        raise ConfigFileError(f"unknown command {args.command!r}")
    except (ConfigError, FormatError, CapacityError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - runtime failure boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
