"""Command line entry point: ``keygen``, ``train``, ``compare``, ``bench``, ``predict``.

Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime, 4 compared models differ.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import he
from .dataset import (
    DataError, DataMatrix, PartyShard, load_csv, make_synthetic, split_horizontal, split_vertical,
)
from .federation import (
    FederationError, RunResult, SecurityConfig, run_bagging, run_centralized, run_cyclic,
    run_horizontal_histogram, run_vertical_histogram,
)
from .gbdt import Forest, TrainError, TrainParams, log_loss, predict
from .inference import InferenceError, PartialModel, federated_predict

log = logging.getLogger("secure_fedxgb")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_DIFFERENT = 0, 1, 2, 3, 4
KEY_DIR_ENV = "SFXGB_KEY_DIR"
MODES = ("centralized", "horizontal", "vertical", "cyclic", "bagging")
PHASES = ("cuts", "gradient", "encrypt", "aggregate", "decrypt", "split")


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass
class RunConfig:
    mode: str
    params: TrainParams
    security: SecurityConfig
    data: DataMatrix
    validation: DataMatrix | None
    n_parties: int
    assignment: dict[int, list[str]] | None
    active: int | None
    threads: int | None
    output_dir: Path
    source: Path | None = None
    raw: dict = field(default_factory=dict)


def _get(cp, section, key, conv=str, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"[{section}] {key}: required")
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def load_config(path: str | os.PathLike | None = None, text: str | None = None,
                base_dir: Path | None = None) -> RunConfig:
    """Parse and validate a run configuration (INI sections dataset/split/train/mode/security)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no such config file: {path}")
        cp.read(path, encoding="utf-8")
        base_dir = base_dir or path.parent
    else:
        cp.read_string(text or "")
    base_dir = base_dir or Path.cwd()
    for section in ("dataset", "train", "mode"):
        if not cp.has_section(section):
            raise ConfigError(f"missing [{section}] section")

    mode = _get(cp, "mode", "mode", required=True).strip()
    if mode not in MODES:
        raise ConfigError(f"[mode] mode: must be one of {', '.join(MODES)}, got {mode!r}")
    threads = _get(cp, "mode", "threads", int)

    try:
        params = TrainParams(
            num_trees=_get(cp, "train", "num_trees", int, 10),
            max_depth=_get(cp, "train", "max_depth", int, 5),
            max_bin=_get(cp, "train", "max_bin", int, 256),
            learning_rate=_get(cp, "train", "learning_rate", float, 0.3),
            reg_lambda=_get(cp, "train", "lambda", float, 1.0),
            gamma=_get(cp, "train", "gamma", float, 0.0),
            base_score=_get(cp, "train", "base_score", float, 0.5),
            trees_per_round=_get(cp, "train", "trees_per_round", int, 1),
        )
    except TrainError as exc:
        raise ConfigError(f"[train] {exc}") from None

    plugin = _get(cp, "security", "plugin", default="passthrough").strip() if cp.has_section("security") else "passthrough"
    if plugin not in ("passthrough", "paillier"):
        raise ConfigError(f"[security] plugin: must be passthrough or paillier, got {plugin!r}")
    key_bits = _get(cp, "security", "key_bits", int, 2048) if cp.has_section("security") else 2048
    if key_bits not in he.ALLOWED_KEY_BITS:
        raise ConfigError(f"[security] key_bits: must be one of {he.ALLOWED_KEY_BITS}")
    seed = _get(cp, "security", "seed", int) if cp.has_section("security") else None
    keypair = None
    key_file = _get(cp, "security", "key_file") if cp.has_section("security") else None
    if key_file:
        kp = _resolve_key_path(key_file, base_dir)
        loaded = he.load_key(kp.read_bytes())
        if not isinstance(loaded, he.Keypair):
            raise ConfigError("[security] key_file: must be a private key file")
        keypair = loaded
    security = SecurityConfig(plugin, key_bits, seed, keypair)

    label_col = _get(cp, "dataset", "label", default="label")
    data_path = _get(cp, "dataset", "path")
    if data_path:
        full = Path(data_path) if Path(data_path).is_absolute() else base_dir / data_path
        try:
            data = load_csv(full, label_col)
        except DataError as exc:
            raise ConfigError(f"[dataset] path: {exc}") from None
    else:
        data = make_synthetic(
            n_rows=_get(cp, "dataset", "synthetic_rows", int, 1000),
            n_features=_get(cp, "dataset", "synthetic_features", int, 8),
            seed=_get(cp, "dataset", "synthetic_seed", int, 0),
            positive_rate=_get(cp, "dataset", "positive_rate", float, 0.2),
            integer_features=_get(cp, "dataset", "integer_features", int, 0),
        )
    if data.label is None:
        raise ConfigError("[dataset] label: dataset has no label column")
    drop = _get(cp, "dataset", "drop")
    if drop:
        names = [c.strip() for c in drop.split(",") if c.strip()]
        unknown = sorted(set(names) - set(data.feature_names))
        if unknown:
            raise ConfigError(f"[dataset] drop: unknown columns {unknown}")
        data = data.select_columns([c for c in data.feature_names if c not in names], keep_label=True)
    validation = None
    vf = _get(cp, "dataset", "validation_fraction", float, 0.0)
    if not 0.0 <= vf < 1.0:
        raise ConfigError("[dataset] validation_fraction: must lie in [0, 1)")
    if vf > 0:
        n_val = int(round(data.n_rows * vf))
        validation = data.select_rows(slice(data.n_rows - n_val, data.n_rows))
        data = data.select_rows(slice(0, data.n_rows - n_val))

    n_parties = _get(cp, "split", "parties", int, 2) if cp.has_section("split") else 2
    assignment = None
    active = None
    if mode == "vertical":
        if n_parties < 1:
            raise ConfigError("[split] parties: must be >= 1")
        assignment = {}
        for pid in range(n_parties):
            names = _get(cp, "split", f"party{pid}")
            if names is not None:
                assignment[pid] = [n.strip() for n in names.split(",") if n.strip()]
        if not assignment:
            per = -(-data.n_features // n_parties)
            assignment = {pid: data.feature_names[pid * per:(pid + 1) * per] for pid in range(n_parties)}
        elif len(assignment) != n_parties:
            raise ConfigError(f"[split] expected party0..party{n_parties - 1} feature lists")
        act = _get(cp, "split", "active", default=str(n_parties - 1))
        actives = [a.strip() for a in act.split(",") if a.strip()]
        if len(actives) != 1:
            raise ConfigError(f"[split] active: vertical mode needs exactly one active party, got {len(actives)}")
        try:
            active = int(actives[0])
        except ValueError:
            raise ConfigError(f"[split] active: not a party id: {actives[0]!r}") from None
        if active not in assignment:
            raise ConfigError(f"[split] active: party {active} does not exist")
    elif mode != "centralized":
        if n_parties < 1 or n_parties > data.n_rows:
            raise ConfigError(f"[split] parties: {n_parties} is out of range")

    out = _get(cp, "output", "dir") if cp.has_section("output") else None
    stem = path.stem if path is not None else "run"
    # an explicit dir is relative to the config file; the default lands in the working directory
    if out:
        output_dir = Path(out) if Path(out).is_absolute() else base_dir / out
    else:
        output_dir = Path.cwd() / "runs" / stem
    raw = {s: dict(cp.items(s)) for s in cp.sections()}
    return RunConfig(mode, params, security, data, validation, n_parties, assignment, active,
                     threads, output_dir, path, raw)


def _key_dir() -> Path:
    return Path(os.environ.get(KEY_DIR_ENV, "keys"))


def _resolve_key_path(name: str, base_dir: Path) -> Path:
    p = Path(name)
    candidates = [p] if p.is_absolute() else [_key_dir() / p, base_dir / p]
    for c in candidates:
        if c.exists():
            return c
    raise ConfigError(f"[security] key_file: {name} not found (searched {', '.join(map(str, candidates))})")


def make_shards(cfg: RunConfig) -> list[PartyShard]:
    if cfg.mode == "vertical":
        return split_vertical(cfg.data, cfg.assignment, cfg.active)
    if cfg.n_parties == 1:
        return [PartyShard(0, "peer", cfg.data, list(range(cfg.data.n_features)))]
    return split_horizontal(cfg.data, cfg.n_parties)


def execute(cfg: RunConfig, plugin: str | None = None) -> RunResult:
    security = cfg.security
    if plugin is not None and plugin != security.plugin:
        security = SecurityConfig(plugin, security.key_bits, security.seed, security.keypair)
    if cfg.mode == "centralized":
        return run_centralized(cfg.data, cfg.params)
    shards = make_shards(cfg)
    if cfg.mode == "vertical":
        return run_vertical_histogram(shards, cfg.params, security)
    if cfg.mode == "horizontal":
        return run_horizontal_histogram(shards, cfg.params, security, threads=cfg.threads)
    if cfg.mode == "cyclic":
        return run_cyclic(shards, cfg.params)
    return run_bagging(shards, cfg.params, threads=cfg.threads)


# ---------------------------------------------------------------------------
# reports


def _metrics(forest: Forest, data: DataMatrix) -> dict[str, float]:
    p = predict(forest, data)
    return {"log_loss": log_loss(data.label, p), "accuracy": float(np.mean((p > 0.5) == data.label))}


def build_report(cfg: RunConfig, result: RunResult, wall: float) -> dict:
    metrics = {"train": _metrics(result.forest, cfg.data)}
    if cfg.validation is not None and cfg.validation.n_rows:
        metrics["validation"] = _metrics(result.forest, cfg.validation)
    timings = {ph: result.timings.get(ph, 0.0) for ph in PHASES}
    timings["total"] = wall
    return {
        "format": "secure-fedxgb-report",
        "version": 1,
        "mode": cfg.mode,
        "plugin": cfg.security.plugin,
        "key_bits": cfg.security.key_bits,
        "params": cfg.params.to_dict(),
        "n_rows": cfg.data.n_rows,
        "n_features": cfg.data.n_features,
        "n_parties": 1 if cfg.mode == "centralized" else cfg.n_parties,
        "timings": timings,
        "counters": result.counters.snapshot(),
        "round_counters": result.round_counters,
        "fingerprint": result.forest.fingerprint(),
        "metrics": metrics,
        "artifacts": {},
    }


def write_run(cfg: RunConfig, result: RunResult, report: dict) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "forest.json").write_text(result.forest.dumps(), encoding="utf-8")
    report["artifacts"]["forest"] = "forest.json"
    if result.partial_models:
        names = {}
        for pid, pm in sorted(result.partial_models.items()):
            fn = f"partial_party{pid}.json"
            (out / fn).write_text(pm.dumps(), encoding="utf-8")
            names[str(pid)] = fn
        report["artifacts"]["partial_models"] = names
    result.transcript.to_jsonl(out / "transcript.jsonl")
    report["artifacts"]["transcript"] = "transcript.jsonl"
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_keygen(bits: int, seed: int | None, out_dir: str | os.PathLike | None,
               name: str = "paillier") -> tuple[Path, Path]:
    """Write ``<name>.pub`` and ``<name>.key`` (mode 0600)."""
    if bits not in he.ALLOWED_KEY_BITS:
        raise UsageError(f"--bits must be one of {', '.join(map(str, he.ALLOWED_KEY_BITS))}")
    kp = he.keygen(bits, seed)
    out = Path(out_dir) if out_dir else _key_dir()
    out.mkdir(parents=True, exist_ok=True)
    pub, key = out / f"{name}.pub", out / f"{name}.key"
    pub.write_bytes(he.dump_public_key(kp.public))
    fd = os.open(key, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(he.dump_private_key(kp.private))
    os.chmod(key, 0o600)
    return pub, key


def cmd_train(config_path, write: bool = True, threads: int | None = None) -> dict:
    cfg = load_config(config_path)
    if threads:
        cfg.threads = threads
    t0 = time.perf_counter()
    result = execute(cfg)
    report = build_report(cfg, result, time.perf_counter() - t0)
    if write:
        report["path"] = str(write_run(cfg, result, report))
    return report


def load_forest_artifact(path: str | os.PathLike) -> Forest:
    """Accept a report, a forest file, or a partial model (merged with its siblings is not attempted)."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    fmt = doc.get("format")
    if fmt == "secure-fedxgb-report":
        if doc.get("version") != 1:
            raise ConfigError(f"{path}: unsupported report version {doc.get('version')}")
        return load_forest_artifact(path.parent / doc["artifacts"]["forest"])
    if fmt == "secure-fedxgb-forest":
        try:
            return Forest.from_dict(doc)
        except TrainError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    raise ConfigError(f"{path}: not a report or forest artifact (format {fmt!r})")


def diff_forests(a: Forest, b: Forest, tol: float = 2.0 ** -30) -> list[str]:
    """Human-readable structural differences; empty when the models match."""
    diffs = []
    if a.learning_rate != b.learning_rate or a.base_score != b.base_score:
        diffs.append(f"globals: lr {a.learning_rate} vs {b.learning_rate}, "
                     f"base_score {a.base_score} vs {b.base_score}")
    if len(a.trees) != len(b.trees):
        diffs.append(f"tree count: {len(a.trees)} vs {len(b.trees)}")
    for t, (ta, tb) in enumerate(zip(a.trees, b.trees)):
        if ta.scale != tb.scale:
            diffs.append(f"tree {t}: scale {ta.scale} vs {tb.scale}")
        if len(ta.nodes) != len(tb.nodes):
            diffs.append(f"tree {t}: {len(ta.nodes)} vs {len(tb.nodes)} nodes")
        for na, nb in zip(ta.nodes, tb.nodes):
            where = f"tree {t} node {na.node_id}"
            if na.is_leaf != nb.is_leaf:
                diffs.append(f"{where}: leaf vs split mismatch")
                continue
            if na.is_leaf:
                if na.weight is None or nb.weight is None or abs(na.weight - nb.weight) > tol:
                    diffs.append(f"{where}: leaf {na.weight} vs {nb.weight}")
                continue
            if (na.left, na.right) != (nb.left, nb.right):
                diffs.append(f"{where}: children {na.left},{na.right} vs {nb.left},{nb.right}")
            if na.feature != nb.feature:
                diffs.append(f"{where}: feature {na.feature} vs {nb.feature}")
            if na.threshold != nb.threshold:
                diffs.append(f"{where}: cut {na.threshold!r} vs {nb.threshold!r}")
    return diffs


def cmd_compare(path_a, path_b, tol: float = 2.0 ** -30) -> tuple[bool, list[str]]:
    diffs = diff_forests(load_forest_artifact(path_a), load_forest_artifact(path_b), tol)
    return not diffs, diffs


def cmd_bench(config_path, repeats: int = 3) -> dict:
    """Median per-phase timings for the configured plugin and for the passthrough baseline."""
    if repeats < 1:
        raise UsageError("--repeats must be >= 1")
    cfg = load_config(config_path)
    variants = [cfg.security.plugin]
    if cfg.security.plugin != "passthrough" and cfg.mode in ("horizontal", "vertical"):
        variants.append("passthrough")
    if cfg.security.plugin == "paillier":
        cfg.security.resolve_keypair()
    rows = {}
    for plugin in variants:
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            result = execute(cfg, plugin)
            wall = time.perf_counter() - t0
            samples.append((result, wall))
        med = {ph: statistics.median(r.timings.get(ph, 0.0) for r, _ in samples) for ph in PHASES}
        med["total"] = statistics.median(w for _, w in samples)
        first = samples[0][0]
        rows[plugin] = {
            "timings": med,
            "round_counters": first.round_counters[0] if first.round_counters else {},
            "fingerprint": first.forest.fingerprint(),
        }
    report = {
        "format": "secure-fedxgb-bench",
        "mode": cfg.mode,
        "repeats": repeats,
        "n_rows": cfg.data.n_rows,
        "n_features": cfg.data.n_features,
        "n_parties": cfg.n_parties,
        "max_bin": cfg.params.max_bin,
        "variants": rows,
    }
    if "passthrough" in rows and len(rows) > 1:
        sec, plain = rows[cfg.security.plugin]["timings"]["total"], rows["passthrough"]["timings"]["total"]
        report["encryption_overhead_seconds"] = sec - plain
        report["encryption_overhead_ratio"] = sec / plain if plain > 0 else float("inf")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / "bench.json"
    path.write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    report["path"] = str(path)
    return report


def bench_table(report: dict) -> str:
    counter_cols = ("encryptions", "ciphertext_additions", "decryptions",
                    "vector_encryptions", "vector_additions")
    header = ["plugin", *PHASES, "total", *counter_cols]
    lines = [",".join(header)]
    for plugin, row in report["variants"].items():
        t = row["timings"]
        c = row["round_counters"]
        lines.append(",".join([plugin, *(f"{t[p]:.6f}" for p in (*PHASES, "total")),
                               *(str(c.get(k, 0)) for k in counter_cols)]))
    return "\n".join(lines)


def cmd_predict(model_paths: Sequence[str], data_path: str, label: str | None,
                out_path: str | None) -> np.ndarray:
    data = load_csv(data_path, label)
    docs = [json.loads(Path(p).read_text(encoding="utf-8")) for p in model_paths]
    if len(docs) == 1 and docs[0].get("format") != "secure-fedxgb-partial":
        probs = predict(load_forest_artifact(model_paths[0]), data)
    else:
        partials = [PartialModel.loads(Path(p).read_text(encoding="utf-8")) for p in model_paths]
        shards = {}
        for pm in partials:
            names = sorted({n.feature for t in pm.trees for n in t.nodes
                            if not n.is_leaf and n.owner == pm.party_id})
            missing = [n for n in names if n not in data.feature_names]
            if missing:
                raise DataError(f"data lacks features {missing} needed by party {pm.party_id}")
            idx = [data.feature_names.index(n) for n in names]
            shards[pm.party_id] = PartyShard(pm.party_id, "active" if pm.is_active else "passive",
                                             data.select_columns(names, keep_label=False), idx)
        probs = federated_predict(partials, shards)
    if out_path:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row_id", "probability"])
            for rid, p in zip(data.row_ids, probs):
                w.writerow([int(rid), repr(float(p))])
    return probs


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sfxgb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("keygen", help="generate a Paillier keypair")
    p.add_argument("--bits", type=int, default=2048)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default ${KEY_DIR_ENV} or ./keys)")
    p.add_argument("--name", default="paillier")

    p = sub.add_parser("train", help="run one configured training job")
    p.add_argument("config")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("compare", help="structural diff of two models or reports")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--tol", type=float, default=2.0 ** -30)

    p = sub.add_parser("bench", help="time a configured job against the passthrough plugin")
    p.add_argument("config")
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("predict", help="score a CSV with a forest or a set of partial models")
    p.add_argument("models", nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--label")
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "keygen":
            pub, key = cmd_keygen(args.bits, args.seed, args.out, args.name)
            print(f"public key: {pub}\nprivate key: {key}")
        elif args.command == "train":
            report = cmd_train(args.config, threads=args.threads)
            print(json.dumps({k: report[k] for k in ("mode", "plugin", "fingerprint", "metrics", "path")},
                             indent=1))
        elif args.command == "compare":
            equal, diffs = cmd_compare(args.a, args.b, args.tol)
            for d in diffs:
                print(d)
            print("equal" if equal else f"different ({len(diffs)} differences)")
            return EXIT_OK if equal else EXIT_DIFFERENT
        elif args.command == "bench":
            report = cmd_bench(args.config, args.repeats)
            print(bench_table(report))
            if "encryption_overhead_ratio" in report:
                print(f"encryption overhead: {report['encryption_overhead_seconds']:.4f}s "
                      f"({report['encryption_overhead_ratio']:.2f}x)")
        elif args.command == "predict":
            probs = cmd_predict(args.models, args.data, args.label, args.out)
            if not args.out:
                for p in probs:
                    print(repr(float(p)))
    except UsageError as exc:
        print(f"sfxgb: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, TrainError, he.HEError, FederationError, InferenceError,
            FileNotFoundError) as exc:
        print(f"sfxgb: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("runtime failure", exc_info=True)
        print(f"sfxgb: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
